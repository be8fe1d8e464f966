use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Aligned sentence pairs, whitespace-tokenized.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

impl ParallelCorpus {
    pub fn new(src: Vec<String>, tgt: Vec<String>) -> Result<Self> {
        if src.len() != tgt.len() {
            return Err(Error::contract(format!(
                "corpus sides differ in length: {} vs {}",
                src.len(),
                tgt.len()
            )));
        }
        if let Some(i) = (0..src.len()).find(|&i| src[i].trim().is_empty() || tgt[i].trim().is_empty()) {
            return Err(Error::contract(format!("pair {i} has an empty side")));
        }
        Ok(Self { src, tgt })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.src
            .iter()
            .map(String::as_str)
            .zip(self.tgt.iter().map(String::as_str))
    }

    pub fn push(&mut self, src: String, tgt: String) {
        self.src.push(src);
        self.tgt.push(tgt);
    }
}

/// (source, pseudo-pivot, target) triples.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrilingualCorpus {
    pub src: Vec<String>,
    pub piv: Vec<String>,
    pub tgt: Vec<String>,
}

impl TrilingualCorpus {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn push(&mut self, src: String, piv: String, tgt: String) {
        self.src.push(src);
        self.piv.push(piv);
        self.tgt.push(tgt);
    }
}

fn side(prefix: &Path, ext: &str) -> PathBuf {
    let mut p = prefix.as_os_str().to_owned();
    p.push(".");
    p.push(ext);
    PathBuf::from(p)
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::with_capacity(lines.iter().map(|l| l.len() + 1).sum());
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_lines(path: &Path, allow_empty: bool) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            let l = l.trim_end_matches('\r');
            if l.trim().is_empty() && !allow_empty {
                Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: "empty sentence".into(),
                })
            } else {
                Ok(l.split_whitespace().collect::<Vec<_>>().join(" "))
            }
        })
        .collect()
}

fn check_aligned(a: &[String], b: &[String], b_path: &Path) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Parse {
            path: b_path.display().to_string(),
            line: a.len().min(b.len()) + 1,
            msg: format!("line count mismatch: {} vs {}", a.len(), b.len()),
        });
    }
    Ok(())
}

/// Writes `<prefix>.src` and `<prefix>.tgt`.
pub fn write_corpus(prefix: &Path, corpus: &ParallelCorpus) -> Result<()> {
    write_lines(&side(prefix, "src"), &corpus.src)?;
    write_lines(&side(prefix, "tgt"), &corpus.tgt)
}

pub fn read_corpus(prefix: &Path) -> Result<ParallelCorpus> {
    let src = read_lines(&side(prefix, "src"), false)?;
    let tgt_path = side(prefix, "tgt");
    let tgt = read_lines(&tgt_path, false)?;
    check_aligned(&src, &tgt, &tgt_path)?;
    Ok(ParallelCorpus { src, tgt })
}

/// Writes `<prefix>.src`, `<prefix>.piv` and `<prefix>.tgt`. Pivot lines may
/// be empty (a generated pivot that is just EOS); the other sides may not.
pub fn write_trilingual(prefix: &Path, corpus: &TrilingualCorpus) -> Result<()> {
    write_lines(&side(prefix, "src"), &corpus.src)?;
    write_lines(&side(prefix, "piv"), &corpus.piv)?;
    write_lines(&side(prefix, "tgt"), &corpus.tgt)
}

pub fn read_trilingual(prefix: &Path) -> Result<TrilingualCorpus> {
    let src = read_lines(&side(prefix, "src"), false)?;
    let piv_path = side(prefix, "piv");
    let piv = read_lines(&piv_path, true)?;
    check_aligned(&src, &piv, &piv_path)?;
    let tgt_path = side(prefix, "tgt");
    let tgt = read_lines(&tgt_path, false)?;
    check_aligned(&src, &tgt, &tgt_path)?;
    Ok(TrilingualCorpus { src, piv, tgt })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_format() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("train");
        let c = ParallelCorpus::new(vec!["a b".into(), "c".into()], vec!["x".into(), "y z".into()]).unwrap();
        write_corpus(&prefix, &c).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("train.src")).unwrap(), "a b\nc\n");
        assert_eq!(read_corpus(&prefix).unwrap(), c);
    }

    #[test]
    fn mismatch_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("bad");
        fs::write(dir.path().join("bad.src"), "a\nb\nc\n").unwrap();
        fs::write(dir.path().join("bad.tgt"), "x\ny\n").unwrap();
        match read_corpus(&prefix) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trilingual_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("tri");
        let mut c = TrilingualCorpus::default();
        c.push("s1".into(), "p1 p2".into(), "t9".into());
        c.push("s2".into(), String::new(), "t8".into());
        write_trilingual(&prefix, &c).unwrap();
        assert_eq!(read_trilingual(&prefix).unwrap(), c);
        fs::write(dir.path().join("tri.tgt"), "t9\n\n").unwrap();
        assert!(matches!(read_trilingual(&prefix), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_sides_rejected() {
        assert!(ParallelCorpus::new(vec!["a".into()], vec![" ".into()]).is_err());
        assert!(ParallelCorpus::new(vec!["a".into()], vec![]).is_err());
    }
}
