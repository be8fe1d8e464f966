use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bidirectional token/id map with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl Vocab {
    /// Reserved ids, then every whitespace token in first-seen order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::default();
        for s in sentences {
            for tok in s.split_whitespace() {
                v.insert(tok);
            }
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids of a sentence; unknown tokens map to `UNK`. No EOS is added.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Sentence ids followed by `EOS`.
    pub fn encode_eos(&self, sentence: &str) -> Vec<usize> {
        let mut ids = self.encode(sentence);
        ids.push(EOS);
        ids
    }

    /// Inverse of [`Vocab::encode`]. Stops at the first `EOS` and drops `BOS`/`PAD`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != BOS && id != PAD)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-reserved token per line; line `i` holds id `i + 4`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut v = Self::default();
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() || tok.contains(char::is_whitespace) || v.id(tok).is_some() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("invalid or duplicate vocabulary entry {line:?}"),
                });
            }
            v.insert(tok);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed_and_order_is_first_seen() {
        let v = Vocab::build(["b a", "c a b"]);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("b"), Some(4));
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("c"), Some(6));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::build(["s1 s2 s3"]);
        let ids = v.encode_eos("s3 s1");
        assert_eq!(ids, vec![6, 4, EOS]);
        assert_eq!(v.decode(&ids), "s3 s1");
        assert_eq!(v.encode("zz"), vec![UNK]);
        assert_eq!(v.decode(&[BOS, 5, EOS, 4]), "s2");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocab::build(["x y z", "w"]);
        v.write(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "x\ny\nz\nw\n");
        assert_eq!(Vocab::read(&p).unwrap(), v);
        fs::write(&p, "x\nx\n").unwrap();
        assert!(matches!(Vocab::read(&p), Err(Error::Parse { line: 2, .. })));
    }
}
