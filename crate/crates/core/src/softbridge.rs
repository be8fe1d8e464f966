//! The bridge between the two cascaded models.
//!
//! The source→pivot decoder's per-position distributions are sharpened with an
//! exponent (`p^α / Σ p^α`) and handed to the pivot→target encoder as mixing
//! weights over its embedding table. At decode time beam search can keep a
//! token that is not the argmax of the distribution stored for its position;
//! the correction heuristics here edit such rows so the chosen token carries
//! the largest weight before they reach the encoder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{renorm_row, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Generated pivot tokens with the full distribution each was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDistSeq {
    tokens: Vec<usize>,
    dists: Vec<Vec<f64>>,
}

impl ProbDistSeq {
    /// Validates that rows are non-negative, sum to one (±1e-6), share one
    /// width, and that every token indexes into them.
    pub fn new(tokens: Vec<usize>, dists: Vec<Vec<f64>>) -> Result<Self> {
        let seq = Self::from_weights(tokens, dists)?;
        for (t, row) in seq.dists.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("row {t} sums to {s}")));
            }
        }
        Ok(seq)
    }

    /// Like [`ProbDistSeq::new`] without the sum-to-one check, for rows that
    /// have already been through a correction.
    pub fn from_weights(tokens: Vec<usize>, dists: Vec<Vec<f64>>) -> Result<Self> {
        if tokens.len() != dists.len() {
            return Err(Error::contract(format!(
                "{} tokens but {} distribution rows",
                tokens.len(),
                dists.len()
            )));
        }
        let width = dists.first().map_or(0, Vec::len);
        for (t, (row, &tok)) in dists.iter().zip(&tokens).enumerate() {
            if row.len() != width || width == 0 {
                return Err(Error::contract(format!("row {t} has width {}", row.len())));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::contract(format!("row {t} has a negative or non-finite entry")));
            }
            if tok >= width {
                return Err(Error::Index {
                    what: "pivot vocabulary",
                    index: tok,
                    size: width,
                });
            }
        }
        Ok(Self { tokens, dists })
    }

    pub fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            dists: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, token: usize, dist: Vec<f64>) {
        self.tokens.push(token);
        self.dists.push(dist);
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn dists(&self) -> &[Vec<f64>] {
        &self.dists
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn vocab_size(&self) -> usize {
        self.dists.first().map_or(0, Vec::len)
    }

    /// `[T × V]` weight matrix.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_rows(&self.dists)
    }

    /// One line per position: `token<TAB>id:prob id:prob ...`, listing only
    /// entries above `1e-6`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (tok, row) in self.tokens.iter().zip(&self.dists) {
            out.push_str(&tok.to_string());
            out.push('\t');
            let entries: Vec<String> = row
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > SPARSE_THRESHOLD)
                .map(|(i, p)| format!("{i}:{p}"))
                .collect();
            out.push_str(&entries.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses [`ProbDistSeq::to_text`] output. Omitted entries are zero.
    pub fn from_text(text: &str, vocab_size: usize) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: "<prob-dist-seq>".into(),
            line,
            msg,
        };
        let mut tokens = Vec::new();
        let mut dists = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (tok, rest) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(n + 1, "missing TAB".into()))?;
            tokens.push(
                tok.trim()
                    .parse::<usize>()
                    .map_err(|e| parse_err(n + 1, e.to_string()))?,
            );
            let mut row = vec![0.0; vocab_size];
            for entry in rest.split_whitespace() {
                let (i, p) = entry
                    .split_once(':')
                    .ok_or_else(|| parse_err(n + 1, format!("bad entry {entry:?}")))?;
                let i: usize = i
                    .parse()
                    .map_err(|_| parse_err(n + 1, format!("bad id in {entry:?}")))?;
                if i >= vocab_size {
                    return Err(parse_err(n + 1, format!("id {i} outside vocabulary of {vocab_size}")));
                }
                row[i] = p
                    .parse()
                    .map_err(|_| parse_err(n + 1, format!("bad probability in {entry:?}")))?;
            }
            dists.push(row);
        }
        Self::from_weights(tokens, dists)
    }
}

const SPARSE_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionMode {
    #[default]
    None,
    /// Set the generated token's weight to 1.
    Eq1,
    /// Add 1 to the generated token's weight.
    Add1,
    /// Add 0.5 to the generated token's weight.
    Add05,
    /// Swap the generated token's weight with the row maximum.
    Exc,
}

impl CorrectionMode {
    pub const ALL: [CorrectionMode; 5] = [
        CorrectionMode::None,
        CorrectionMode::Eq1,
        CorrectionMode::Add1,
        CorrectionMode::Add05,
        CorrectionMode::Exc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorrectionMode::None => "none",
            CorrectionMode::Eq1 => "eq1",
            CorrectionMode::Add1 => "add1",
            CorrectionMode::Add05 => "add05",
            CorrectionMode::Exc => "exc",
        }
    }
}

impl fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CorrectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown correction mode {s:?} (expected none, eq1, add1, add05 or exc)"
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub alpha_train: f64,
    pub alpha_decode: f64,
    pub correction: CorrectionMode,
    /// Rescale corrected rows to sum to one. Off by default: corrected rows are
    /// used as raw mixing weights.
    pub normalize_after_correction: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            alpha_train: 1.0,
            alpha_decode: 1.0,
            correction: CorrectionMode::None,
            normalize_after_correction: false,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_train", self.alpha_train), ("alpha_decode", self.alpha_decode)] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Decode,
}

/// `p^α / Σ p^α` over one row.
pub fn renormalize(dist: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::contract(format!("exponent must be positive, got {alpha}")));
    }
    let mut out = vec![0.0; dist.len()];
    renorm_row(dist, alpha, &mut out)?;
    Ok(out)
}

/// Index of the largest entry; the lowest id wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// The generated token carries the largest weight of its row. A token tied
/// with the maximum counts as consistent.
pub fn is_consistent(row: &[f64], generated: usize) -> bool {
    row[generated] >= row[argmax(row)]
}

/// Positions whose generated token has less weight than the row maximum.
pub fn detect_inconsistencies(seq: &ProbDistSeq) -> Vec<usize> {
    seq.tokens
        .iter()
        .zip(&seq.dists)
        .enumerate()
        .filter(|(_, (&tok, row))| !is_consistent(row, tok))
        .map(|(t, _)| t)
        .collect()
}

/// Apply `mode` to one row in which `generated` was chosen. Consistent rows
/// come back unchanged.
pub fn correct_row(row: &[f64], generated: usize, mode: CorrectionMode) -> Vec<f64> {
    let mut out = row.to_vec();
    if is_consistent(row, generated) {
        return out;
    }
    let top = argmax(row);
    match mode {
        CorrectionMode::None => {}
        CorrectionMode::Eq1 => out[generated] = 1.0,
        CorrectionMode::Add1 => out[generated] += 1.0,
        CorrectionMode::Add05 => out[generated] += 0.5,
        CorrectionMode::Exc => out.swap(generated, top),
    }
    out
}

pub fn correct(seq: &ProbDistSeq, mode: CorrectionMode) -> ProbDistSeq {
    correct_with(seq, mode, false)
}

/// [`correct`], optionally rescaling each edited row to sum to one.
pub fn correct_with(seq: &ProbDistSeq, mode: CorrectionMode, normalize: bool) -> ProbDistSeq {
    let dists = seq
        .tokens
        .iter()
        .zip(&seq.dists)
        .map(|(&tok, row)| {
            let mut r = correct_row(row, tok, mode);
            if normalize && r != *row {
                let s: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= s);
            }
            r
        })
        .collect();
    ProbDistSeq {
        tokens: seq.tokens.clone(),
        dists,
    }
}

/// Encoder mixing weights for the pivot→target model.
///
/// Training re-normalizes with `alpha_train` and never corrects; decoding
/// re-normalizes with `alpha_decode` and then applies the correction mode.
pub fn bridge_weights(seq: &ProbDistSeq, cfg: &BridgeConfig, phase: Phase) -> Result<Tensor> {
    if seq.is_empty() {
        return Err(Error::contract("cannot bridge an empty pivot sequence"));
    }
    let alpha = match phase {
        Phase::Train => cfg.alpha_train,
        Phase::Decode => cfg.alpha_decode,
    };
    let rows = seq
        .dists
        .iter()
        .map(|r| renormalize(r, alpha))
        .collect::<Result<Vec<_>>>()?;
    let sharpened = ProbDistSeq {
        tokens: seq.tokens.clone(),
        dists: rows,
    };
    let out = match phase {
        Phase::Train => sharpened,
        Phase::Decode => correct_with(&sharpened, cfg.correction, cfg.normalize_after_correction),
    };
    out.to_tensor()
}

/// Differentiable training-phase bridge on a tape: row-wise `p^α / Σ p^α`.
pub fn bridge_weights_on_tape(tape: &mut Tape, probs: Var, cfg: &BridgeConfig) -> Result<Var> {
    tape.pow_renorm(probs, cfg.alpha_train)
}
