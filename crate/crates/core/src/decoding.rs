//! Greedy and beam-search decoding, and joint decoding through the cascade.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::cascade::CascadeModel;
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::softbridge::{bridge_weights, BridgeConfig, Phase, ProbDistSeq};
use crate::transformer::{EncoderOutput, TransformerModel};

/// Anything that can score next tokens for a batch of prefixes.
///
/// Prefixes start with BOS; each returned row is a distribution over the
/// output vocabulary.
pub trait StepModel {
    fn next_distributions(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// A transformer decoder conditioned on one encoded source sentence.
pub struct Conditioned<'a> {
    pub model: &'a TransformerModel,
    pub enc: EncoderOutput,
}

impl StepModel for Conditioned<'_> {
    fn next_distributions(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.model.decode_step_batch(&self.enc, prefixes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens without BOS; ends in EOS unless `truncated`.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of `tokens`.
    pub score: f64,
    /// `score / len^length_penalty`.
    pub normalized: f64,
    /// Distribution each token was chosen from.
    pub dist_seq: ProbDistSeq,
    /// Hit the length limit before producing EOS.
    pub truncated: bool,
}

impl Hypothesis {
    /// Tokens with a trailing EOS removed.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub n_best: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub length_penalty: f64,
    /// Store only the `k` most probable entries of each row (plus the chosen
    /// token), rescaled so the kept mass sums to one. Scores still use the
    /// full row.
    pub top_k: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            n_best: 1,
            max_len: 15,
            length_penalty: 1.0,
            top_k: None,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.n_best == 0 || self.max_len == 0 {
            return Err(Error::Config("beam_size, n_best and max_len must be positive".into()));
        }
        if self.n_best > self.beam_size {
            return Err(Error::Config(format!(
                "n_best ({}) cannot exceed beam_size ({})",
                self.n_best, self.beam_size
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }
}

fn normalized(score: f64, len: usize, lp: f64) -> f64 {
    score / (len.max(1) as f64).powf(lp)
}

/// `row` restricted to its `k` largest entries (lowest id first on ties) and
/// `keep`, rescaled to sum to one.
pub fn sparsify(row: &[f64], k: usize, keep: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut out = vec![0.0; row.len()];
    for &i in order.iter().take(k).chain(std::iter::once(&keep)) {
        out[i] = row[i];
    }
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= s);
    out
}

fn check_row(row: &[f64], width: Option<usize>) -> Result<()> {
    if row.is_empty() || width.is_some_and(|w| w != row.len()) {
        return Err(Error::contract("step model returned rows of inconsistent width"));
    }
    Ok(())
}

/// Argmax decoding (lowest id wins ties).
pub fn greedy_decode(model: &impl StepModel, max_len: usize, length_penalty: f64) -> Result<Hypothesis> {
    let mut prefix = vec![BOS];
    let mut seq = ProbDistSeq::empty();
    let mut score = 0.0;
    while prefix.len() <= max_len {
        let row = model.next_distributions(std::slice::from_ref(&prefix))?.pop().unwrap();
        check_row(&row, None)?;
        let tok = crate::softbridge::argmax(&row);
        score += row[tok].ln();
        seq.push(tok, row);
        prefix.push(tok);
        if tok == EOS {
            break;
        }
    }
    let tokens = prefix[1..].to_vec();
    let truncated = tokens.last() != Some(&EOS);
    Ok(Hypothesis {
        normalized: normalized(score, tokens.len(), length_penalty),
        tokens,
        score,
        dist_seq: seq,
        truncated,
    })
}

struct Partial {
    tokens: Vec<usize>,
    score: f64,
    seq: ProbDistSeq,
}

/// Beam search with a shrinking beam.
///
/// Each step expands every live hypothesis by every token and keeps the
/// `beam_size - finished` best expansions by raw score (ties: larger step
/// probability, then earlier parent, then lower id). Expansions ending in EOS
/// or reaching `max_len` retire. The result is ranked by length-normalized
/// score; with `beam_size = 1` it equals [`greedy_decode`].
pub fn beam_search(model: &impl StepModel, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let mut alive = vec![Partial {
        tokens: Vec::new(),
        score: 0.0,
        seq: ProbDistSeq::empty(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut width = None;
    while !alive.is_empty() {
        let prefixes: Vec<Vec<usize>> = alive
            .iter()
            .map(|h| std::iter::once(BOS).chain(h.tokens.iter().copied()).collect())
            .collect();
        let rows = model.next_distributions(&prefixes)?;
        if rows.len() != alive.len() {
            return Err(Error::contract("step model returned the wrong number of rows"));
        }
        let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (a, (h, row)) in alive.iter().zip(&rows).enumerate() {
            check_row(row, width)?;
            width = Some(row.len());
            for (v, &p) in row.iter().enumerate() {
                cands.push((h.score + p.ln(), p, a, v));
            }
        }
        cands.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then(y.1.partial_cmp(&x.1).unwrap_or(Ordering::Equal))
                .then(x.2.cmp(&y.2))
                .then(x.3.cmp(&y.3))
        });
        let slots = cfg.beam_size - finished.len();
        let mut next = Vec::with_capacity(slots);
        for &(score, _, a, v) in cands.iter().take(slots) {
            let parent = &alive[a];
            let mut tokens = parent.tokens.clone();
            tokens.push(v);
            let mut seq = parent.seq.clone();
            seq.push(
                v,
                match cfg.top_k {
                    Some(k) => sparsify(&rows[a], k, v),
                    None => rows[a].clone(),
                },
            );
            if v == EOS || tokens.len() >= cfg.max_len {
                finished.push(Hypothesis {
                    normalized: normalized(score, tokens.len(), cfg.length_penalty),
                    truncated: v != EOS,
                    tokens,
                    score,
                    dist_seq: seq,
                });
            } else {
                next.push(Partial { tokens, score, seq });
            }
        }
        alive = next;
    }
    finished.sort_by(|x, y| {
        y.normalized
            .partial_cmp(&x.normalized)
            .unwrap_or(Ordering::Equal)
            .then(y.score.partial_cmp(&x.score).unwrap_or(Ordering::Equal))
            .then(x.tokens.cmp(&y.tokens))
    });
    finished.truncate(cfg.n_best);
    Ok(finished)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Rank by pivot score plus target score.
    #[default]
    Combined,
    /// Rank by target score alone.
    TargetOnly,
}

/// How pivot hypotheses reach the pivot→target encoder.
#[derive(Clone, Copy, Debug)]
pub enum PivotInput<'a> {
    /// Bridged distributions (re-normalized and corrected).
    Soft(&'a BridgeConfig),
    /// The pivot token ids, as in a plain two-step pipeline.
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeDecodeConfig {
    pub pivot: BeamConfig,
    pub target: BeamConfig,
    /// Pivot hypotheses carried forward.
    pub n_pivot: usize,
    /// Target hypotheses kept per pivot hypothesis.
    pub m_target: usize,
    pub selection: Selection,
}

impl Default for CascadeDecodeConfig {
    fn default() -> Self {
        Self {
            pivot: BeamConfig::default(),
            target: BeamConfig::default(),
            n_pivot: 1,
            m_target: 1,
            selection: Selection::Combined,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Candidate {
    /// Index into [`CascadeOutput::pivots`].
    pub pivot: usize,
    pub target: Hypothesis,
    pub rank_score: f64,
}

#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub pivots: Vec<Hypothesis>,
    /// Sorted best first.
    pub candidates: Vec<Candidate>,
}

impl CascadeOutput {
    pub fn best(&self) -> &Candidate {
        &self.candidates[0]
    }
}

/// Pivot n-best for an encoded source sentence (`src` includes EOS).
pub fn pivot_candidates(sp: &TransformerModel, src: &[usize], cfg: &CascadeDecodeConfig) -> Result<Vec<Hypothesis>> {
    let beam = BeamConfig {
        n_best: cfg.n_pivot,
        beam_size: cfg.pivot.beam_size.max(cfg.n_pivot),
        ..cfg.pivot.clone()
    };
    beam_search(
        &Conditioned {
            model: sp,
            enc: sp.encode_hard(src)?,
        },
        &beam,
    )
}

/// Encoder input rows for one pivot hypothesis.
pub fn pivot_encoding(pt: &TransformerModel, pivot: &Hypothesis, input: PivotInput<'_>) -> Result<EncoderOutput> {
    match input {
        PivotInput::Soft(bridge) => pt.encode_soft(&bridge_weights(&pivot.dist_seq, bridge, Phase::Decode)?),
        PivotInput::Hard => {
            let mut ids = pivot.content().to_vec();
            ids.push(EOS);
            pt.encode_hard(&ids)
        }
    }
}

/// Translate each pivot hypothesis and rank all `(pivot, target)` pairs.
pub fn translate_pivots(
    pt: &TransformerModel,
    pivots: Vec<Hypothesis>,
    input: PivotInput<'_>,
    cfg: &CascadeDecodeConfig,
) -> Result<CascadeOutput> {
    if pivots.is_empty() {
        return Err(Error::contract("no pivot hypotheses to translate"));
    }
    let beam = BeamConfig {
        n_best: cfg.m_target,
        beam_size: cfg.target.beam_size.max(cfg.m_target),
        ..cfg.target.clone()
    };
    let mut candidates = Vec::new();
    for (i, piv) in pivots.iter().enumerate() {
        let model = Conditioned {
            model: pt,
            enc: pivot_encoding(pt, piv, input)?,
        };
        for target in beam_search(&model, &beam)? {
            let rank_score = match cfg.selection {
                Selection::Combined => piv.normalized + target.normalized,
                Selection::TargetOnly => target.normalized,
            };
            candidates.push(Candidate {
                pivot: i,
                target,
                rank_score,
            });
        }
    }
    candidates.sort_by(|x, y| y.rank_score.partial_cmp(&x.rank_score).unwrap_or(Ordering::Equal));
    Ok(CascadeOutput { pivots, candidates })
}

/// Source ids (EOS included) to ranked target candidates through the cascade.
pub fn cascade_decode(
    cm: &CascadeModel,
    src: &[usize],
    input: PivotInput<'_>,
    cfg: &CascadeDecodeConfig,
) -> Result<CascadeOutput> {
    let pivots = pivot_candidates(&cm.sp, src, cfg)?;
    translate_pivots(&cm.pt, pivots, input, cfg)
}
