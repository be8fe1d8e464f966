//! Deterministic trilingual toy task.
//!
//! A latent sequence `v` of ids in `0..V` is rendered three ways:
//! source `s{v_i}`, pivot `p{(v_i + shift_sp) mod V}` and target
//! `t{(v_i + shift_pt) mod V}` with an optional reversal. Every model in the
//! pipeline therefore has an exact oracle, and the triangle
//! source → pivot → target commutes.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetTransform {
    Identity,
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub latent_vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub shift_sp: usize,
    pub shift_pt: usize,
    pub target_transform: TargetTransform,
    /// (source, pivot) pairs.
    pub sp_size: usize,
    /// (pivot, target) pairs.
    pub pt_size: usize,
    /// The scarce (source, target) pairs.
    pub st_size: usize,
    /// Held-out pairs per split, disjoint from every training corpus.
    pub valid_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            latent_vocab_size: 20,
            min_len: 3,
            max_len: 12,
            shift_sp: 3,
            shift_pt: 7,
            target_transform: TargetTransform::Reverse,
            sp_size: 20_000,
            pt_size: 20_000,
            st_size: 800,
            valid_size: 200,
            test_size: 500,
            seed: 13,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self, model_max_len: Option<usize>) -> Result<()> {
        if self.latent_vocab_size < 4 {
            return Err(Error::Config("latent_vocab_size must be at least 4".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if let Some(m) = model_max_len {
            if self.max_len + 2 > m {
                return Err(Error::Config(format!(
                    "sentences of length {} do not fit a model max_len of {m}",
                    self.max_len
                )));
            }
        }
        Ok(())
    }
}

/// Generated corpora plus the rules that produced them.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub sp: ParallelCorpus,
    pub pt: ParallelCorpus,
    pub st: ParallelCorpus,
    pub sp_valid: ParallelCorpus,
    pub pt_valid: ParallelCorpus,
    pub st_valid: ParallelCorpus,
    pub st_test: ParallelCorpus,
}

impl SyntheticTask {
    fn render(&self, latent: &[usize], prefix: char, shift: usize, reverse: bool) -> String {
        let v = self.spec.latent_vocab_size;
        let mut toks: Vec<String> = latent.iter().map(|x| format!("{prefix}{}", (x + shift) % v)).collect();
        if reverse {
            toks.reverse();
        }
        toks.join(" ")
    }

    fn parse(&self, sentence: &str, prefix: char) -> Option<Vec<usize>> {
        sentence
            .split_whitespace()
            .map(|t| {
                t.strip_prefix(prefix)?
                    .parse::<usize>()
                    .ok()
                    .filter(|&x| x < self.spec.latent_vocab_size)
            })
            .collect()
    }

    fn unshift(&self, ids: Vec<usize>, shift: usize) -> Vec<usize> {
        let v = self.spec.latent_vocab_size;
        ids.into_iter().map(|x| (x + v - shift % v) % v).collect()
    }

    fn reversed(&self) -> bool {
        self.spec.target_transform == TargetTransform::Reverse
    }

    /// Exact source → pivot translation, `None` for out-of-language input.
    pub fn oracle_sp(&self, src: &str) -> Option<String> {
        let latent = self.parse(src, 's')?;
        Some(self.render(&latent, 'p', self.spec.shift_sp, false))
    }

    pub fn oracle_pt(&self, piv: &str) -> Option<String> {
        let latent = self.unshift(self.parse(piv, 'p')?, self.spec.shift_sp);
        Some(self.render(&latent, 't', self.spec.shift_pt, self.reversed()))
    }

    pub fn oracle_st(&self, src: &str) -> Option<String> {
        let latent = self.parse(src, 's')?;
        Some(self.render(&latent, 't', self.spec.shift_pt, self.reversed()))
    }
}

fn sample_latent(spec: &SyntheticTaskSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    (0..len).map(|_| rng.gen_range(0..spec.latent_vocab_size)).collect()
}

pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticTask> {
    spec.validate(None)?;
    let mut task = SyntheticTask {
        spec: spec.clone(),
        sp: ParallelCorpus::default(),
        pt: ParallelCorpus::default(),
        st: ParallelCorpus::default(),
        sp_valid: ParallelCorpus::default(),
        pt_valid: ParallelCorpus::default(),
        st_valid: ParallelCorpus::default(),
        st_test: ParallelCorpus::default(),
    };
    let (sp_shift, pt_shift, rev) = (spec.shift_sp, spec.shift_pt, task.reversed());

    // Held-out latents first so training draws can be kept disjoint from them.
    let mut held_out = HashSet::new();
    let heldout_split = |label: &str, n: usize, held: &mut HashSet<Vec<usize>>| {
        let mut rng = rng_for(spec.seed, label);
        let mut out = Vec::with_capacity(n);
        // Bounded retries: tiny spaces may not hold `n` distinct sequences.
        let mut attempts = 0;
        while out.len() < n && attempts < n * 50 {
            attempts += 1;
            let l = sample_latent(spec, &mut rng);
            if held.insert(l.clone()) {
                out.push(l);
            }
        }
        out
    };
    let st_valid = heldout_split("st_valid", spec.valid_size, &mut held_out);
    let st_test = heldout_split("st_test", spec.test_size, &mut held_out);
    let sp_valid = heldout_split("sp_valid", spec.valid_size, &mut held_out);
    let pt_valid = heldout_split("pt_valid", spec.valid_size, &mut held_out);

    let train = |label: &str, n: usize| {
        let mut rng = rng_for(spec.seed, label);
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n && attempts < n * 50 {
            attempts += 1;
            let l = sample_latent(spec, &mut rng);
            if !held_out.contains(&l) {
                out.push(l);
            }
        }
        out
    };
    let sp_lat = train("sp", spec.sp_size);
    let pt_lat = train("pt", spec.pt_size);
    let st_lat = train("st", spec.st_size);

    let fill = |task: &SyntheticTask, lats: &[Vec<usize>], kind: (char, usize, bool), out: (char, usize, bool)| {
        let mut c = ParallelCorpus::default();
        for l in lats {
            c.push(
                task.render(l, kind.0, kind.1, kind.2),
                task.render(l, out.0, out.1, out.2),
            );
        }
        c
    };
    let s = ('s', 0, false);
    let p = ('p', sp_shift, false);
    let t = ('t', pt_shift, rev);
    task.sp = fill(&task, &sp_lat, s, p);
    task.pt = fill(&task, &pt_lat, p, t);
    task.st = fill(&task, &st_lat, s, t);
    task.sp_valid = fill(&task, &sp_valid, s, p);
    task.pt_valid = fill(&task, &pt_valid, p, t);
    task.st_valid = fill(&task, &st_valid, s, t);
    task.st_test = fill(&task, &st_test, s, t);
    Ok(task)
}
