//! Plain-Rust core of the browser demo, testable natively.

use serde::Serialize;

use softpivot::data::{BOS, EOS, PAD};
use softpivot::decoding::{beam_search, BeamConfig, StepModel};
use softpivot::seed::derive;
use softpivot::softbridge::{argmax, correct_row, detect_inconsistencies, renormalize, CorrectionMode};
use softpivot::Result;

/// A seeded random next-token model over `vocab` ids. Every prefix gets its
/// own fixed distribution; EOS grows more likely as the prefix gets longer.
/// PAD and BOS are never produced.
pub struct ToyModel {
    pub vocab: usize,
    pub seed: u64,
    /// Exponent on the raw weights; larger values give peakier rows.
    pub sharpness: f64,
}

fn unit(seed: u64, label: &str) -> f64 {
    ((derive(seed, label) >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

impl ToyModel {
    pub fn row(&self, prefix: &[usize]) -> Vec<f64> {
        let key = prefix.iter().fold(self.seed, |h, &t| derive(h, &t.to_string()));
        let mut raw: Vec<f64> = (0..self.vocab)
            .map(|v| unit(key, &v.to_string()).powf(self.sharpness))
            .collect();
        raw[PAD] = 0.0;
        raw[BOS] = 0.0;
        raw[EOS] *= prefix.len() as f64;
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }
}

impl StepModel for ToyModel {
    fn next_distributions(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

#[derive(Debug, Serialize)]
pub struct Position {
    pub token: usize,
    pub argmax: usize,
    pub inconsistent: bool,
    pub dist: Vec<f64>,
    /// The row after the chosen correction (not re-normalized).
    pub corrected: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct BeamDemo {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub positions: Vec<Position>,
    pub inconsistencies: usize,
}

/// Beam-decode a toy model and show where the kept token is not the argmax
/// of its stored row, and what `mode` does to each row.
pub fn beam_demo(
    vocab: usize,
    seed: u64,
    sharpness: f64,
    beam_size: usize,
    max_len: usize,
    mode: CorrectionMode,
) -> Result<BeamDemo> {
    if vocab <= EOS + 1 {
        return Err(softpivot::Error::Config(format!(
            "vocabulary must have more than {} tokens",
            EOS + 1
        )));
    }
    let model = ToyModel { vocab, seed, sharpness };
    let cfg = BeamConfig {
        beam_size,
        n_best: 1,
        max_len,
        length_penalty: 1.0,
        top_k: None,
    };
    let best = beam_search(&model, &cfg)?.remove(0);
    let flagged = detect_inconsistencies(&best.dist_seq);
    let positions = best
        .dist_seq
        .tokens()
        .iter()
        .zip(best.dist_seq.dists())
        .enumerate()
        .map(|(i, (&token, dist))| Position {
            token,
            argmax: argmax(dist),
            inconsistent: flagged.contains(&i),
            corrected: correct_row(dist, token, mode),
            dist: dist.clone(),
        })
        .collect();
    Ok(BeamDemo {
        tokens: best.tokens,
        score: best.score,
        positions,
        inconsistencies: flagged.len(),
    })
}

/// `weights` re-normalized with exponent `alpha`, after scaling them to
/// sum to one.
pub fn renormalize_weights(weights: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let s: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) || s <= 0.0 {
        return Err(softpivot::Error::Config(
            "weights must be non-negative with a positive sum".into(),
        ));
    }
    let dist: Vec<f64> = weights.iter().map(|w| w / s).collect();
    renormalize(&dist, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_rows_are_distributions_and_deterministic() {
        let m = ToyModel {
            vocab: 7,
            seed: 4,
            sharpness: 3.0,
        };
        let r = m.row(&[1, 5]);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(r, m.row(&[1, 5]));
        assert_ne!(r, m.row(&[1, 6]));
    }

    #[test]
    fn default_page_settings_show_an_inconsistency() {
        assert_eq!(
            beam_demo(8, 6, 2.0, 5, 8, CorrectionMode::Eq1).unwrap().inconsistencies,
            2
        );
    }

    #[test]
    fn demo_flags_match_argmax_and_corrections_fix_them() {
        let mut seen = 0;
        for seed in 0..40 {
            for mode in [CorrectionMode::Eq1, CorrectionMode::Exc] {
                let d = beam_demo(6, seed, 3.0, 4, 6, mode).unwrap();
                assert_eq!(d.tokens.len(), d.positions.len());
                for p in &d.positions {
                    assert_eq!(p.inconsistent, p.dist[p.token] < p.dist[p.argmax]);
                    assert_eq!(argmax(&p.corrected), p.token);
                }
                seen += d.inconsistencies;
            }
        }
        assert!(seen > 0, "beam search never kept a non-argmax token");
    }

    #[test]
    fn special_tokens_are_never_generated() {
        for seed in 0..20 {
            let d = beam_demo(5, seed, 2.0, 8, 6, CorrectionMode::None).unwrap();
            assert!(d.tokens.iter().all(|&t| t != PAD && t != BOS), "{:?}", d.tokens);
        }
    }

    #[test]
    fn beam_one_is_consistent() {
        for seed in 0..20 {
            assert_eq!(
                beam_demo(6, seed, 3.0, 1, 6, CorrectionMode::None)
                    .unwrap()
                    .inconsistencies,
                0
            );
        }
    }

    #[test]
    fn renormalize_accepts_unnormalized_weights() {
        let r = renormalize_weights(&[8.0, 2.0], 2.0).unwrap();
        assert!((r[0] - 64.0 / 68.0).abs() < 1e-12);
        assert!(renormalize_weights(&[0.0, 0.0], 1.0).is_err());
        assert!(renormalize_weights(&[-1.0, 2.0], 1.0).is_err());
        assert!(beam_demo(3, 0, 1.0, 2, 3, CorrectionMode::None).is_err());
    }
}
