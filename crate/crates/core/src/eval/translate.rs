use serde::{Deserialize, Serialize};

use super::{bleu, ids_to_string};
use crate::cascade::CascadeModel;
use crate::data::EOS;
use crate::decoding::{beam_search, cascade_decode, BeamConfig, CascadeDecodeConfig, Conditioned, PivotInput};
use crate::error::Result;
use crate::softbridge::detect_inconsistencies;
use crate::transformer::TransformerModel;

/// Test-set outcome of one translation method.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub bleu: f64,
    /// Share of selected pivot tokens that are not the argmax of their row.
    pub inconsistency_rate: f64,
    pub sentences: usize,
    /// Target ids per sentence, without EOS.
    #[serde(skip)]
    pub hypotheses: Vec<Vec<usize>>,
}

fn with_eos(x: &[usize]) -> Vec<usize> {
    let mut v = x.to_vec();
    v.push(EOS);
    v
}

fn score(hyps: Vec<Vec<usize>>, refs: &[Vec<usize>], bad: usize, total: usize) -> Result<TestReport> {
    let h: Vec<String> = hyps.iter().map(|x| ids_to_string(x)).collect();
    let r: Vec<String> = refs.iter().map(|x| ids_to_string(x)).collect();
    Ok(TestReport {
        bleu: bleu(&h, &r)?,
        inconsistency_rate: if total == 0 { 0.0 } else { bad as f64 / total as f64 },
        sentences: hyps.len(),
        hypotheses: hyps,
    })
}

/// Beam-search a single model over `(src, ref)` id pairs.
pub fn evaluate_direct(
    model: &TransformerModel,
    test: &[(Vec<usize>, Vec<usize>)],
    beam: &BeamConfig,
) -> Result<TestReport> {
    let cfg = BeamConfig {
        n_best: 1,
        ..beam.clone()
    };
    let mut hyps = Vec::with_capacity(test.len());
    for (src, _) in test {
        let m = Conditioned {
            model,
            enc: model.encode_hard(&with_eos(src))?,
        };
        hyps.push(beam_search(&m, &cfg)?.remove(0).content().to_vec());
    }
    let refs: Vec<Vec<usize>> = test.iter().map(|(_, r)| r.clone()).collect();
    score(hyps, &refs, 0, 0)
}

/// Decode through the cascade and score the best candidate per sentence.
pub fn evaluate_cascade(
    cm: &CascadeModel,
    test: &[(Vec<usize>, Vec<usize>)],
    input: PivotInput<'_>,
    cfg: &CascadeDecodeConfig,
) -> Result<TestReport> {
    let mut hyps = Vec::with_capacity(test.len());
    let (mut bad, mut total) = (0, 0);
    for (src, _) in test {
        let out = cascade_decode(cm, &with_eos(src), input, cfg)?;
        let best = out.best();
        let piv = &out.pivots[best.pivot];
        bad += detect_inconsistencies(&piv.dist_seq).len();
        total += piv.dist_seq.len();
        hyps.push(best.target.content().to_vec());
    }
    let refs: Vec<Vec<usize>> = test.iter().map(|(_, r)| r.clone()).collect();
    score(hyps, &refs, bad, total)
}
