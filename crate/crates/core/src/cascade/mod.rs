//! Source→pivot and pivot→target models joined by the soft bridge and trained
//! end to end.

mod pipeline;
mod train;

pub use pipeline::{
    finetune_from_artifacts, load_cascade, load_test, run_pipeline, ArtifactPaths, EvalSummary, PipelineConfig,
    PipelineReport, Step,
};
pub use train::{
    cascade_validation, encode_pairs, finetune, generate_pseudo_pivot, pretrain, valid_loss, FinetuneConfig,
    FinetuneOutcome, LossCurve, Pair, PretrainOutcome, TrainConfig, ValidPoint,
};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{EOS, PAD};
use crate::error::{Error, Result};
use crate::softbridge::{bridge_weights_on_tape, BridgeConfig};
use crate::transformer::{shift_right, EncoderInput, TransformerModel};

/// The two halves of the cascade. The source→pivot output vocabulary is the
/// pivot→target input vocabulary.
#[derive(Clone, Debug)]
pub struct CascadeModel {
    pub sp: TransformerModel,
    pub pt: TransformerModel,
}

impl CascadeModel {
    pub fn new(sp: TransformerModel, pt: TransformerModel) -> Result<Self> {
        let (out, inp) = (sp.config().tgt_vocab_size, pt.config().src_vocab_size);
        if out != inp {
            return Err(Error::Config(format!(
                "source→pivot output vocabulary ({out}) differs from pivot→target input vocabulary ({inp})"
            )));
        }
        Ok(Self { sp, pt })
    }
}

/// `L = beta · L_pivot + gamma · L_target`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 1.0, gamma: 1.0 }
    }
}

/// Token ids without EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrilingualExample {
    pub src: Vec<usize>,
    pub piv: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl TrilingualExample {
    /// Longest side plus EOS/BOS.
    pub fn max_len(&self) -> usize {
        self.src.len().max(self.piv.len()).max(self.tgt.len()) + 1
    }
}

/// Summed (not averaged) token losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CascadeLosses {
    pub pivot: f64,
    pub target: f64,
    pub total: f64,
    pub pivot_tokens: usize,
    pub target_tokens: usize,
}

/// The joint loss graph for a batch.
pub struct CascadeGraph {
    pub total: Var,
    pub pivot: Var,
    pub target: Var,
    pub sp_vars: Vec<Var>,
    pub pt_vars: Vec<Var>,
    pub pivot_tokens: usize,
    pub target_tokens: usize,
}

/// Options for building [`CascadeGraph`].
#[derive(Clone, Copy)]
pub struct GraphOptions<'a> {
    pub weights: LossWeights,
    pub bridge: &'a BridgeConfig,
    pub trainable: bool,
    /// Use each model's label smoothing.
    pub smoothing: bool,
    /// Apply dropout in the source→pivot half too (when `rng` is given).
    pub sp_dropout: bool,
}

fn with_eos(x: &[usize]) -> Vec<usize> {
    let mut v = x.to_vec();
    v.push(EOS);
    v
}

/// Build the joint loss for `batch` on `tape`.
///
/// The source→pivot decoder runs teacher-forced on the pivot side; its output
/// distributions, one row per pivot token plus EOS, are bridged and fed to the
/// pivot→target encoder in place of the pivot ids. `rng` enables dropout.
pub fn cascade_graph(
    cm: &CascadeModel,
    tape: &mut Tape,
    batch: &[&TrilingualExample],
    opts: GraphOptions<'_>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<CascadeGraph> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let sp = cm.sp.bind(tape, opts.trainable);
    let pt = cm.pt.bind(tape, opts.trainable);
    let srcs: Vec<Vec<usize>> = batch.iter().map(|e| with_eos(&e.src)).collect();
    let (piv_in, piv_out): (Vec<_>, Vec<_>) = batch.iter().map(|e| shift_right(&e.piv)).unzip();
    let (tgt_in, tgt_out): (Vec<_>, Vec<_>) = batch.iter().map(|e| shift_right(&e.tgt)).unzip();
    let seg: Vec<usize> = (0..batch.len()).collect();

    let enc = sp.encode(
        tape,
        EncoderInput::Hard(&srcs),
        rng.as_deref_mut().filter(|_| opts.sp_dropout),
    )?;
    let logits = sp.decode(
        tape,
        &enc,
        &piv_in,
        &seg,
        rng.as_deref_mut().filter(|_| opts.sp_dropout),
    )?;
    let ls_sp = if opts.smoothing {
        cm.sp.config().label_smoothing
    } else {
        0.0
    };
    let piv_flat: Vec<usize> = piv_out.concat();
    let l_pivot = tape.cross_entropy(logits, &piv_flat, ls_sp, PAD)?;

    let probs = tape.softmax(logits, 1)?;
    let weights = bridge_weights_on_tape(tape, probs, opts.bridge)?;
    let lens: Vec<usize> = piv_out.iter().map(Vec::len).collect();
    let enc_pt = pt.encode(tape, EncoderInput::Soft { weights, lens: &lens }, rng.as_deref_mut())?;
    let logits_pt = pt.decode(tape, &enc_pt, &tgt_in, &seg, rng)?;
    let ls_pt = if opts.smoothing {
        cm.pt.config().label_smoothing
    } else {
        0.0
    };
    let tgt_flat: Vec<usize> = tgt_out.concat();
    let l_target = tape.cross_entropy(logits_pt, &tgt_flat, ls_pt, PAD)?;

    let a = tape.scale(l_pivot, opts.weights.beta);
    let b = tape.scale(l_target, opts.weights.gamma);
    let total = tape.add(a, b)?;
    Ok(CascadeGraph {
        total,
        pivot: l_pivot,
        target: l_target,
        sp_vars: sp.vars().to_vec(),
        pt_vars: pt.vars().to_vec(),
        pivot_tokens: piv_flat.len(),
        target_tokens: tgt_flat.len(),
    })
}

/// Loss values for a batch with dropout and label smoothing off.
pub fn cascade_forward(
    cm: &CascadeModel,
    batch: &[&TrilingualExample],
    weights: LossWeights,
    bridge: &BridgeConfig,
) -> Result<CascadeLosses> {
    let mut tape = Tape::new();
    let g = cascade_graph(
        cm,
        &mut tape,
        batch,
        GraphOptions {
            weights,
            bridge,
            trainable: false,
            smoothing: false,
            sp_dropout: true,
        },
        None,
    )?;
    Ok(CascadeLosses {
        pivot: tape.value(g.pivot).item(),
        target: tape.value(g.target).item(),
        total: tape.value(g.total).item(),
        pivot_tokens: g.pivot_tokens,
        target_tokens: g.target_tokens,
    })
}

/// Summed teacher-forced loss of `model` on one pair (ids without EOS), no
/// smoothing.
pub fn teacher_forced_loss(model: &TransformerModel, src: &[usize], tgt: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let enc = b.encode(&mut tape, EncoderInput::Hard(&[with_eos(src)]), None)?;
    let (inp, out) = shift_right(tgt);
    let logits = b.decode(&mut tape, &enc, &[inp], &[0], None)?;
    let l = tape.cross_entropy(logits, &out, 0.0, PAD)?;
    Ok(tape.value(l).item())
}

/// Summed target loss of the pivot→target model when its encoder reads the
/// training-phase bridge of `rows` (`[len × pivot vocab]`).
pub fn target_loss_from_rows(
    pt: &TransformerModel,
    rows: &Tensor,
    tgt: &[usize],
    bridge: &BridgeConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = pt.bind(&mut tape, false);
    let r = tape.constant(rows.clone());
    let w = bridge_weights_on_tape(&mut tape, r, bridge)?;
    let enc = b.encode(
        &mut tape,
        EncoderInput::Soft {
            weights: w,
            lens: &[rows.rows()],
        },
        None,
    )?;
    let (inp, out) = shift_right(tgt);
    let logits = b.decode(&mut tape, &enc, &[inp], &[0], None)?;
    let l = tape.cross_entropy(logits, &out, 0.0, PAD)?;
    Ok(tape.value(l).item())
}

/// One-hot rows for `ids`.
pub fn one_hot_rows(ids: &[usize], vocab: usize) -> Result<Tensor> {
    let mut data = vec![0.0; ids.len() * vocab];
    for (r, &t) in ids.iter().enumerate() {
        if t >= vocab {
            return Err(Error::Index {
                what: "vocabulary",
                index: t,
                size: vocab,
            });
        }
        data[r * vocab + t] = 1.0;
    }
    Tensor::new(vec![ids.len(), vocab], data)
}
