use std::sync::Arc;

use log::{info, warn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{cascade_forward, cascade_graph, CascadeModel, GraphOptions, LossWeights, TrilingualExample};
use crate::autodiff::{Tape, Tensor};
use crate::data::{bucket_batches, ParallelCorpus, Vocab, PAD};
use crate::decoding::{beam_search, cascade_decode, BeamConfig, CascadeDecodeConfig, Conditioned, PivotInput};
use crate::error::{Error, Result};
use crate::eval::{bleu, ids_to_string};
use crate::seed::rng_for;
use crate::softbridge::BridgeConfig;
use crate::transformer::{clip_factor, grad_norm_sq, shift_right, Adam, AdamConfig, EncoderInput, TransformerModel};

/// Source and target ids, without EOS.
pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Batch budget in `sentences × longest side` tokens.
    pub max_tokens: usize,
    pub optim: AdamConfig,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            max_tokens: 512,
            optim: AdamConfig::default(),
            eval_every: 200,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.max_tokens == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "steps, max_tokens and eval_every must be positive".into(),
            ));
        }
        if self.optim.peak_lr.is_nan() || self.optim.peak_lr <= 0.0 {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidPoint {
    pub step: usize,
    /// Per-token loss.
    pub loss: f64,
    pub bleu: Option<f64>,
}

impl ValidPoint {
    /// Higher BLEU wins, then lower loss.
    fn beats(&self, other: &ValidPoint) -> bool {
        match (self.bleu, other.bleu) {
            (Some(a), Some(b)) if a != b => a > b,
            _ => self.loss < other.loss,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// `(step, mean per-token training loss since the previous point)`.
    pub train: Vec<(usize, f64)>,
    pub valid: Vec<ValidPoint>,
}

/// Models the optimizer can update.
trait Params: Clone {
    fn params(&self) -> Vec<&Arc<Tensor>>;
    fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>>;
}

impl Params for TransformerModel {
    fn params(&self) -> Vec<&Arc<Tensor>> {
        TransformerModel::params(self).iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        TransformerModel::params_mut(self).iter_mut().collect()
    }
}

impl Params for CascadeModel {
    fn params(&self) -> Vec<&Arc<Tensor>> {
        self.sp.params().iter().chain(self.pt.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        self.sp
            .params_mut()
            .iter_mut()
            .chain(self.pt.params_mut().iter_mut())
            .collect()
    }
}

struct StepResult {
    loss_sum: f64,
    tokens: usize,
    grads: Vec<Option<Vec<f64>>>,
}

struct Trained<M> {
    best: M,
    curve: LossCurve,
    best_point: ValidPoint,
}

fn train_loop<M: Params>(
    mut model: M,
    cfg: &TrainConfig,
    lengths: &[usize],
    label: &str,
    mut step_fn: impl FnMut(&M, &[usize], &mut ChaCha8Rng) -> Result<StepResult>,
    mut evaluate: impl FnMut(&M, usize) -> Result<ValidPoint>,
) -> Result<Trained<M>> {
    cfg.validate()?;
    if lengths.is_empty() {
        return Err(Error::contract(format!("{label}: empty training set")));
    }
    let mut opt = Adam::new(cfg.optim.clone(), model.params());
    let mut rng = rng_for(cfg.seed, &format!("{label}/dropout"));
    let mut epoch = 0u64;
    let mut batches = bucket_batches(lengths, cfg.max_tokens, cfg.seed, epoch)?;
    let mut cursor = 0;
    let mut curve = LossCurve::default();
    let mut best: Option<(M, ValidPoint)> = None;
    let (mut win_loss, mut win_tokens) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        if cursor == batches.len() {
            epoch += 1;
            batches = bucket_batches(lengths, cfg.max_tokens, cfg.seed, epoch)?;
            cursor = 0;
        }
        let r = step_fn(&model, &batches[cursor], &mut rng)?;
        cursor += 1;
        if !r.loss_sum.is_finite() {
            return Err(Error::Divergence { step, loss: r.loss_sum });
        }
        let inv = 1.0 / r.tokens.max(1) as f64;
        let norm = grad_norm_sq(&r.grads).sqrt() * inv;
        opt.step(
            model.params_mut(),
            &r.grads,
            inv * clip_factor(norm, cfg.optim.clip_norm),
        );
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                step,
                loss: r.loss_sum * inv,
            });
        }
        win_loss += r.loss_sum;
        win_tokens += r.tokens;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let train_loss = win_loss / win_tokens.max(1) as f64;
            curve.train.push((step, train_loss));
            (win_loss, win_tokens) = (0.0, 0);
            let point = evaluate(&model, step)?;
            info!(
                "{label} step {step}: train {train_loss:.4} valid {:.4}{}",
                point.loss,
                point.bleu.map_or(String::new(), |b| format!(" bleu {b:.2}"))
            );
            if best.as_ref().is_none_or(|(_, b)| point.beats(b)) {
                best = Some((model.clone(), point.clone()));
            }
            curve.valid.push(point);
        }
    }
    let (best, best_point) = best.expect("at least one evaluation");
    Ok(Trained {
        best,
        curve,
        best_point,
    })
}

/// Map a text corpus to id pairs.
pub fn encode_pairs(corpus: &ParallelCorpus, src: &Vocab, tgt: &Vocab) -> Vec<Pair> {
    corpus.pairs().map(|(s, t)| (src.encode(s), tgt.encode(t))).collect()
}

fn with_eos(x: &[usize]) -> Vec<usize> {
    let mut v = x.to_vec();
    v.push(crate::data::EOS);
    v
}

/// Summed loss, token count and (optionally) gradients of a pair batch.
fn pair_batch(
    model: &TransformerModel,
    batch: &[&Pair],
    rng: Option<&mut ChaCha8Rng>,
    train: bool,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, train);
    let srcs: Vec<Vec<usize>> = batch.iter().map(|(s, _)| with_eos(s)).collect();
    let (tin, tout): (Vec<_>, Vec<_>) = batch.iter().map(|(_, t)| shift_right(t)).unzip();
    let seg: Vec<usize> = (0..batch.len()).collect();
    let mut rng = rng;
    let enc = b.encode(&mut tape, EncoderInput::Hard(&srcs), rng.as_deref_mut())?;
    let logits = b.decode(&mut tape, &enc, &tin, &seg, rng)?;
    let flat: Vec<usize> = tout.concat();
    let smoothing = if train { model.config().label_smoothing } else { 0.0 };
    let loss = tape.cross_entropy(logits, &flat, smoothing, PAD)?;
    let loss_sum = tape.value(loss).item();
    let grads = if train {
        tape.backward(loss)?;
        b.vars().iter().map(|&v| tape.take_grad(v)).collect()
    } else {
        Vec::new()
    };
    Ok(StepResult {
        loss_sum,
        tokens: flat.len(),
        grads,
    })
}

const EVAL_CHUNK: usize = 64;

/// Per-token teacher-forced loss with dropout and smoothing off.
pub fn valid_loss(model: &TransformerModel, pairs: &[Pair]) -> Result<f64> {
    let (mut sum, mut tokens) = (0.0, 0);
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let r = pair_batch(model, &refs, None, false)?;
        sum += r.loss_sum;
        tokens += r.tokens;
    }
    Ok(sum / tokens.max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters at the best validation point.
    pub model: TransformerModel,
    pub curve: LossCurve,
    pub best: ValidPoint,
}

/// Train one direction on parallel data, keeping the checkpoint with the
/// lowest validation loss.
pub fn pretrain(init: TransformerModel, train: &[Pair], valid: &[Pair], cfg: &TrainConfig) -> Result<PretrainOutcome> {
    if valid.is_empty() {
        return Err(Error::contract("pretraining needs a validation set"));
    }
    let lengths: Vec<usize> = train.iter().map(|(s, t)| s.len().max(t.len()) + 1).collect();
    let t = train_loop(
        init,
        cfg,
        &lengths,
        "pretrain",
        |m, idx, rng| {
            let batch: Vec<&Pair> = idx.iter().map(|&i| &train[i]).collect();
            pair_batch(m, &batch, Some(rng), true)
        },
        |m, step| {
            Ok(ValidPoint {
                step,
                loss: valid_loss(m, valid)?,
                bleu: None,
            })
        },
    )?;
    Ok(PretrainOutcome {
        model: t.best,
        curve: t.curve,
        best: t.best_point,
    })
}

/// Top beam hypothesis of the source→pivot model for every source sentence.
/// Empty decodes are kept (the pivot is then just EOS) and logged.
pub fn generate_pseudo_pivot(sp: &TransformerModel, srcs: &[Vec<usize>], beam: &BeamConfig) -> Result<Vec<Vec<usize>>> {
    let cfg = BeamConfig {
        n_best: 1,
        ..beam.clone()
    };
    let mut out = Vec::with_capacity(srcs.len());
    for (i, s) in srcs.iter().enumerate() {
        let model = Conditioned {
            model: sp,
            enc: sp.encode_hard(&with_eos(s))?,
        };
        let best = beam_search(&model, &cfg)?.remove(0);
        let piv = best.content().to_vec();
        if piv.is_empty() {
            warn!("pseudo-pivot for sentence {i} is empty");
        }
        out.push(piv);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Keys missing from a partial table keep the fine-tuning defaults, not
    /// the pretraining ones.
    #[serde(deserialize_with = "finetune_train")]
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub bridge: BridgeConfig,
    /// Generation limit for validation decoding.
    pub max_decode_len: usize,
    /// Keep dropout active in the source→pivot half while fine-tuning.
    pub sp_dropout: bool,
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(x) => merge_toml(x, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn finetune_train<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    use serde::de::Error as _;
    let partial = toml::Value::deserialize(d)?;
    let mut merged = toml::Value::try_from(FinetuneConfig::default().train).map_err(D::Error::custom)?;
    merge_toml(&mut merged, partial);
    merged.try_into().map_err(D::Error::custom)
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let pre = TrainConfig::default();
        Self {
            train: TrainConfig {
                steps: 1000,
                optim: AdamConfig {
                    peak_lr: pre.optim.peak_lr / 10.0,
                    warmup_steps: 100,
                    ..pre.optim.clone()
                },
                ..pre
            },
            weights: LossWeights::default(),
            bridge: BridgeConfig::default(),
            max_decode_len: 15,
            sp_dropout: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: CascadeModel,
    pub curve: LossCurve,
    pub best: ValidPoint,
}

/// Greedy cascade BLEU and per-token joint loss on `valid`.
pub fn cascade_validation(cm: &CascadeModel, valid: &[TrilingualExample], cfg: &FinetuneConfig) -> Result<(f64, f64)> {
    let greedy = BeamConfig {
        beam_size: 1,
        n_best: 1,
        max_len: cfg.max_decode_len,
        length_penalty: 1.0,
        top_k: None,
    };
    let dcfg = CascadeDecodeConfig {
        pivot: greedy.clone(),
        target: greedy,
        ..Default::default()
    };
    let mut hyps = Vec::with_capacity(valid.len());
    let mut refs = Vec::with_capacity(valid.len());
    let (mut loss, mut tokens) = (0.0, 0);
    for chunk in valid.chunks(EVAL_CHUNK) {
        let batch: Vec<&TrilingualExample> = chunk.iter().collect();
        let l = cascade_forward(cm, &batch, cfg.weights, &cfg.bridge)?;
        loss += l.total;
        tokens += l.target_tokens;
    }
    for ex in valid {
        let out = cascade_decode(cm, &with_eos(&ex.src), PivotInput::Soft(&cfg.bridge), &dcfg)?;
        hyps.push(ids_to_string(out.best().target.content()));
        refs.push(ids_to_string(&ex.tgt));
    }
    Ok((bleu(&hyps, &refs)?, loss / tokens.max(1) as f64))
}

/// Joint training of both halves on (source, pseudo-pivot, target) triples.
/// The kept checkpoint has the best validation BLEU, ties going to the lower
/// joint loss.
pub fn finetune(
    init: CascadeModel,
    train: &[TrilingualExample],
    valid: &[TrilingualExample],
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    cfg.bridge.validate()?;
    if valid.is_empty() {
        return Err(Error::contract("fine-tuning needs a validation set"));
    }
    let lengths: Vec<usize> = train.iter().map(TrilingualExample::max_len).collect();
    let t = train_loop(
        init,
        &cfg.train,
        &lengths,
        "finetune",
        |cm, idx, rng| {
            let batch: Vec<&TrilingualExample> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let g = cascade_graph(
                cm,
                &mut tape,
                &batch,
                GraphOptions {
                    weights: cfg.weights,
                    bridge: &cfg.bridge,
                    trainable: true,
                    smoothing: true,
                    sp_dropout: cfg.sp_dropout,
                },
                Some(rng),
            )?;
            let loss_sum = tape.value(g.total).item();
            tape.backward(g.total)?;
            let grads = g.sp_vars.iter().chain(&g.pt_vars).map(|&v| tape.take_grad(v)).collect();
            Ok(StepResult {
                loss_sum,
                tokens: g.target_tokens,
                grads,
            })
        },
        |cm, step| {
            let (b, loss) = cascade_validation(cm, valid, cfg)?;
            Ok(ValidPoint {
                step,
                loss,
                bleu: Some(b),
            })
        },
    )?;
    Ok(FinetuneOutcome {
        model: t.best,
        curve: t.curve,
        best: t.best_point,
    })
}
