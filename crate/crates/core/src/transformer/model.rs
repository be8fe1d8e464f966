use std::rc::Rc;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use super::config::TransformerConfig;
use crate::autodiff::{AttnLayout, AttnSegment, Tape, Tensor, Var};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::seed::rng_for;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncLayer {
    norm1: NormIdx,
    attn: AttnIdx,
    norm2: NormIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct DecLayer {
    norm1: NormIdx,
    self_attn: AttnIdx,
    norm2: NormIdx,
    cross_attn: AttnIdx,
    norm3: NormIdx,
    ffn: FfnIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    src_embed: usize,
    tgt_embed: usize,
    encoder: Vec<EncLayer>,
    enc_norm: NormIdx,
    decoder: Vec<DecLayer>,
    dec_norm: NormIdx,
    out_w: usize,
    out_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform with bound `sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Uniform with standard deviation `d_model^-1/2`.
    Embedding,
    Zeros,
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIdx {
        let mut w = |n: &str| self.add(format!("{p}.{n}"), vec![d, d], Init::Xavier);
        let (wq, wk, wv, wo) = (w("wq"), w("wk"), w("wv"), w("wo"));
        let mut b = |n: &str| self.add(format!("{p}.{n}"), vec![d], Init::Zeros);
        AttnIdx {
            wq,
            bq: b("bq"),
            wk,
            bk: b("bk"),
            wv,
            bv: b("bv"),
            wo,
            bo: b("bo"),
        }
    }

    fn norm(&mut self, p: &str, d: usize) -> NormIdx {
        NormIdx {
            gain: self.add(format!("{p}.gain"), vec![d], Init::Ones),
            bias: self.add(format!("{p}.bias"), vec![d], Init::Zeros),
        }
    }

    fn ffn(&mut self, p: &str, d: usize, ff: usize) -> FfnIdx {
        FfnIdx {
            w1: self.add(format!("{p}.w1"), vec![d, ff], Init::Xavier),
            b1: self.add(format!("{p}.b1"), vec![ff], Init::Zeros),
            w2: self.add(format!("{p}.w2"), vec![ff, d], Init::Xavier),
            b2: self.add(format!("{p}.b2"), vec![d], Init::Zeros),
        }
    }
}

fn build_layout(cfg: &TransformerConfig) -> (Layout, Builder) {
    let d = cfg.d_model;
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let src_embed = b.add("encoder.embed".into(), vec![cfg.src_vocab_size, d], Init::Embedding);
    let tgt_embed = b.add("decoder.embed".into(), vec![cfg.tgt_vocab_size, d], Init::Embedding);
    let encoder = (0..cfg.num_layers)
        .map(|l| {
            let p = format!("encoder.layers.{l}");
            EncLayer {
                norm1: b.norm(&format!("{p}.norm1"), d),
                attn: b.attn(&format!("{p}.self_attn"), d),
                norm2: b.norm(&format!("{p}.norm2"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ff),
            }
        })
        .collect();
    let enc_norm = b.norm("encoder.norm", d);
    let decoder = (0..cfg.num_layers)
        .map(|l| {
            let p = format!("decoder.layers.{l}");
            DecLayer {
                norm1: b.norm(&format!("{p}.norm1"), d),
                self_attn: b.attn(&format!("{p}.self_attn"), d),
                norm2: b.norm(&format!("{p}.norm2"), d),
                cross_attn: b.attn(&format!("{p}.cross_attn"), d),
                norm3: b.norm(&format!("{p}.norm3"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ff),
            }
        })
        .collect();
    let dec_norm = b.norm("decoder.norm", d);
    let out_w = b.add("decoder.out.w".into(), vec![d, cfg.tgt_vocab_size], Init::Xavier);
    let out_b = b.add("decoder.out.b".into(), vec![cfg.tgt_vocab_size], Init::Zeros);
    (
        Layout {
            src_embed,
            tgt_embed,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            out_w,
            out_b,
        },
        b,
    )
}

fn sinusoid_table(max_len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[pos * d + 2 * i] = angle.sin();
            pe[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    pe
}

/// Pre-norm encoder–decoder transformer with sinusoidal positions.
///
/// Parameters live behind `Arc`s: cloning a model is cheap and binding it to a
/// tape does not copy weights. The encoder embedding matrix (`encoder.embed`,
/// `[src_vocab × d_model]`) is the table the soft bridge mixes.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    config: TransformerConfig,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
    layout: Layout,
    pos_enc: Arc<Vec<f64>>,
}

/// Encoder input for a packed batch.
pub enum EncoderInput<'a> {
    /// One token id sequence per sentence (EOS included by the caller).
    Hard(&'a [Vec<usize>]),
    /// `[Σ len × src_vocab]` non-negative weights already on the tape; `lens`
    /// gives the rows belonging to each sentence.
    Soft { weights: Var, lens: &'a [usize] },
}

/// Packed encoder states on a tape.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub states: Var,
    /// `(start_row, len)` per sentence.
    pub segments: Vec<(usize, usize)>,
}

/// Encoder states of a single sentence, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub states: Arc<Tensor>,
    /// Always all-false: sentences are never padded.
    pub pad_mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }
}

/// A model's parameters bound to a tape.
pub struct Bound<'m> {
    model: &'m TransformerModel,
    vars: Vec<Var>,
}

impl TransformerModel {
    /// Deterministic in `seed`.
    pub fn init(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(&config);
        let mut rng = rng_for(seed, "transformer/init");
        let d = config.d_model as f64;
        let params = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(shape, init)| {
                let t = match init {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, 1.0),
                    Init::Xavier => {
                        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        Tensor::uniform(shape, bound, &mut rng)
                    }
                    Init::Embedding => Tensor::uniform(shape, (3.0 / d).sqrt(), &mut rng),
                };
                Arc::new(t)
            })
            .collect();
        let pos_enc = Arc::new(sinusoid_table(config.max_len, config.d_model));
        Ok(Self {
            config,
            names: b.names,
            params,
            layout,
            pos_enc,
        })
    }

    /// Rebuild from named tensors, checking every name and shape.
    pub fn from_named(config: TransformerConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, b) = build_layout(&config);
        if tensors.len() != b.names.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                b.names.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, t), (want, shape)) in tensors.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "tensor {name} {:?} does not match expected {want} {shape:?}",
                    t.shape()
                )));
            }
            params.push(Arc::new(t));
        }
        let pos_enc = Arc::new(sinusoid_table(config.max_len, config.d_model));
        Ok(Self {
            config,
            names: b.names,
            params,
            layout,
            pos_enc,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Arc<Tensor>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &*self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// The encoder input embedding table `E`.
    pub fn source_embedding(&self) -> &Tensor {
        &self.params[self.layout.src_embed]
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf_shared(p.clone(), trainable))
            .collect();
        Bound { model: self, vars }
    }

    // ---- single-sentence inference conveniences (dropout off, no gradients) ----

    pub fn encode_hard(&self, tokens: &[usize]) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let enc = b.encode(&mut tape, EncoderInput::Hard(&[tokens.to_vec()]), None)?;
        Ok(EncoderOutput {
            states: tape.shared_value(enc.states),
            pad_mask: vec![false; tokens.len()],
        })
    }

    /// Encoder run on a `[L × src_vocab]` weight matrix.
    pub fn encode_soft(&self, weights: &Tensor) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let rows = weights.rows();
        let w = tape.constant(weights.clone());
        let enc = b.encode(
            &mut tape,
            EncoderInput::Soft {
                weights: w,
                lens: &[rows],
            },
            None,
        )?;
        Ok(EncoderOutput {
            states: tape.shared_value(enc.states),
            pad_mask: vec![false; rows],
        })
    }

    /// `[T × tgt_vocab]` logits for decoder input `tgt_in` (starting with BOS).
    pub fn decode_teacher_forced(&self, enc: &EncoderOutput, tgt_in: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let states = tape.leaf_shared(enc.states.clone(), false);
        let e = Encoded {
            states,
            segments: vec![(0, enc.len())],
        };
        let logits = b.decode(&mut tape, &e, &[tgt_in.to_vec()], &[0], None)?;
        Ok(tape.value(logits).clone())
    }

    /// Next-token distribution after `prefix` (which starts with BOS).
    pub fn decode_step(&self, enc: &EncoderOutput, prefix: &[usize]) -> Result<Vec<f64>> {
        Ok(self.decode_step_batch(enc, &[prefix.to_vec()])?.pop().unwrap())
    }

    /// Next-token distributions for several prefixes over the same source.
    pub fn decode_step_batch(&self, enc: &EncoderOutput, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        for p in prefixes {
            if p.first() != Some(&BOS) {
                return Err(Error::contract("decoder prefix must start with BOS"));
            }
        }
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let states = tape.leaf_shared(enc.states.clone(), false);
        let e = Encoded {
            states,
            segments: vec![(0, enc.len())],
        };
        let enc_for = vec![0; prefixes.len()];
        let logits = b.decode(&mut tape, &e, prefixes, &enc_for, None)?;
        let probs = tape.softmax(logits, 1)?;
        let v = tape.value(probs);
        let mut row = 0;
        Ok(prefixes
            .iter()
            .map(|p| {
                row += p.len();
                v.row(row - 1).to_vec()
            })
            .collect())
    }
}

impl<'m> Bound<'m> {
    pub fn model(&self) -> &'m TransformerModel {
        self.model
    }

    /// Tape handles of the parameters, in [`TransformerModel::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn p(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn cfg(&self) -> &TransformerConfig {
        &self.model.config
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        match rng.as_deref_mut() {
            Some(r) => tape.dropout(x, self.cfg().dropout_rate, r),
            None => x,
        }
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = tape.matmul(x, self.p(w))?;
        tape.add_bias(y, self.p(b))
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: NormIdx) -> Result<Var> {
        tape.layer_norm(x, self.p(n.gain), self.p(n.bias), LN_EPS)
    }

    fn mha(&self, tape: &mut Tape, a: AttnIdx, xq: Var, xkv: Var, layout: Rc<AttnLayout>) -> Result<Var> {
        let q = self.linear(tape, xq, a.wq, a.bq)?;
        let k = self.linear(tape, xkv, a.wk, a.bk)?;
        let v = self.linear(tape, xkv, a.wv, a.bv)?;
        let o = tape.attention(q, k, v, layout)?;
        self.linear(tape, o, a.wo, a.bo)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, f: FfnIdx) -> Result<Var> {
        let h = self.linear(tape, x, f.w1, f.b1)?;
        let h = tape.relu(h);
        self.linear(tape, h, f.w2, f.b2)
    }

    /// `sqrt(d) · emb + PE` for packed rows.
    fn position(&self, tape: &mut Tape, emb: Var, lens: &[usize]) -> Result<Var> {
        let d = self.cfg().d_model;
        let max = self.cfg().max_len;
        let mut pe = Vec::with_capacity(lens.iter().sum::<usize>() * d);
        for &l in lens {
            if l > max {
                return Err(Error::Length { len: l, max });
            }
            pe.extend_from_slice(&self.model.pos_enc[..l * d]);
        }
        let scaled = tape.scale(emb, (d as f64).sqrt());
        let pe = tape.constant(Tensor::new(vec![pe.len() / d, d], pe)?);
        tape.add(scaled, pe)
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        input: EncoderInput<'_>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Encoded> {
        let vocab = self.cfg().src_vocab_size;
        let (emb, lens): (Var, Vec<usize>) = match input {
            EncoderInput::Hard(seqs) => {
                if seqs.iter().any(Vec::is_empty) {
                    return Err(Error::contract("empty source sequence"));
                }
                let ids: Vec<usize> = seqs.concat();
                (
                    tape.gather(self.p(self.model.layout.src_embed), &ids)?,
                    seqs.iter().map(Vec::len).collect(),
                )
            }
            EncoderInput::Soft { weights, lens } => {
                let w = tape.value(weights);
                if w.shape().len() != 2 || w.cols() != vocab || w.rows() != lens.iter().sum::<usize>() {
                    return Err(Error::Shape {
                        op: "encode_soft",
                        lhs: w.shape().to_vec(),
                        rhs: vec![lens.iter().sum(), vocab],
                    });
                }
                if let Some(bad) = w.data().iter().find(|x| x.is_nan() || **x < 0.0) {
                    return Err(Error::contract(format!("soft encoder input has weight {bad}")));
                }
                if lens.contains(&0) {
                    return Err(Error::contract("empty source sequence"));
                }
                (
                    tape.matmul(weights, self.p(self.model.layout.src_embed))?,
                    lens.to_vec(),
                )
            }
        };
        let mut x = self.position(tape, emb, &lens)?;
        x = self.dropout(tape, x, &mut rng);

        let mut segments = Vec::with_capacity(lens.len());
        let mut start = 0;
        for &l in &lens {
            segments.push((start, l));
            start += l;
        }
        let layout = Rc::new(AttnLayout {
            segments: segments
                .iter()
                .map(|&(s, l)| AttnSegment {
                    q_start: s,
                    q_len: l,
                    k_start: s,
                    k_len: l,
                })
                .collect(),
            heads: self.cfg().num_heads,
            causal: false,
        });
        for layer in &self.model.layout.encoder {
            let h = self.norm(tape, x, layer.norm1)?;
            let h = self.mha(tape, layer.attn, h, h, layout.clone())?;
            let h = self.dropout(tape, h, &mut rng);
            x = tape.add(x, h)?;
            let h = self.norm(tape, x, layer.norm2)?;
            let h = self.ffn(tape, h, layer.ffn)?;
            let h = self.dropout(tape, h, &mut rng);
            x = tape.add(x, h)?;
        }
        let states = self.norm(tape, x, self.model.layout.enc_norm)?;
        Ok(Encoded { states, segments })
    }

    /// Teacher-forced decoder logits, `[Σ len(tgt_in) × tgt_vocab]`. Target
    /// sentence `i` attends to encoder segment `enc_for[i]`.
    pub fn decode(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        tgt_in: &[Vec<usize>],
        enc_for: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if tgt_in.len() != enc_for.len() {
            return Err(Error::contract("one encoder segment per target sentence required"));
        }
        if tgt_in.iter().any(Vec::is_empty) {
            return Err(Error::contract("empty decoder input"));
        }
        let lens: Vec<usize> = tgt_in.iter().map(Vec::len).collect();
        let ids: Vec<usize> = tgt_in.concat();
        let emb = tape.gather(self.p(self.model.layout.tgt_embed), &ids)?;
        let mut x = self.position(tape, emb, &lens)?;
        x = self.dropout(tape, x, &mut rng);

        let mut self_segs = Vec::with_capacity(lens.len());
        let mut cross_segs = Vec::with_capacity(lens.len());
        let mut start = 0;
        for (&l, &e) in lens.iter().zip(enc_for) {
            let &(ks, kl) = enc.segments.get(e).ok_or(Error::Index {
                what: "encoder segment",
                index: e,
                size: enc.segments.len(),
            })?;
            self_segs.push(AttnSegment {
                q_start: start,
                q_len: l,
                k_start: start,
                k_len: l,
            });
            cross_segs.push(AttnSegment {
                q_start: start,
                q_len: l,
                k_start: ks,
                k_len: kl,
            });
            start += l;
        }
        let heads = self.cfg().num_heads;
        let self_layout = Rc::new(AttnLayout {
            segments: self_segs,
            heads,
            causal: true,
        });
        let cross_layout = Rc::new(AttnLayout {
            segments: cross_segs,
            heads,
            causal: false,
        });
        for layer in &self.model.layout.decoder {
            let h = self.norm(tape, x, layer.norm1)?;
            let h = self.mha(tape, layer.self_attn, h, h, self_layout.clone())?;
            let h = self.dropout(tape, h, &mut rng);
            x = tape.add(x, h)?;
            let h = self.norm(tape, x, layer.norm2)?;
            let h = self.mha(tape, layer.cross_attn, h, enc.states, cross_layout.clone())?;
            let h = self.dropout(tape, h, &mut rng);
            x = tape.add(x, h)?;
            let h = self.norm(tape, x, layer.norm3)?;
            let h = self.ffn(tape, h, layer.ffn)?;
            let h = self.dropout(tape, h, &mut rng);
            x = tape.add(x, h)?;
        }
        let h = self.norm(tape, x, self.model.layout.dec_norm)?;
        let l = &self.model.layout;
        self.linear(tape, h, l.out_w, l.out_b)
    }
}

/// `(decoder input, decoder target)` for teacher forcing: `BOS y` and `y EOS`.
pub fn shift_right(y: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut inp = Vec::with_capacity(y.len() + 1);
    inp.push(BOS);
    inp.extend_from_slice(y);
    let mut out = y.to_vec();
    out.push(EOS);
    (inp, out)
}
