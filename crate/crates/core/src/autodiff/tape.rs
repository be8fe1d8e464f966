use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;

use super::tensor::{dot, gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One query segment attending to one key segment in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Attention over packed variable-length sequences. Rows of Q/K/V belonging to
/// different sentences never see each other, so no padding is needed.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub segments: Vec<AttnSegment>,
    pub heads: usize,
    /// Query `i` sees keys `0..=i` of its segment.
    pub causal: bool,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    PowRenorm {
        x: Var,
        alpha: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttnLayout>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        pad_id: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Linear record of executed operations. Inputs always precede outputs, so
/// the reverse sweep in [`Tape::backward`] is a topological traversal.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that shares storage with the caller (model parameters, cached states).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present once a backward pass has reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    /// Row-wise bias add: `x[.., d] + b[d]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(b) != [d] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                size: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Raise every row (last axis) to the power `alpha` and re-normalize it to
    /// sum to one. Rows must be non-negative with positive mass.
    pub fn pow_renorm(&mut self, x: Var, alpha: f64) -> Result<Var> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::contract(format!("exponent must be positive, got {alpha}")));
        }
        let t = self.value(x);
        let v = t.cols();
        let mut out = vec![0.0; t.numel()];
        for (r, (src, dst)) in t.data().chunks(v).zip(out.chunks_mut(v)).enumerate() {
            renorm_row(src, alpha, dst).map_err(|e| match e {
                Error::Contract(m) => Error::contract(format!("row {r}: {m}")),
                other => other,
            })?;
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::PowRenorm { x, alpha }, rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; src.len()];
        for r in 0..n {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.mat_dims(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::contract("gather with no ids"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout. `rate == 0` returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let src = self.value(x).data();
        let mask: Vec<f64> = (0..src.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = src.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("shape preserved");
        let rg = self.rg(&[x]);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    /// Multi-head scaled dot-product attention over packed segments.
    /// `q` is `[Nq × d]`, `k` and `v` are `[Nk × d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttnLayout>) -> Result<Var> {
        let (nq, d) = self.mat_dims(q, "attention")?;
        let (nk, dk) = self.mat_dims(k, "attention")?;
        if self.shape(v) != [nk, dk] || dk != d {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![nq, d],
                rhs: self.shape(v).to_vec(),
            });
        }
        let h = layout.heads;
        if h == 0 || d % h != 0 {
            return Err(Error::contract(format!("{d} not divisible into {h} heads")));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::new();
        for seg in &layout.segments {
            if seg.q_start + seg.q_len > nq || seg.k_start + seg.k_len > nk {
                return Err(Error::contract("attention segment out of bounds"));
            }
            if layout.causal && seg.q_len > seg.k_len {
                return Err(Error::contract("causal segment with more queries than keys"));
            }
            for head in 0..h {
                let off = head * dh;
                for i in 0..seg.q_len {
                    let qrow = &qd[(seg.q_start + i) * d + off..][..dh];
                    let visible = if layout.causal { i + 1 } else { seg.k_len };
                    let base = probs.len();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seg.k_len {
                        let s = if j < visible {
                            dot(qrow, &kd[(seg.k_start + j) * d + off..][..dh]) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                        max = max.max(s);
                        probs.push(s);
                    }
                    let mut total = 0.0;
                    for p in &mut probs[base..] {
                        *p = (*p - max).exp();
                        total += *p;
                    }
                    let orow = &mut out[(seg.q_start + i) * d + off..][..dh];
                    for j in 0..visible {
                        let p = probs[base + j] / total;
                        probs[base + j] = p;
                        let vrow = &vd[(seg.k_start + j) * d + off..][..dh];
                        for (o, vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![nq, d], out)?,
            Op::Attention { q, k, v, layout, probs },
            rg,
        ))
    }

    /// Summed label-smoothed negative log-likelihood over rows whose target is
    /// not `pad_id`. The smoothed target puts `1 - ε` on the reference token
    /// and spreads `ε` uniformly over the vocabulary.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64, pad_id: usize) -> Result<Var> {
        let (t, v) = self.mat_dims(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::contract(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                size: v,
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            if y == pad_id {
                continue;
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let prow = &mut probs[r * v..(r + 1) * v];
            let mut sum_logp = 0.0;
            for (p, &x) in prow.iter_mut().zip(row) {
                let lp = x - lse;
                sum_logp += lp;
                *p = lp.exp();
            }
            loss -= (1.0 - smoothing) * (row[y] - lse) + smoothing / v as f64 * sum_logp;
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                pad_id,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// reachable node that requires them; call [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        // Borrow the adjoint slot of an input, allocating zeros on first touch.
        fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if wants(*a) {
                    gemm_bt_acc(g, val(*b), slot(adj, nodes, *a), m, n, k);
                }
                if wants(*b) {
                    gemm_at_acc(val(*a), g, slot(adj, nodes, *b), m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(adj, nodes, v).iter_mut().zip(g).for_each(|(s, x)| *s += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let o = val(other);
                        slot(adj, nodes, v)
                            .iter_mut()
                            .zip(g.iter().zip(o))
                            .for_each(|(s, (x, y))| *s += x * y);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if wants(*x) {
                    slot(adj, nodes, *x).iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
                if wants(*b) {
                    let s = slot(adj, nodes, *b);
                    let d = s.len();
                    for row in g.chunks(d) {
                        s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Scale(x, c) => {
                if wants(*x) {
                    slot(adj, nodes, *x).iter_mut().zip(g).for_each(|(s, v)| *s += c * v);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = val(*x);
                    slot(adj, nodes, *x)
                        .iter_mut()
                        .zip(g.iter().zip(xv))
                        .for_each(|(s, (gv, &xi))| {
                            if xi > 0.0 {
                                *s += gv
                            }
                        });
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    slot(adj, nodes, *x).iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let s = slot(adj, nodes, *x);
                    for o in 0..*outer {
                        for k in 0..*inner {
                            let idx = |j: usize| (o * len + j) * inner + k;
                            let inner_dot: f64 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..*len {
                                s[idx(j)] += y[idx(j)] * (g[idx(j)] - inner_dot);
                            }
                        }
                    }
                }
            }
            Op::PowRenorm { x, alpha } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let xv = val(*x);
                    let v = nodes[i].value.cols();
                    let s = slot(adj, nodes, *x);
                    for r in 0..y.len() / v {
                        let (yr, xr, gr) = (&y[r * v..][..v], &xv[r * v..][..v], &g[r * v..][..v]);
                        let inner_dot = dot(gr, yr);
                        // Raw mass, needed only where x == 0 and alpha == 1.
                        let raw_sum: f64 = xr.iter().sum();
                        for j in 0..v {
                            let ratio = if xr[j] > 0.0 {
                                yr[j] / xr[j]
                            } else if *alpha == 1.0 {
                                1.0 / raw_sum
                            } else {
                                // alpha > 1: derivative vanishes; alpha < 1: take the zero subgradient.
                                0.0
                            };
                            s[r * v + j] += alpha * ratio * (gr[j] - inner_dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = nodes[gamma.0].value.numel();
                if wants(*gamma) {
                    let s = slot(adj, nodes, *gamma);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*beta) {
                    let s = slot(adj, nodes, *beta);
                    for gr in g.chunks(d) {
                        s.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
                if wants(*x) {
                    let gam = val(*gamma);
                    let s = slot(adj, nodes, *x);
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            s[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let s = slot(adj, nodes, *table);
                    let d = nodes[i].value.cols();
                    for (r, &id) in ids.iter().enumerate() {
                        s[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if wants(*x) {
                    slot(adj, nodes, *x)
                        .iter_mut()
                        .zip(g.iter().zip(mask))
                        .for_each(|(s, (gv, m))| *s += gv * m);
                }
            }
            Op::Attention { q, k, v, layout, probs } => self.attention_backward(g, *q, *k, *v, layout, probs, adj),
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                pad_id,
                probs,
            } => {
                if wants(*logits) {
                    let vsz = nodes[logits.0].value.cols();
                    let uniform = smoothing / vsz as f64;
                    let s = slot(adj, nodes, *logits);
                    for (r, &y) in targets.iter().enumerate() {
                        if y == *pad_id {
                            continue;
                        }
                        for j in 0..vsz {
                            let target = uniform + if j == y { 1.0 - smoothing } else { 0.0 };
                            s[r * vsz + j] += g[0] * (probs[r * vsz + j] - target);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        layout: &AttnLayout,
        probs: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let (wq, wk, wv) = (
            nodes[q.0].requires_grad,
            nodes[k.0].requires_grad,
            nodes[v.0].requires_grad,
        );
        let d = nodes[q.0].value.cols();
        let dh = d / layout.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            nodes[q.0].value.data(),
            nodes[k.0].value.data(),
            nodes[v.0].value.data(),
        );
        let mut dq = if wq { vec![0.0; qd.len()] } else { Vec::new() };
        let mut dk = if wk { vec![0.0; kd.len()] } else { Vec::new() };
        let mut dv = if wv { vec![0.0; vd.len()] } else { Vec::new() };
        let mut pos = 0;
        let mut dp = Vec::new();
        for seg in &layout.segments {
            for head in 0..layout.heads {
                let off = head * dh;
                for i in 0..seg.q_len {
                    let p = &probs[pos..pos + seg.k_len];
                    pos += seg.k_len;
                    let visible = if layout.causal { i + 1 } else { seg.k_len };
                    let grow = &g[(seg.q_start + i) * d + off..][..dh];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate().take(visible) {
                        let krow = (seg.k_start + j) * d + off;
                        dp.push(dot(grow, &vd[krow..krow + dh]));
                        if wv {
                            for (a, gv) in dv[krow..krow + dh].iter_mut().zip(grow) {
                                *a += pj * gv;
                            }
                        }
                    }
                    if !(wq || wk) {
                        continue;
                    }
                    let pd: f64 = (0..visible).map(|j| p[j] * dp[j]).sum();
                    let qrow = (seg.q_start + i) * d + off;
                    for j in 0..visible {
                        let ds = p[j] * (dp[j] - pd) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (seg.k_start + j) * d + off;
                        if wq {
                            for (a, kv) in dq[qrow..qrow + dh].iter_mut().zip(&kd[krow..krow + dh]) {
                                *a += ds * kv;
                            }
                        }
                        if wk {
                            for (a, qv) in dk[krow..krow + dh].iter_mut().zip(&qd[qrow..qrow + dh]) {
                                *a += ds * qv;
                            }
                        }
                    }
                }
            }
        }
        for (var, grad, want) in [(q, dq, wq), (k, dk, wk), (v, dv, wv)] {
            if !want {
                continue;
            }
            match &mut adj[var.0] {
                Some(s) => s.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(grad),
            }
        }
    }
}

/// `dst = src^alpha / Σ src^alpha`, evaluated in the log domain so large
/// exponents cannot overflow.
pub(crate) fn renorm_row(src: &[f64], alpha: f64, dst: &mut [f64]) -> Result<()> {
    if src.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::contract("distribution has a negative or non-finite entry"));
    }
    if src.iter().all(|&p| p == 0.0) {
        return Err(Error::contract("distribution has zero mass"));
    }
    if alpha == 1.0 {
        let total: f64 = src.iter().sum();
        for (d, s) in dst.iter_mut().zip(src) {
            *d = s / total;
        }
        return Ok(());
    }
    let max_log = src
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| alpha * p.ln())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = if s > 0.0 { (alpha * s.ln() - max_log).exp() } else { 0.0 };
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
    Ok(())
}
