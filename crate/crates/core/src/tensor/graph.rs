//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] borrows the [`ParamSet`] for the duration of one forward pass.
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order for the backward sweep.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{gelu_grad_scalar, gelu_scalar, layer_norm_forward, softmax_in_place};
use super::{gemm, Float, GradStore, MatMut, ParamId, ParamSet, Tensor};
use crate::attention::{packed_forward, segment_backward, AttnLayout, RopeTable};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Softmax(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    WeightedMean {
        weights: Var,
        parts: Vec<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttnLayout>,
        probs: Vec<Vec<T>>,
    },
    Rope {
        x: Var,
        table: Arc<RopeTable>,
        positions: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        scale: T,
        smoothing: T,
        probs: Vec<T>,
        row_nll: Vec<f64>,
    },
    Dropout {
        x: Var,
        keep: Vec<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Float> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    grad_enabled: bool,
    backward_done: bool,
    rng: Option<ChaCha8Rng>,
}

impl<'p, T: Float> Graph<'p, T> {
    /// Tape that records gradients for every unfrozen parameter.
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
            backward_done: false,
            rng: None,
        }
    }

    /// Forward-only evaluation: nothing requires gradients.
    pub fn inference(params: &'p ParamSet<T>) -> Self {
        Graph { grad_enabled: false, ..Graph::new(params) }
    }

    /// Seeds the generator used by [`Graph::dropout`].
    pub fn with_dropout_seed(mut self, seed: u64) -> Self {
        self.rng = Some(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => &self.params.get(*id).value,
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let rg = self.grad_enabled && !self.params.get(id).frozen;
        self.nodes.push(Node { value: None, op: Op::Param(id), requires_grad: rg });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::ops::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x * W` for a parameter matrix `W`.
    pub fn linear(&mut self, x: Var, w: ParamId) -> Result<Var> {
        let w = self.param(w);
        self.matmul(x, w)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!("mul {:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, eps: f64) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        let tx = self.value(x);
        let d = tx.cols();
        let (tg, tb) = (self.value(g), self.value(b));
        if tg.len() != d || tb.len() != d {
            return Err(Error::dim(format!("layer_norm affine {} for width {d}", tg.len())));
        }
        let (out, mean, rstd) = layer_norm_forward(tx.data(), d, tg.data(), tb.data(), T::of(eps));
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, g, b]);
        let (mean, rstd) = if rg { (mean, rstd) } else { (Vec::new(), Vec::new()) };
        Ok(self.push(out, Op::LayerNorm { x, gamma: g, beta: b, mean, rstd }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        if out.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Rows of the embedding table selected by `ids`.
    pub fn embedding(&mut self, table: ParamId, ids: &[usize]) -> Result<Var> {
        let t = self.param(table);
        let tv = self.value(t);
        let (v, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::arg(format!("token id {id} >= vocab {v}")));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.any_grad(&[t]);
        Ok(self.push(out, Op::Embedding { table: t, ids: ids.to_vec() }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::dim(format!("gather row {i} of {r}")));
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `(1/K) * sum_k weights[k] * parts[k]`.
    pub fn weighted_mean(&mut self, weights: ParamId, parts: &[Var]) -> Result<Var> {
        let w = self.param(weights);
        let k = parts.len();
        if self.value(w).len() != k || k == 0 {
            return Err(Error::Config(format!("{} fusion weights for {k} groups", self.value(w).len())));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        let inv_k = T::one() / T::of(k as f64);
        let mut acc = vec![T::zero(); self.value(parts[0]).len()];
        for (i, &p) in parts.iter().enumerate() {
            let tp = self.value(p);
            if tp.shape() != shape.as_slice() {
                return Err(Error::dim("fusion group states differ in shape"));
            }
            let wk = self.value(w).data()[i] * inv_k;
            for (a, &x) in acc.iter_mut().zip(tp.data()) {
                *a += wk * x;
            }
        }
        let out = Tensor::new(shape, acc)?;
        let mut all = parts.to_vec();
        all.push(w);
        let rg = self.any_grad(&all);
        Ok(self.push(out, Op::WeightedMean { weights: w, parts: parts.to_vec() }, rg))
    }

    /// Multi-head attention over packed `q [Nq x H*hd]`, `k`/`v [Nk x Hkv*hd]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttnLayout>) -> Result<Var> {
        let rg = self.any_grad(&[q, k, v]);
        let (out, probs) = packed_forward(self.value(q), self.value(k), self.value(v), &layout, rg)?;
        Ok(self.push(out, Op::Attention { q, k, v, layout, probs }, rg))
    }

    /// Rotary embedding of packed heads; row `r` sits at `positions[r]`.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable>, positions: &[usize]) -> Result<Var> {
        let mut out = self.value(x).clone();
        if positions.len() != out.rows() {
            return Err(Error::dim("rope positions do not match rows"));
        }
        let w = out.cols();
        table.apply(out.data_mut(), w, positions, false)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Rope { x, table, positions: positions.to_vec() }, rg))
    }

    /// Inverted dropout with keep probability `1 - p`. Identity when `p == 0`
    /// or when no generator was configured.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 || self.rng.is_none() || !self.grad_enabled {
            return x;
        }
        let n = self.value(x).len();
        let rng = self.rng.as_mut().expect("dropout rng");
        let scale = T::of(1.0 / (1.0 - p));
        let keep: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { scale }).collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&keep).map(|(&a, &k)| a * k).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("dropout shape");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Dropout { x, keep }, rg)
    }

    /// Sum over unmasked rows of `-log softmax(logits)[target]`, divided by
    /// `normalizer` (the number of unmasked rows when `None`).
    ///
    /// With label smoothing `eps` the target distribution is
    /// `(1 - eps) * onehot + eps / V`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
        normalizer: Option<f64>,
        smoothing: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (t, v) = (tl.rows(), tl.cols());
        if targets.len() != t || mask.len() != t {
            return Err(Error::dim(format!("cross_entropy: {t} rows, {} targets, {} mask", targets.len(), mask.len())));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Degenerate("cross_entropy with every position masked".into()));
        }
        let norm = normalizer.unwrap_or(count as f64);
        let rg = self.any_grad(&[logits]);
        let mut probs = if rg { vec![T::zero(); t * v] } else { Vec::new() };
        let mut row_nll = vec![0.0f64; t];
        let mut total = 0.0f64;
        let eps = smoothing;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(Error::arg(format!("target id {} >= vocab {v}", targets[i])));
            }
            let row = tl.row(i);
            let lsm = super::ops::log_softmax_f64(row);
            let nll = -lsm[targets[i]];
            row_nll[i] = nll;
            let loss_i = if eps > 0.0 { (1.0 - eps) * nll - eps / v as f64 * lsm.iter().sum::<f64>() } else { nll };
            total += loss_i;
            if rg {
                for (p, l) in probs[i * v..(i + 1) * v].iter_mut().zip(&lsm) {
                    *p = T::of(l.exp());
                }
            }
        }
        let loss = total / norm;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss}")));
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            scale: T::of(1.0 / norm),
            smoothing: T::of(eps),
            probs,
            row_nll,
        };
        Ok(self.push(Tensor::scalar(T::of(loss)), op, rg))
    }

    /// Per-row negative log-likelihoods recorded by a cross-entropy node.
    pub fn row_losses(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { row_nll, .. } => Some(row_nll),
            _ => None,
        }
    }

    /// Back-propagates from a scalar `loss`. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<GradStore<T>> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward needs a scalar loss"));
        }
        self.backward_done = true;
        let mut store = GradStore::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(store);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, g, &mut grads, &mut store)?;
        }
        Ok(store)
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        store: &mut GradStore<T>,
    ) -> Result<()> {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => {
                store.grads.insert(*id, g);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(T::one(), g.mat(), tb.mat().t(), T::zero(), MatMut::new(&mut da, m, k));
                    accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(T::one(), ta.mat().t(), g.mat(), T::zero(), MatMut::new(&mut db, k, n));
                    accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                if rg(a) && rg(b) {
                    accumulate(grads, *a, g.clone());
                    accumulate(grads, *b, g);
                } else if rg(a) {
                    accumulate(grads, *a, g);
                } else if rg(b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if rg(a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                if rg(b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, Tensor::full(tx.shape(), g.data()[0]));
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let tx = self.value(*x);
                let d = tx.cols();
                let gam = self.value(*gamma).data();
                let mut dx = vec![T::zero(); tx.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let inv_d = T::one() / T::of(d as f64);
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..tx.rows() {
                    let xr = tx.row(r);
                    let gr = g.row(r);
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mu) * rs;
                        dxhat[j] = gr[j] * gam[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    let out = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] = rs * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
                    }
                }
                if rg(x) {
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
                if rg(gamma) {
                    accumulate(grads, *gamma, Tensor::new(vec![d], dgamma)?);
                }
                if rg(beta) {
                    accumulate(grads, *beta, Tensor::new(vec![d], dbeta)?);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g.data().iter().zip(tx.data()).map(|(&gv, &xv)| gv * gelu_grad_scalar(xv)).collect();
                accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.as_ref().expect("softmax value");
                let c = y.cols();
                let mut d = vec![T::zero(); y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        d[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let c = tt.cols();
                let mut d = Tensor::zeros(tt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = d.row_mut(id);
                    for (a, &b) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *a += b;
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::GatherRows { x, idx } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = Tensor::zeros(tx.shape());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = d.row_mut(src);
                    for (a, &b) in dst.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *a += b;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let n = tp.rows();
                    if rg(p) {
                        accumulate(grads, *p, g.slice_rows(row..row + n).reshape(tp.shape())?);
                    }
                    row += n;
                }
            }
            Op::WeightedMean { weights, parts } => {
                let w = self.value(*weights).data();
                let inv_k = T::one() / T::of(parts.len() as f64);
                let mut dw = vec![T::zero(); parts.len()];
                for (k, p) in parts.iter().enumerate() {
                    let tp = self.value(*p);
                    dw[k] = g.data().iter().zip(tp.data()).map(|(&a, &b)| a * b).sum::<T>() * inv_k;
                    if rg(p) {
                        let s = w[k] * inv_k;
                        accumulate(grads, *p, g.map(|v| v * s));
                    }
                }
                if rg(weights) {
                    accumulate(grads, *weights, Tensor::new(vec![parts.len()], dw)?);
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); tq.len()];
                let mut dk = vec![T::zero(); tk.len()];
                let mut dv = vec![T::zero(); tv.len()];
                for (seg, p) in layout.segments.iter().zip(probs) {
                    segment_backward(
                        seg,
                        layout,
                        tq.data(),
                        tk.data(),
                        tv.data(),
                        p,
                        g.data(),
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                }
                if rg(q) {
                    accumulate(grads, *q, Tensor::new(tq.shape().to_vec(), dq)?);
                }
                if rg(k) {
                    accumulate(grads, *k, Tensor::new(tk.shape().to_vec(), dk)?);
                }
                if rg(v) {
                    accumulate(grads, *v, Tensor::new(tv.shape().to_vec(), dv)?);
                }
            }
            Op::Rope { x, table, positions } => {
                let mut d = g;
                let w = d.cols();
                table.apply(d.data_mut(), w, positions, true)?;
                accumulate(grads, *x, d);
            }
            Op::Dropout { x, keep } => {
                let d = g.data().iter().zip(keep).map(|(&a, &k)| a * k).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::CrossEntropy { logits, targets, mask, scale, smoothing, probs, .. } => {
                let tl = self.value(*logits);
                let v = tl.cols();
                let gs = g.data()[0] * *scale;
                let eps = *smoothing;
                let uniform = eps / T::of(v as f64);
                let mut d = vec![T::zero(); tl.len()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let dr = &mut d[r * v..(r + 1) * v];
                    for (j, dv) in dr.iter_mut().enumerate() {
                        let target = if j == t { T::one() - eps + uniform } else { uniform };
                        *dv = (probs[r * v + j] - target) * gs;
                    }
                }
                accumulate(grads, *logits, Tensor::new(tl.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
