//! Bridge from encoder layer states to decoder-ready memory `H'`:
//! group fusion, a bias-free two-layer MLP, and an optional stack of
//! fully-visible encoder blocks.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, sinusoidal, AttentionMask, RopeTable, Segment};
use crate::error::{Error, Result};
use crate::nn::{normal, BlockIds, BlockSpec, Heads, NormIds};
use crate::tensor::{gelu, matmul, Float, Graph, ParamId, ParamSet, Partition, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptorConfig {
    pub groups: usize,
    pub d1: usize,
    pub d2: usize,
    pub n_enc: usize,
    pub enc_stack_enabled: bool,
    /// Attention heads of the EncStack blocks.
    pub heads: usize,
}

impl Default for AdaptorConfig {
    fn default() -> Self {
        AdaptorConfig { groups: 4, d1: 256, d2: 64, n_enc: 2, enc_stack_enabled: true, heads: 4 }
    }
}

impl AdaptorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("adaptor: {m}")));
        if self.groups == 0 || self.d1 == 0 || self.d2 == 0 {
            return bad("groups, d1 and d2 must be positive".into());
        }
        if self.enc_stack_enabled != (self.n_enc > 0) {
            return bad(format!("enc_stack_enabled={} with n_enc={}", self.enc_stack_enabled, self.n_enc));
        }
        if self.n_enc > 0 && (self.heads == 0 || self.d2 % self.heads != 0) {
            return bad(format!("heads {} must divide d2 {}", self.heads, self.d2));
        }
        Ok(())
    }

    fn geometry(&self) -> Heads {
        Heads { heads: self.heads, kv_heads: self.heads, head_dim: self.d2 / self.heads.max(1) }
    }
}

/// Parameter handles of the adaptor (partition ω).
#[derive(Clone, Debug)]
pub struct Adaptor {
    pub cfg: AdaptorConfig,
    pub fuse_w: ParamId,
    pub fuse_ln: NormIds,
    pub w1: ParamId,
    pub w2: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln_f: Option<NormIds>,
}

/// EncStack positions are anchored at the first source token: source index
/// `j` sits at `PROMPT_SLOTS + j` whatever the prompt length, and prompt
/// tokens take the slots just below.
pub const PROMPT_SLOTS: usize = 32;

pub fn stack_positions(prompt_len: usize, n: usize) -> Result<Vec<usize>> {
    if prompt_len > PROMPT_SLOTS || prompt_len > n {
        return Err(Error::Length { len: prompt_len, max: PROMPT_SLOTS.min(n) });
    }
    Ok((0..n).map(|i| PROMPT_SLOTS + i - prompt_len).collect())
}

impl Adaptor {
    pub fn new<T: Float>(cfg: AdaptorConfig, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let part = Partition::Omega;
        let fuse_w = ps.add("ad.fuse.w", part, Tensor::full(&[cfg.groups], T::one()));
        let fuse_ln = NormIds::add(ps, "ad.fuse_ln", cfg.d1, part);
        let w1 = ps.add("ad.w1", part, normal(rng, &[cfg.d1, cfg.d2], 1.0 / (cfg.d1 as f64).sqrt()));
        let w2 = ps.add("ad.w2", part, normal(rng, &[cfg.d2, cfg.d2], 1.0 / (cfg.d2 as f64).sqrt()));
        let spec = BlockSpec { dim: cfg.d2, geo: cfg.geometry(), cross: false, depth: cfg.n_enc, part };
        let blocks = (0..cfg.n_enc).map(|l| BlockIds::add(ps, rng, &format!("ad.enc.l{l}"), &spec)).collect();
        let ln_f = (cfg.n_enc > 0).then(|| NormIds::add(ps, "ad.enc.ln_f", cfg.d2, part));
        Ok(Adaptor { cfg, fuse_w, fuse_ln, w1, w2, blocks, ln_f })
    }

    /// Tape forward over packed sequences. `groups[k]` holds the states of
    /// the last layer of group `k`, `[total x d1]`.
    pub fn forward_graph<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        groups: &[Var],
        lens: &[usize],
        prompt_lens: &[usize],
        dropout: f64,
    ) -> Result<Var> {
        if groups.len() != self.cfg.groups {
            return Err(Error::Config(format!("{} group states for K={}", groups.len(), self.cfg.groups)));
        }
        let mean = g.weighted_mean(self.fuse_w, groups)?;
        let fused = self.fuse_ln.graph(g, mean)?;
        let h = g.linear(fused, self.w1)?;
        let h = g.gelu(h);
        let mut h = g.linear(h, self.w2)?;
        if let Some(ln_f) = self.ln_f {
            if prompt_lens.len() != lens.len() {
                return Err(Error::dim("one prompt length per sequence expected"));
            }
            let mut positions = Vec::with_capacity(lens.iter().sum());
            for (&n, &p) in lens.iter().zip(prompt_lens) {
                positions.extend(stack_positions(p, n)?);
            }
            let pe = g.input(sinusoidal(&positions, self.cfg.d2));
            h = g.add(h, pe)?;
            let mut segments = Vec::with_capacity(lens.len());
            let mut off = 0;
            for &n in lens {
                segments.push(Segment { q_start: off, k_start: off, mask: AttentionMask::full(n, n) });
                off += n;
            }
            let layout = self.cfg.geometry().layout(segments);
            for b in &self.blocks {
                h = b.self_graph(g, h, layout.clone(), None::<(&Arc<RopeTable>, &[usize])>, dropout)?;
            }
            h = ln_f.graph(g, h)?;
        }
        Ok(h)
    }

    /// `LayerNorm((1/K) Σ w_k g_k)` where `g_k` is the last layer of group
    /// `k`. `layer_states` are `X^1..X^L` (the embedding output excluded).
    pub fn fuse_groups<T: Float>(&self, ps: &ParamSet<T>, layer_states: &[Tensor<T>]) -> Result<Tensor<T>> {
        let (l, k) = (layer_states.len(), self.cfg.groups);
        if l == 0 || l % k != 0 {
            return Err(Error::Config(format!("{l} layers cannot form {k} equal groups")));
        }
        let size = l / k;
        let w = ps.value(self.fuse_w).data();
        let first = &layer_states[size - 1];
        if first.cols() != self.cfg.d1 {
            return Err(Error::dim(format!("layer width {} but d1 = {}", first.cols(), self.cfg.d1)));
        }
        let mut acc = Tensor::zeros(first.shape());
        let inv_k = T::one() / T::of(k as f64);
        for (j, &wj) in w.iter().enumerate() {
            let gk = &layer_states[(j + 1) * size - 1];
            if gk.shape() != first.shape() {
                return Err(Error::dim("group states differ in shape"));
            }
            for (a, &x) in acc.data_mut().iter_mut().zip(gk.data()) {
                *a += wj * inv_k * x;
            }
        }
        self.fuse_ln.apply(ps, &acc)
    }

    /// `GELU(H_fuse W1) W2`.
    pub fn mlp_project<T: Float>(&self, ps: &ParamSet<T>, h_fuse: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(&gelu(&matmul(h_fuse, ps.value(self.w1))?), ps.value(self.w2))
    }

    /// Fully-visible encoder blocks over one sequence; identity when the
    /// stack is disabled.
    pub fn enc_stack<T: Float>(&self, ps: &ParamSet<T>, h_mlp: &Tensor<T>, prompt_len: usize) -> Result<Tensor<T>> {
        let Some(ln_f) = self.ln_f else { return Ok(h_mlp.clone()) };
        let n = h_mlp.rows();
        let positions = stack_positions(prompt_len, n)?;
        let mut h = h_mlp.clone();
        h.add_in_place(&sinusoidal(&positions, self.cfg.d2))?;
        let mask = AttentionMask::full(n, n);
        for b in &self.blocks {
            let hn = b.ln1.apply(ps, &h)?;
            h.add_in_place(&attend(&hn, &hn, &mask, &b.attn.weights(ps), None, None)?)?;
            b.ffn_apply(ps, &mut h)?;
        }
        ln_f.apply(ps, &h)
    }

    /// Full adaptor on `X^0..X^L` of one sequence whose first `prompt_len`
    /// rows are the prompt.
    pub fn forward<T: Float>(&self, ps: &ParamSet<T>, states: &[Tensor<T>], prompt_len: usize) -> Result<Tensor<T>> {
        let fused = self.fuse_groups(ps, &states[1..])?;
        let h = self.mlp_project(ps, &fused)?;
        self.enc_stack(ps, &h, prompt_len)
    }
}
