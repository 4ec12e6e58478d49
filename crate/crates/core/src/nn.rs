//! Pre-norm transformer pieces shared by the encoder, adaptor and decoder.
//!
//! Each piece comes in two forms: a tape form used for training and
//! teacher forcing, and a plain-tensor form used by incremental decoding.
//! Tests hold the two forms to each other.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{AttentionWeights, AttnLayout, RopeTable};
use crate::error::Result;
use crate::tensor::{gelu, layer_norm, matmul, Float, Graph, ParamId, ParamSet, Partition, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn normal<T: Float, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(std * z)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormIds {
    pub(crate) fn add<T: Float>(ps: &mut ParamSet<T>, name: &str, dim: usize, part: Partition) -> Self {
        NormIds {
            gamma: ps.add(format!("{name}.g"), part, Tensor::full(&[dim], T::one())),
            beta: ps.add(format!("{name}.b"), part, Tensor::zeros(&[dim])),
        }
    }

    pub(crate) fn graph<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }

    pub(crate) fn apply<T: Float>(&self, ps: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        layer_norm(x, ps.value(self.gamma), ps.value(self.beta), LN_EPS)
    }
}

/// Head geometry of one attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Heads {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl Heads {
    pub fn layout(&self, segments: Vec<crate::attention::Segment>) -> Arc<AttnLayout> {
        Arc::new(AttnLayout { heads: self.heads, kv_heads: self.kv_heads, head_dim: self.head_dim, segments })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub geo: Heads,
}

impl AttnIds {
    pub(crate) fn add<T: Float, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        geo: Heads,
        out_scale: f64,
        part: Partition,
    ) -> Self {
        let (qw, kvw) = (geo.heads * geo.head_dim, geo.kv_heads * geo.head_dim);
        let std = 1.0 / (dim as f64).sqrt();
        AttnIds {
            wq: ps.add(format!("{name}.wq"), part, normal(rng, &[dim, qw], std)),
            wk: ps.add(format!("{name}.wk"), part, normal(rng, &[dim, kvw], std)),
            wv: ps.add(format!("{name}.wv"), part, normal(rng, &[dim, kvw], std)),
            wo: ps.add(format!("{name}.wo"), part, normal(rng, &[qw, dim], out_scale / (qw as f64).sqrt())),
            geo,
        }
    }

    pub(crate) fn weights<'a, T: Float>(&self, ps: &'a ParamSet<T>) -> AttentionWeights<'a, T> {
        AttentionWeights {
            wq: ps.value(self.wq),
            wk: ps.value(self.wk),
            wv: ps.value(self.wv),
            wo: ps.value(self.wo),
            heads: self.geo.heads,
            kv_heads: self.geo.kv_heads,
        }
    }

    /// Tape attention: queries from `q_in`, keys/values from `kv_in`.
    /// `rope` gives the positions of the query rows and of the key rows.
    pub(crate) fn graph<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        q_in: Var,
        kv_in: Var,
        layout: Arc<AttnLayout>,
        rope: Option<(&Arc<RopeTable>, &[usize], &[usize])>,
    ) -> Result<Var> {
        let mut q = g.linear(q_in, self.wq)?;
        let mut k = g.linear(kv_in, self.wk)?;
        let v = g.linear(kv_in, self.wv)?;
        if let Some((table, qpos, kpos)) = rope {
            q = g.rope(q, table.clone(), qpos)?;
            k = g.rope(k, table.clone(), kpos)?;
        }
        let a = g.attention(q, k, v, layout)?;
        g.linear(a, self.wo)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl FfnIds {
    pub(crate) fn add<T: Float, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
        out_scale: f64,
        part: Partition,
    ) -> Self {
        FfnIds {
            w1: ps.add(format!("{name}.w1"), part, normal(rng, &[dim, hidden], 1.0 / (dim as f64).sqrt())),
            w2: ps.add(format!("{name}.w2"), part, normal(rng, &[hidden, dim], out_scale / (hidden as f64).sqrt())),
        }
    }

    pub(crate) fn graph<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = g.linear(x, self.w1)?;
        let h = g.gelu(h);
        g.linear(h, self.w2)
    }

    pub(crate) fn apply<T: Float>(&self, ps: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = gelu(&matmul(x, ps.value(self.w1))?);
        matmul(&h, ps.value(self.w2))
    }
}

/// One pre-norm block: self-attention, optional cross-attention, FFN.
#[derive(Clone, Copy, Debug)]
pub struct BlockIds {
    pub ln1: NormIds,
    pub attn: AttnIds,
    pub cross: Option<(NormIds, AttnIds)>,
    pub ln2: NormIds,
    pub ffn: FfnIds,
}

pub(crate) struct BlockSpec {
    pub dim: usize,
    pub geo: Heads,
    pub cross: bool,
    pub depth: usize,
    pub part: Partition,
}

impl BlockIds {
    pub(crate) fn add<T: Float, R: Rng>(ps: &mut ParamSet<T>, rng: &mut R, name: &str, spec: &BlockSpec) -> Self {
        let d = spec.dim;
        let out_scale = 1.0 / (2.0 * spec.depth.max(1) as f64).sqrt();
        let ln1 = NormIds::add(ps, &format!("{name}.ln1"), d, spec.part);
        let attn = AttnIds::add(ps, rng, &format!("{name}.attn"), d, spec.geo, out_scale, spec.part);
        let cross = spec.cross.then(|| {
            (
                NormIds::add(ps, &format!("{name}.lnc"), d, spec.part),
                AttnIds::add(ps, rng, &format!("{name}.cross"), d, spec.geo, out_scale, spec.part),
            )
        });
        BlockIds {
            ln1,
            attn,
            cross,
            ln2: NormIds::add(ps, &format!("{name}.ln2"), d, spec.part),
            ffn: FfnIds::add(ps, rng, &format!("{name}.ffn"), d, 4 * d, out_scale, spec.part),
        }
    }

    /// Self-attention block on the tape (no cross-attention).
    pub(crate) fn self_graph<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        layout: Arc<AttnLayout>,
        rope: Option<(&Arc<RopeTable>, &[usize])>,
        dropout: f64,
    ) -> Result<Var> {
        let h = self.ln1.graph(g, x)?;
        let a = self.attn.graph(g, h, h, layout, rope.map(|(t, p)| (t, p, p)))?;
        let a = g.dropout(a, dropout);
        let x = g.add(x, a)?;
        self.ffn_graph(g, x, dropout)
    }

    pub(crate) fn ffn_graph<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.ln2.graph(g, x)?;
        let f = self.ffn.graph(g, h)?;
        let f = g.dropout(f, dropout);
        g.add(x, f)
    }

    /// Residual FFN half of the block on plain tensors, in place.
    pub(crate) fn ffn_apply<T: Float>(&self, ps: &ParamSet<T>, x: &mut Tensor<T>) -> Result<()> {
        let h = self.ln2.apply(ps, x)?;
        x.add_in_place(&self.ffn.apply(ps, &h)?)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
