//! Lightweight target-side decoder over the adaptor memory `H'`.
//!
//! - `Cross`: causal self-attention, then cross-attention over `H'`.
//! - `Concat`: a single self-attention whose keys/values come from
//!   `[H'; Y]` (shared projections, causal over `Y`, `H'` always visible).
//! - `Prefix`: `H'` is prepended to the target embeddings and the joint
//!   sequence runs under a prefix mask; only target rows produce logits.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_cached, sinusoidal, AttentionMask, KvCache, LayerKv, Segment};
use crate::encoder::embed_rows;
use crate::error::{Error, Result};
use crate::nn::{normal, BlockIds, BlockSpec, Heads, NormIds};
use crate::tensor::{matmul, Float, Graph, ParamId, ParamSet, Partition, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cross,
    Concat,
    Prefix,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Cross, Variant::Concat, Variant::Prefix];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cross => "cross",
            Variant::Concat => "concat",
            Variant::Prefix => "prefix",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown decoder variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub variant: Variant,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_target_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            variant: Variant::Cross,
            layers: 2,
            dim: 64,
            heads: 4,
            vocab_size: crate::data::Vocab::standard().len(),
            max_target_len: 128,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.vocab_size == 0 || self.max_target_len == 0 {
            return Err(Error::Config("decoder: layers, dim, vocab_size, max_target_len must be positive".into()));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("decoder: heads {} must divide dim {}", self.heads, self.dim)));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Heads {
        Heads { heads: self.heads, kv_heads: self.heads, head_dim: self.dim / self.heads }
    }
}

/// Parameter handles of the decoder (partition φ).
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln_f: NormIds,
    pub out: ParamId,
}

/// Incremental decoding state of one hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState<T> {
    /// Self-attention keys/values; for concat and prefix the first
    /// `src_len` entries of every layer belong to `H'`.
    pub self_cache: KvCache<T>,
    /// Cross-attention keys/values over `H'` (cross variant), computed once
    /// and shared between hypotheses.
    pub cross_cache: Option<Arc<KvCache<T>>>,
    /// Target tokens consumed so far.
    pub pos: usize,
    pub src_len: usize,
}

impl<T: Float> DecoderState<T> {
    /// Bytes of every cached key and value.
    pub fn cache_bytes(&self) -> usize {
        self.self_cache.bytes() + self.cross_cache.as_ref().map(|c| c.bytes()).unwrap_or(0)
    }
}

/// Row offsets of a packed batch.
fn offsets(lens: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(lens.len());
    let mut acc = 0;
    for &n in lens {
        off.push(acc);
        acc += n;
    }
    off
}

impl Decoder {
    pub fn new<T: Float>(cfg: DecoderConfig, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let part = Partition::Phi;
        let d = cfg.dim;
        let embed = ps.add("dec.embed", part, normal(rng, &[cfg.vocab_size, d], 1.0));
        let spec =
            BlockSpec { dim: d, geo: cfg.geometry(), cross: cfg.variant == Variant::Cross, depth: cfg.layers, part };
        let blocks = (0..cfg.layers).map(|l| BlockIds::add(ps, rng, &format!("dec.l{l}"), &spec)).collect();
        let ln_f = NormIds::add(ps, "dec.ln_f", d, part);
        let out = ps.add("dec.out", part, normal(rng, &[d, cfg.vocab_size], 1.0 / (d as f64).sqrt()));
        Ok(Decoder { cfg, embed, blocks, ln_f, out })
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    /// Teacher-forced logits `[sum(tgt_lens) x V]` for packed decoder inputs
    /// `y_in` against packed memory `h` (`[sum(src_lens) x d2]`).
    pub fn forward_graph<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        h: Var,
        src_lens: &[usize],
        y_in: &[usize],
        tgt_lens: &[usize],
        dropout: f64,
    ) -> Result<Var> {
        let d = self.cfg.dim;
        if g.value(h).cols() != d {
            return Err(Error::dim(format!("memory width {} but decoder dim {d}", g.value(h).cols())));
        }
        if src_lens.len() != tgt_lens.len()
            || src_lens.iter().sum::<usize>() != g.value(h).rows()
            || tgt_lens.iter().sum::<usize>() != y_in.len()
        {
            return Err(Error::dim("packed lengths do not match memory and target rows"));
        }
        if let Some(&t) = tgt_lens.iter().find(|&&t| t > self.cfg.max_target_len) {
            return Err(Error::Length { len: t, max: self.cfg.max_target_len });
        }
        self.check_tokens(y_in)?;
        let geo = self.cfg.geometry();
        let (s_off, t_off) = (offsets(src_lens), offsets(tgt_lens));
        let s_total = g.value(h).rows();
        let positions: Vec<usize> = tgt_lens.iter().flat_map(|&n| 0..n).collect();
        let emb = g.embedding(self.embed, y_in)?;
        let pe = g.input(sinusoidal(&positions, d));
        let mut y = g.add(emb, pe)?;
        let n = src_lens.len();
        // Interleaved [H'_i; Y_i] rows for the concat and prefix variants.
        let joint_idx: Vec<usize> = (0..n)
            .flat_map(|i| {
                (s_off[i]..s_off[i] + src_lens[i]).chain(s_total + t_off[i]..s_total + t_off[i] + tgt_lens[i])
            })
            .collect();
        let j_off: Vec<usize> = (0..n).map(|i| s_off[i] + t_off[i]).collect();
        match self.cfg.variant {
            Variant::Cross => {
                let self_layout = geo.layout(
                    (0..n)
                        .map(|i| Segment {
                            q_start: t_off[i],
                            k_start: t_off[i],
                            mask: AttentionMask::causal(tgt_lens[i], tgt_lens[i]).expect("square"),
                        })
                        .collect(),
                );
                let cross_layout = geo.layout(
                    (0..n)
                        .map(|i| Segment {
                            q_start: t_off[i],
                            k_start: s_off[i],
                            mask: AttentionMask::full(tgt_lens[i], src_lens[i]),
                        })
                        .collect(),
                );
                for b in &self.blocks {
                    let hn = b.ln1.graph(g, y)?;
                    let a = b.attn.graph(g, hn, hn, self_layout.clone(), None)?;
                    let a = g.dropout(a, dropout);
                    y = g.add(y, a)?;
                    let (lnc, cross) = b.cross.expect("cross variant has cross-attention");
                    let c = lnc.graph(g, y)?;
                    let ca = cross.graph(g, c, h, cross_layout.clone(), None)?;
                    let ca = g.dropout(ca, dropout);
                    y = g.add(y, ca)?;
                    y = b.ffn_graph(g, y, dropout)?;
                }
            }
            Variant::Concat => {
                let layout = geo.layout(
                    (0..n)
                        .map(|i| Segment {
                            q_start: t_off[i],
                            k_start: j_off[i],
                            mask: AttentionMask::prefix(tgt_lens[i], src_lens[i] + tgt_lens[i], src_lens[i])
                                .expect("prefix fits"),
                        })
                        .collect(),
                );
                for b in &self.blocks {
                    let yn = b.ln1.graph(g, y)?;
                    let hn = b.ln1.graph(g, h)?;
                    let both = g.concat_rows(&[hn, yn])?;
                    let kv = g.gather_rows(both, &joint_idx)?;
                    let a = b.attn.graph(g, yn, kv, layout.clone(), None)?;
                    let a = g.dropout(a, dropout);
                    y = g.add(y, a)?;
                    y = b.ffn_graph(g, y, dropout)?;
                }
            }
            Variant::Prefix => {
                let layout = geo.layout(
                    (0..n)
                        .map(|i| {
                            let len = src_lens[i] + tgt_lens[i];
                            Segment {
                                q_start: j_off[i],
                                k_start: j_off[i],
                                mask: AttentionMask::prefix(len, len, src_lens[i]).expect("prefix fits"),
                            }
                        })
                        .collect(),
                );
                let both = g.concat_rows(&[h, y])?;
                let mut z = g.gather_rows(both, &joint_idx)?;
                for b in &self.blocks {
                    z = b.self_graph(g, z, layout.clone(), None, dropout)?;
                }
                let tgt_rows: Vec<usize> =
                    (0..n).flat_map(|i| j_off[i] + src_lens[i]..j_off[i] + src_lens[i] + tgt_lens[i]).collect();
                y = g.gather_rows(z, &tgt_rows)?;
            }
        }
        let yn = self.ln_f.graph(g, y)?;
        g.linear(yn, self.out)
    }

    /// Prepares the incremental state for memory `h` (`[s x d2]`).
    pub fn init_state<T: Float>(&self, ps: &ParamSet<T>, h: &Tensor<T>) -> Result<DecoderState<T>> {
        let d = self.cfg.dim;
        if h.cols() != d {
            return Err(Error::dim(format!("memory width {} but decoder dim {d}", h.cols())));
        }
        let geo = self.cfg.geometry();
        let s = h.rows();
        let layers = self.cfg.layers;
        let mut state = DecoderState {
            self_cache: KvCache::new(layers, geo.kv_heads, geo.head_dim, self.cfg.max_target_len),
            cross_cache: None,
            pos: 0,
            src_len: s,
        };
        match self.cfg.variant {
            Variant::Cross => {
                let mut cross = KvCache::new(layers, geo.kv_heads, geo.head_dim, s);
                for (b, layer) in self.blocks.iter().zip(cross.layers.iter_mut()) {
                    let (_, ca) = b.cross.expect("cross variant has cross-attention");
                    layer.append(&matmul(h, ps.value(ca.wk))?, &matmul(h, ps.value(ca.wv))?)?;
                }
                state.cross_cache = Some(Arc::new(cross));
            }
            Variant::Concat => {
                state.self_cache = KvCache::new(layers, geo.kv_heads, geo.head_dim, s + self.cfg.max_target_len);
                for (b, layer) in self.blocks.iter().zip(state.self_cache.layers.iter_mut()) {
                    let hn = b.ln1.apply(ps, h)?;
                    layer.append(&matmul(&hn, ps.value(b.attn.wk))?, &matmul(&hn, ps.value(b.attn.wv))?)?;
                }
            }
            Variant::Prefix => {
                state.self_cache = KvCache::new(layers, geo.kv_heads, geo.head_dim, s + self.cfg.max_target_len);
                let mut z = h.clone();
                let mask = AttentionMask::full(s, s);
                for (b, layer) in self.blocks.iter().zip(state.self_cache.layers.iter_mut()) {
                    let zn = b.ln1.apply(ps, &z)?;
                    let w = b.attn.weights(ps);
                    layer.append(&matmul(&zn, w.wk)?, &matmul(&zn, w.wv)?)?;
                    let a = attend_cached(&matmul(&zn, w.wq)?, layer, &mask, geo.heads)?;
                    z.add_in_place(&matmul(&a, w.wo)?)?;
                    b.ffn_apply(ps, &mut z)?;
                }
            }
        }
        Ok(state)
    }

    /// Feeds `token` to one hypothesis; returns next-token logits `[1 x V]`.
    pub fn step<T: Float>(&self, ps: &ParamSet<T>, state: &mut DecoderState<T>, token: usize) -> Result<Tensor<T>> {
        self.step_batch(ps, &[token], std::slice::from_mut(state))
    }

    /// One step for a batch of hypotheses, projections batched.
    pub fn step_batch<T: Float>(
        &self,
        ps: &ParamSet<T>,
        tokens: &[usize],
        states: &mut [DecoderState<T>],
    ) -> Result<Tensor<T>> {
        if tokens.len() != states.len() {
            return Err(Error::dim("one state per batch row"));
        }
        self.check_tokens(tokens)?;
        if let Some(st) = states.iter().find(|s| s.pos >= self.cfg.max_target_len) {
            return Err(Error::Length { len: st.pos + 1, max: self.cfg.max_target_len });
        }
        let d = self.cfg.dim;
        let geo = self.cfg.geometry();
        let qw = geo.heads * geo.head_dim;
        let bsz = tokens.len();
        let mut x = embed_rows(ps.value(self.embed), tokens);
        let positions: Vec<usize> = states.iter().map(|s| s.pos).collect();
        x.add_in_place(&sinusoidal(&positions, d))?;
        for (l, b) in self.blocks.iter().enumerate() {
            let hn = b.ln1.apply(ps, &x)?;
            let w = b.attn.weights(ps);
            let q = matmul(&hn, w.wq)?;
            let k = matmul(&hn, w.wk)?;
            let v = matmul(&hn, w.wv)?;
            let mut heads_out = Vec::with_capacity(bsz * qw);
            for (r, st) in states.iter_mut().enumerate() {
                let layer: &mut LayerKv<T> = &mut st.self_cache.layers[l];
                layer.append(&k.slice_rows(r..r + 1), &v.slice_rows(r..r + 1))?;
                let mask = AttentionMask::causal(1, layer.cached_len)?;
                heads_out.extend_from_slice(attend_cached(&q.slice_rows(r..r + 1), layer, &mask, geo.heads)?.data());
            }
            x.add_in_place(&matmul(&Tensor::new(vec![bsz, qw], heads_out)?, w.wo)?)?;
            if let Some((lnc, ca)) = b.cross {
                let cn = lnc.apply(ps, &x)?;
                let qc = matmul(&cn, ps.value(ca.wq))?;
                let mut heads_out = Vec::with_capacity(bsz * qw);
                for (r, st) in states.iter().enumerate() {
                    let cache = st.cross_cache.as_ref().ok_or_else(|| Error::State("cross cache missing".into()))?;
                    let layer = &cache.layers[l];
                    let mask = AttentionMask::full(1, layer.cached_len);
                    heads_out
                        .extend_from_slice(attend_cached(&qc.slice_rows(r..r + 1), layer, &mask, geo.heads)?.data());
                }
                x.add_in_place(&matmul(&Tensor::new(vec![bsz, qw], heads_out)?, ps.value(ca.wo))?)?;
            }
            b.ffn_apply(ps, &mut x)?;
        }
        for st in states.iter_mut() {
            st.pos += 1;
        }
        matmul(&self.ln_f.apply(ps, &x)?, ps.value(self.out))
    }
}
