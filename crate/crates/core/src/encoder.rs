//! Causal language model used three ways: standalone LM, frozen translation
//! encoder exporting every layer's states, and decoder-only baseline.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_cached, AttentionMask, KvCache, RopeTable, Segment};
use crate::error::{Error, Result};
use crate::nn::{normal, BlockIds, BlockSpec, Heads, NormIds};
use crate::tensor::{matmul, Float, Graph, ParamId, ParamSet, Partition, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Number of layer groups `K` exported to the adaptor.
    pub groups: usize,
    pub rope_base: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 8,
            dim: 256,
            heads: 8,
            kv_heads: 8,
            vocab_size: crate::data::Vocab::standard().len(),
            max_len: 256,
            groups: 4,
            rope_base: 10000.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.layers == 0 || self.dim == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return bad("layers, dim, vocab_size and max_len must be positive".into());
        }
        if self.groups == 0 || self.groups > self.layers || self.layers % self.groups != 0 {
            return bad(format!("groups {} must divide layers {}", self.groups, self.layers));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("heads {} must divide dim {}", self.heads, self.dim));
        }
        if self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return bad(format!("kv_heads {} must divide heads {}", self.kv_heads, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even for rotary positions", self.head_dim()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn geometry(&self) -> Heads {
        Heads { heads: self.heads, kv_heads: self.kv_heads, head_dim: self.head_dim() }
    }

    /// Layer indices (1-based, into `X^0..X^L`) whose states represent each
    /// group: the last layer of every group.
    pub fn group_layers(&self) -> Vec<usize> {
        let size = self.layers / self.groups;
        (1..=self.groups).map(|k| k * size).collect()
    }
}

/// Parameter handles of the causal transformer (partition θ).
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embed: ParamId,
    pub blocks: Vec<BlockIds>,
    pub ln_f: NormIds,
    pub lm_head: ParamId,
    rope: Arc<RopeTable>,
}

impl Encoder {
    pub fn new<T: Float>(cfg: EncoderConfig, ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let part = Partition::Theta;
        let d = cfg.dim;
        let embed = ps.add("enc.embed", part, normal(rng, &[cfg.vocab_size, d], 1.0));
        let spec = BlockSpec { dim: d, geo: cfg.geometry(), cross: false, depth: cfg.layers, part };
        let blocks = (0..cfg.layers).map(|l| BlockIds::add(ps, rng, &format!("enc.l{l}"), &spec)).collect();
        let ln_f = NormIds::add(ps, "enc.ln_f", d, part);
        let lm_head = ps.add("enc.lm_head", part, normal(rng, &[d, cfg.vocab_size], 1.0 / (d as f64).sqrt()));
        let rope = Arc::new(RopeTable::new(cfg.head_dim(), cfg.max_len, cfg.rope_base));
        Ok(Encoder { cfg, embed, blocks, ln_f, lm_head, rope })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::Vocab(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_len {
            return Err(Error::Length { len, max: self.cfg.max_len });
        }
        Ok(())
    }

    /// Tape forward over packed sequences (`lens` sums to `ids.len()`).
    /// Returns the residual stream after the embedding and after every
    /// block: `X^0..X^L`, each `[total x dim]`.
    pub fn forward_graph<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &[usize],
        lens: &[usize],
        dropout: f64,
    ) -> Result<Vec<Var>> {
        self.check_ids(ids)?;
        if lens.iter().sum::<usize>() != ids.len() {
            return Err(Error::dim("sequence lengths do not cover the packed ids"));
        }
        let mut segments = Vec::with_capacity(lens.len());
        let mut positions = Vec::with_capacity(ids.len());
        let mut off = 0;
        for &n in lens {
            self.check_len(n)?;
            segments.push(Segment { q_start: off, k_start: off, mask: AttentionMask::causal(n, n)? });
            positions.extend(0..n);
            off += n;
        }
        let layout = self.cfg.geometry().layout(segments);
        let mut x = g.embedding(self.embed, ids)?;
        let mut states = vec![x];
        for b in &self.blocks {
            x = b.self_graph(g, x, layout.clone(), Some((&self.rope, &positions)), dropout)?;
            states.push(x);
        }
        Ok(states)
    }

    /// Vocabulary logits from top-layer states.
    pub fn logits_graph<T: Float>(&self, g: &mut Graph<'_, T>, top: Var) -> Result<Var> {
        let h = self.ln_f.graph(g, top)?;
        g.linear(h, self.lm_head)
    }

    /// Plain-tensor forward of one sequence, continuing whatever `cache`
    /// holds. Returns `X^0..X^L` for the new rows.
    pub fn forward<T: Float>(
        &self,
        ps: &ParamSet<T>,
        ids: &[usize],
        mut cache: Option<&mut KvCache<T>>,
    ) -> Result<Vec<Tensor<T>>> {
        self.check_ids(ids)?;
        let start = cache.as_ref().map(|c| c.cached_len()).unwrap_or(0);
        let n = ids.len();
        self.check_len(start + n)?;
        let geo = self.cfg.geometry();
        let positions: Vec<usize> = (start..start + n).collect();
        let mut x = embed_rows(ps.value(self.embed), ids);
        let mut states = Vec::with_capacity(self.blocks.len() + 1);
        states.push(x.clone());
        for (l, b) in self.blocks.iter().enumerate() {
            let h = b.ln1.apply(ps, &x)?;
            let w = b.attn.weights(ps);
            let mut q = matmul(&h, w.wq)?;
            let mut k = matmul(&h, w.wk)?;
            let v = matmul(&h, w.wv)?;
            self.rope.apply(q.data_mut(), geo.heads * geo.head_dim, &positions, false)?;
            self.rope.apply(k.data_mut(), geo.kv_heads * geo.head_dim, &positions, false)?;
            let a = match cache.as_deref_mut() {
                Some(c) => {
                    let layer = &mut c.layers[l];
                    layer.append(&k, &v)?;
                    attend_cached(&q, layer, &AttentionMask::causal(n, start + n)?, geo.heads)?
                }
                None => {
                    let mut tmp = crate::attention::LayerKv::new(geo.kv_heads, geo.head_dim, n);
                    tmp.append(&k, &v)?;
                    attend_cached(&q, &tmp, &AttentionMask::causal(n, n)?, geo.heads)?
                }
            };
            x.add_in_place(&matmul(&a, w.wo)?)?;
            b.ffn_apply(ps, &mut x)?;
            states.push(x.clone());
        }
        Ok(states)
    }

    /// One decoding step for a batch: `tokens[b]` is appended to sequence
    /// `b`, whose history lives in `caches[b]`. Returns `[batch x vocab]`
    /// logits. Projections run as one matrix product over the batch.
    pub fn step_batch<T: Float>(
        &self,
        ps: &ParamSet<T>,
        tokens: &[usize],
        caches: &mut [KvCache<T>],
    ) -> Result<Tensor<T>> {
        self.check_ids(tokens)?;
        if tokens.len() != caches.len() {
            return Err(Error::dim("one cache per batch row"));
        }
        let geo = self.cfg.geometry();
        let (qw, kvw) = (geo.heads * geo.head_dim, geo.kv_heads * geo.head_dim);
        let mut x = embed_rows(ps.value(self.embed), tokens);
        for (l, b) in self.blocks.iter().enumerate() {
            let h = b.ln1.apply(ps, &x)?;
            let w = b.attn.weights(ps);
            let mut q = matmul(&h, w.wq)?;
            let mut k = matmul(&h, w.wk)?;
            let v = matmul(&h, w.wv)?;
            let mut heads_out = Vec::with_capacity(tokens.len() * qw);
            for (r, cache) in caches.iter_mut().enumerate() {
                let layer = &mut cache.layers[l];
                let pos = layer.cached_len;
                self.check_len(pos + 1)?;
                self.rope.apply(q.row_mut(r), qw, &[pos], false)?;
                self.rope.apply(k.row_mut(r), kvw, &[pos], false)?;
                layer.append(&k.slice_rows(r..r + 1), &v.slice_rows(r..r + 1))?;
                let qr = q.slice_rows(r..r + 1);
                let a = attend_cached(&qr, layer, &AttentionMask::causal(1, pos + 1)?, geo.heads)?;
                heads_out.extend_from_slice(a.data());
            }
            let a = Tensor::new(vec![tokens.len(), qw], heads_out)?;
            x.add_in_place(&matmul(&a, w.wo)?)?;
            b.ffn_apply(ps, &mut x)?;
        }
        self.logits(ps, &x)
    }

    pub fn logits<T: Float>(&self, ps: &ParamSet<T>, top: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(&self.ln_f.apply(ps, top)?, ps.value(self.lm_head))
    }

    /// Per-layer states `X^0..X^L` of the causal pass over `[c, x]`.
    pub fn encode<T: Float>(&self, ps: &ParamSet<T>, c: &[usize], x: &[usize]) -> Result<Vec<Tensor<T>>> {
        if x.is_empty() {
            return Err(Error::arg("empty source sequence"));
        }
        self.check_len(c.len() + x.len())?;
        let ids: Vec<usize> = c.iter().chain(x).copied().collect();
        self.forward(ps, &ids, None)
    }

    pub fn new_cache<T: Float>(&self, capacity: usize) -> KvCache<T> {
        let geo = self.cfg.geometry();
        KvCache::new(self.cfg.layers, geo.kv_heads, geo.head_dim, capacity)
    }
}

pub(crate) fn embed_rows<T: Float>(table: &Tensor<T>, ids: &[usize]) -> Tensor<T> {
    let d = table.cols();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        data.extend_from_slice(table.row(i));
    }
    Tensor::new(vec![ids.len(), d], data).expect("embedding rows")
}

/// A standalone causal LM: the encoder plus its own parameter store.
#[derive(Clone, Debug)]
pub struct CausalLm<T: Float> {
    pub encoder: Encoder,
    pub params: ParamSet<T>,
}

impl<T: Float> CausalLm<T> {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(cfg, &mut params, &mut rng)?;
        Ok(CausalLm { encoder, params })
    }

    /// Mean next-token loss over packed sequences, divided by `normalizer`
    /// target tokens when given.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_, T>,
        seqs: &[Vec<usize>],
        normalizer: Option<f64>,
        dropout: f64,
    ) -> Result<Var> {
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let states = self.encoder.forward_graph(g, &ids, &lens, dropout)?;
        let logits = self.encoder.logits_graph(g, *states.last().expect("top layer"))?;
        let mut targets = Vec::with_capacity(ids.len());
        let mut mask = Vec::with_capacity(ids.len());
        for s in seqs {
            for i in 0..s.len() {
                let next = s.get(i + 1).copied();
                targets.push(next.unwrap_or(0));
                mask.push(next.is_some());
            }
        }
        g.cross_entropy(logits, &targets, &mask, normalizer, 0.0)
    }

    /// Number of predicted positions in `seqs`.
    pub fn target_count(seqs: &[Vec<usize>]) -> usize {
        seqs.iter().map(|s| s.len().saturating_sub(1)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            layers: 4,
            dim: 16,
            heads: 4,
            kv_heads: 2,
            vocab_size: 20,
            max_len: 32,
            groups: 2,
            rope_base: 10000.0,
        }
    }

    #[test]
    fn config_rules() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert_eq!(tiny().group_layers(), vec![2, 4]);
        assert!(EncoderConfig { groups: 3, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { groups: 0, ..tiny() }.validate().is_err());
        assert!(EncoderConfig { kv_heads: 3, ..tiny() }.validate().is_err());
    }

    #[test]
    fn graph_and_kernel_paths_agree() {
        let lm = CausalLm::<f64>::new(tiny(), 1).unwrap();
        let a = [3usize, 4, 5, 6, 7];
        let b = [9usize, 8, 1];
        let ids: Vec<usize> = a.iter().chain(&b).copied().collect();
        let mut g = Graph::inference(&lm.params);
        let states = lm.encoder.forward_graph(&mut g, &ids, &[5, 3], 0.0).unwrap();
        let ka = lm.encoder.forward(&lm.params, &a, None).unwrap();
        let kb = lm.encoder.forward(&lm.params, &b, None).unwrap();
        for l in 0..=4 {
            let packed = g.value(states[l]);
            assert!(packed.slice_rows(0..5).max_abs_diff(&ka[l]) < 1e-12);
            assert!(packed.slice_rows(5..8).max_abs_diff(&kb[l]) < 1e-12);
        }
    }

    #[test]
    fn cached_steps_match_full_pass() {
        let lm = CausalLm::<f64>::new(tiny(), 2).unwrap();
        let ids = [2usize, 5, 11, 7, 3, 19];
        let full = lm.encoder.forward(&lm.params, &ids, None).unwrap();
        let full_logits = lm.encoder.logits(&lm.params, &full[4]).unwrap();
        let mut cache = lm.encoder.new_cache(8);
        lm.encoder.forward(&lm.params, &ids[..3], Some(&mut cache)).unwrap();
        let mut caches = vec![cache];
        for (t, &tok) in ids.iter().enumerate().skip(3) {
            let lg = lm.encoder.step_batch(&lm.params, &[tok], &mut caches).unwrap();
            for (x, y) in lg.data().iter().zip(full_logits.row(t)) {
                assert!((x - y).abs() < 1e-10);
            }
        }
        assert_eq!(caches[0].cached_len(), 6);
    }

    #[test]
    fn encode_rejects_overflow_and_is_causal() {
        let lm = CausalLm::<f64>::new(tiny(), 3).unwrap();
        let long = vec![1usize; 33];
        assert!(matches!(lm.encoder.encode(&lm.params, &[], &long), Err(Error::Length { .. })));
        let c = [4usize, 5];
        let s1 = lm.encoder.encode(&lm.params, &c, &[6, 7, 8]).unwrap();
        let s2 = lm.encoder.encode(&lm.params, &c, &[6, 7, 9]).unwrap();
        for l in 0..=4 {
            assert_eq!(s1[l].slice_rows(0..4), s2[l].slice_rows(0..4));
            assert_ne!(s1[l].row(4), s2[l].row(4));
        }
        let no_prompt = lm.encoder.encode(&lm.params, &[], &[6, 7, 8]).unwrap();
        let joined = lm.encoder.forward(&lm.params, &[6, 7, 8], None).unwrap();
        assert_eq!(no_prompt, joined);
    }
}
