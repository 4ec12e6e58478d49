//! Multi-head scaled dot-product attention over packed sequences.
//!
//! Activations for a batch are packed row-wise (`[total_tokens x width]`);
//! an [`AttnLayout`] says which query rows attend to which key rows and under
//! which [`AttentionMask`]. The same kernel serves the training tape and
//! incremental decoding against a [`LayerKv`] cache.

use crate::error::{Error, Result};
use crate::tensor::{gemm, matmul, Float, MatMut, MatRef, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Causal,
    FullyVisible,
    Prefix,
}

/// Visibility pattern between `query_len` queries and `key_len` keys.
///
/// Causal and prefix masks are aligned to the bottom-right corner: query `i`
/// sits at key position `i + key_len - query_len`. With equal lengths this is
/// the usual lower-triangular pattern; with a cache it lets one new query see
/// every cached key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub prefix_len: usize,
    pub query_len: usize,
    pub key_len: usize,
}

impl AttentionMask {
    pub fn causal(query_len: usize, key_len: usize) -> Result<Self> {
        build_mask(MaskKind::Causal, query_len, key_len, None)
    }

    pub fn full(query_len: usize, key_len: usize) -> Self {
        AttentionMask { kind: MaskKind::FullyVisible, prefix_len: 0, query_len, key_len }
    }

    pub fn prefix(query_len: usize, key_len: usize, prefix_len: usize) -> Result<Self> {
        build_mask(MaskKind::Prefix, query_len, key_len, Some(prefix_len))
    }

    #[inline]
    pub fn visible(&self, i: usize, j: usize) -> bool {
        let shift = self.key_len - self.query_len.min(self.key_len);
        match self.kind {
            MaskKind::FullyVisible => true,
            MaskKind::Causal => j <= i + shift,
            MaskKind::Prefix => j < self.prefix_len || j <= i + shift,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        (0..self.query_len).map(|i| (0..self.key_len).map(|j| self.visible(i, j)).collect()).collect()
    }
}

/// Builds a mask of the given kind. `prefix_len` is required for (and only
/// read by) [`MaskKind::Prefix`].
pub fn build_mask(
    kind: MaskKind,
    query_len: usize,
    key_len: usize,
    prefix_len: Option<usize>,
) -> Result<AttentionMask> {
    let prefix_len = match (kind, prefix_len) {
        (MaskKind::Prefix, None) => return Err(Error::arg("prefix mask requires prefix_len")),
        (MaskKind::Prefix, Some(p)) if p > key_len => {
            return Err(Error::arg(format!("prefix_len {p} exceeds key_len {key_len}")))
        }
        (MaskKind::Prefix, Some(p)) => p,
        _ => 0,
    };
    if kind != MaskKind::FullyVisible && key_len < query_len {
        return Err(Error::arg(format!("{kind:?} mask needs key_len >= query_len, got {key_len} < {query_len}")));
    }
    Ok(AttentionMask { kind, prefix_len, query_len, key_len })
}

/// One attention problem inside a packed batch.
#[derive(Clone, Debug)]
pub struct Segment {
    pub q_start: usize,
    pub k_start: usize,
    pub mask: AttentionMask,
}

/// Head geometry plus the per-sequence segments of a packed batch.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub segments: Vec<Segment>,
}

impl AttnLayout {
    pub fn q_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub(crate) fn validate(&self, q_rows: usize, k_rows: usize) -> Result<()> {
        if self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return Err(Error::Config(format!("kv_heads {} must divide heads {}", self.kv_heads, self.heads)));
        }
        for s in &self.segments {
            if s.q_start + s.mask.query_len > q_rows || s.k_start + s.mask.key_len > k_rows {
                return Err(Error::dim(format!("attention segment {s:?} outside {q_rows} query / {k_rows} key rows")));
            }
        }
        Ok(())
    }
}

/// Strided per-head view of a key, value or query matrix.
#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadView<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: usize,
    pub head_stride: usize,
}

impl<'a, T> HeadView<'a, T> {
    /// Packed row-major `[rows x heads*head_dim]` starting at `row`.
    pub fn packed(data: &'a [T], row: usize, heads: usize, head_dim: usize) -> Self {
        let rs = heads * head_dim;
        HeadView { data, offset: row * rs, rs, head_stride: head_dim }
    }

    fn head(&self, h: usize, rows: usize, cols: usize) -> MatRef<'a, T> {
        MatRef::strided(self.data, self.offset + h * self.head_stride, rows, cols, self.rs)
    }
}

/// Forward attention for one segment, writing `[q_len x heads*head_dim]`
/// into `out` starting at row offset `out_row`. Returns probabilities laid
/// out `[heads][q_len][k_len]` when `keep_probs` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn segment_forward<T: Float>(
    q: HeadView<'_, T>,
    k: HeadView<'_, T>,
    v: HeadView<'_, T>,
    mask: &AttentionMask,
    heads: usize,
    kv_heads: usize,
    head_dim: usize,
    out: &mut [T],
    out_row: usize,
    keep_probs: bool,
) -> Vec<T> {
    let (ql, kl) = (mask.query_len, mask.key_len);
    let group = heads / kv_heads;
    let scale = T::one() / T::of(head_dim as f64).sqrt();
    let out_rs = heads * head_dim;
    let mut probs = if keep_probs { Vec::with_capacity(heads * ql * kl) } else { Vec::new() };
    let mut scores = vec![T::zero(); ql * kl];
    let masked = mask.kind != MaskKind::FullyVisible;
    for h in 0..heads {
        let kvh = h / group;
        gemm(
            scale,
            q.head(h, ql, head_dim),
            k.head(kvh, kl, head_dim).t(),
            T::zero(),
            MatMut::new(&mut scores, ql, kl),
        );
        for i in 0..ql {
            let row = &mut scores[i * kl..(i + 1) * kl];
            if masked {
                for (j, s) in row.iter_mut().enumerate() {
                    if !mask.visible(i, j) {
                        *s = T::neg_infinity();
                    }
                }
            }
            crate::tensor::ops::softmax_in_place(row);
        }
        gemm(
            T::one(),
            MatRef::new(&scores, ql, kl),
            v.head(kvh, kl, head_dim),
            T::zero(),
            MatMut::strided(out, out_row * out_rs + h * head_dim, ql, head_dim, out_rs),
        );
        if keep_probs {
            probs.extend_from_slice(&scores);
        }
    }
    probs
}

/// Backward for one segment. Accumulates into `dq`, `dk`, `dv` (packed
/// layouts matching the forward inputs).
#[allow(clippy::too_many_arguments)]
pub(crate) fn segment_backward<T: Float>(
    seg: &Segment,
    layout: &AttnLayout,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (ql, kl) = (seg.mask.query_len, seg.mask.key_len);
    let (heads, hd) = (layout.heads, layout.head_dim);
    let group = heads / layout.kv_heads;
    let qrs = layout.q_width();
    let krs = layout.kv_width();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut dp = vec![T::zero(); ql * kl];
    for h in 0..heads {
        let kvh = h / group;
        let p = &probs[h * ql * kl..(h + 1) * ql * kl];
        let dout_h = MatRef::strided(dout, seg.q_start * qrs + h * hd, ql, hd, qrs);
        let v_h = MatRef::strided(v, seg.k_start * krs + kvh * hd, kl, hd, krs);
        let k_h = MatRef::strided(k, seg.k_start * krs + kvh * hd, kl, hd, krs);
        let q_h = MatRef::strided(q, seg.q_start * qrs + h * hd, ql, hd, qrs);
        // dV += P^T dO
        gemm(
            T::one(),
            MatRef::new(p, ql, kl).t(),
            dout_h,
            T::one(),
            MatMut::strided(dv, seg.k_start * krs + kvh * hd, kl, hd, krs),
        );
        // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
        gemm(T::one(), dout_h, v_h.t(), T::zero(), MatMut::new(&mut dp, ql, kl));
        for i in 0..ql {
            let pr = &p[i * kl..(i + 1) * kl];
            let dr = &mut dp[i * kl..(i + 1) * kl];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in dr.iter_mut().zip(pr) {
                *d = pv * (*d - dot);
            }
        }
        gemm(
            scale,
            MatRef::new(&dp, ql, kl),
            k_h,
            T::one(),
            MatMut::strided(dq, seg.q_start * qrs + h * hd, ql, hd, qrs),
        );
        gemm(
            scale,
            MatRef::new(&dp, ql, kl).t(),
            q_h,
            T::one(),
            MatMut::strided(dk, seg.k_start * krs + kvh * hd, kl, hd, krs),
        );
    }
}

/// Runs every segment of a packed layout. Returns the output and, when
/// requested, the concatenated probabilities of all segments.
pub(crate) fn packed_forward<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    layout: &AttnLayout,
    keep_probs: bool,
) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
    if q.cols() != layout.q_width() || k.cols() != layout.kv_width() || v.cols() != layout.kv_width() {
        return Err(Error::dim(format!(
            "attention widths q={} k={} v={} for {} heads / {} kv heads of {}",
            q.cols(),
            k.cols(),
            v.cols(),
            layout.heads,
            layout.kv_heads,
            layout.head_dim
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::dim("key and value row counts differ"));
    }
    layout.validate(q.rows(), k.rows())?;
    let mut out = vec![T::zero(); q.rows() * layout.q_width()];
    let mut all_probs = Vec::with_capacity(if keep_probs { layout.segments.len() } else { 0 });
    for seg in &layout.segments {
        let p = segment_forward(
            HeadView::packed(q.data(), seg.q_start, layout.heads, layout.head_dim),
            HeadView::packed(k.data(), seg.k_start, layout.kv_heads, layout.head_dim),
            HeadView::packed(v.data(), seg.k_start, layout.kv_heads, layout.head_dim),
            &seg.mask,
            layout.heads,
            layout.kv_heads,
            layout.head_dim,
            &mut out,
            seg.q_start,
            keep_probs,
        );
        if keep_probs {
            all_probs.push(p);
        }
    }
    Ok((Tensor::new(vec![q.rows(), layout.q_width()], out)?, all_probs))
}

/// Attention probabilities `[heads][q][k]` for a single segment; used to
/// inspect visibility patterns.
pub fn attention_weights<T: Float>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    mask: &AttentionMask,
    heads: usize,
    kv_heads: usize,
) -> Result<Vec<Vec<Vec<T>>>> {
    let head_dim = q.cols() / heads;
    let layout =
        AttnLayout { heads, kv_heads, head_dim, segments: vec![Segment { q_start: 0, k_start: 0, mask: *mask }] };
    let (_, probs) = packed_forward(q, k, k, &layout, true)?;
    let (ql, kl) = (mask.query_len, mask.key_len);
    Ok((0..heads)
        .map(|h| (0..ql).map(|i| probs[0][h * ql * kl + i * kl..h * ql * kl + (i + 1) * kl].to_vec()).collect())
        .collect())
}

/// Precomputed rotary-embedding angles (rotate-half convention).
#[derive(Clone, Debug)]
pub struct RopeTable {
    pub head_dim: usize,
    pub max_len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub fn new(head_dim: usize, max_len: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                let ang = pos as f64 * freq;
                cos.push(ang.cos());
                sin.push(ang.sin());
            }
        }
        RopeTable { head_dim, max_len, cos, sin }
    }

    /// Rotates each head of each row in place. Row `r` is at position
    /// `positions[r]`; `inverse` applies the transpose rotation.
    pub fn apply<T: Float>(&self, data: &mut [T], width: usize, positions: &[usize], inverse: bool) -> Result<()> {
        let hd = self.head_dim;
        let half = hd / 2;
        for (r, &pos) in positions.iter().enumerate() {
            if pos >= self.max_len {
                return Err(Error::Length { len: pos + 1, max: self.max_len });
            }
            let c = &self.cos[pos * half..(pos + 1) * half];
            let s = &self.sin[pos * half..(pos + 1) * half];
            let row = &mut data[r * width..(r + 1) * width];
            for head in row.chunks_mut(hd) {
                for i in 0..half {
                    let (a, b) = (head[i], head[i + half]);
                    let (cs, sn) = (T::of(c[i]), T::of(if inverse { -s[i] } else { s[i] }));
                    head[i] = a * cs - b * sn;
                    head[i + half] = a * sn + b * cs;
                }
            }
        }
        Ok(())
    }
}

/// Classic sinusoidal absolute position encodings for the given positions.
pub fn sinusoidal<T: Float>(positions: &[usize], dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for &pos in positions {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let ang = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data.push(T::of(if j % 2 == 0 { ang.sin() } else { ang.cos() }));
        }
    }
    Tensor::new(vec![positions.len(), dim], data).expect("sinusoidal shape")
}

/// Key/value cache of one attention layer for one sequence, stored
/// `[kv_heads x capacity x head_dim]` so each head is contiguous.
#[derive(Clone, Debug)]
pub struct LayerKv<T> {
    pub kv_heads: usize,
    pub head_dim: usize,
    pub capacity: usize,
    pub cached_len: usize,
    keys: Vec<T>,
    values: Vec<T>,
}

impl<T: Float> LayerKv<T> {
    pub fn new(kv_heads: usize, head_dim: usize, capacity: usize) -> Self {
        let n = kv_heads * capacity * head_dim;
        LayerKv { kv_heads, head_dim, capacity, cached_len: 0, keys: vec![T::zero(); n], values: vec![T::zero(); n] }
    }

    /// Appends packed `[rows x kv_heads*head_dim]` keys and values.
    pub fn append(&mut self, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        let rows = k.rows();
        let width = self.kv_heads * self.head_dim;
        if k.cols() != width || v.cols() != width || v.rows() != rows {
            return Err(Error::dim("cache append width mismatch"));
        }
        if self.cached_len + rows > self.capacity {
            return Err(Error::Capacity { needed: self.cached_len + rows, capacity: self.capacity });
        }
        let hd = self.head_dim;
        for r in 0..rows {
            let pos = self.cached_len + r;
            for h in 0..self.kv_heads {
                let dst = (h * self.capacity + pos) * hd;
                self.keys[dst..dst + hd].copy_from_slice(&k.row(r)[h * hd..(h + 1) * hd]);
                self.values[dst..dst + hd].copy_from_slice(&v.row(r)[h * hd..(h + 1) * hd]);
            }
        }
        self.cached_len += rows;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.cached_len = 0;
    }

    /// Bytes held by the live entries (keys plus values).
    pub fn bytes(&self) -> usize {
        2 * self.cached_len * self.kv_heads * self.head_dim * T::BYTES
    }

    fn keys_view(&self) -> HeadView<'_, T> {
        HeadView { data: &self.keys, offset: 0, rs: self.head_dim, head_stride: self.capacity * self.head_dim }
    }

    fn values_view(&self) -> HeadView<'_, T> {
        HeadView { data: &self.values, offset: 0, rs: self.head_dim, head_stride: self.capacity * self.head_dim }
    }

    /// Key rows `[cached_len x kv_heads*head_dim]` (copy, for tests).
    pub fn keys(&self) -> Tensor<T> {
        self.gather(&self.keys)
    }

    fn gather(&self, src: &[T]) -> Tensor<T> {
        let hd = self.head_dim;
        let mut out = Vec::with_capacity(self.cached_len * self.kv_heads * hd);
        for pos in 0..self.cached_len {
            for h in 0..self.kv_heads {
                let s = (h * self.capacity + pos) * hd;
                out.extend_from_slice(&src[s..s + hd]);
            }
        }
        Tensor::new(vec![self.cached_len, self.kv_heads * hd], out).expect("cache shape")
    }
}

/// Per-layer caches of one decoding session.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    pub layers: Vec<LayerKv<T>>,
}

impl<T: Float> KvCache<T> {
    pub fn new(layers: usize, kv_heads: usize, head_dim: usize, capacity: usize) -> Self {
        KvCache { layers: (0..layers).map(|_| LayerKv::new(kv_heads, head_dim, capacity)).collect() }
    }

    pub fn cached_len(&self) -> usize {
        self.layers.first().map(|l| l.cached_len).unwrap_or(0)
    }

    pub fn bytes(&self) -> usize {
        self.layers.iter().map(LayerKv::bytes).sum()
    }

    pub fn reset(&mut self) {
        self.layers.iter_mut().for_each(LayerKv::reset);
    }
}

/// Borrowed projection weights of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'a, T> {
    pub wq: &'a Tensor<T>,
    pub wk: &'a Tensor<T>,
    pub wv: &'a Tensor<T>,
    pub wo: &'a Tensor<T>,
    pub heads: usize,
    pub kv_heads: usize,
}

impl<T: Float> AttentionWeights<'_, T> {
    pub fn head_dim(&self) -> usize {
        self.wq.cols() / self.heads
    }
}

/// Rotary positions for one `attend` call: queries start at `q_pos`, new
/// keys at the cache length (or 0 without a cache).
#[derive(Clone, Copy, Debug)]
pub struct RopeAt<'a> {
    pub table: &'a RopeTable,
    pub q_pos: usize,
}

/// Attention of already projected (and rotated) queries `[rows x heads*hd]`
/// against every entry of `cache`. Returns the concatenated head outputs,
/// before the output projection.
pub fn attend_cached<T: Float>(
    q: &Tensor<T>,
    cache: &LayerKv<T>,
    mask: &AttentionMask,
    heads: usize,
) -> Result<Tensor<T>> {
    let hd = cache.head_dim;
    if q.cols() != heads * hd || heads % cache.kv_heads != 0 {
        return Err(Error::dim(format!(
            "{} query columns for {heads} heads over a {}x{hd} cache",
            q.cols(),
            cache.kv_heads
        )));
    }
    if mask.key_len != cache.cached_len || mask.query_len != q.rows() {
        return Err(Error::dim(format!(
            "mask {}x{} against {} queries and {} cached keys",
            mask.query_len,
            mask.key_len,
            q.rows(),
            cache.cached_len
        )));
    }
    let mut out = vec![T::zero(); q.rows() * heads * hd];
    segment_forward(
        HeadView::packed(q.data(), 0, heads, hd),
        cache.keys_view(),
        cache.values_view(),
        mask,
        heads,
        cache.kv_heads,
        hd,
        &mut out,
        0,
        false,
    );
    Tensor::new(vec![q.rows(), heads * hd], out)
}

/// Single-sequence attention: project, optionally extend `cache` with the
/// new keys/values, attend under `mask`, project out.
///
/// Without a cache the mask covers `kv_input` only; with a cache it covers
/// every cached row after the append.
pub fn attend<T: Float>(
    q_input: &Tensor<T>,
    kv_input: &Tensor<T>,
    mask: &AttentionMask,
    w: &AttentionWeights<'_, T>,
    rope: Option<RopeAt<'_>>,
    cache: Option<&mut LayerKv<T>>,
) -> Result<Tensor<T>> {
    if w.kv_heads == 0 || w.heads % w.kv_heads != 0 {
        return Err(Error::Config(format!("kv_heads {} must divide heads {}", w.kv_heads, w.heads)));
    }
    let hd = w.head_dim();
    let mut q = matmul(q_input, w.wq)?;
    let (k_new, v_new) =
        if kv_input.rows() > 0 { (Some(matmul(kv_input, w.wk)?), Some(matmul(kv_input, w.wv)?)) } else { (None, None) };
    let k_pos0 = cache.as_ref().map(|c| c.cached_len).unwrap_or(0);
    let mut k_new = k_new;
    if let Some(r) = rope {
        let qpos: Vec<usize> = (r.q_pos..r.q_pos + q.rows()).collect();
        r.table.apply(q.data_mut(), w.heads * hd, &qpos, false)?;
        if let Some(k) = k_new.as_mut() {
            let kpos: Vec<usize> = (k_pos0..k_pos0 + k.rows()).collect();
            r.table.apply(k.data_mut(), w.kv_heads * hd, &kpos, false)?;
        }
    }
    let attn = match cache {
        Some(c) => {
            if let (Some(k), Some(v)) = (&k_new, &v_new) {
                c.append(k, v)?;
            }
            attend_cached(&q, c, mask, w.heads)?
        }
        None => {
            let k = k_new.ok_or_else(|| Error::dim("attend without cache needs key rows"))?;
            let v = v_new.expect("values accompany keys");
            if mask.key_len != k.rows() || mask.query_len != q.rows() {
                return Err(Error::dim(format!(
                    "mask {}x{} against {} queries and {} keys",
                    mask.query_len,
                    mask.key_len,
                    q.rows(),
                    k.rows()
                )));
            }
            let mut out = vec![T::zero(); q.rows() * w.heads * hd];
            segment_forward(
                HeadView::packed(q.data(), 0, w.heads, hd),
                HeadView::packed(k.data(), 0, w.kv_heads, hd),
                HeadView::packed(v.data(), 0, w.kv_heads, hd),
                mask,
                w.heads,
                w.kv_heads,
                hd,
                &mut out,
                0,
                false,
            );
            Tensor::new(vec![q.rows(), w.heads * hd], out)?
        }
    };
    matmul(&attn, w.wo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
        Tensor::new(vec![r, c], (0..r * c).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn eye(n: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        t
    }

    #[test]
    fn mask_patterns() {
        let c = build_mask(MaskKind::Causal, 3, 3, None).unwrap().to_dense();
        for (i, row) in c.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, j <= i);
            }
        }
        let f = build_mask(MaskKind::FullyVisible, 2, 5, None).unwrap().to_dense();
        assert!(f.iter().flatten().all(|&v| v));
        let p = build_mask(MaskKind::Prefix, 4, 4, Some(2)).unwrap().to_dense();
        let expect = [
            [true, true, false, false],
            [true, true, false, false],
            [true, true, true, false],
            [true, true, true, true],
        ];
        for i in 0..4 {
            assert_eq!(p[i], expect[i]);
        }
        assert!(matches!(build_mask(MaskKind::Prefix, 2, 2, None), Err(Error::Argument(_))));
        assert!(build_mask(MaskKind::Prefix, 2, 2, Some(3)).is_err());
    }

    #[test]
    fn single_key_returns_its_value() {
        let id = eye(2);
        let w = AttentionWeights { wq: &id, wk: &id, wv: &id, wo: &id, heads: 1, kv_heads: 1 };
        let q = Tensor::<f64>::from_rows(&[[0.3, -1.0]]).unwrap();
        let kv = Tensor::<f64>::from_rows(&[[2.0, 5.0]]).unwrap();
        let out = attend(&q, &kv, &AttentionMask::full(1, 1), &w, None, None).unwrap();
        assert_eq!(out.data(), &[2.0, 5.0]);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let id = eye(2);
        let q = Tensor::<f64>::from_rows(&[[0.7, -0.2]]).unwrap();
        let k = Tensor::<f64>::from_rows(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]).unwrap();
        let wts = attention_weights(&q, &k, &AttentionMask::full(1, 4), 1, 1).unwrap();
        assert!(wts[0][0].iter().all(|&p| (p - 0.25).abs() < 1e-12));
        // values differ, keys do not: output is the mean of the value rows
        let wk = Tensor::zeros(&[2, 2]);
        let w = AttentionWeights { wq: &id, wk: &wk, wv: &id, wo: &id, heads: 1, kv_heads: 1 };
        let kv = Tensor::<f64>::from_rows(&[[1.0, 0.0], [3.0, 2.0], [5.0, 4.0], [7.0, 6.0]]).unwrap();
        let out = attend(&q, &kv, &AttentionMask::full(1, 4), &w, None, None).unwrap();
        assert!((out.data()[0] - 4.0).abs() < 1e-12 && (out.data()[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_token_causal_scalar_case() {
        let one = Tensor::<f64>::from_rows(&[[1.0]]).unwrap();
        let w = AttentionWeights { wq: &one, wk: &one, wv: &one, wo: &one, heads: 1, kv_heads: 1 };
        let x = Tensor::<f64>::from_rows(&[[1.0], [2.0]]).unwrap();
        let out = attend(&x, &x, &AttentionMask::causal(2, 2).unwrap(), &w, None, None).unwrap();
        // row 1 scores: [2*1, 2*2] -> weights [1, e^2] / (1 + e^2)
        let e2 = 2f64.exp();
        assert!((out.data()[0] - 1.0).abs() < 1e-12);
        assert!((out.data()[1] - (1.0 + 2.0 * e2) / (1.0 + e2)).abs() < 1e-12);
        let wts = attention_weights(&x, &x, &AttentionMask::causal(2, 2).unwrap(), 1, 1).unwrap();
        assert_eq!(wts[0][0][1], 0.0);
    }

    #[test]
    fn weights_sum_to_one_and_masked_cells_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = randn(&mut rng, 5, 8);
        let k = randn(&mut rng, 5, 8);
        for mask in [AttentionMask::causal(5, 5).unwrap(), AttentionMask::prefix(5, 5, 2).unwrap()] {
            let w = attention_weights(&q, &k, &mask, 2, 2).unwrap();
            for head in &w {
                for (i, row) in head.iter().enumerate() {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    for (j, &p) in row.iter().enumerate() {
                        if !mask.visible(i, j) {
                            assert_eq!(p, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn causal_output_ignores_future_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (wq, wk, wv, wo) =
            (randn(&mut rng, 8, 8), randn(&mut rng, 8, 8), randn(&mut rng, 8, 8), randn(&mut rng, 8, 8));
        let w = AttentionWeights { wq: &wq, wk: &wk, wv: &wv, wo: &wo, heads: 2, kv_heads: 2 };
        let x = randn(&mut rng, 6, 8);
        let mask = AttentionMask::causal(6, 6).unwrap();
        let base = attend(&x, &x, &mask, &w, None, None).unwrap();
        let mut y = x.clone();
        for v in y.row_mut(4) {
            *v += 3.0;
        }
        let pert = attend(&y, &y, &mask, &w, None, None).unwrap();
        for i in 0..4 {
            assert_eq!(base.row(i), pert.row(i));
        }
        assert_ne!(base.row(4), pert.row(4));
    }

    #[test]
    fn incremental_cache_matches_full_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (wq, wk, wv, wo) =
            (randn(&mut rng, 8, 8), randn(&mut rng, 8, 4), randn(&mut rng, 8, 4), randn(&mut rng, 8, 8));
        let w = AttentionWeights { wq: &wq, wk: &wk, wv: &wv, wo: &wo, heads: 4, kv_heads: 2 };
        let table = RopeTable::new(2, 32, 10000.0);
        let x = randn(&mut rng, 7, 8);
        let full =
            attend(&x, &x, &AttentionMask::causal(7, 7).unwrap(), &w, Some(RopeAt { table: &table, q_pos: 0 }), None)
                .unwrap();
        let mut cache = LayerKv::new(2, 2, 7);
        for t in 0..7 {
            let row = x.slice_rows(t..t + 1);
            let out = attend(
                &row,
                &row,
                &AttentionMask::causal(1, t + 1).unwrap(),
                &w,
                Some(RopeAt { table: &table, q_pos: t }),
                Some(&mut cache),
            )
            .unwrap();
            for (a, b) in out.data().iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        assert_eq!(cache.cached_len, 7);
        assert_eq!(cache.bytes(), 2 * 7 * 2 * 2 * 8);
        let row = x.slice_rows(0..1);
        let over = attend(&row, &row, &AttentionMask::causal(1, 8).unwrap(), &w, None, Some(&mut cache));
        assert!(matches!(over, Err(Error::Capacity { .. })));
    }

    #[test]
    fn grouped_heads_match_duplicated_full_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (heads, kv_heads, hd, d) = (4, 2, 3, 6);
        let wq = randn(&mut rng, d, heads * hd);
        let wk = randn(&mut rng, d, kv_heads * hd);
        let wv = randn(&mut rng, d, kv_heads * hd);
        let wo = randn(&mut rng, heads * hd, d);
        let dup = |m: &Tensor<f64>| {
            let mut out = Vec::new();
            for r in 0..d {
                let row = m.row(r);
                for h in 0..heads {
                    let kvh = h / (heads / kv_heads);
                    out.extend_from_slice(&row[kvh * hd..(kvh + 1) * hd]);
                }
            }
            Tensor::new(vec![d, heads * hd], out).unwrap()
        };
        let (wk_full, wv_full) = (dup(&wk), dup(&wv));
        let x = randn(&mut rng, 5, d);
        let mask = AttentionMask::causal(5, 5).unwrap();
        let gqa = AttentionWeights { wq: &wq, wk: &wk, wv: &wv, wo: &wo, heads, kv_heads };
        let mha = AttentionWeights { wq: &wq, wk: &wk_full, wv: &wv_full, wo: &wo, heads, kv_heads: heads };
        let a = attend(&x, &x, &mask, &gqa, None, None).unwrap();
        let b = attend(&x, &x, &mask, &mha, None, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn rope_inverse_restores_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = randn(&mut rng, 3, 8);
        let table = RopeTable::new(4, 10, 10000.0);
        let mut y = x.clone();
        table.apply(y.data_mut(), 8, &[0, 5, 9], false).unwrap();
        assert_eq!(y.row(0), x.row(0));
        table.apply(y.data_mut(), 8, &[0, 5, 9], true).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
        assert!(table.apply(y.data_mut(), 8, &[0, 5, 10], false).is_err());
    }
}
