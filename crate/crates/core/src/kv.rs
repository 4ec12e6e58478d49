//! Analytic KV-cache sizes and a wall-clock decoding benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, FIRST_CONTENT};
use crate::decoder::DecoderConfig;
use crate::encoder::{CausalLm, EncoderConfig};
use crate::error::{Error, Result};
use crate::model::Lamate;
use crate::nn::argmax;
use crate::tensor::Float;

fn default_bytes() -> usize {
    2
}

/// Shape summary of a model, enough to size its decode-time cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    /// Decoder width (the only width that enters the cache).
    pub dim: usize,
    /// 0 for decoder-only models.
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    #[serde(default = "default_bytes")]
    pub bytes_per_element: usize,
    pub vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_count: Option<u64>,
    /// Encoder width when it differs from `dim`; informational only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enc_dim: Option<usize>,
}

impl ArchSpec {
    pub fn is_decoder_only(&self) -> bool {
        self.enc_layers == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "{}: kv_heads {} must divide heads {}",
                self.name, self.kv_heads, self.heads
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("{}: heads {} must divide dim {}", self.name, self.heads, self.dim)));
        }
        if self.dec_layers == 0 || self.bytes_per_element == 0 {
            return Err(Error::Config(format!("{}: dec_layers and bytes_per_element must be positive", self.name)));
        }
        Ok(())
    }

    /// Cache bytes for one token of one sequence.
    pub fn bytes_per_token(&self) -> u64 {
        let width = if self.is_decoder_only() { self.dim / self.heads * self.kv_heads } else { self.dim };
        2 * self.dec_layers as u64 * width as u64 * self.bytes_per_element as u64
    }

    /// Spec of a toy decoder-only model built from `cfg`.
    pub fn from_causal_lm(name: &str, cfg: &EncoderConfig, bytes_per_element: usize) -> Self {
        ArchSpec {
            name: name.into(),
            dim: cfg.dim,
            enc_layers: 0,
            dec_layers: cfg.layers,
            heads: cfg.heads,
            kv_heads: cfg.kv_heads,
            bytes_per_element,
            vocab_size: cfg.vocab_size,
            params_count: None,
            enc_dim: None,
        }
    }

    /// Spec of a toy LaMaTE with encoder `enc` and decoder `dec`.
    pub fn from_lamate(name: &str, enc: &EncoderConfig, dec: &DecoderConfig, bytes_per_element: usize) -> Self {
        ArchSpec {
            name: name.into(),
            dim: dec.dim,
            enc_layers: enc.layers,
            dec_layers: dec.layers,
            heads: dec.heads,
            kv_heads: dec.heads,
            bytes_per_element,
            vocab_size: dec.vocab_size,
            params_count: None,
            enc_dim: Some(enc.dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheReport {
    pub b: u64,
    pub s: u64,
    pub t: u64,
    pub per_token_bytes: u64,
    pub bytes_exact: u64,
    /// `per_token_bytes / 1000`, floored.
    pub kb_decimal_floored: u64,
}

/// Steady-state decode cache of `spec` for batch `b`, source length `s`
/// and target length `t`.
///
/// Decoder-only models cache every layer over `s + t` positions at the
/// grouped key/value width. Encoder-decoder models cache decoder self
/// attention over `t` and cross attention over `s`, both at decoder width;
/// encoder states are not retained.
pub fn kv_bytes(spec: &ArchSpec, b: u64, s: u64, t: u64) -> CacheReport {
    let per = spec.bytes_per_token();
    CacheReport { b, s, t, per_token_bytes: per, bytes_exact: per * b * (s + t), kb_decimal_floored: per / 1000 }
}

/// `1 - bytes(a) / bytes(b)` at the same `(b, s, t)`.
pub fn kv_reduction(a: &ArchSpec, b: &ArchSpec, batch: u64, s: u64, t: u64) -> Result<f64> {
    let bb = kv_bytes(b, batch, s, t).bytes_exact;
    if bb == 0 {
        return Err(Error::arg(format!("{} has a zero-byte cache at b={batch} s={s} t={t}", b.name)));
    }
    Ok(1.0 - kv_bytes(a, batch, s, t).bytes_exact as f64 / bb as f64)
}

/// The seven published model configurations (fp16 caches).
pub fn paper_specs() -> Vec<ArchSpec> {
    let spec = |name: &str, dim, enc_layers, dec_layers, heads, kv_heads, vocab_size, params: f64, enc_dim| ArchSpec {
        name: name.into(),
        dim,
        enc_layers,
        dec_layers,
        heads,
        kv_heads,
        bytes_per_element: 2,
        vocab_size,
        params_count: Some((params * 1e9).round() as u64),
        enc_dim,
    };
    vec![
        spec("Llama2-7B", 4096, 0, 32, 32, 32, 32_000, 6.73, None),
        spec("Llama3-8B", 4096, 0, 32, 32, 8, 128_256, 8.01, None),
        spec("Llama2-13B", 5120, 0, 40, 40, 40, 32_000, 13.01, None),
        spec("NMT-40-8", 1024, 40, 8, 16, 16, 128_256, 0.77, None),
        spec("mT5-large", 1024, 24, 24, 16, 16, 250_112, 1.23, None),
        spec("NLLB-3.3B", 2048, 24, 24, 16, 16, 256_206, 3.34, None),
        spec("LaMaTE", 1024, 32, 8, 16, 16, 128_256, 8.5, Some(4096)),
    ]
}

pub fn read_specs(path: &std::path::Path) -> Result<Vec<ArchSpec>> {
    let text = std::fs::read_to_string(path)?;
    let specs: Vec<ArchSpec> = serde_json::from_str(&text)
        .map_err(|e| Error::Data { line: e.line(), msg: format!("{}: {e}", path.display()) })?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

/// Human-readable cache table.
pub fn render_cache_table(specs: &[ArchSpec], b: u64, s: u64, t: u64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>6} {:>5} {:>5} {:>10} {:>14} {:>16}",
        "model", "dim", "enc", "dec", "kB/token", "formula", "bytes"
    );
    for spec in specs {
        let r = kv_bytes(spec, b, s, t);
        let _ = writeln!(
            out,
            "{:<12} {:>6} {:>5} {:>5} {:>10} {:>14} {:>16}",
            spec.name,
            spec.dim,
            spec.enc_layers,
            spec.dec_layers,
            r.kb_decimal_floored,
            format!("{}b(s+t)", r.kb_decimal_floored),
            r.bytes_exact
        );
    }
    out
}

/// Wall-clock split of one generation run.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunTiming {
    /// Reading the sources and building caches.
    pub prefill_secs: f64,
    /// Incremental steps.
    pub decode_secs: f64,
    pub tokens: usize,
}

/// A model whose greedy decoding speed can be measured.
pub trait Decodable {
    fn name(&self) -> String;
    /// Greedily generates `t` tokens after each source. EOS does not stop
    /// generation.
    fn generate(&self, sources: &[Vec<usize>], t: usize) -> Result<RunTiming>;
    /// Analytic cache bytes at the model's own dtype.
    fn cache_bytes(&self, b: usize, s: usize, t: usize) -> u64;
}

impl<T: Float> Decodable for CausalLm<T> {
    fn name(&self) -> String {
        let c = &self.encoder.cfg;
        format!("decoder-only {}Lx{}d", c.layers, c.dim)
    }

    fn generate(&self, sources: &[Vec<usize>], t: usize) -> Result<RunTiming> {
        if t == 0 {
            return Ok(RunTiming::default());
        }
        let enc = &self.encoder;
        let start = Instant::now();
        let mut caches = Vec::with_capacity(sources.len());
        let mut next = Vec::with_capacity(sources.len());
        for src in sources {
            let mut cache = enc.new_cache(src.len() + t);
            let states = enc.forward(&self.params, src, Some(&mut cache))?;
            let top = states.last().expect("top layer");
            let logits = enc.logits(&self.params, &top.slice_rows(top.rows() - 1..top.rows()))?;
            next.push(argmax(logits.row(0)));
            caches.push(cache);
        }
        let prefill_secs = start.elapsed().as_secs_f64();
        let start = Instant::now();
        for _ in 1..t {
            let logits = enc.step_batch(&self.params, &next, &mut caches)?;
            next = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
        }
        Ok(RunTiming { prefill_secs, decode_secs: start.elapsed().as_secs_f64(), tokens: sources.len() * t })
    }

    fn cache_bytes(&self, b: usize, s: usize, t: usize) -> u64 {
        kv_bytes(&ArchSpec::from_causal_lm("lm", &self.encoder.cfg, T::BYTES), b as u64, s as u64, t as u64).bytes_exact
    }
}

impl<T: Float> Decodable for Lamate<T> {
    fn name(&self) -> String {
        let c = self.cfg();
        format!("lamate enc {}Lx{}d dec {}Lx{}d", c.encoder.layers, c.encoder.dim, c.decoder.layers, c.decoder.dim)
    }

    fn generate(&self, sources: &[Vec<usize>], t: usize) -> Result<RunTiming> {
        let start = Instant::now();
        let mut states = sources.iter().map(|x| self.net.start(&self.params, &[], x)).collect::<Result<Vec<_>>>()?;
        let mut next = vec![BOS; sources.len()];
        // The first step only reads `<s>`; it belongs with the prefill so
        // both models are timed over the same t - 1 cached steps.
        if t > 0 {
            let logits = self.net.decoder.step_batch(&self.params, &next, &mut states)?;
            next = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
        }
        let prefill_secs = start.elapsed().as_secs_f64();
        let start = Instant::now();
        for _ in 1..t {
            let logits = self.net.decoder.step_batch(&self.params, &next, &mut states)?;
            next = (0..logits.rows()).map(|r| argmax(logits.row(r))).collect();
        }
        Ok(RunTiming { prefill_secs, decode_secs: start.elapsed().as_secs_f64(), tokens: sources.len() * t })
    }

    fn cache_bytes(&self, b: usize, s: usize, t: usize) -> u64 {
        let c = self.cfg();
        kv_bytes(&ArchSpec::from_lamate("lamate", &c.encoder, &c.decoder, T::BYTES), b as u64, s as u64, t as u64)
            .bytes_exact
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub source_lengths: Vec<usize>,
    pub target_len: usize,
    pub repetitions: usize,
    pub warmups: usize,
    /// Cells whose analytic cache exceeds this many bytes are marked OOM.
    pub memory_budget: Option<u64>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batch_sizes: vec![1, 2, 4, 8],
            source_lengths: vec![32, 64, 128],
            target_len: 64,
            repetitions: 5,
            warmups: 2,
            memory_budget: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub batch: usize,
    pub src_len: usize,
    /// Median end-to-end tokens/s (generated tokens over prefill plus
    /// decoding time), `None` when out of memory.
    pub tps_a: Option<f64>,
    pub tps_b: Option<f64>,
    /// `tps_a / tps_b`.
    pub speedup: Option<f64>,
    /// Median tokens/s of the cached steps alone.
    pub decode_tps_a: Option<f64>,
    pub decode_tps_b: Option<f64>,
    pub decode_speedup: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub model_a: String,
    pub model_b: String,
    pub target_len: usize,
    pub cells: Vec<BenchCell>,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn random_sources(batch: usize, len: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..batch).map(|_| (0..len).map(|_| rng.random_range(FIRST_CONTENT..vocab)).collect()).collect()
}

/// Median greedy-decoding throughput of `a` and `b` over a grid of batch
/// sizes and source lengths. Runs of the two models are interleaved.
pub fn bench_decode(a: &dyn Decodable, b: &dyn Decodable, vocab: usize, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repetitions == 0 || cfg.target_len == 0 {
        return Err(Error::arg("bench needs at least one repetition and one target token"));
    }
    if vocab <= FIRST_CONTENT {
        return Err(Error::arg("vocabulary has no content symbols"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cells = Vec::new();
    for &batch in &cfg.batch_sizes {
        for &s in &cfg.source_lengths {
            let fits =
                |m: &dyn Decodable| cfg.memory_budget.is_none_or(|lim| m.cache_bytes(batch, s, cfg.target_len) <= lim);
            let (run_a, run_b) = (fits(a), fits(b));
            let sources = random_sources(batch, s, vocab, &mut rng);
            let mut runs: [(Vec<f64>, Vec<f64>); 2] = Default::default();
            for rep in 0..cfg.warmups + cfg.repetitions {
                for (run, m, out) in [(run_a, a, 0), (run_b, b, 1)] {
                    if !run {
                        continue;
                    }
                    let r = m.generate(&sources, cfg.target_len)?;
                    if rep >= cfg.warmups {
                        runs[out].0.push(r.tokens as f64 / (r.prefill_secs + r.decode_secs).max(1e-9));
                        runs[out].1.push(r.tokens as f64 / r.decode_secs.max(1e-9));
                    }
                }
            }
            let [(mut ea, mut da), (mut eb, mut db)] = runs;
            let (tps_a, decode_tps_a) = (run_a.then(|| median(&mut ea)), run_a.then(|| median(&mut da)));
            let (tps_b, decode_tps_b) = (run_b.then(|| median(&mut eb)), run_b.then(|| median(&mut db)));
            let ratio = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x / y);
            cells.push(BenchCell {
                batch,
                src_len: s,
                tps_a,
                tps_b,
                speedup: ratio(tps_a, tps_b),
                decode_tps_a,
                decode_tps_b,
                decode_speedup: ratio(decode_tps_a, decode_tps_b),
            });
        }
    }
    Ok(BenchReport { model_a: a.name(), model_b: b.name(), target_len: cfg.target_len, cells })
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "OOM".into());
        let mut out = String::from("batch,src_len,tokens_per_s_a,tokens_per_s_b,speedup,decode_tokens_per_s_a,decode_tokens_per_s_b,decode_speedup\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.batch,
                c.src_len,
                fmt(c.tps_a),
                fmt(c.tps_b),
                fmt(c.speedup),
                fmt(c.decode_tps_a),
                fmt(c.decode_tps_b),
                fmt(c.decode_speedup)
            );
        }
        out
    }

    pub fn render(&self) -> String {
        let fmt = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_else(|| "OOM".into());
        let mut out = format!("A = {}\nB = {}\nt = {}\n", self.model_a, self.model_b, self.target_len);
        let _ = writeln!(
            out,
            "{:>6} {:>8} {:>12} {:>12} {:>8} {:>12} {:>12} {:>8}",
            "batch", "src_len", "A tok/s", "B tok/s", "A/B", "A step", "B step", "A/B step"
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{:>6} {:>8} {:>12} {:>12} {:>8} {:>12} {:>12} {:>8}",
                c.batch,
                c.src_len,
                fmt(c.tps_a, 1),
                fmt(c.tps_b, 1),
                fmt(c.speedup, 2),
                fmt(c.decode_tps_a, 1),
                fmt(c.decode_tps_b, 1),
                fmt(c.decode_speedup, 2)
            );
        }
        out
    }
}
