//! Beam search and temperature/top-k/top-p sampling over any incremental
//! model.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS};
use crate::decoder::DecoderState;
use crate::error::{Error, Result};
use crate::model::{Lamate, LamateNet};
use crate::tensor::ops::log_softmax_f64;
use crate::tensor::{Float, ParamSet};

/// A model that can be advanced one token at a time.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;
    /// End-of-sequence id; `None` disables early termination.
    fn eos(&self) -> Option<usize>;
    fn bos(&self) -> usize;
    /// Longest sequence the model can generate.
    fn max_len(&self) -> usize;
    fn init(&self) -> Result<Self::State>;
    /// Feeds one token per state and returns next-token logits per state.
    fn step(&self, tokens: &[usize], states: &mut [Self::State]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Generated tokens, including a final EOS when one was produced.
    pub tokens: Vec<usize>,
    /// Sum of the model's log-probabilities of `tokens`.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens with a trailing `eos` removed.
    pub fn output(&self, eos: Option<usize>) -> &[usize] {
        match (self.tokens.last(), eos) {
            (Some(&t), Some(e)) if t == e => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub temperature: f64,
    /// 0 keeps the whole vocabulary.
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
    /// Rank final hypotheses by mean instead of summed log-probability.
    pub length_normalize: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            beam_size: 5,
            max_len: 64,
            temperature: 0.7,
            top_k: 50,
            top_p: 0.8,
            seed: 0,
            length_normalize: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 {
            return Err(Error::arg("beam_size and max_len must be positive"));
        }
        if !(self.temperature > 0.0) || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::arg(format!(
                "temperature {} must be > 0 and top_p {} in (0, 1]",
                self.temperature, self.top_p
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Every finished hypothesis plus the surviving live ones, best first.
    pub beam: Vec<Hypothesis>,
}

struct Live<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
}

fn rank_key(h: &Hypothesis, normalize: bool) -> f64 {
    if normalize && !h.tokens.is_empty() {
        h.log_prob / h.tokens.len() as f64
    } else {
        h.log_prob
    }
}

/// Beam search over summed log-probabilities.
///
/// Candidates are ordered by score, then lower token id, then lower beam
/// index. A candidate ending in EOS among the top `beam_size` is frozen as
/// finished; the search keeps `beam_size` live hypotheses and stops when
/// no live one can beat the best finished score or `max_len` is reached.
pub fn beam_search<M: StepModel>(model: &M, cfg: &GenerationConfig) -> Result<BeamOutput> {
    let width = cfg.beam_size;
    if width < 1 {
        return Err(Error::arg("beam_size must be at least 1"));
    }
    let max_len = cfg.max_len.min(model.max_len());
    if max_len == 0 {
        return Err(Error::arg("max_len must be at least 1"));
    }
    let eos = model.eos();
    let mut live = vec![Live { tokens: Vec::new(), log_prob: 0.0, state: model.init()? }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for len in 1..=max_len {
        let tokens: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(model.bos())).collect();
        let mut states: Vec<M::State> = live.iter().map(|h| h.state.clone()).collect();
        let logits = model.step(&tokens, &mut states)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * model.vocab_size());
        for (bi, row) in logits.iter().enumerate() {
            for (tok, lp) in log_softmax_f64(row).into_iter().enumerate() {
                cands.push((live[bi].log_prob + lp, tok, bi));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for (rank, &(score, tok, bi)) in cands.iter().enumerate() {
            let mut toks = live[bi].tokens.clone();
            toks.push(tok);
            if Some(tok) == eos {
                if rank < width {
                    finished.push(Hypothesis { tokens: toks, log_prob: score, finished: true });
                }
                continue;
            }
            if next.len() == width {
                break;
            }
            next.push(Live { tokens: toks, log_prob: score, state: states[bi].clone() });
        }
        live = next;
        if len == max_len {
            finished.extend(live.drain(..).map(|h| Hypothesis {
                tokens: h.tokens,
                log_prob: h.log_prob,
                finished: true,
            }));
            break;
        }
        let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (!cfg.length_normalize && best_done >= best_live) {
            break;
        }
    }
    let mut beam: Vec<Hypothesis> = finished;
    beam.extend(live.into_iter().map(|h| Hypothesis { tokens: h.tokens, log_prob: h.log_prob, finished: false }));
    // Stable sort keeps discovery order among equal scores.
    beam.sort_by(|a, b| rank_key(b, cfg.length_normalize).total_cmp(&rank_key(a, cfg.length_normalize)));
    let best = beam
        .iter()
        .find(|h| h.finished)
        .cloned()
        .ok_or_else(|| Error::State("beam search ended without a finished hypothesis".into()))?;
    Ok(BeamOutput { best, beam })
}

/// Greedy argmax decoding (beam of one).
pub fn greedy<M: StepModel>(model: &M, max_len: usize) -> Result<Hypothesis> {
    let cfg = GenerationConfig { beam_size: 1, max_len, ..GenerationConfig::default() };
    Ok(beam_search(model, &cfg)?.best)
}

/// Applies the sampling filters to a probability vector: keep the `top_k`
/// most probable tokens (ties to the lower id), then the smallest prefix
/// whose mass reaches `top_p`, then renormalize. Returns `(token, prob)`
/// pairs in descending probability.
pub fn filter_probs(probs: &[f64], top_k: usize, top_p: f64) -> Result<Vec<(usize, f64)>> {
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::arg(format!("top_p must lie in (0, 1], got {top_p}")));
    }
    let mut order: Vec<(usize, f64)> = probs.iter().copied().enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if top_k > 0 {
        order.truncate(top_k);
    }
    let mut mass = 0.0;
    let mut keep = 0;
    for &(_, p) in &order {
        mass += p;
        keep += 1;
        if mass >= top_p - 1e-12 {
            break;
        }
    }
    order.truncate(keep);
    let total: f64 = order.iter().map(|p| p.1).sum();
    if order.is_empty() || !(total > 0.0) {
        return Err(Error::State("sampling filter left no support".into()));
    }
    Ok(order.into_iter().map(|(t, p)| (t, p / total)).collect())
}

/// Temperature-scaled softmax followed by [`filter_probs`].
pub fn filter_logits(logits: &[f64], temperature: f64, top_k: usize, top_p: f64) -> Result<Vec<(usize, f64)>> {
    if !(temperature > 0.0) {
        return Err(Error::arg(format!("temperature must be positive, got {temperature}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let probs: Vec<f64> = log_softmax_f64(&scaled).into_iter().map(f64::exp).collect();
    filter_probs(&probs, top_k, top_p)
}

fn draw(support: &[(usize, f64)], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, p) in support {
        acc += p;
        if u < acc {
            return t;
        }
    }
    support.last().expect("non-empty support").0
}

/// Samples one sequence with a generator seeded from `cfg.seed`.
pub fn sample<M: StepModel>(model: &M, cfg: &GenerationConfig) -> Result<Hypothesis> {
    sample_with_rng(model, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Samples one sequence drawing from `rng`. `log_prob` uses the model's
/// unfiltered distribution so that re-scoring reproduces it.
pub fn sample_with_rng<M: StepModel>(model: &M, cfg: &GenerationConfig, rng: &mut ChaCha8Rng) -> Result<Hypothesis> {
    let max_len = cfg.max_len.min(model.max_len());
    let mut state = [model.init()?];
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut last = model.bos();
    while tokens.len() < max_len {
        let logits = model.step(&[last], &mut state)?;
        let support = filter_logits(&logits[0], cfg.temperature, cfg.top_k, cfg.top_p)?;
        let tok = draw(&support, rng);
        log_prob += log_softmax_f64(&logits[0])[tok];
        tokens.push(tok);
        last = tok;
        if Some(tok) == model.eos() {
            break;
        }
    }
    Ok(Hypothesis { tokens, log_prob, finished: true })
}

/// A trained LaMaTE bound to one input `(c, x)`.
pub struct LamateSession<'a, T: Float> {
    net: &'a LamateNet,
    params: &'a ParamSet<T>,
    start: DecoderState<T>,
}

impl<'a, T: Float> LamateSession<'a, T> {
    pub fn new(model: &'a Lamate<T>, c: &[usize], x: &[usize]) -> Result<Self> {
        let start = model.net.start(&model.params, c, x)?;
        Ok(LamateSession { net: &model.net, params: &model.params, start })
    }
}

impl<T: Float> StepModel for LamateSession<'_, T> {
    type State = DecoderState<T>;

    fn vocab_size(&self) -> usize {
        self.net.cfg.decoder.vocab_size
    }

    fn eos(&self) -> Option<usize> {
        Some(EOS)
    }

    fn bos(&self) -> usize {
        BOS
    }

    fn max_len(&self) -> usize {
        // One decoder slot is taken by `<s>`.
        self.net.cfg.decoder.max_target_len - 1
    }

    fn init(&self) -> Result<Self::State> {
        Ok(self.start.clone())
    }

    fn step(&self, tokens: &[usize], states: &mut [Self::State]) -> Result<Vec<Vec<f64>>> {
        let logits = self.net.decoder.step_batch(self.params, tokens, states)?;
        Ok((0..logits.rows()).map(|r| logits.row(r).iter().map(|v| v.f64()).collect()).collect())
    }
}

/// Greedy decoding of many inputs at once, one decoder step per position
/// for the whole batch. Returns outputs without EOS.
pub fn greedy_batch<T: Float>(
    model: &Lamate<T>,
    inputs: &[(&[usize], &[usize])],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let max_len = max_len.min(model.cfg().decoder.max_target_len - 1);
    let mut states =
        inputs.iter().map(|(c, x)| model.net.start(&model.params, c, x).map(Some)).collect::<Result<Vec<_>>>()?;
    let mut outs: Vec<Vec<usize>> = vec![Vec::new(); inputs.len()];
    let mut active: Vec<usize> = (0..inputs.len()).collect();
    let mut last = vec![BOS; inputs.len()];
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let toks: Vec<usize> = active.iter().map(|&i| last[i]).collect();
        let mut sub: Vec<DecoderState<T>> = active.iter().map(|&i| states[i].take().expect("active state")).collect();
        let logits = model.net.decoder.step_batch(&model.params, &toks, &mut sub)?;
        let mut still = Vec::with_capacity(active.len());
        for (r, (&i, st)) in active.iter().zip(sub).enumerate() {
            states[i] = Some(st);
            let tok = crate::nn::argmax(logits.row(r));
            if tok == EOS {
                continue;
            }
            outs[i].push(tok);
            last[i] = tok;
            still.push(i);
        }
        active = still;
    }
    Ok(outs)
}

/// Decodes one input with `cfg`: beam search, or sampling when `sampling`.
pub fn generate<T: Float>(
    model: &Lamate<T>,
    c: &[usize],
    x: &[usize],
    cfg: &GenerationConfig,
    sampling: bool,
) -> Result<Hypothesis> {
    let session = LamateSession::new(model, c, x)?;
    if sampling {
        sample(&session, cfg)
    } else {
        Ok(beam_search(&session, cfg)?.best)
    }
}

/// Fixed next-token logits indexed by prefix; unknown prefixes get uniform
/// logits.
#[derive(Clone, Debug)]
pub struct PrefixTable {
    pub vocab: usize,
    pub max_len: usize,
    pub eos: Option<usize>,
    pub logits: HashMap<Vec<usize>, Vec<f64>>,
}

impl PrefixTable {
    /// Random logits for every prefix shorter than `max_len`.
    pub fn random(vocab: usize, max_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = HashMap::new();
        let mut frontier = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for p in frontier {
                logits.insert(p.clone(), (0..vocab).map(|_| rng.random_range(-3.0..3.0)).collect());
                for t in 0..vocab {
                    let mut q: Vec<usize> = p.clone();
                    q.push(t);
                    next.push(q);
                }
            }
            frontier = next;
        }
        PrefixTable { vocab, max_len, eos: None, logits }
    }

    pub fn log_prob(&self, seq: &[usize]) -> f64 {
        (0..seq.len()).map(|i| log_softmax_f64(&self.row(&seq[..i]))[seq[i]]).sum()
    }

    fn row(&self, prefix: &[usize]) -> Vec<f64> {
        self.logits.get(prefix).cloned().unwrap_or_else(|| vec![0.0; self.vocab])
    }
}

impl StepModel for PrefixTable {
    type State = Option<Vec<usize>>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn eos(&self) -> Option<usize> {
        self.eos
    }

    fn bos(&self) -> usize {
        usize::MAX
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn init(&self) -> Result<Self::State> {
        Ok(None)
    }

    fn step(&self, tokens: &[usize], states: &mut [Self::State]) -> Result<Vec<Vec<f64>>> {
        Ok(tokens
            .iter()
            .zip(states.iter_mut())
            .map(|(&t, st)| {
                let prefix = match st.take() {
                    None => Vec::new(),
                    Some(mut p) => {
                        p.push(t);
                        p
                    }
                };
                let row = self.row(&prefix);
                *st = Some(prefix);
                row
            })
            .collect())
    }
}
