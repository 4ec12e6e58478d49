//! Optimizer, learning-rate schedules and the training loops: LM
//! pretraining, stage 1 (encoder frozen) and stage 2 (everything trained on
//! the task mixture).

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, Task};
use crate::encoder::CausalLm;
use crate::error::{Error, Result};
use crate::model::{Batch, Lamate};
use crate::tensor::{Float, Graph, ParamSet, Partition, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    InverseSqrt,
    Cosine,
}

impl std::str::FromStr for Scheduler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse_sqrt" => Ok(Scheduler::InverseSqrt),
            "cosine" => Ok(Scheduler::Cosine),
            _ => Err(Error::Config(format!("unknown scheduler {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub peak_lr: f64,
    pub scheduler: Scheduler,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    /// Examples per optimizer step.
    pub global_batch: usize,
    /// Examples per forward/backward pass; the gradient of a global batch
    /// is accumulated over `ceil(global_batch / micro_batch)` passes.
    pub micro_batch: usize,
    pub train_steps: usize,
    pub seed: u64,
    pub label_smoothing: f64,
}

impl Hyperparams {
    /// Stage 1 defaults: lr 5e-4 with inverse square-root decay.
    pub fn stage1() -> Self {
        Hyperparams {
            peak_lr: 5e-4,
            scheduler: Scheduler::InverseSqrt,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_ratio: 0.01,
            weight_decay: 0.01,
            global_batch: 64,
            micro_batch: 64,
            train_steps: 2000,
            seed: 1,
            label_smoothing: 0.0,
        }
    }

    /// Stage 2 defaults: lr 2e-5 with cosine decay.
    pub fn stage2() -> Self {
        Hyperparams {
            peak_lr: 2e-5,
            scheduler: Scheduler::Cosine,
            global_batch: 32,
            micro_batch: 32,
            train_steps: 500,
            seed: 2,
            ..Self::stage1()
        }
    }

    /// Language-model pretraining defaults.
    pub fn lm() -> Self {
        Hyperparams {
            peak_lr: 1e-3,
            scheduler: Scheduler::Cosine,
            global_batch: 32,
            micro_batch: 32,
            train_steps: 1000,
            seed: 3,
            ..Self::stage1()
        }
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_ratio * self.train_steps as f64).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.warmup_ratio >= 0.0
            && self.weight_decay >= 0.0
            && self.global_batch > 0
            && self.micro_batch > 0
            && (0.0..1.0).contains(&self.label_smoothing);
        if !ok {
            return Err(Error::Config(format!("invalid hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Learning rate at `step` (1-based).
pub fn lr_schedule(kind: Scheduler, step: usize, hp: &Hyperparams) -> f64 {
    let s = step.max(1) as f64;
    let w = hp.warmup_steps() as f64;
    let peak = hp.peak_lr;
    match kind {
        Scheduler::InverseSqrt => peak * (s / w).min((w / s).sqrt()),
        Scheduler::Cosine => {
            let total = hp.train_steps as f64;
            if s <= w || total <= w {
                peak * (s / w).min(1.0)
            } else {
                let progress = ((s - w) / (total - w)).min(1.0);
                0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW<T> {
    moments: HashMap<usize, (Vec<T>, Vec<T>)>,
    pub t: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new() -> Self {
        AdamW { moments: HashMap::new(), t: 0 }
    }

    /// Applies one update to every unfrozen parameter holding a gradient.
    /// A non-finite gradient aborts the step before anything changes.
    pub fn step(&mut self, params: &mut ParamSet<T>, lr: f64, hp: &Hyperparams) -> Result<()> {
        for (_, p) in params.iter() {
            if let Some(g) = &p.grad {
                if !p.frozen && !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
                }
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (hp.beta1, hp.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = params.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let n = g.len();
            let (m, v) = self.moments.entry(id.index()).or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let g = g.data();
            let (b1t, b2t) = (T::of(b1), T::of(b2));
            let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
            let (lr_t, wd, eps) = (T::of(lr), T::of(hp.weight_decay), T::of(hp.adam_eps));
            let (c1t, c2t) = (T::of(c1), T::of(c2));
            let vals = p.value.data_mut();
            for i in 0..n {
                m[i] = b1t * m[i] + ob1 * g[i];
                v[i] = b2t * v[i] + ob2 * g[i] * g[i];
                let mhat = m[i] / c1t;
                let vhat = v[i] / c2t;
                vals[i] -= lr_t * (mhat / (vhat.sqrt() + eps) + wd * vals[i]);
            }
        }
        Ok(())
    }
}

/// One logged row.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub task: String,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Overall loss per step (task `"all"`).
    pub losses: Vec<f64>,
    /// Every logged row, including per-task rows.
    pub records: Vec<StepRecord>,
    /// Largest absolute gradient seen on the fusion weights.
    pub fusion_grad_max: f64,
    pub seconds: f64,
}

impl TrainReport {
    pub fn first_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn last_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Mean of the last `n` step losses.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let k = n.min(self.losses.len()).max(1);
        self.losses[self.losses.len().saturating_sub(k)..].iter().sum::<f64>() / k as f64
    }

    /// Writes `step,lr,loss,task` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "step,lr,loss,task")?;
        for r in &self.records {
            writeln!(w, "{},{:e},{:.6},{}", r.step, r.lr, r.loss, r.task)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Cycles through shuffled epochs of indices.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Sampler { order: (0..n).collect(), cursor: n, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.reshuffle();
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

/// Optional per-step observer: `(step, loss)`; returning `false` stops
/// training early.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, f64) -> bool;

/// Next-token pretraining of a standalone causal LM.
pub fn lm_pretrain<T: Float>(
    lm: &mut CausalLm<T>,
    corpus: &[Vec<usize>],
    hp: &Hyperparams,
    mut hook: Option<StepHook<'_>>,
) -> Result<TrainReport> {
    hp.validate()?;
    let corpus: Vec<&Vec<usize>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if corpus.is_empty() {
        return Err(Error::arg("LM corpus has no sequence of length ≥ 2"));
    }
    let max = lm.encoder.cfg.max_len;
    if let Some(s) = corpus.iter().find(|s| s.len() > max) {
        return Err(Error::Length { len: s.len(), max });
    }
    lm.params.set_frozen(Partition::Theta, false);
    let mut opt = AdamW::new();
    let mut sampler = Sampler::new(corpus.len(), hp.seed);
    let mut report = TrainReport::default();
    let start = std::time::Instant::now();
    for step in 1..=hp.train_steps {
        let idx = sampler.take(hp.global_batch);
        let seqs: Vec<Vec<usize>> = idx.iter().map(|&i| corpus[i].clone()).collect();
        let norm = CausalLm::<T>::target_count(&seqs) as f64;
        lm.params.zero_grad();
        let mut loss = 0.0;
        for chunk in seqs.chunks(hp.micro_batch) {
            let mut g = Graph::new(&lm.params).with_dropout_seed(hp.seed ^ step as u64);
            let l = lm.loss_graph(&mut g, chunk, Some(norm), 0.0)?;
            loss += g.value(l).data()[0].f64();
            let grads = g.backward(l)?;
            drop(g);
            lm.params.accumulate(grads);
        }
        let lr = lr_schedule(hp.scheduler, step, hp);
        opt.step(&mut lm.params, lr, hp)?;
        report.losses.push(loss);
        report.records.push(StepRecord { step, lr, loss, task: "lm".into() });
        if let Some(h) = hook.as_mut() {
            if !h(step, loss) {
                break;
            }
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Options shared by both translation stages.
#[derive(Clone, Debug)]
pub struct StageOptions {
    /// Reuse encoder group states across steps while θ is frozen.
    pub cache_frozen_encoder: bool,
}

impl Default for StageOptions {
    fn default() -> Self {
        StageOptions { cache_frozen_encoder: true }
    }
}

fn check_examples(examples: &[Example]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::arg("empty training corpus"));
    }
    for (i, e) in examples.iter().enumerate() {
        if e.prompt.first() != Some(&e.task.tag()) {
            return Err(Error::Data { line: i + 1, msg: format!("prompt does not start with the {} tag", e.task) });
        }
        if e.source.is_empty() {
            return Err(Error::Data { line: i + 1, msg: "empty source".into() });
        }
    }
    Ok(())
}

fn run_translation<T: Float>(
    model: &mut Lamate<T>,
    examples: &[Example],
    hp: &Hyperparams,
    opts: &StageOptions,
    mut hook: Option<StepHook<'_>>,
) -> Result<TrainReport> {
    hp.validate()?;
    check_examples(examples)?;
    let max_t = model.cfg().decoder.max_target_len;
    let max_s = model.cfg().encoder.max_len;
    for (i, e) in examples.iter().enumerate() {
        if e.target.len() + 1 > max_t {
            return Err(Error::Data {
                line: i + 1,
                msg: format!("target of {} tokens exceeds {max_t}", e.target.len()),
            });
        }
        if e.prompt.len() + e.source.len() > max_s {
            return Err(Error::Data { line: i + 1, msg: format!("input exceeds {max_s} tokens") });
        }
    }
    let use_cache = opts.cache_frozen_encoder && model.params.is_frozen(Partition::Theta);
    let mut cache: HashMap<usize, Vec<Tensor<T>>> = HashMap::new();
    let fuse_id = model.net.adaptor.fuse_w;
    let mut opt = AdamW::new();
    let mut sampler = Sampler::new(examples.len(), hp.seed);
    let mut report = TrainReport::default();
    let start = std::time::Instant::now();
    for step in 1..=hp.train_steps {
        let idx = sampler.take(hp.global_batch);
        let norm: f64 = idx.iter().map(|&i| examples[i].target.len() + 1).sum::<usize>() as f64;
        model.params.zero_grad();
        let mut loss = 0.0;
        let mut per_task: BTreeMap<Task, (f64, usize)> = BTreeMap::new();
        for chunk in idx.chunks(hp.micro_batch) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = Batch::new(&refs);
            let groups = if use_cache {
                for &i in chunk {
                    if !cache.contains_key(&i) {
                        let e = &examples[i];
                        cache.insert(i, model.net.group_states(&model.params, &e.prompt, &e.source)?);
                    }
                }
                let k = model.cfg().encoder.groups;
                Some(
                    (0..k)
                        .map(|g| Tensor::vstack(&chunk.iter().map(|i| &cache[i][g]).collect::<Vec<_>>()))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let mut g = Graph::new(&model.params).with_dropout_seed(hp.seed ^ (step as u64) << 20);
            let l = model.net.loss_graph(&mut g, &batch, groups, Some(norm), hp.label_smoothing)?;
            loss += g.value(l).data()[0].f64();
            if let Some(rows) = g.row_losses(l) {
                let mut off = 0;
                for (e, &n) in refs.iter().zip(&batch.tgt_lens) {
                    let entry = per_task.entry(e.task).or_insert((0.0, 0));
                    entry.0 += rows[off..off + n].iter().sum::<f64>();
                    entry.1 += n;
                    off += n;
                }
            }
            let grads = g.backward(l)?;
            drop(g);
            if let Some(gw) = grads.get(fuse_id) {
                report.fusion_grad_max = gw.data().iter().fold(report.fusion_grad_max, |m, v| m.max(v.f64().abs()));
            }
            model.params.accumulate(grads);
        }
        let lr = lr_schedule(hp.scheduler, step, hp);
        opt.step(&mut model.params, lr, hp)?;
        report.losses.push(loss);
        report.records.push(StepRecord { step, lr, loss, task: "all".into() });
        if per_task.len() > 1 {
            for (task, (sum, n)) in per_task {
                report.records.push(StepRecord { step, lr, loss: sum / n as f64, task: task.name().into() });
            }
        }
        if let Some(h) = hook.as_mut() {
            if !h(step, loss) {
                break;
            }
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Stage 1: θ frozen, φ and ω trained on bitext.
pub fn train_stage1<T: Float>(
    model: &mut Lamate<T>,
    bitext: &[Example],
    hp: &Hyperparams,
    opts: &StageOptions,
    hook: Option<StepHook<'_>>,
) -> Result<TrainReport> {
    model.params.set_frozen(Partition::Theta, true);
    model.params.set_frozen(Partition::Phi, false);
    model.params.set_frozen(Partition::Omega, false);
    run_translation(model, bitext, hp, opts, hook)
}

/// Stage 2: every partition trained on the task mixture.
pub fn train_stage2<T: Float>(
    model: &mut Lamate<T>,
    mix: &[Example],
    hp: &Hyperparams,
    hook: Option<StepHook<'_>>,
) -> Result<TrainReport> {
    for p in [Partition::Theta, Partition::Phi, Partition::Omega] {
        model.params.set_frozen(p, false);
    }
    run_translation(model, mix, hp, &StageOptions { cache_frozen_encoder: false }, hook)
}

/// Runs the translation loop with whatever freeze flags `model` carries.
pub fn train_with_current_freezes<T: Float>(
    model: &mut Lamate<T>,
    examples: &[Example],
    hp: &Hyperparams,
    opts: &StageOptions,
) -> Result<TrainReport> {
    run_translation(model, examples, hp, opts, None)
}
