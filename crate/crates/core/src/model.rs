//! The assembled network: causal encoder, adaptor, decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptor::{Adaptor, AdaptorConfig};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{Example, BOS, EOS};
use crate::decoder::{Decoder, DecoderConfig, DecoderState};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{ops::log_softmax_f64, Float, Graph, ParamSet, Partition, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adaptor: AdaptorConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adaptor.validate()?;
        self.decoder.validate()?;
        let (e, a, d) = (&self.encoder, &self.adaptor, &self.decoder);
        if a.groups != e.groups || a.d1 != e.dim || a.d2 != d.dim {
            return Err(Error::Config(format!(
                "adaptor (K={}, d1={}, d2={}) does not bridge encoder (K={}, dim={}) and decoder (dim={})",
                a.groups, a.d1, a.d2, e.groups, e.dim, d.dim
            )));
        }
        if e.vocab_size != d.vocab_size {
            return Err(Error::Config("encoder and decoder vocabularies differ".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Packed training batch. Decoder inputs are `<s> y`, targets `y </s>`.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub enc_ids: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub prompt_lens: Vec<usize>,
    pub dec_in: Vec<usize>,
    pub targets: Vec<usize>,
    pub tgt_lens: Vec<usize>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Self {
        let mut b = Batch::default();
        for e in examples {
            b.enc_ids.extend(e.prompt.iter().chain(&e.source));
            b.src_lens.push(e.prompt.len() + e.source.len());
            b.prompt_lens.push(e.prompt.len());
            b.dec_in.push(BOS);
            b.dec_in.extend(&e.target);
            b.targets.extend(&e.target);
            b.targets.push(EOS);
            b.tgt_lens.push(e.target.len() + 1);
        }
        b
    }

    pub fn target_tokens(&self) -> usize {
        self.targets.len()
    }

    pub fn len(&self) -> usize {
        self.src_lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src_lens.is_empty()
    }
}

/// Parameter-free structure of the model; all methods read values through
/// a [`Graph`] or an explicit [`ParamSet`].
#[derive(Clone, Debug)]
pub struct LamateNet {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub adaptor: Adaptor,
    pub decoder: Decoder,
}

impl LamateNet {
    pub fn build<T: Float>(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(cfg.encoder.clone(), &mut ps, &mut rng)?;
        let adaptor = Adaptor::new(cfg.adaptor.clone(), &mut ps, &mut rng)?;
        let decoder = Decoder::new(cfg.decoder.clone(), &mut ps, &mut rng)?;
        Ok((LamateNet { cfg, encoder, adaptor, decoder }, ps))
    }

    /// Teacher-forced logits. `groups`, when given, are precomputed packed
    /// group states (valid only while the encoder is frozen).
    pub fn logits_graph<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        groups: Option<Vec<Tensor<T>>>,
    ) -> Result<Var> {
        let dropout = self.cfg.dropout;
        let group_vars: Vec<Var> = match groups {
            Some(ts) => ts.into_iter().map(|t| g.input(t)).collect(),
            None => {
                let states = self.encoder.forward_graph(g, &batch.enc_ids, &batch.src_lens, dropout)?;
                self.encoder.cfg.group_layers().into_iter().map(|l| states[l]).collect()
            }
        };
        let h = self.adaptor.forward_graph(g, &group_vars, &batch.src_lens, &batch.prompt_lens, dropout)?;
        self.decoder.forward_graph(g, h, &batch.src_lens, &batch.dec_in, &batch.tgt_lens, dropout)
    }

    /// Cross-entropy over target tokens, divided by `normalizer` (the
    /// batch's own target count when `None`).
    pub fn loss_graph<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &Batch,
        groups: Option<Vec<Tensor<T>>>,
        normalizer: Option<f64>,
        smoothing: f64,
    ) -> Result<Var> {
        let logits = self.logits_graph(g, batch, groups)?;
        let mask = vec![true; batch.targets.len()];
        g.cross_entropy(logits, &batch.targets, &mask, normalizer, smoothing)
    }

    /// Group states `g_1..g_K` of one `[c, x]` pass (plain tensors).
    pub fn group_states<T: Float>(&self, ps: &ParamSet<T>, c: &[usize], x: &[usize]) -> Result<Vec<Tensor<T>>> {
        let states = self.encoder.encode(ps, c, x)?;
        Ok(self.encoder.cfg.group_layers().into_iter().map(|l| states[l].clone()).collect())
    }

    /// Adaptor output `H'` for one input.
    pub fn memory<T: Float>(&self, ps: &ParamSet<T>, c: &[usize], x: &[usize]) -> Result<Tensor<T>> {
        let states = self.encoder.encode(ps, c, x)?;
        self.adaptor.forward(ps, &states, c.len())
    }

    pub fn start<T: Float>(&self, ps: &ParamSet<T>, c: &[usize], x: &[usize]) -> Result<DecoderState<T>> {
        let h = self.memory(ps, c, x)?;
        self.decoder.init_state(ps, &h)
    }

    /// Summed log-probability of `tokens` (without `<s>`) under teacher
    /// forcing.
    pub fn score<T: Float>(&self, ps: &ParamSet<T>, c: &[usize], x: &[usize], tokens: &[usize]) -> Result<f64> {
        let ex = Example {
            task: crate::data::Task::General,
            prompt: c.to_vec(),
            source: x.to_vec(),
            target: tokens.to_vec(),
            meta: Default::default(),
        };
        let batch = Batch::new(&[&ex]);
        let mut g = Graph::inference(ps);
        let logits = self.logits_graph(&mut g, &batch, None)?;
        let lg = g.value(logits);
        Ok(tokens.iter().enumerate().map(|(i, &t)| log_softmax_f64(lg.row(i))[t]).sum())
    }
}

/// Network plus parameters.
#[derive(Clone, Debug)]
pub struct Lamate<T: Float> {
    pub net: LamateNet,
    pub params: ParamSet<T>,
}

impl<T: Float> Lamate<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let (net, params) = LamateNet::build(cfg, seed)?;
        Ok(Lamate { net, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn cast<U: Float>(&self) -> Lamate<U> {
        Lamate { net: self.net.clone(), params: self.params.cast() }
    }

    /// Copies θ from a standalone LM with the same encoder config.
    pub fn load_encoder_from(&mut self, lm: &ParamSet<T>) -> Result<()> {
        for id in self.params.ids(Partition::Theta) {
            let name = self.params.get(id).name.clone();
            let src = lm.id(&name).ok_or_else(|| Error::Config(format!("LM lacks encoder tensor {name}")))?;
            self.params.set_value(&name, lm.value(src).clone())?;
        }
        Ok(())
    }

    /// One file per partition: `theta.ckpt`, `phi.ckpt`, `omega.ckpt`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.net.cfg)?;
        for part in [Partition::Theta, Partition::Phi, Partition::Omega] {
            checkpoint::save(&dir.join(format!("{}.ckpt", part.name())), &self.params, Some(part), cfg.clone())?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let theta = Checkpoint::read(&dir.join("theta.ckpt"))?;
        let cfg: ModelConfig = serde_json::from_value(theta.header.config.clone())?;
        let mut m = Lamate::new(cfg, 0)?;
        theta.load_into(&mut m.params)?;
        for part in [Partition::Phi, Partition::Omega] {
            Checkpoint::read(&dir.join(format!("{}.ckpt", part.name())))?.load_into(&mut m.params)?;
        }
        Ok(m)
    }
}
