//! Flat run configuration: one TOML table of scalar keys, every key
//! defaulted, unknown keys rejected.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use lamate::adaptor::AdaptorConfig;
use lamate::data::{Direction, Profile, Task, Vocab};
use lamate::decoder::{DecoderConfig, Variant};
use lamate::decoding::GenerationConfig;
use lamate::encoder::EncoderConfig;
use lamate::model::ModelConfig;
use lamate::training::{Hyperparams, Scheduler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model initialisation and sampling seed.
    pub seed: u64,
    /// "f32" or "f64".
    pub dtype: String,

    // synthetic data
    pub world_seed: u64,
    pub content: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_sents: usize,
    pub max_sents: usize,
    pub max_terms: usize,
    pub max_corruptions: usize,
    /// Comma-separated subset of fwd, bwd, copy.
    pub directions: String,
    pub mix_general: f64,
    pub mix_doc: f64,
    pub mix_domain: f64,
    pub mix_terminology: f64,
    pub mix_postedit: f64,

    // encoder (causal LM)
    pub enc_layers: usize,
    pub enc_dim: usize,
    pub enc_heads: usize,
    pub enc_kv_heads: usize,
    pub enc_max_len: usize,
    pub groups: usize,
    pub rope_base: f64,

    // adaptor and decoder
    pub n_enc: usize,
    pub adaptor_heads: usize,
    pub variant: String,
    pub dec_layers: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub max_target_len: usize,
    pub dropout: f64,

    // optimisation, shared
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub label_smoothing: f64,

    pub lm_lr: f64,
    pub lm_scheduler: String,
    pub lm_steps: usize,
    pub lm_batch: usize,
    pub lm_micro_batch: usize,

    pub s1_lr: f64,
    pub s1_scheduler: String,
    pub s1_steps: usize,
    pub s1_batch: usize,
    pub s1_micro_batch: usize,

    pub s2_lr: f64,
    pub s2_scheduler: String,
    pub s2_steps: usize,
    pub s2_batch: usize,
    pub s2_micro_batch: usize,

    // generation
    pub beam: usize,
    pub gen_max_len: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub length_normalize: bool,

    // locations, relative to the run directory
    pub lm_data: String,
    pub train_data: String,
    pub mix_data: String,
    pub lm_dir: String,
    pub stage1_dir: String,
    pub stage2_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = Profile::default();
        let e = EncoderConfig::default();
        let a = AdaptorConfig::default();
        let d = DecoderConfig::default();
        let (lm, s1, s2) = (Hyperparams::lm(), Hyperparams::stage1(), Hyperparams::stage2());
        let g = GenerationConfig::default();
        RunConfig {
            seed: 0,
            dtype: "f32".into(),
            world_seed: p.world_seed,
            content: p.content,
            min_len: p.min_len,
            max_len: p.max_len,
            min_sents: p.min_sents,
            max_sents: p.max_sents,
            max_terms: p.max_terms,
            max_corruptions: p.max_corruptions,
            directions: "fwd,bwd".into(),
            mix_general: 0.25,
            mix_doc: 0.05,
            mix_domain: 0.05,
            mix_terminology: 0.4,
            mix_postedit: 0.25,
            enc_layers: e.layers,
            enc_dim: e.dim,
            enc_heads: e.heads,
            enc_kv_heads: e.kv_heads,
            enc_max_len: e.max_len,
            groups: e.groups,
            rope_base: e.rope_base,
            n_enc: a.n_enc,
            adaptor_heads: a.heads,
            variant: d.variant.name().into(),
            dec_layers: d.layers,
            dec_dim: d.dim,
            dec_heads: d.heads,
            max_target_len: d.max_target_len,
            dropout: 0.0,
            beta1: s1.beta1,
            beta2: s1.beta2,
            adam_eps: s1.adam_eps,
            weight_decay: s1.weight_decay,
            warmup_ratio: s1.warmup_ratio,
            label_smoothing: s1.label_smoothing,
            lm_lr: lm.peak_lr,
            lm_scheduler: "cosine".into(),
            lm_steps: lm.train_steps,
            lm_batch: lm.global_batch,
            lm_micro_batch: lm.micro_batch,
            s1_lr: s1.peak_lr,
            s1_scheduler: "inverse_sqrt".into(),
            s1_steps: s1.train_steps,
            s1_batch: s1.global_batch,
            s1_micro_batch: s1.micro_batch,
            s2_lr: s2.peak_lr,
            s2_scheduler: "cosine".into(),
            s2_steps: s2.train_steps,
            s2_batch: s2.global_batch,
            s2_micro_batch: s2.micro_batch,
            beam: g.beam_size,
            gen_max_len: g.max_len,
            temperature: g.temperature,
            top_k: g.top_k,
            top_p: g.top_p,
            length_normalize: g.length_normalize,
            lm_data: "data/lm.txt".into(),
            train_data: "data/train.jsonl".into(),
            mix_data: "data/mix.jsonl".into(),
            lm_dir: "lm".into(),
            stage1_dir: "stage1".into(),
            stage2_dir: "stage2".into(),
        }
    }
}

/// Marks failures caused by the command line or configuration (exit 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl RunConfig {
    /// Defaults, then `file` (when given), then `key=value` overrides.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("config: reading {}", p.display()))?;
                text.parse::<toml::Table>().map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for kv in overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| usage(format!("--set expects key=value, got {kv:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            // Bare words that are not TOML literals are taken as strings.
            let value = format!("x = {v}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("x"))
                .unwrap_or_else(|| toml::Value::String(v.to_string()));
            table.insert(k.to_string(), value);
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e| usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dtype != "f32" && self.dtype != "f64" {
            return Err(usage(format!("config: dtype must be f32 or f64, got {:?}", self.dtype)));
        }
        self.profile()?.validate().map_err(|e| usage(format!("config: {e}")))?;
        self.model()?.validate().map_err(|e| usage(format!("config: {e}")))?;
        for hp in [self.lm_hp()?, self.stage_hp(1)?, self.stage_hp(2)?] {
            hp.validate().map_err(|e| usage(format!("config: {e}")))?;
        }
        self.generation().validate().map_err(|e| usage(format!("config: {e}")))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::with_content(self.content)
    }

    pub fn profile(&self) -> Result<Profile> {
        let directions = self
            .directions
            .split(',')
            .map(|d| d.trim().parse::<Direction>().map_err(|e| usage(format!("config: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Profile {
            min_len: self.min_len,
            max_len: self.max_len,
            min_sents: self.min_sents,
            max_sents: self.max_sents,
            content: self.content,
            directions,
            max_terms: self.max_terms,
            max_corruptions: self.max_corruptions,
            world_seed: self.world_seed,
        })
    }

    pub fn mixture(&self) -> Vec<(Task, f64)> {
        vec![
            (Task::General, self.mix_general),
            (Task::Doc, self.mix_doc),
            (Task::Domain, self.mix_domain),
            (Task::Terminology, self.mix_terminology),
            (Task::Postedit, self.mix_postedit),
        ]
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.enc_layers,
            dim: self.enc_dim,
            heads: self.enc_heads,
            kv_heads: self.enc_kv_heads,
            vocab_size: self.vocab().len(),
            max_len: self.enc_max_len,
            groups: self.groups,
            rope_base: self.rope_base,
        }
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let variant: Variant = self.variant.parse().map_err(|e| usage(format!("config: {e}")))?;
        Ok(ModelConfig {
            encoder: self.encoder(),
            adaptor: AdaptorConfig {
                groups: self.groups,
                d1: self.enc_dim,
                d2: self.dec_dim,
                n_enc: self.n_enc,
                enc_stack_enabled: self.n_enc > 0,
                heads: self.adaptor_heads,
            },
            decoder: DecoderConfig {
                variant,
                layers: self.dec_layers,
                dim: self.dec_dim,
                heads: self.dec_heads,
                vocab_size: self.vocab().len(),
                max_target_len: self.max_target_len,
            },
            dropout: self.dropout,
        })
    }

    fn hp(&self, lr: f64, sched: &str, steps: usize, batch: usize, micro: usize, seed: u64) -> Result<Hyperparams> {
        let scheduler: Scheduler = sched.parse().map_err(|e| usage(format!("config: {e}")))?;
        Ok(Hyperparams {
            peak_lr: lr,
            scheduler,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            warmup_ratio: self.warmup_ratio,
            weight_decay: self.weight_decay,
            global_batch: batch,
            micro_batch: micro,
            train_steps: steps,
            seed,
            label_smoothing: self.label_smoothing,
        })
    }

    pub fn lm_hp(&self) -> Result<Hyperparams> {
        self.hp(self.lm_lr, &self.lm_scheduler, self.lm_steps, self.lm_batch, self.lm_micro_batch, self.seed ^ 0x11)
    }

    pub fn stage_hp(&self, stage: u8) -> Result<Hyperparams> {
        match stage {
            1 => self.hp(
                self.s1_lr,
                &self.s1_scheduler,
                self.s1_steps,
                self.s1_batch,
                self.s1_micro_batch,
                self.seed ^ 0x21,
            ),
            2 => self.hp(
                self.s2_lr,
                &self.s2_scheduler,
                self.s2_steps,
                self.s2_batch,
                self.s2_micro_batch,
                self.seed ^ 0x22,
            ),
            _ => bail!(UsageError(format!("stage must be 1 or 2, got {stage}"))),
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            beam_size: self.beam,
            max_len: self.gen_max_len,
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
            seed: self.seed,
            length_normalize: self.length_normalize,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg =
            RunConfig::load(None, &["s1_lr=0.005".into(), "variant=prefix".into(), "dtype=\"f64\"".into()]).unwrap();
        assert_eq!(cfg.s1_lr, 0.005);
        assert_eq!(cfg.variant, "prefix");
        assert_eq!(cfg.dtype, "f64");
        let err = RunConfig::load(None, &["no_such_key=1".into()]).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(RunConfig::load(None, &["variant=diagonal".into()]).is_err());
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn stage_defaults_keep_stage_two_below_stage_one() {
        let cfg = RunConfig::default();
        assert!(cfg.stage_hp(2).unwrap().peak_lr < cfg.stage_hp(1).unwrap().peak_lr);
    }
}
