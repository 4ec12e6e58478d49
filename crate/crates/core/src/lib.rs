//! A causal language model used as a translation encoder, bridged by an
//! adaptor (layer-group fusion, MLP, optional bidirectional stack) to a
//! lightweight decoder.
//!
//! Module map:
//! - [`tensor`]: dense tensors, kernels, reverse-mode tape, gradient check
//! - [`attention`]: masks, multi-head attention, RoPE, KV caches
//! - [`encoder`], [`adaptor`], [`decoder`], [`model`]: the network
//! - [`training`]: optimizer, schedules, two-stage training
//! - [`decoding`]: beam search and sampling
//! - [`kv`]: analytic KV-cache model and decoding benchmark
//! - [`data`]: synthetic task corpora, vocabulary, JSONL I/O
//! - [`metrics`]: BLEU, TSR, HTER, sequence accuracy
//! - [`checkpoint`]: named-tensor container

pub mod adaptor;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
