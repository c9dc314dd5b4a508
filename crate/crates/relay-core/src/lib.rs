//! Translation by relaying between two monolingual decoder-only language
//! models: a source-side model produces hidden states, a trainable bridge
//! maps them into the target-side model's embedding space, and the target
//! model decodes conditioned on that soft prefix plus a textual prompt.
//!
//! The crate is self-contained: dense tensors with reverse-mode autodiff,
//! Adam with warmup, a small transformer LM, FC / cross-attention bridge
//! variants, LoRA adapters, greedy and beam decoding, BLEU and chrF, and a
//! deterministic synthetic language pair with an exact translation oracle.

pub mod autodiff;
pub mod bridge;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod relay;
pub mod rng;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
