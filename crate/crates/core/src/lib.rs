//! Inference-time hallucination correction by learned neuron perturbation.
//!
//! A small decoder-only transformer ([`tinylm`]) is pretrained on a synthetic
//! fact world with planted corruptions ([`taskgen`]). Prompts it answers wrongly
//! become episodes for a two-level PPO agent ([`hppo`]) that picks a neuron
//! category, a perturbation type, and a magnitude. The perturbation is shaped
//! per-neuron by a learned sparse mask ([`adamask`]) modulated by integrated
//! gradients attributions ([`attribution`]), applied temporarily inside the
//! forward pass, and scored by a programmatic judge ([`judge`]). The
//! environment lives in [`env`]; orchestration, CLI plumbing and file formats
//! live in [`harness`].

pub mod adamask;
pub mod attribution;
pub mod env;
mod error;
pub mod harness;
pub mod hppo;
pub mod judge;
pub mod optim;
pub mod records;
pub mod rng;
pub mod taskgen;
pub mod tinylm;

pub use error::{Error, Result};
