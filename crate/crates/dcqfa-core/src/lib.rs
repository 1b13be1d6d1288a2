//! Core library for device-conditioned quantization-for-all (DC-QFA) policies.
//!
//! Everything in this crate is pure computation over in-memory data: a minimal
//! reverse-mode tensor library, simulated quantization, an elastic
//! weight-sharing transformer supernet, device cost models, closed-loop toy
//! environments, the quantization-aware trainer, multi-step on-policy
//! distillation, and constrained NSGA-II subnet search. File formats, the CLI,
//! and everything else that needs an operating system live in the companion
//! `dcqfa-cli` crate.
//!
//! The crate is `no_std` (with `alloc`); float transcendentals come from
//! `libm` so results are bit-reproducible across runs.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod configspace;
pub mod costmodel;
pub mod env;
pub mod math;
pub mod numerics;
pub mod opd;
pub mod quant;
pub mod search;
pub mod supernet;
pub mod trainer;

pub use configspace::{LayerChoice, SearchSpace, SubnetConfig};
pub use costmodel::{BlockKey, DeviceProfile};
pub use numerics::{Tape, Tensor, VarId};
pub use quant::QuantizerSpec;
pub use search::{Individual, ParetoFront};
pub use supernet::Supernet;

/// Deterministic RNG used across sampling, environments and search.
pub type Rng = rand_chacha::ChaCha8Rng;
