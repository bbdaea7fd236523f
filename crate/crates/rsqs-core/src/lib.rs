//! Few-shot image classification under realistic support-query shift.
//!
//! This crate is the computational core behind the `rsqs` tool. It bundles:
//!
//! * [`tensor`] / [`tape`] — dense f64 tensors and tape-based reverse-mode
//!   autodiff over the small op set the networks need;
//! * [`shifts`] / [`data`] — fifteen image perturbation families with severity
//!   schedules, phase-disjoint family splits, a procedural grayscale dataset,
//!   and the episode sampler that applies per-instance shifts to support and
//!   query sets;
//! * [`models`] — the embedder, classifier head, bounded perturbation
//!   generator, and residual repairer;
//! * [`ot`] — entropic optimal transport (log-domain Sinkhorn), barycentric
//!   mapping, plan entropy, and a brute-force oracle for tiny instances;
//! * [`losses`] — cross-entropy, embedding distance, the adversarial
//!   generator/repairer objectives, and the NT-Xent contrastive loss;
//! * [`training`] — the alternating two-phase training loop with Adam/SGD and
//!   early stopping;
//! * [`fewshot`] — prototype/matching classification, transductive batch
//!   normalization, OT-aligned episode evaluation, and benchmark aggregation;
//! * [`theory`] — empirical Wasserstein-2 via exact assignment and Monte-Carlo
//!   checks of the perturbation-error bounds.
//!
//! The crate is `no_std` + `alloc`: all IO, file formats, threading, and
//! wall-clock concerns live in the companion CLI crate. Every random choice is
//! drawn from a caller-provided RNG; see [`rng`] for the master-seed substream
//! derivation used by the tool.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod fewshot;
pub mod losses;
pub mod models;
pub mod ot;
pub mod rng;
pub mod shifts;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
