//! Multi-fidelity design-space exploration for deep-learning accelerators.
//!
//! The crate is organised bottom-up:
//!
//! * [`workload`] – layer shapes, the discrete HW/SW design space and the
//!   40-component feature encoding consumed by every model.
//! * [`oracle`] – the cheap analytical cost model ([`oracle::low`]) and the
//!   cycle-approximate tile simulator ([`oracle::high`]).
//! * [`sampling`] – Sobol sequences, lattice mapping and dataset collection.
//! * [`nn`] – a small dense-network engine with reverse-mode gradients and Adam.
//! * [`starlight_low`] – the VAE + predictor source model trained on the cheap oracle.
//! * [`gp`] – exact Gaussian-process regression with a Matérn-5/2 kernel.
//! * [`starlight`] – the transferred deep-kernel-learning surrogate.
//! * [`optimizer`] – the two-level UCB Bayesian-optimization loop.
//! * [`baselines`] – Offline Random, a from-scratch GP BO and the surrogate ablations.
//! * [`metrics`] – rank correlation, histogram KL and run summaries.
//! * [`pipeline`] – end-to-end experiment presets shared by the CLI and tests.

pub mod baselines;
pub mod error;
pub mod gp;
pub mod hash;
pub mod metrics;
pub mod nn;
pub mod optimizer;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod sampling;
pub mod starlight;
pub mod starlight_low;
pub mod workload;

pub use error::{Error, Result};
