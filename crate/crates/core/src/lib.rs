//! Robust kernel-based identification of FIR models under heavy-tailed noise.
//!
//! The impulse response gets a tuned/correlated (TC) Gaussian prior and the
//! measurement noise is modelled as a Gaussian scale mixture (Laplacian or
//! Student's t). Hyperparameters, noise variances and the impulse response
//! are estimated jointly by expectation-maximization.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod baseline;
pub mod bench;
pub mod em;
pub mod error;
pub mod kernel;
pub mod noise;
pub mod par;
pub mod posterior;
pub mod rng;
pub mod signals;

pub use baseline::{estimate_noise_variance, fit_ss_ml};
pub use bench::{run_monte_carlo, BenchConfig, FitReport, Method, Scenario};
pub use em::{run_em, EmOptions, Estimate};
pub use error::{Error, Result};
pub use kernel::{build_kernel, KernelParams};
pub use noise::{Dof, Grouping, NoiseKind, NoiseModel};
pub use posterior::{compute_posterior, Hyperparameters, Posterior};
pub use signals::{Dataset, ImpulseResponse, RationalSystem};
