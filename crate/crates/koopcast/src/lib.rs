//! Koopman-operator forecasting of nonlinear continuous-time dynamics with
//! hard inductive biases on decay rates and frequencies.
//!
//! The model embeds measurements into a low-dimensional Koopman space with an
//! encoder network, evolves them there with an eigen-structured linear
//! operator whose spectrum can be fixed, sign-constrained, or range-bounded,
//! and maps back with a decoder network. Training minimizes multi-step
//! forecast and backcast errors on a single irregularly sampled sequence.
//!
//! Modules:
//! - [`gradcore`]: reverse-mode automatic differentiation over scalars and
//!   dense real matrices.
//! - [`spectral`]: constrained eigenvalue parameterization and real-block
//!   analytic propagation.
//! - [`model`]: encoder/decoder MLPs and the end-to-end forecaster.
//! - [`training`]: multi-step loss, Adam, early stopping, data splits.
//! - [`data`]: synthetic benchmark generators (RK4) and CSV I/O.
//! - [`baselines`]: exact DMD and constrained DMDF linear baselines.
//! - [`harness`]: experiment configuration, metrics, and CLI commands.

pub mod baselines;
pub mod data;
pub mod error;
pub mod gradcore;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod spectral;
pub mod training;

pub use error::{Error, Result};
