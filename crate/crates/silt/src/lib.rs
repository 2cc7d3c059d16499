//! Simulation of self-intersection local times (SILT) for a planar Gaussian
//! field carried by deterministic and stochastic flows of interacting
//! particles.
//!
//! The library is organized around the objects it simulates:
//!
//! - [`field`]: the Gaussian field on `[0,1] x [1,2]` with covariance
//!   `exp(-|dy|^alpha) min(t1,t2)`, plus its same-covariance non-Gaussian twin.
//! - [`gram`]: Gram determinants, conditional variances, and the
//!   increment-chain lower bound they satisfy.
//! - [`localtime`]: multiplicity-k SILT estimators, the diffeomorphism-adapted
//!   delta family, the self-intersection measure, and its log-energy.
//! - [`flow_det`]: deterministic interaction flows driven by the occupation
//!   measure, the bounded-Wasserstein metric, and the closed-form linear flow
//!   used as an exact oracle.
//! - [`flow_iso`]: isotropic stochastic flows driven by a Wiener sheet through
//!   a compactly supported mollifier, with exact-in-law log-Jacobian tracking.
//! - [`experiments`]: composed Monte Carlo studies of the scaling laws, the
//!   renormalized martingale, hitting probabilities, and discretization
//!   convergence.
//! - [`harness`]: experiment registry, configuration, and result persistence
//!   behind the `silt` CLI.

pub mod error;
pub mod experiments;
pub mod field;
pub mod flow_det;
pub mod flow_iso;
pub mod gram;
pub mod harness;
pub mod localtime;
pub mod measure;
pub mod mollifier;
pub mod stream;
mod transport;

pub use error::{Result, SiltError};
pub use stream::Stream;
