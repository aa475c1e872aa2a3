//! Numerical toolkit for large deviations of averaged slow-fast SDE systems
//!
//! The systems treated here have a slow component driven by a bounded drift
//! `f(x, y)` and a fast component living on a flat torus,
//!
//! ```text
//! dX_t = f(X_t, Y_t) dt
//! dY_t = eps^-2 B(X_t, Y_t) dt + eps^-1 C(X_t, Y_t) dW_t
//! ```
//!
//! As `eps -> 0` the slow paths satisfy a Freidlin-Wentzell style large
//! deviation principle with speed `eps^-2` and action
//! `S(phi) = int_0^T L(phi_t, dphi_t) dt`, where `L(x, .)` is the Legendre
//! transform of a Hamiltonian `H(x, beta)`: the long-time exponential growth
//! rate of `E exp(beta int f(x, y^x_s) ds)` along the frozen fast process.
//! `H` is also the logarithm of the spectral radius of the time-1
//! Feynman-Kac operator of the frozen process, which is what makes it
//! computable by a grid eigensolver.
//!
//! The crate provides:
//!
//! * [`model`] — system specifications (coefficient triples on a torus),
//!   builtin example systems, and sampled validation of the declared bounds;
//! * [`fastsim`] — Euler-Maruyama simulation of the frozen fast process,
//!   occupation measures and invariant averages;
//! * [`hamiltonian`] — `H(x', x, beta)` by the spectral route (principal
//!   eigenvalue of generator + potential) and the Monte Carlo long-time
//!   route, with gradients and tabulated surfaces;
//! * [`rate`] — the (truncated) Legendre transform `L`/`L^b`, adjoint
//!   maximizers, domain boxes, and the zero-rate averaged drift;
//! * [`action`] — path objects, step/piecewise-linear discretizations and
//!   the action functional;
//! * [`twoscale`] — the coupled two-scale simulator, frozen-coupling error,
//!   and the block exponential-moment verifier;
//! * [`ldp`] — Monte Carlo tube probabilities over an epsilon sweep with
//!   rescaled log-probabilities;
//! * [`minpath`] — minimum-action paths between fixed endpoints.

pub mod action;
pub mod error;
pub mod fastsim;
pub mod hamiltonian;
pub mod ldp;
pub mod minpath;
pub mod model;
pub mod rate;
pub mod rng;
pub mod stats;
pub mod twoscale;

pub use action::{ActionValue, Path, PiecewiseLinearPath, StepPath};
pub use error::{Error, Result};
pub use hamiltonian::{EigenPair, FeynmanKacOperator, HamiltonianSurface};
pub use ldp::LdpEstimate;
pub use minpath::{MinActionProblem, MinActionResult};
pub use model::{BuiltinSystem, SystemSpec, TorusGeometry, ValidationReport};
pub use rate::{AdjointResult, DomainBox, RateFunction};
pub use twoscale::{CoupledTrajectory, SimConfig, TwoScaleSchedule};
