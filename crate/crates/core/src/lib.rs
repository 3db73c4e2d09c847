//! Simulation and numerical-optimization toolkit for slow-fast mean-field
//! (McKean-Vlasov) SDEs driven jointly by Brownian motion and fractional
//! Brownian motion with Hurst index `H > 1/2`.
//!
//! The crate is organized around six building blocks:
//!
//! * [`frac_ops`] — fractional calculus and the reproducing-kernel operators
//!   of fBm: Riemann-Liouville integrals/derivatives, the Volterra kernel
//!   `K_H`, its adjoint `K_H*`, the embedding `R_H` and the RKHS inner
//!   product, all discretized by product integration so that the singular
//!   kernel weights are integrated exactly.
//! * [`noise`] — reproducible Brownian and fBm path generation (circulant
//!   embedding with a Cholesky fallback, plus an independent Volterra-kernel
//!   construction for cross-validation).
//! * [`measure`] — empirical measures, moments and Wasserstein-2 distances.
//! * [`dynamics`] — interacting-particle solvers for the slow-fast system,
//!   its small-noise and controlled variants, the frozen fast equation and
//!   invariant-measure estimation, the averaged and limit equations, and the
//!   block-frozen auxiliary process.
//! * [`ldp`] — the deterministic skeleton equation, rate-function
//!   minimization over Cameron-Martin/RKHS control pairs, and Monte Carlo
//!   rare-event and Laplace-functional estimation.
//! * [`checks`] — named statistical property checks that turn the model
//!   assumptions and the quantitative averaging/continuity estimates into
//!   runnable pass/fail verdicts.

pub mod checks;
pub mod coeffs;
pub mod controls;
pub mod dynamics;
pub mod frac_ops;
pub mod grid;
pub mod ldp;
pub mod linalg;
pub mod measure;
pub mod models;
pub mod noise;
pub mod optim;
pub mod special;
pub mod stats;

pub use coeffs::{CoefficientSet, Dims};
pub use controls::ControlPair;
pub use dynamics::{EnsemblePath, RunSeed, ScaleParams, SimOptions};
pub use grid::{GridFunction, HurstParam, SampleKind, TimeGrid};
pub use measure::EmpiricalMeasure;
pub use noise::SeedSpec;

