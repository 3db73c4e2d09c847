//! Model coefficients for the slow-fast mean-field system
//!
//! ```text
//! dX = f1(X, L_X, Y) dt + g1(X, L_X) dW^1 + l(L_X) dB^H
//! dY = (1/ε) b(X, L_X, Y) dt + (1/√ε) σ1(X, L_X, Y) dW^1 + (1/√ε) σ2(X, L_X, Y) dW^2
//! ```
//!
//! Coefficients are user-supplied closures over `(x, μ, y)` with declared
//! Lipschitz and dissipativity constants; the declarations are claims that
//! `checks::check_assumption_h1` probes empirically, not facts the solvers
//! trust blindly.

use std::sync::Arc;

use thiserror::Error;

use crate::linalg::DMat;
use crate::measure::EmpiricalMeasure;

#[derive(Debug, Error)]
pub enum CoeffError {
    #[error("{name} returned shape {got:?}, expected {expected:?}")]
    BadShape {
        name: &'static str,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("{name} returned a non-finite value on a finite probe input")]
    NonFinite { name: &'static str },
    #[error("declared constants must be positive: C = {c}, alpha = {alpha}")]
    BadConstants { c: f64, alpha: f64 },
}

/// State and driver dimensions: slow/fast state in `R^d`, `W^1` and the fBm
/// in `R^{d1}`, `W^2` in `R^{d2}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub d1: usize,
    pub d2: usize,
}

pub type DriftFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure, &[f64]) -> Vec<f64> + Send + Sync>;
pub type SlowDiffusionFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure) -> DMat + Send + Sync>;
pub type MeasureDiffusionFn = Arc<dyn Fn(&EmpiricalMeasure) -> DMat + Send + Sync>;
pub type FastDiffusionFn = Arc<dyn Fn(&[f64], &EmpiricalMeasure, &[f64]) -> DMat + Send + Sync>;

/// The six model coefficients plus declared regularity constants.
#[derive(Clone)]
pub struct CoefficientSet {
    pub dims: Dims,
    /// Slow drift `f1(x, μ, y) ∈ R^d`.
    pub f1: DriftFn,
    /// Slow Brownian diffusion `g1(x, μ) ∈ R^{d×d1}`.
    pub g1: SlowDiffusionFn,
    /// fBm diffusion `l(μ) ∈ R^{d×d1}`.
    pub l: MeasureDiffusionFn,
    /// Fast drift `b(x, μ, y) ∈ R^d`.
    pub b: DriftFn,
    /// Fast diffusion against `W^1`, `σ1(x, μ, y) ∈ R^{d×d1}`.
    pub sigma1: FastDiffusionFn,
    /// Fast diffusion against `W^2`, `σ2(x, μ, y) ∈ R^{d×d2}`.
    pub sigma2: FastDiffusionFn,
    /// Declared joint Lipschitz constant `C`.
    pub lipschitz: f64,
    /// Declared dissipativity constant `α`.
    pub dissipativity: f64,
    /// Optional declared growth bound for the fast diffusions.
    pub growth: Option<f64>,
}

impl CoefficientSet {
    /// Evaluate every coefficient at a probe point and verify shapes,
    /// finiteness, and the declared constants.
    pub fn validate(&self) -> Result<(), CoeffError> {
        if !(self.lipschitz > 0.0) || !(self.dissipativity > 0.0) {
            return Err(CoeffError::BadConstants {
                c: self.lipschitz,
                alpha: self.dissipativity,
            });
        }
        let Dims { d, d1, d2 } = self.dims;
        let x = vec![0.1; d];
        let y = vec![-0.2; d];
        let mu = EmpiricalMeasure::dirac(&x);
        let vec_check = |name: &'static str, v: &[f64]| {
            if v.len() != d {
                return Err(CoeffError::BadShape {
                    name,
                    got: (v.len(), 1),
                    expected: (d, 1),
                });
            }
            if v.iter().any(|t| !t.is_finite()) {
                return Err(CoeffError::NonFinite { name });
            }
            Ok(())
        };
        let mat_check = |name: &'static str, m: &DMat, cols: usize| {
            if m.rows() != d || m.cols() != cols {
                return Err(CoeffError::BadShape {
                    name,
                    got: (m.rows(), m.cols()),
                    expected: (d, cols),
                });
            }
            if !m.is_finite() {
                return Err(CoeffError::NonFinite { name });
            }
            Ok(())
        };
        vec_check("f1", &(self.f1)(&x, &mu, &y))?;
        vec_check("b", &(self.b)(&x, &mu, &y))?;
        mat_check("g1", &(self.g1)(&x, &mu), d1)?;
        mat_check("l", &(self.l)(&mu), d1)?;
        mat_check("sigma1", &(self.sigma1)(&x, &mu, &y), d1)?;
        mat_check("sigma2", &(self.sigma2)(&x, &mu, &y), d2)?;
        Ok(())
    }
}
