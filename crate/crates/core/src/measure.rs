//! Empirical measures: uniform-weight particle clouds with moments and
//! Wasserstein-2 distances.
//!
//! Distance routing: in one dimension the quantile coupling is exact for any
//! pair of support sizes. In higher dimension the exact squared-cost
//! assignment (Jonker-Volgenant style shortest augmenting paths) is used up
//! to 64 points, beyond which a seeded sliced approximation stands in;
//! every result carries its method tag so callers can insist on exactness.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("empirical measure needs at least one support point")]
    Empty,
    #[error("support points must be finite")]
    NonFinite,
    #[error("support points must share one dimension")]
    RaggedSupport,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("exact transport in d > 1 needs equal support sizes, got {0} and {1}")]
    UnequalSupport(usize, usize),
}

/// Uniformly weighted particle cloud standing in for a law on `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: Vec<Vec<f64>>,
    dim: usize,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, MeasureError> {
        let dim = points.first().ok_or(MeasureError::Empty)?.len();
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(MeasureError::RaggedSupport);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MeasureError::NonFinite);
        }
        Ok(Self { points, dim })
    }

    /// Point mass at `x`.
    pub fn dirac(x: &[f64]) -> Self {
        Self::new(vec![x.to_vec()]).expect("dirac support is well formed")
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one point
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Raw moment `μ(|·|^p)` (not rooted). `p >= 1`.
    pub fn moment_p(&self, p: f64) -> f64 {
        assert!(p >= 1.0, "moments are defined for p >= 1");
        let n = self.points.len() as f64;
        self.points
            .iter()
            .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p))
            .sum::<f64>()
            / n
    }

    /// Support barycenter.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.points.len() as f64;
        let mut m = vec![0.0; self.dim];
        for p in &self.points {
            for (mc, v) in m.iter_mut().zip(p) {
                *mc += v / n;
            }
        }
        m
    }
}

/// How a Wasserstein-2 value was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum W2Method {
    /// Exact quantile coupling in d = 1.
    Sorted1d,
    /// Exact assignment on squared costs.
    Hungarian,
    /// Seeded sliced approximation (a lower-bound family).
    Sliced { projections: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct W2Result {
    pub value: f64,
    pub method: W2Method,
}

/// Wasserstein-2 with automatic method choice (see module docs).
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<W2Result, MeasureError> {
    if mu.dim() != nu.dim() {
        return Err(MeasureError::DimMismatch(mu.dim(), nu.dim()));
    }
    if mu.dim() == 1 {
        return Ok(W2Result {
            value: w2_sorted_1d(mu, nu),
            method: W2Method::Sorted1d,
        });
    }
    if mu.len() == nu.len() && mu.len() <= 64 {
        return Ok(W2Result {
            value: w2_hungarian(mu, nu)?,
            method: W2Method::Hungarian,
        });
    }
    let projections = 64;
    Ok(W2Result {
        value: w2_sliced(mu, nu, projections, 0x5_11ced),
        method: W2Method::Sliced { projections },
    })
}

/// Exact Wasserstein-2, for callers that refuse approximations: quantile
/// coupling in d = 1 (any sizes), assignment otherwise (equal sizes, any N —
/// cubic cost).
pub fn wasserstein2_exact(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Result<f64, MeasureError> {
    if mu.dim() != nu.dim() {
        return Err(MeasureError::DimMismatch(mu.dim(), nu.dim()));
    }
    if mu.dim() == 1 {
        return Ok(w2_sorted_1d(mu, nu));
    }
    w2_hungarian(mu, nu)
}

/// Quantile coupling in one dimension; exact for uniform empirical measures
/// with arbitrary support sizes (piecewise-constant quantile functions
/// integrated across the merged probability breakpoints).
fn w2_sorted_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let mut a: Vec<f64> = mu.points().iter().map(|p| p[0]).collect();
    let mut b: Vec<f64> = nu.points().iter().map(|p| p[0]).collect();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (a.len(), b.len());
    if n == m {
        let sq: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (sq / n as f64).sqrt();
    }
    let mut acc = 0.0;
    let mut u = 0.0;
    let mut i = 0;
    let mut j = 0;
    while u < 1.0 - 1e-15 {
        let ua = (i + 1) as f64 / n as f64;
        let ub = (j + 1) as f64 / m as f64;
        let next = ua.min(ub);
        let d = a[i] - b[j];
        acc += d * d * (next - u);
        if ua <= ub {
            i += 1;
        }
        if ub <= ua {
            j += 1;
        }
        u = next;
    }
    acc.sqrt()
}

/// Exact minimum-cost assignment on squared Euclidean costs (shortest
/// augmenting path with potentials, O(N^3)).
fn w2_hungarian(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    if mu.len() != nu.len() {
        return Err(MeasureError::UnequalSupport(mu.len(), nu.len()));
    }
    let n = mu.len();
    let cost = |i: usize, j: usize| -> f64 {
        mu.points()[i]
            .iter()
            .zip(&nu.points()[j])
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    // 1-based potentials/arrays, the classical formulation
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut matched = vec![0usize; n + 1]; // matched[j] = row assigned to column j
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        total += cost(matched[j] - 1, j - 1);
    }
    Ok((total / n as f64).sqrt())
}

/// Sliced Wasserstein-2: root mean of squared 1d distances over seeded
/// random directions. A lower bound for the true distance.
fn w2_sliced(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, projections: usize, seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let d = mu.dim();
    let mut acc = 0.0;
    for _ in 0..projections {
        // isotropic direction from normalized Gaussians
        let mut dir = vec![0.0; d];
        loop {
            let mut norm = 0.0;
            for v in dir.iter_mut() {
                *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
                norm += *v * *v;
            }
            if norm > 1e-12 {
                let inv = norm.sqrt().recip();
                dir.iter_mut().for_each(|v| *v *= inv);
                break;
            }
        }
        let proj = |m: &EmpiricalMeasure| -> EmpiricalMeasure {
            EmpiricalMeasure::new(
                m.points()
                    .iter()
                    .map(|p| vec![p.iter().zip(&dir).map(|(x, e)| x * e).sum()])
                    .collect(),
            )
            .expect("projected support is well formed")
        };
        let d1 = w2_sorted_1d(&proj(mu), &proj(nu));
        acc += d1 * d1;
    }
    (acc / projections as f64).sqrt()
}
