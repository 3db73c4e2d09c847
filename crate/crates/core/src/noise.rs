//! Reproducible Brownian and fractional-Brownian path generation.
//!
//! Streams are counter-based: every `(master_seed, replicate, particle,
//! channel)` tuple is hashed into an independent ChaCha12 stream, so
//! ensembles can be sampled from any number of worker threads in any order
//! and still produce bit-identical paths.
//!
//! fBm comes in two independent constructions used to cross-validate each
//! other: circulant embedding of the stationary increment covariance
//! (exact, O(n log n), with a Cholesky fallback when the embedding fails),
//! and the Volterra-kernel sum `B_t ≈ Σ_k K_H(t, m_k) ΔW_k` built on the
//! kernel triangle from [`crate::frac_ops`].

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::frac_ops::{fgn_covariance, FracError, KappaTriangle};
use crate::grid::{GridError, HurstParam, TimeGrid};
use crate::linalg::{cholesky, DMat};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("circulant embedding produced a negative eigenvalue ({0:.3e}) and the grid is too large for the Cholesky fallback (n = {1} > 1024)")]
    EmbeddingFailed(f64, usize),
    #[error("increment covariance is not positive definite; cannot factor")]
    CovarianceNotPd,
    #[error(transparent)]
    Frac(#[from] FracError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Channel labels for the independent driving streams.
pub mod channel {
    /// Brownian motion shared by slow and fast equations (`W^1`).
    pub const W1: u32 = 0;
    /// Brownian motion of the fast equation only (`W^2`).
    pub const W2: u32 = 1;
    /// Fractional Brownian channel.
    pub const FBM: u32 = 2;
    /// Wiener process driving the Volterra representation.
    pub const VOLTERRA: u32 = 3;
    /// Frozen-equation drivers (independent of the slow-fast system).
    pub const FROZEN_W1: u32 = 4;
    pub const FROZEN_W2: u32 = 5;
    /// Scratch streams for probes and projections.
    pub const PROBE: u32 = 6;
}

/// Identifies one independent noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub replicate: u64,
    pub particle: u64,
    pub channel: u32,
}

impl SeedSpec {
    pub fn new(master_seed: u64, replicate: u64, particle: u64, channel: u32) -> Self {
        Self {
            master_seed,
            replicate,
            particle,
            channel,
        }
    }

    /// Deterministic ChaCha12 stream for this id.
    pub fn rng(&self) -> ChaCha12Rng {
        self.rng_with(0)
    }

    /// Substream distinguished by an extra word (vector components, helper
    /// draws) while staying a pure function of the id.
    pub fn rng_with(&self, extra: u64) -> ChaCha12Rng {
        let mut state = splitmix(self.master_seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut seed = [0u8; 32];
        for (i, word) in [
            self.replicate,
            self.particle,
            self.channel as u64,
            extra,
        ]
        .iter()
        .enumerate()
        {
            state = splitmix(state ^ word.rotate_left(17 * (i as u32 + 1)));
            seed[i * 8..(i + 1) * 8].copy_from_slice(&state.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed)
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-particle driving noise for one replicate of the particle system.
#[derive(Debug, Clone)]
pub struct DrivingPaths {
    /// `W^1` increments per cell, `R^{d1}`.
    pub w1: Vec<Vec<f64>>,
    /// `W^2` increments per cell, `R^{d2}`.
    pub w2: Vec<Vec<f64>>,
    /// fBm values per node, `R^{d1}`; `bh[0] = 0`.
    pub bh: Vec<Vec<f64>>,
}

/// Brownian increments: i.i.d. `N(0, dt)` per cell and component.
pub fn sample_bm(grid: &TimeGrid, dim: usize, seed: SeedSpec) -> Vec<Vec<f64>> {
    let mut rng = seed.rng();
    let scale = grid.dt().sqrt();
    (0..grid.steps())
        .map(|_| {
            (0..dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Exact stationary fGn sampler: circulant embedding with eigenvalues cached
/// at construction, one FFT of size `2n` per component draw.
pub struct FgnSampler {
    grid: TimeGrid,
    /// sqrt of circulant eigenvalues / (2n), pre-scaled for synthesis
    sqrt_eig: Vec<f64>,
    /// Cholesky factor fallback for small grids
    chol: Option<DMat>,
}

impl FgnSampler {
    pub fn new(grid: TimeGrid, hurst: HurstParam) -> Result<Self, NoiseError> {
        let n = grid.steps();
        let m = 2 * n;
        let dt = grid.dt();
        let gamma: Vec<f64> = (0..=n).map(|k| fgn_covariance(k, dt, hurst)).collect();
        // first row of the circulant embedding
        let mut row: Vec<Complex<f64>> = Vec::with_capacity(m);
        for g in gamma.iter().take(n + 1) {
            row.push(Complex::new(*g, 0.0));
        }
        for k in (1..n).rev() {
            row.push(Complex::new(gamma[k], 0.0));
        }
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        fft.process(&mut row);
        let min_eig = row.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
        let max_eig = row.iter().map(|c| c.re).fold(0.0f64, f64::max);
        if min_eig < -1e-9 * max_eig {
            // embedding failed: factor the Toeplitz covariance directly when
            // the grid is small enough
            if n > 1024 {
                return Err(NoiseError::EmbeddingFailed(min_eig, n));
            }
            let mut cov = DMat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    cov[(i, j)] = gamma[i.abs_diff(j)];
                }
            }
            let chol = cholesky(&cov).map_err(|_| NoiseError::CovarianceNotPd)?;
            return Ok(Self {
                grid,
                sqrt_eig: Vec::new(),
                chol: Some(chol),
            });
        }
        let sqrt_eig = row
            .iter()
            .map(|c| (c.re.max(0.0) / m as f64).sqrt())
            .collect();
        Ok(Self {
            grid,
            sqrt_eig,
            chol: None,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// One fGn vector (increments per cell) from the given stream.
    pub fn sample_increments(&self, rng: &mut ChaCha12Rng) -> Vec<f64> {
        let n = self.grid.steps();
        if let Some(chol) = &self.chol {
            let z: Vec<f64> = (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            // lower-triangular multiply
            return (0..n)
                .map(|i| (0..=i).map(|j| chol[(i, j)] * z[j]).sum())
                .collect();
        }
        let m = 2 * n;
        // Hermitian-symmetric Gaussian spectrum, fixed draw order
        let mut v = vec![Complex::new(0.0, 0.0); m];
        v[0] = Complex::new(self.sqrt_eig[0] * rng.sample::<f64, _>(StandardNormal), 0.0);
        for k in 1..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let amp = self.sqrt_eig[k] * std::f64::consts::FRAC_1_SQRT_2;
            v[k] = Complex::new(amp * a, amp * b);
            v[m - k] = v[k].conj();
        }
        v[n] = Complex::new(self.sqrt_eig[n] * rng.sample::<f64, _>(StandardNormal), 0.0);
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(m);
        fft.process(&mut v);
        v.truncate(n);
        v.into_iter().map(|c| c.re).collect()
    }

    /// Node values of fBm (zero at the origin) for `dim` components.
    pub fn sample_path(&self, dim: usize, seed: SeedSpec) -> Vec<Vec<f64>> {
        let n = self.grid.steps();
        let mut nodes = vec![vec![0.0; dim]; n + 1];
        for c in 0..dim {
            let mut rng = seed.rng_with(c as u64);
            let incr = self.sample_increments(&mut rng);
            let mut acc = 0.0;
            for (k, dx) in incr.iter().enumerate() {
                acc += dx;
                nodes[k + 1][c] = acc;
            }
        }
        nodes
    }
}

/// Exact fBm node values via circulant embedding (Cholesky fallback).
pub fn sample_fbm_exact(
    grid: &TimeGrid,
    hurst: HurstParam,
    dim: usize,
    seed: SeedSpec,
) -> Result<Vec<Vec<f64>>, NoiseError> {
    Ok(FgnSampler::new(*grid, hurst)?.sample_path(dim, seed))
}

/// Volterra-kernel fBm generator: `B_{t_i} = Σ_{k<i} K_H(t_i, m_k) ΔW_k`,
/// with midpoint kernel evaluation (avoiding the diagonal singularity).
pub struct VolterraFbm {
    grid: TimeGrid,
    tri: KappaTriangle,
    /// `K_H(t_i, m_k)` pre-multiplied kernel factors `m_k^{1/2-H}`
    colscale: Vec<f64>,
}

impl VolterraFbm {
    pub fn new(grid: TimeGrid, hurst: HurstParam) -> Result<Self, NoiseError> {
        let h = hurst.require_upper_branch()?;
        let tri = KappaTriangle::build(grid, hurst)?;
        let colscale = (0..grid.steps())
            .map(|k| grid.midpoint(k).powf(0.5 - h))
            .collect();
        Ok(Self {
            grid,
            tri,
            colscale,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Full path at every node.
    pub fn sample(&self, dim: usize, seed: SeedSpec) -> Vec<Vec<f64>> {
        let rows: Vec<usize> = (0..=self.grid.steps()).collect();
        self.sample_at_nodes(&rows, dim, seed)
    }

    /// Path values at selected nodes only; the same node receives the same
    /// value whether sampled alone or as part of the full path.
    pub fn sample_at_nodes(&self, nodes: &[usize], dim: usize, seed: SeedSpec) -> Vec<Vec<f64>> {
        let n = self.grid.steps();
        let sqrt_dt = self.grid.dt().sqrt();
        let mut out = vec![vec![0.0; dim]; nodes.len()];
        for c in 0..dim {
            let mut rng = seed.rng_with(c as u64);
            let dw: Vec<f64> = (0..n)
                .map(|_| sqrt_dt * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for (row, &i) in nodes.iter().enumerate() {
                debug_assert!(i <= n);
                let mut acc = 0.0;
                for k in 0..i {
                    acc += self.colscale[k] * self.tri.value(i, k) * dw[k];
                }
                out[row][c] = acc;
            }
        }
        out
    }
}

/// Volterra-representation fBm node values (`H > 1/2`).
pub fn sample_fbm_volterra(
    grid: &TimeGrid,
    hurst: HurstParam,
    dim: usize,
    seed: SeedSpec,
) -> Result<Vec<Vec<f64>>, NoiseError> {
    Ok(VolterraFbm::new(*grid, hurst)?.sample(dim, seed))
}
