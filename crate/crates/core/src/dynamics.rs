//! Interacting-particle solvers for the slow-fast mean-field system, its
//! small-noise and controlled variants, the frozen fast equation with
//! invariant-measure estimation, the averaged and limit equations, and the
//! block-frozen auxiliary process.
//!
//! Time stepping is Euler-Maruyama on the slow component and drift-implicit
//! Euler on the fast component, realized as one damped fixed-point sweep
//! with damping `1/(1 + (Δ/ε) C)`: for linear drifts this reproduces the
//! exact implicit solve, and it stays stable at stiffness ratios where the
//! explicit scheme diverges. The mean-field coupling is synchronous: each
//! step reads the empirical law of the previous step's ensemble.
//!
//! Determinism contract: every particle owns counter-based noise streams
//! keyed by `(master seed, replicate, particle, channel)`, all reductions
//! run in particle order, and results are independent of the worker count.

use rayon::prelude::*;
use thiserror::Error;

use crate::coeffs::CoefficientSet;
use crate::controls::{ControlError, ControlPair};
use crate::frac_ops::{apply_rh, FracError};
use crate::grid::{GridError, HurstParam, TimeGrid};
use crate::measure::{EmpiricalMeasure, MeasureError};
use crate::models::AnalyticFbar;
use crate::noise::{channel, sample_bm, FgnSampler, NoiseError, SeedSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("fast stiffness ratio dt/varepsilon = {0:.2} exceeds 10; refine the grid")]
    Stiffness(f64),
    #[error("particle system needs at least two particles, got {0}")]
    TooFewParticles(usize),
    #[error("non-finite state at step {step}, particle {particle}")]
    BlowUp { step: usize, particle: usize },
    #[error("scale parameter out of range: {0}")]
    BadScale(String),
    #[error("control grid does not match the simulation grid")]
    ControlGridMismatch,
    #[error("frozen law trajectory must carry one measure per node ({expected}), got {got}")]
    FrozenLawLength { expected: usize, got: usize },
    #[error("burn-in fraction must lie in [0,1) leaving room for {0} samples")]
    BadBurnIn(usize),
    #[error("empty invariant-measure sample")]
    EmptySample,
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Frac(#[from] FracError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Noise intensity `ϵ` and time-scale separation `ε`, plus the block size
/// `δ` used by the auxiliary process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleParams {
    /// Noise intensity multiplying `√ϵ g1 dW^1` and `ϵ^H l dB^H`.
    pub epsilon: f64,
    /// Time-scale separation in the `1/ε` fast drift.
    pub varepsilon: f64,
    /// Block size for coefficient freezing; a grid multiple.
    pub delta: f64,
}

impl ScaleParams {
    /// Default coupling `δ = ϵ^{2/3}` rounded down to a grid multiple.
    pub fn with_default_delta(epsilon: f64, varepsilon: f64, grid: &TimeGrid) -> Self {
        Self {
            epsilon,
            varepsilon,
            delta: grid.floor_to_grid(epsilon.powf(2.0 / 3.0)),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [("epsilon", self.epsilon), ("varepsilon", self.varepsilon)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(SimError::BadScale(format!("{name} = {v} not in (0,1]")));
            }
        }
        if !(self.delta > 0.0) {
            return Err(SimError::BadScale(format!("delta = {}", self.delta)));
        }
        Ok(())
    }
}

/// Which display of the system is simulated: the order-one equation or the
/// small-noise version with `√ϵ` and `ϵ^H` noise factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseScaling {
    /// Order-one noise (`ϵ = 1` in the slow equation).
    Unit,
    /// Small-noise factors `√ϵ` and `ϵ^H` on the slow equation.
    SmallNoise,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    pub scaling: NoiseScaling,
    /// Disable the stochastic terms (test mode for pure control integration).
    pub with_noise: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            scaling: NoiseScaling::Unit,
            with_noise: true,
        }
    }
}

/// Replicate-level seed; particle streams derive from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeed {
    pub master: u64,
    pub replicate: u64,
}

impl RunSeed {
    pub fn new(master: u64, replicate: u64) -> Self {
        Self { master, replicate }
    }

    fn stream(&self, particle: u64, ch: u32) -> SeedSpec {
        SeedSpec::new(self.master, self.replicate, particle, ch)
    }
}

/// Simulated ensemble: `slow[p][k]` and `fast[p][k]` are the states of
/// particle `p` at node `k`.
#[derive(Debug, Clone)]
pub struct EnsemblePath {
    pub slow: Vec<Vec<Vec<f64>>>,
    pub fast: Vec<Vec<Vec<f64>>>,
    pub grid: TimeGrid,
    pub scales: ScaleParams,
    pub seed: RunSeed,
}

impl EnsemblePath {
    pub fn n_particles(&self) -> usize {
        self.slow.len()
    }

    /// Empirical law of the slow ensemble at node `k`.
    pub fn slow_law(&self, k: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.slow.iter().map(|p| p[k].clone()).collect())
            .expect("states stay finite by construction")
    }

    /// Law trajectory of the slow component at every node.
    pub fn slow_law_trajectory(&self) -> Vec<EmpiricalMeasure> {
        (0..=self.grid.steps()).map(|k| self.slow_law(k)).collect()
    }
}

/// Paths of a single component (slow-only or fast-only ensembles).
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub paths: Vec<Vec<Vec<f64>>>,
    pub grid: TimeGrid,
}

/// Per-particle driving noise, regenerated identically from the seed.
fn driving_paths(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    hurst: HurstParam,
    seed: RunSeed,
    particle: u64,
    fgn: &FgnSampler,
    with_noise: bool,
) -> crate::noise::DrivingPaths {
    let n = grid.steps();
    let dims = coeffs.dims;
    if !with_noise {
        return crate::noise::DrivingPaths {
            w1: vec![vec![0.0; dims.d1]; n],
            w2: vec![vec![0.0; dims.d2]; n],
            bh: vec![vec![0.0; dims.d1]; n + 1],
        };
    }
    let _ = hurst;
    crate::noise::DrivingPaths {
        w1: sample_bm(grid, dims.d1, seed.stream(particle, channel::W1)),
        w2: sample_bm(grid, dims.d2, seed.stream(particle, channel::W2)),
        bh: fgn.sample_path(dims.d1, seed.stream(particle, channel::FBM)),
    }
}

/// Shared stepping core for the plain and controlled systems. `controls`
/// adds the deterministic control drifts of the controlled display;
/// `frozen_law` substitutes a fixed law trajectory for the live empirical
/// measure in every coefficient argument.
#[allow(clippy::too_many_arguments)]
fn run_system(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    hurst: HurstParam,
    scales: ScaleParams,
    opts: SimOptions,
    n_particles: usize,
    x0: &[f64],
    y0: &[f64],
    seed: RunSeed,
    controls: Option<(&ControlPair, &[Vec<f64>])>,
    frozen_law: Option<&[EmpiricalMeasure]>,
) -> Result<EnsemblePath, SimError> {
    scales.validate()?;
    if n_particles < 2 {
        return Err(SimError::TooFewParticles(n_particles));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let stiffness = dt / scales.varepsilon;
    if stiffness > 10.0 {
        return Err(SimError::Stiffness(stiffness));
    }
    if let Some(law) = frozen_law {
        if law.len() != n + 1 {
            return Err(SimError::FrozenLawLength {
                expected: n + 1,
                got: law.len(),
            });
        }
    }
    if let Some((ctrl, _)) = controls {
        if ctrl.grid() != grid {
            return Err(SimError::ControlGridMismatch);
        }
    }
    let dims = coeffs.dims;
    let fgn = FgnSampler::new(*grid, hurst)?;
    let noise: Vec<crate::noise::DrivingPaths> = (0..n_particles)
        .into_par_iter()
        .map(|p| driving_paths(coeffs, grid, hurst, seed, p as u64, &fgn, opts.with_noise))
        .collect();

    // noise prefactors for the two displays
    let (cg, cl) = match opts.scaling {
        NoiseScaling::Unit => (1.0, 1.0),
        NoiseScaling::SmallNoise => (
            scales.epsilon.sqrt(),
            scales.epsilon.powf(hurst.value()),
        ),
    };
    let theta = dt / scales.varepsilon;
    let omega = 1.0 / (1.0 + theta * coeffs.lipschitz);
    let fast_noise_scale = 1.0 / scales.varepsilon.sqrt();
    let ctrl_fast_scale = dt / (scales.epsilon * scales.varepsilon).sqrt();

    let mut slow = vec![vec![x0.to_vec()]; n_particles];
    let mut fast = vec![vec![y0.to_vec()]; n_particles];
    let mut xs: Vec<Vec<f64>> = vec![x0.to_vec(); n_particles];
    let mut ys: Vec<Vec<f64>> = vec![y0.to_vec(); n_particles];

    for k in 0..n {
        let live_law;
        let mu = match frozen_law {
            Some(law) => &law[k],
            None => {
                live_law = EmpiricalMeasure::new(xs.clone())?;
                &live_law
            }
        };
        let stepped: Vec<Result<(Vec<f64>, Vec<f64>), SimError>> = (0..n_particles)
            .into_par_iter()
            .map(|p| {
                let x = &xs[p];
                let y = &ys[p];
                let np = &noise[p];
                // slow update
                let mut xn = x.clone();
                let f = (coeffs.f1)(x, mu, y);
                for (c, xv) in xn.iter_mut().enumerate() {
                    *xv += dt * f[c];
                }
                let g1 = (coeffs.g1)(x, mu);
                g1.mul_vec_into(&np.w1[k], cg, &mut xn);
                let lmat = (coeffs.l)(mu);
                let dbh: Vec<f64> = (0..dims.d1)
                    .map(|c| np.bh[k + 1][c] - np.bh[k][c])
                    .collect();
                lmat.mul_vec_into(&dbh, cl, &mut xn);
                if let Some((ctrl, rh_incr)) = controls {
                    g1.mul_vec_into(ctrl.hdot_p1(k), dt, &mut xn);
                    lmat.mul_vec_into(&rh_incr[k], 1.0, &mut xn);
                }
                // fast update: one damped fixed-point sweep of the
                // drift-implicit scheme
                let mut incr = vec![0.0; dims.d];
                let b = (coeffs.b)(x, mu, y);
                for (c, iv) in incr.iter_mut().enumerate() {
                    *iv += theta * b[c];
                }
                let s1 = (coeffs.sigma1)(x, mu, y);
                let s2 = (coeffs.sigma2)(x, mu, y);
                s1.mul_vec_into(&np.w1[k], fast_noise_scale, &mut incr);
                s2.mul_vec_into(&np.w2[k], fast_noise_scale, &mut incr);
                if let Some((ctrl, _)) = controls {
                    s1.mul_vec_into(ctrl.hdot_p1(k), ctrl_fast_scale, &mut incr);
                    s2.mul_vec_into(ctrl.hdot_p2(k), ctrl_fast_scale, &mut incr);
                }
                let yn: Vec<f64> = y.iter().zip(&incr).map(|(v, i)| v + omega * i).collect();
                if xn.iter().chain(&yn).any(|v| !v.is_finite()) {
                    return Err(SimError::BlowUp {
                        step: k + 1,
                        particle: p,
                    });
                }
                Ok((xn, yn))
            })
            .collect();
        for (p, r) in stepped.into_iter().enumerate() {
            let (xn, yn) = r?;
            xs[p] = xn.clone();
            ys[p] = yn.clone();
            slow[p].push(xn);
            fast[p].push(yn);
        }
    }
    Ok(EnsemblePath {
        slow,
        fast,
        grid: *grid,
        scales,
        seed,
    })
}

/// Simulate the slow-fast mean-field system (order-one or small-noise
/// display selected by `opts.scaling`).
#[allow(clippy::too_many_arguments)]
pub fn simulate_slow_fast(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    hurst: HurstParam,
    scales: ScaleParams,
    opts: SimOptions,
    n_particles: usize,
    x0: &[f64],
    y0: &[f64],
    seed: RunSeed,
) -> Result<EnsemblePath, SimError> {
    run_system(
        coeffs,
        grid,
        hurst,
        scales,
        opts,
        n_particles,
        x0,
        y0,
        seed,
        None,
        None,
    )
}

/// Simulate the controlled system: the small-noise dynamics plus the control
/// drifts `g1 P1 ḣ dt + l d(R_H h̄)` on the slow component and
/// `(ϵ ε)^{-1/2} (σ1 P1 ḣ + σ2 P2 ḣ) dt` on the fast component, with every
/// measure argument frozen at the supplied uncontrolled law trajectory.
///
/// With zero controls and the law trajectory of an uncontrolled run under
/// the same seed, the paths coincide bitwise with that run.
#[allow(clippy::too_many_arguments)]
pub fn simulate_controlled(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    hurst: HurstParam,
    scales: ScaleParams,
    opts: SimOptions,
    controls: &ControlPair,
    n_particles: usize,
    x0: &[f64],
    y0: &[f64],
    seed: RunSeed,
    frozen_law: &[EmpiricalMeasure],
) -> Result<EnsemblePath, SimError> {
    let rh_path = apply_rh(controls.hbar(), hurst)?;
    let n = grid.steps();
    let rh_incr: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            (0..controls.d1())
                .map(|c| rh_path.value(k + 1)[c] - rh_path.value(k)[c])
                .collect()
        })
        .collect();
    run_system(
        coeffs,
        grid,
        hurst,
        scales,
        opts,
        n_particles,
        x0,
        y0,
        seed,
        Some((controls, &rh_incr)),
        Some(frozen_law),
    )
}

/// Frozen fast equation: `dY = b(x, μ, Y) dt + σ1 dW̃^1 + σ2 dW̃^2` with
/// `(x, μ)` held fixed, on independent drivers.
pub fn simulate_frozen_fast(
    coeffs: &CoefficientSet,
    x: &[f64],
    mu: &EmpiricalMeasure,
    y0: &[f64],
    grid: &TimeGrid,
    seed: SeedSpec,
) -> Result<Vec<Vec<f64>>, SimError> {
    let n = grid.steps();
    let dt = grid.dt();
    let dims = coeffs.dims;
    let w1 = sample_bm(
        grid,
        dims.d1,
        SeedSpec::new(seed.master_seed, seed.replicate, seed.particle, channel::FROZEN_W1),
    );
    let w2 = sample_bm(
        grid,
        dims.d2,
        SeedSpec::new(seed.master_seed, seed.replicate, seed.particle, channel::FROZEN_W2),
    );
    let omega = 1.0 / (1.0 + dt * coeffs.lipschitz);
    let mut path = Vec::with_capacity(n + 1);
    let mut y = y0.to_vec();
    path.push(y.clone());
    for k in 0..n {
        let mut incr = vec![0.0; dims.d];
        let b = (coeffs.b)(x, mu, &y);
        for (c, iv) in incr.iter_mut().enumerate() {
            *iv += dt * b[c];
        }
        (coeffs.sigma1)(x, mu, &y).mul_vec_into(&w1[k], 1.0, &mut incr);
        (coeffs.sigma2)(x, mu, &y).mul_vec_into(&w2[k], 1.0, &mut incr);
        for (c, yv) in y.iter_mut().enumerate() {
            *yv += omega * incr[c];
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SimError::BlowUp {
                step: k + 1,
                particle: seed.particle as usize,
            });
        }
        path.push(y.clone());
    }
    Ok(path)
}

/// Empirical approximation of the invariant measure of the frozen fast
/// equation: thinned post-burn-in samples of one long trajectory.
#[allow(clippy::too_many_arguments)]
pub fn estimate_invariant_measure(
    coeffs: &CoefficientSet,
    x: &[f64],
    mu: &EmpiricalMeasure,
    y0: &[f64],
    grid: &TimeGrid,
    burn_in_fraction: f64,
    n_samples: usize,
    seed: SeedSpec,
) -> Result<EmpiricalMeasure, SimError> {
    let n = grid.steps();
    let burn = (burn_in_fraction * n as f64) as usize;
    if !(0.0..1.0).contains(&burn_in_fraction) || n - burn < n_samples || n_samples == 0 {
        return Err(SimError::BadBurnIn(n_samples));
    }
    let path = simulate_frozen_fast(coeffs, x, mu, y0, grid, seed)?;
    let avail = n + 1 - burn;
    let stride = (avail / n_samples).max(1);
    let samples: Vec<Vec<f64>> = (0..n_samples)
        .map(|j| path[burn + j * stride].clone())
        .collect();
    Ok(EmpiricalMeasure::new(samples)?)
}

/// Monte Carlo averaged drift: the mean of `f1(x, μ, ·)` over an invariant-
/// measure sample.
pub fn averaged_drift(
    coeffs: &CoefficientSet,
    x: &[f64],
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
) -> Vec<f64> {
    let d = coeffs.dims.d;
    let mut acc = vec![0.0; d];
    for z in nu.points() {
        let f = (coeffs.f1)(x, mu, z);
        for (a, v) in acc.iter_mut().zip(&f) {
            *a += v;
        }
    }
    let inv = 1.0 / nu.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    acc
}

/// Configuration of the frozen-fast runs behind the Monte Carlo averaged
/// drift.
#[derive(Clone)]
pub struct FrozenFastConfig {
    pub grid: TimeGrid,
    pub burn_in_fraction: f64,
    pub n_samples: usize,
    pub y0: Vec<f64>,
    pub seed: u64,
}

/// Where `f̄` comes from: a closed form injected by the caller (exactness
/// escape hatch for tests and well-understood models) or Monte Carlo
/// averaging over a fresh invariant-measure estimate.
#[derive(Clone)]
pub enum FbarSource {
    Analytic(AnalyticFbar),
    MonteCarlo(FrozenFastConfig),
}

/// Evaluator for the averaged drift `f̄(x, μ)`.
#[derive(Clone)]
pub struct FbarEvaluator {
    coeffs: CoefficientSet,
    source: FbarSource,
}

impl FbarEvaluator {
    pub fn new(coeffs: CoefficientSet, source: FbarSource) -> Self {
        Self { coeffs, source }
    }

    pub fn eval(&self, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>, SimError> {
        match &self.source {
            FbarSource::Analytic(f) => Ok(f(x, mu)),
            FbarSource::MonteCarlo(cfg) => {
                let nu = estimate_invariant_measure(
                    &self.coeffs,
                    x,
                    mu,
                    &cfg.y0,
                    &cfg.grid,
                    cfg.burn_in_fraction,
                    cfg.n_samples,
                    SeedSpec::new(cfg.seed, 0, 0, channel::FROZEN_W1),
                )?;
                Ok(averaged_drift(&self.coeffs, x, mu, &nu))
            }
        }
    }
}

/// Particle system for the averaged equation
/// `dX̄ = f̄ dt + g1 dW^1 + l dB^H`. In Monte Carlo mode one invariant-
/// measure estimate per step is shared across particles (frozen at the
/// ensemble barycenter) while `f1` is still averaged per particle.
#[allow(clippy::too_many_arguments)]
pub fn simulate_averaged(
    coeffs: &CoefficientSet,
    fbar: &FbarEvaluator,
    grid: &TimeGrid,
    hurst: HurstParam,
    n_particles: usize,
    x0: &[f64],
    seed: RunSeed,
) -> Result<PathEnsemble, SimError> {
    if n_particles < 2 {
        return Err(SimError::TooFewParticles(n_particles));
    }
    let n = grid.steps();
    let dt = grid.dt();
    let dims = coeffs.dims;
    let fgn = FgnSampler::new(*grid, hurst)?;
    let noise: Vec<crate::noise::DrivingPaths> = (0..n_particles)
        .into_par_iter()
        .map(|p| driving_paths(coeffs, grid, hurst, seed, p as u64, &fgn, true))
        .collect();
    let mut paths = vec![vec![x0.to_vec()]; n_particles];
    let mut xs = vec![x0.to_vec(); n_particles];
    for k in 0..n {
        let mu = EmpiricalMeasure::new(xs.clone())?;
        // shared invariant-measure sample at the barycenter, reused for each
        // particle's f1 average
        let shared_nu = match &fbar.source {
            FbarSource::MonteCarlo(cfg) => Some(estimate_invariant_measure(
                coeffs,
                &mu.mean(),
                &mu,
                &cfg.y0,
                &cfg.grid,
                cfg.burn_in_fraction,
                cfg.n_samples,
                SeedSpec::new(cfg.seed, k as u64, 0, channel::FROZEN_W1),
            )?),
            FbarSource::Analytic(_) => None,
        };
        let stepped: Vec<Result<Vec<f64>, SimError>> = (0..n_particles)
            .into_par_iter()
            .map(|p| {
                let x = &xs[p];
                let np = &noise[p];
                let mut xn = x.clone();
                let drift = match (&fbar.source, &shared_nu) {
                    (FbarSource::Analytic(f), _) => f(x, &mu),
                    (FbarSource::MonteCarlo(_), Some(nu)) => averaged_drift(coeffs, x, &mu, nu),
                    (FbarSource::MonteCarlo(_), None) => unreachable!(),
                };
                for (c, xv) in xn.iter_mut().enumerate() {
                    *xv += dt * drift[c];
                }
                (coeffs.g1)(x, &mu).mul_vec_into(&np.w1[k], 1.0, &mut xn);
                let dbh: Vec<f64> = (0..dims.d1)
                    .map(|c| np.bh[k + 1][c] - np.bh[k][c])
                    .collect();
                (coeffs.l)(&mu).mul_vec_into(&dbh, 1.0, &mut xn);
                if xn.iter().any(|v| !v.is_finite()) {
                    return Err(SimError::BlowUp {
                        step: k + 1,
                        particle: p,
                    });
                }
                Ok(xn)
            })
            .collect();
        for (p, r) in stepped.into_iter().enumerate() {
            let xn = r?;
            xs[p] = xn.clone();
            paths[p].push(xn);
        }
    }
    Ok(PathEnsemble { paths, grid: *grid })
}

/// Deterministic limit equation `dX̄⁰ = f̄(X̄⁰, δ_{X̄⁰}) dt` solved by
/// classical RK4; the law argument is the point mass at the current state.
pub fn solve_limit_ode(
    fbar: &FbarEvaluator,
    grid: &TimeGrid,
    x0: &[f64],
) -> Result<Vec<Vec<f64>>, SimError> {
    let n = grid.steps();
    let dt = grid.dt();
    let mut path = Vec::with_capacity(n + 1);
    let mut x = x0.to_vec();
    path.push(x.clone());
    let eval = |x: &[f64]| -> Result<Vec<f64>, SimError> {
        fbar.eval(x, &EmpiricalMeasure::dirac(x))
    };
    for k in 0..n {
        let k1 = eval(&x)?;
        let x2: Vec<f64> = x.iter().zip(&k1).map(|(v, d)| v + 0.5 * dt * d).collect();
        let k2 = eval(&x2)?;
        let x3: Vec<f64> = x.iter().zip(&k2).map(|(v, d)| v + 0.5 * dt * d).collect();
        let k3 = eval(&x3)?;
        let x4: Vec<f64> = x.iter().zip(&k3).map(|(v, d)| v + dt * d).collect();
        let k4 = eval(&x4)?;
        for c in 0..x.len() {
            x[c] += dt / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::BlowUp {
                step: k + 1,
                particle: 0,
            });
        }
        path.push(x.clone());
    }
    Ok(path)
}

/// Auxiliary fast process: same `1/ε` dynamics and the same `W^1, W^2`
/// streams as the controlled run, but with the slow argument and its law
/// frozen at block starts `bar(s) = floor(s/δ) δ`.
pub fn simulate_auxiliary(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    hurst: HurstParam,
    scales: ScaleParams,
    controlled: &EnsemblePath,
    y0: &[f64],
) -> Result<PathEnsemble, SimError> {
    scales.validate()?;
    let n = grid.steps();
    let dt = grid.dt();
    let block = grid.block_steps(scales.delta)?;
    let n_particles = controlled.n_particles();
    let dims = coeffs.dims;
    let fgn = FgnSampler::new(*grid, hurst)?;
    let seed = controlled.seed;
    let noise: Vec<crate::noise::DrivingPaths> = (0..n_particles)
        .into_par_iter()
        .map(|p| driving_paths(coeffs, grid, hurst, seed, p as u64, &fgn, true))
        .collect();
    let theta = dt / scales.varepsilon;
    let omega = 1.0 / (1.0 + theta * coeffs.lipschitz);
    let fast_noise_scale = 1.0 / scales.varepsilon.sqrt();
    let mut paths = vec![vec![y0.to_vec()]; n_particles];
    let mut ys = vec![y0.to_vec(); n_particles];
    let mut frozen_mu = controlled.slow_law(0);
    for k in 0..n {
        if k % block == 0 {
            frozen_mu = controlled.slow_law(k);
        }
        let kb = (k / block) * block;
        let stepped: Vec<Result<Vec<f64>, SimError>> = (0..n_particles)
            .into_par_iter()
            .map(|p| {
                let y = &ys[p];
                let xb = &controlled.slow[p][kb];
                let np = &noise[p];
                let mut incr = vec![0.0; dims.d];
                let b = (coeffs.b)(xb, &frozen_mu, y);
                for (c, iv) in incr.iter_mut().enumerate() {
                    *iv += theta * b[c];
                }
                (coeffs.sigma1)(xb, &frozen_mu, y).mul_vec_into(
                    &np.w1[k],
                    fast_noise_scale,
                    &mut incr,
                );
                (coeffs.sigma2)(xb, &frozen_mu, y).mul_vec_into(
                    &np.w2[k],
                    fast_noise_scale,
                    &mut incr,
                );
                let yn: Vec<f64> = y.iter().zip(&incr).map(|(v, i)| v + omega * i).collect();
                if yn.iter().any(|v| !v.is_finite()) {
                    return Err(SimError::BlowUp {
                        step: k + 1,
                        particle: p,
                    });
                }
                Ok(yn)
            })
            .collect();
        for (p, r) in stepped.into_iter().enumerate() {
            let yn = r?;
            ys[p] = yn.clone();
            paths[p].push(yn);
        }
    }
    Ok(PathEnsemble { paths, grid: *grid })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models;

    fn hurst() -> HurstParam {
        HurstParam::new(0.75).unwrap()
    }

    #[test]
    fn zero_model_keeps_paths_constant() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let m = models::zero();
        let scales = ScaleParams::with_default_delta(0.5, 0.1, &grid);
        let out = simulate_slow_fast(
            &m.coeffs,
            &grid,
            hurst(),
            scales,
            SimOptions::default(),
            4,
            &[1.5],
            &[-0.5],
            RunSeed::new(1, 0),
        )
        .unwrap();
        for p in 0..4 {
            assert!(out.slow[p].iter().all(|x| x[0] == 1.5));
            assert!(out.fast[p].iter().all(|y| y[0] == -0.5));
        }
    }

    #[test]
    fn stiffness_is_rejected() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let m = models::linear_relax();
        let scales = ScaleParams {
            epsilon: 1.0,
            varepsilon: 0.001,
            delta: 0.125,
        };
        let err = simulate_slow_fast(
            &m.coeffs,
            &grid,
            hurst(),
            scales,
            SimOptions::default(),
            4,
            &[0.0],
            &[0.0],
            RunSeed::new(1, 0),
        );
        assert!(matches!(err, Err(SimError::Stiffness(_))));
    }

    #[test]
    fn too_few_particles_is_rejected() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let m = models::zero();
        let scales = ScaleParams::with_default_delta(1.0, 0.5, &grid);
        let err = simulate_slow_fast(
            &m.coeffs,
            &grid,
            hurst(),
            scales,
            SimOptions::default(),
            1,
            &[0.0],
            &[0.0],
            RunSeed::new(1, 0),
        );
        assert!(matches!(err, Err(SimError::TooFewParticles(1))));
    }

    #[test]
    fn blow_up_reports_step_and_particle() {
        let grid = TimeGrid::new(4.0, 64).unwrap();
        let m = models::non_dissipative();
        let scales = ScaleParams {
            epsilon: 1.0,
            varepsilon: 0.1,
            delta: 0.0625,
        };
        // exponential growth at rate 1/ε over horizon 4 overflows f64
        let mut coeffs = m.coeffs.clone();
        coeffs.b = std::sync::Arc::new(|_, _, y: &[f64]| vec![y[0] * y[0] * y[0]]);
        let r = simulate_slow_fast(
            &coeffs,
            &grid,
            hurst(),
            scales,
            SimOptions::default(),
            2,
            &[0.0],
            &[2.0],
            RunSeed::new(3, 0),
        );
        match r {
            Err(SimError::BlowUp { step, particle }) => {
                assert!(step >= 1 && particle < 2);
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn frozen_fast_zero_diffusion_relaxes_to_root() {
        // b = -(y - x), σ = 0: deterministic relaxation to y = x
        let grid = TimeGrid::new(10.0, 512).unwrap();
        let mut coeffs = models::linear_relax().coeffs;
        coeffs.sigma1 = std::sync::Arc::new(|_, _, _| crate::linalg::DMat::zeros(1, 1));
        let mu = EmpiricalMeasure::dirac(&[0.7]);
        let path = simulate_frozen_fast(
            &coeffs,
            &[0.7],
            &mu,
            &[5.0],
            &grid,
            SeedSpec::new(1, 0, 0, 0),
        )
        .unwrap();
        let last = path.last().unwrap()[0];
        assert!((last - 0.7).abs() < 1e-3, "relaxed to {last}");
    }

    #[test]
    fn invariant_measure_burn_in_guard() {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let m = models::linear_relax();
        let mu = EmpiricalMeasure::dirac(&[0.0]);
        let err = estimate_invariant_measure(
            &m.coeffs,
            &[0.0],
            &mu,
            &[0.0],
            &grid,
            0.9,
            32,
            SeedSpec::new(1, 0, 0, 0),
        );
        assert!(matches!(err, Err(SimError::BadBurnIn(_))));
    }

    #[test]
    fn averaged_drift_ignores_y_independent_f1() {
        // f1 independent of y ⇒ f̄ = f1
        let mut coeffs = models::linear_relax().coeffs;
        coeffs.f1 = std::sync::Arc::new(|x: &[f64], _: &EmpiricalMeasure, _: &[f64]| {
            vec![2.0 * x[0]]
        });
        let mu = EmpiricalMeasure::dirac(&[0.3]);
        let nu = EmpiricalMeasure::new(vec![vec![1.0], vec![-4.0], vec![2.5]]).unwrap();
        let f = averaged_drift(&coeffs, &[0.3], &mu, &nu);
        assert!((f[0] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn limit_ode_zero_drift_is_constant() {
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let m = models::zero();
        let fbar = FbarEvaluator::new(
            m.coeffs.clone(),
            FbarSource::Analytic(m.analytic_fbar.unwrap()),
        );
        let path = solve_limit_ode(&fbar, &grid, &[2.0]).unwrap();
        assert!(path.iter().all(|x| x[0] == 2.0));
    }

    #[test]
    fn limit_ode_exponential_decay() {
        // f̄ = -x: x(t) = x0 e^{-t} to RK4 accuracy
        let grid = TimeGrid::new(1.0, 1 << 10).unwrap();
        let m = models::ou_averaged(1.0, 1.0);
        let fbar = FbarEvaluator::new(
            m.coeffs.clone(),
            FbarSource::Analytic(m.analytic_fbar.unwrap()),
        );
        let path = solve_limit_ode(&fbar, &grid, &[1.0]).unwrap();
        let mut worst: f64 = 0.0;
        for (k, x) in path.iter().enumerate() {
            worst = worst.max((x[0] - (-grid.node(k)).exp()).abs());
        }
        assert!(worst < 1e-6, "sup error {worst}");
    }

    #[test]
    fn auxiliary_with_full_horizon_block_freezes_at_origin() {
        // δ = T: coefficients frozen at t = 0 throughout; with a constant
        // slow path the auxiliary equals the plain fast simulation
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let m = models::linear_relax();
        let scales = ScaleParams {
            epsilon: 1.0,
            varepsilon: 0.25,
            delta: 1.0,
        };
        let run = simulate_slow_fast(
            &m.coeffs,
            &grid,
            hurst(),
            scales,
            SimOptions::default(),
            4,
            &[0.0],
            &[0.5],
            RunSeed::new(9, 0),
        )
        .unwrap();
        let aux = simulate_auxiliary(&m.coeffs, &grid, hurst(), scales, &run, &[0.5]).unwrap();
        assert_eq!(aux.paths.len(), 4);
        assert_eq!(aux.paths[0].len(), 65);
        // linear-relax slow paths move, so the auxiliary differs from the
        // true fast path, but both stay finite and start identically
        assert_eq!(aux.paths[0][0], vec![0.5]);
    }

    #[test]
    fn default_delta_is_grid_multiple() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let s = ScaleParams::with_default_delta(0.1, 0.01, &grid);
        let ratio = s.delta / grid.dt();
        assert!((ratio - ratio.round()).abs() < 1e-9);
        assert!(s.delta <= 0.1f64.powf(2.0 / 3.0));
    }
}
