//! Rate-function machinery: the deterministic skeleton equation, penalized
//! minimization of the control energy over Cameron-Martin/RKHS control
//! pairs, and plain Monte Carlo estimation of rare-event probabilities and
//! Laplace functionals for cross-validating the deviation predictions.
//!
//! The optimizer treats the discretized controls as one decision vector
//! (`ḣ` per cell plus nodal `h̄`), both energies as exact quadratic forms,
//! and the endpoint constraint by quadratic penalty with geometric
//! continuation. Gradients come from the discrete adjoint of the RK2
//! stepping scheme (coefficient Jacobians by central differencing), with a
//! full finite-difference fallback kept for cross-checking.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::coeffs::CoefficientSet;
use crate::controls::{ControlError, ControlPair};
use crate::dynamics::{
    simulate_slow_fast, FbarEvaluator, NoiseScaling, RunSeed, ScaleParams, SimError, SimOptions,
};
use crate::frac_ops::{apply_rh_with, FracError, KappaTriangle};
use crate::grid::{GridFunction, HurstParam, TimeGrid};
use crate::linalg::DMat;
use crate::measure::EmpiricalMeasure;
use crate::optim::{lbfgs, LbfgsOptions};
use crate::stats::{binomial_ci, log_mean_exp};

#[derive(Debug, Error)]
pub enum LdpError {
    #[error("controls live on a different grid than the solver")]
    ControlGridMismatch,
    #[error("limit path must carry one state per node ({expected}), got {got}")]
    LimitPathLength { expected: usize, got: usize },
    #[error(
        "rate optimizer did not reach the endpoint tolerance: violation {violation:.3e} > {tol:.3e} after {rounds} penalty rounds ({iterations} inner iterations)"
    )]
    NonConvergence {
        violation: f64,
        tol: f64,
        rounds: usize,
        iterations: usize,
        diagnostics: RateDiagnostics,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Frac(#[from] FracError),
}

/// Endpoint condition for the rate minimization: hit a target state or zero
/// a scalar terminal functional.
#[derive(Clone)]
pub enum EndpointConstraint {
    Target(Vec<f64>),
    Terminal(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

/// One penalty-continuation round in the diagnostics trace.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyRound {
    pub rho: f64,
    pub energy: f64,
    pub violation: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RateDiagnostics {
    pub iterations: usize,
    pub constraint_violation: f64,
    pub penalty_trace: Vec<PenaltyRound>,
}

/// Result of the rate minimization: the optimal value is the sum of the two
/// control energies at the returned controls.
pub struct RateResult {
    pub value: f64,
    pub cm_energy: f64,
    pub rkhs_energy: f64,
    pub controls: ControlPair,
    pub skeleton: Vec<Vec<f64>>,
    pub diagnostics: RateDiagnostics,
}

#[derive(Debug, Clone, Copy)]
pub struct RateOptions {
    pub penalty_init: f64,
    pub penalty_factor: f64,
    pub rounds: usize,
    pub max_inner_iters: usize,
    /// Endpoint violation accepted as converged, scaled by `1 + |target|`.
    pub endpoint_tol: f64,
    /// Extra perturbed restarts for multi-modality detection.
    pub restarts: usize,
    /// Use the finite-difference gradient instead of the adjoint.
    pub fd_gradient: bool,
    pub seed: u64,
}

impl Default for RateOptions {
    fn default() -> Self {
        Self {
            penalty_init: 10.0,
            penalty_factor: 10.0,
            rounds: 6,
            max_inner_iters: 300,
            endpoint_tol: 1e-4,
            restarts: 0,
            fd_gradient: false,
            seed: 0,
        }
    }
}

/// Deterministic skeleton dynamics shared by the solver and the optimizer:
/// midpoint RK2 with cell-averaged controls, the measure argument frozen at
/// the limit path's point masses, and the fractional increment applied per
/// cell.
struct SkeletonStepper<'a> {
    coeffs: &'a CoefficientSet,
    fbar: &'a FbarEvaluator,
    grid: &'a TimeGrid,
    /// point-mass laws at nodes and cell midpoints
    node_law: Vec<EmpiricalMeasure>,
    mid_law: Vec<EmpiricalMeasure>,
    /// `l(L_{X̄⁰_{t_k}})` per cell
    l_mats: Vec<DMat>,
}

impl<'a> SkeletonStepper<'a> {
    fn new(
        coeffs: &'a CoefficientSet,
        fbar: &'a FbarEvaluator,
        grid: &'a TimeGrid,
        limit_path: &[Vec<f64>],
    ) -> Result<Self, LdpError> {
        let n = grid.steps();
        if limit_path.len() != n + 1 {
            return Err(LdpError::LimitPathLength {
                expected: n + 1,
                got: limit_path.len(),
            });
        }
        let node_law: Vec<EmpiricalMeasure> = limit_path
            .iter()
            .map(|x| EmpiricalMeasure::dirac(x))
            .collect();
        let mid_law: Vec<EmpiricalMeasure> = (0..n)
            .map(|k| {
                let mid: Vec<f64> = limit_path[k]
                    .iter()
                    .zip(&limit_path[k + 1])
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect();
                EmpiricalMeasure::dirac(&mid)
            })
            .collect();
        let l_mats = (0..n).map(|k| (coeffs.l)(&node_law[k])).collect();
        Ok(Self {
            coeffs,
            fbar,
            grid,
            node_law,
            mid_law,
            l_mats,
        })
    }

    /// Drift `f̄(x, μ) + g1(x, μ) b1` at a node or midpoint law.
    fn drift(&self, x: &[f64], law: &EmpiricalMeasure, b1: &[f64]) -> Result<Vec<f64>, SimError> {
        let mut f = self.fbar.eval(x, law)?;
        (self.coeffs.g1)(x, law).mul_vec_into(b1, 1.0, &mut f);
        Ok(f)
    }

    /// One RK2 step from `x` on cell `k`; returns `(x_mid, x_next)`.
    fn step(
        &self,
        k: usize,
        x: &[f64],
        b1: &[f64],
        r: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), SimError> {
        let dt = self.grid.dt();
        let s1 = self.drift(x, &self.node_law[k], b1)?;
        let mut xm: Vec<f64> = x.iter().zip(&s1).map(|(v, d)| v + 0.5 * dt * d).collect();
        self.l_mats[k].mul_vec_into(r, 0.5, &mut xm);
        let s2 = self.drift(&xm, &self.mid_law[k], b1)?;
        let mut xn: Vec<f64> = x.iter().zip(&s2).map(|(v, d)| v + dt * d).collect();
        self.l_mats[k].mul_vec_into(r, 1.0, &mut xn);
        Ok((xm, xn))
    }

    /// Solve forward, storing stage states for the adjoint pass.
    fn solve(
        &self,
        x0: &[f64],
        b1: &[Vec<f64>],
        r: &[Vec<f64>],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), SimError> {
        let n = self.grid.steps();
        let mut path = Vec::with_capacity(n + 1);
        let mut mids = Vec::with_capacity(n);
        let mut x = x0.to_vec();
        path.push(x.clone());
        for k in 0..n {
            let (xm, xn) = self.step(k, &x, &b1[k], &r[k])?;
            if xn.iter().any(|v| !v.is_finite()) {
                return Err(SimError::BlowUp {
                    step: k + 1,
                    particle: 0,
                });
            }
            mids.push(xm);
            x = xn.clone();
            path.push(xn);
        }
        Ok((path, mids))
    }

    /// Jacobian of the drift in `x` by central differencing.
    fn drift_jacobian(
        &self,
        x: &[f64],
        law: &EmpiricalMeasure,
        b1: &[f64],
    ) -> Result<DMat, SimError> {
        let d = x.len();
        let mut jac = DMat::zeros(d, d);
        for c in 0..d {
            let h = 1e-6 * (1.0 + x[c].abs());
            let mut xp = x.to_vec();
            xp[c] += h;
            let mut xm = x.to_vec();
            xm[c] -= h;
            let fp = self.drift(&xp, law, b1)?;
            let fm = self.drift(&xm, law, b1)?;
            for row in 0..d {
                jac[(row, c)] = (fp[row] - fm[row]) / (2.0 * h);
            }
        }
        Ok(jac)
    }
}

/// Solve the skeleton equation
/// `dX̄ = f̄(X̄, L_{X̄⁰}) dt + g1(X̄, L_{X̄⁰}) P1 ḣ dt + l(L_{X̄⁰}) d(R_H h̄)`
/// with deterministic RK2 stepping; `limit_path` supplies the frozen law.
pub fn solve_skeleton(
    coeffs: &CoefficientSet,
    fbar: &FbarEvaluator,
    grid: &TimeGrid,
    hurst: HurstParam,
    controls: &ControlPair,
    x0: &[f64],
    limit_path: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, LdpError> {
    if controls.grid() != grid {
        return Err(LdpError::ControlGridMismatch);
    }
    let tri = KappaTriangle::build(*grid, hurst)?;
    let rh = apply_rh_with(controls.hbar(), hurst, &tri)?;
    let n = grid.steps();
    let d1 = controls.d1();
    let r: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            (0..d1)
                .map(|c| rh.value(k + 1)[c] - rh.value(k)[c])
                .collect()
        })
        .collect();
    let b1: Vec<Vec<f64>> = (0..n).map(|k| controls.hdot_p1(k).to_vec()).collect();
    let stepper = SkeletonStepper::new(coeffs, fbar, grid, limit_path)?;
    let (path, _) = stepper.solve(x0, &b1, &r)?;
    Ok(path)
}

/// Layout of the decision vector: `ḣ` cells then nodal `h̄` values.
struct DecisionLayout {
    n: usize,
    d1: usize,
    d2: usize,
}

impl DecisionLayout {
    fn len(&self) -> usize {
        self.n * (self.d1 + self.d2) + (self.n + 1) * self.d1
    }

    fn hdot<'u>(&self, u: &'u [f64], k: usize) -> &'u [f64] {
        let w = self.d1 + self.d2;
        &u[k * w..(k + 1) * w]
    }

    fn hbar_node<'u>(&self, u: &'u [f64], j: usize) -> &'u [f64] {
        let off = self.n * (self.d1 + self.d2);
        &u[off + j * self.d1..off + (j + 1) * self.d1]
    }

    fn hbar_offset(&self) -> usize {
        self.n * (self.d1 + self.d2)
    }
}

/// Scalar map from nodal `h̄` values to per-cell increments of `R_H h̄`,
/// precomputed column by column (the embedding is linear and componentwise).
fn rh_increment_matrix(
    grid: &TimeGrid,
    hurst: HurstParam,
    tri: &KappaTriangle,
) -> Result<Vec<Vec<f64>>, FracError> {
    let n = grid.steps();
    let cols: Vec<Vec<f64>> = (0..=n)
        .into_par_iter()
        .map(|j| {
            let mut nodal = vec![vec![0.0]; n + 1];
            nodal[j][0] = 1.0;
            let basis = GridFunction::pointwise(*grid, nodal).expect("basis is well formed");
            let path = apply_rh_with(&basis, hurst, tri).expect("basis embedding");
            (0..n)
                .map(|k| path.value(k + 1)[0] - path.value(k)[0])
                .collect()
        })
        .collect();
    // transpose to rows[k][j]
    let mut rows = vec![vec![0.0; n + 1]; n];
    for (j, col) in cols.iter().enumerate() {
        for (k, v) in col.iter().enumerate() {
            rows[k][j] = *v;
        }
    }
    Ok(rows)
}

/// Gram matrix row application for the nodal RKHS energy: given nodal
/// values `v`, the energy is `½ cᵀ G c` with `c` the midpoint-averaged cell
/// values and `G` the stationary-increment covariance.
fn rkhs_energy_and_grad(
    v: &[f64],
    layout: &DecisionLayout,
    gamma: &[f64],
    grad: Option<&mut [f64]>,
) -> f64 {
    let n = layout.n;
    let d1 = layout.d1;
    let off = layout.hbar_offset();
    let mut energy = 0.0;
    let mut gc = vec![0.0; n * d1];
    for c in 0..d1 {
        // cell averages
        let cell: Vec<f64> = (0..n)
            .map(|k| 0.5 * (v[off + k * d1 + c] + v[off + (k + 1) * d1 + c]))
            .collect();
        for j in 0..n {
            let mut acc = 0.0;
            for (k, cv) in cell.iter().enumerate() {
                acc += gamma[j.abs_diff(k)] * cv;
            }
            gc[j * d1 + c] = acc;
            energy += 0.5 * cell[j] * acc;
        }
    }
    if let Some(g) = grad {
        // chain through the midpoint averaging: node j receives half of the
        // adjacent cells' Gram rows
        for c in 0..d1 {
            for j in 0..=n {
                let mut acc = 0.0;
                if j < n {
                    acc += 0.5 * gc[j * d1 + c];
                }
                if j > 0 {
                    acc += 0.5 * gc[(j - 1) * d1 + c];
                }
                g[off + j * d1 + c] += acc;
            }
        }
    }
    energy
}

struct PenaltyObjective<'a> {
    stepper: &'a SkeletonStepper<'a>,
    layout: DecisionLayout,
    rh_rows: &'a [Vec<f64>],
    gamma: &'a [f64],
    dt: f64,
    x0: &'a [f64],
    constraint: &'a EndpointConstraint,
    rho: f64,
    fd_gradient: bool,
    evals: usize,
}

impl PenaltyObjective<'_> {
    fn controls_of(&self, u: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let n = self.layout.n;
        let d1 = self.layout.d1;
        let b1: Vec<Vec<f64>> = (0..n)
            .map(|k| self.layout.hdot(u, k)[..d1].to_vec())
            .collect();
        // r_k[c] = Σ_j rh_rows[k][j] v[j][c]
        let r: Vec<Vec<f64>> = (0..n)
            .map(|k| {
                (0..d1)
                    .map(|c| {
                        (0..=n)
                            .map(|j| self.rh_rows[k][j] * self.layout.hbar_node(u, j)[c])
                            .sum()
                    })
                    .collect()
            })
            .collect();
        (b1, r)
    }

    fn energies(&self, u: &[f64]) -> (f64, f64) {
        let n = self.layout.n;
        let w = self.layout.d1 + self.layout.d2;
        let cm = 0.5 * self.dt * u[..n * w].iter().map(|x| x * x).sum::<f64>();
        let rk = rkhs_energy_and_grad(u, &self.layout, self.gamma, None);
        (cm, rk)
    }

    /// Terminal misfit and its gradient seed.
    fn terminal(&self, x_t: &[f64]) -> (f64, Vec<f64>) {
        match self.constraint {
            EndpointConstraint::Target(a) => {
                let c: Vec<f64> = x_t.iter().zip(a).map(|(x, t)| x - t).collect();
                let sq: f64 = c.iter().map(|v| v * v).sum();
                (sq, c.iter().map(|v| self.rho * v).collect())
            }
            EndpointConstraint::Terminal(g) => {
                let gv = g(x_t);
                let d = x_t.len();
                let mut seed = vec![0.0; d];
                for cdim in 0..d {
                    let h = 1e-6 * (1.0 + x_t[cdim].abs());
                    let mut xp = x_t.to_vec();
                    xp[cdim] += h;
                    let mut xm = x_t.to_vec();
                    xm[cdim] -= h;
                    seed[cdim] = self.rho * gv * (g(&xp) - g(&xm)) / (2.0 * h);
                }
                (gv * gv, seed)
            }
        }
    }

    fn value_and_adjoint_grad(&mut self, u: &[f64], grad: &mut [f64]) -> f64 {
        self.evals += 1;
        let n = self.layout.n;
        let d1 = self.layout.d1;
        let w = self.layout.d1 + self.layout.d2;
        let dt = self.dt;
        grad.iter_mut().for_each(|g| *g = 0.0);
        // energy parts
        let cm = 0.5 * dt * u[..n * w].iter().map(|x| x * x).sum::<f64>();
        for (i, g) in grad[..n * w].iter_mut().enumerate() {
            *g = dt * u[i];
        }
        let rk = rkhs_energy_and_grad(u, &self.layout, self.gamma, Some(grad));
        // forward solve
        let (b1, r) = self.controls_of(u);
        let (path, mids) = self
            .stepper
            .solve(self.x0, &b1, &r)
            .expect("skeleton solve inside optimizer");
        let x_t = path.last().unwrap();
        let (misfit_sq, seed) = self.terminal(x_t);
        let value = cm + rk + 0.5 * self.rho * misfit_sq;
        // adjoint sweep: λ' starts at the penalty seed
        let mut lambda = seed;
        let mut g_r = vec![vec![0.0; d1]; n];
        for k in (0..n).rev() {
            let x = &path[k];
            let xm = &mids[k];
            let j1 = self
                .stepper
                .drift_jacobian(x, &self.stepper.node_law[k], &b1[k])
                .expect("jacobian");
            let j2 = self
                .stepper
                .drift_jacobian(xm, &self.stepper.mid_law[k], &b1[k])
                .expect("jacobian");
            // λ_m = Δ J2ᵀ λ'
            let d = lambda.len();
            let mut lambda_m = vec![0.0; d];
            for c in 0..d {
                let mut acc = 0.0;
                for row in 0..d {
                    acc += j2[(row, c)] * lambda[row];
                }
                lambda_m[c] = dt * acc;
            }
            // control gradients: b1 enters both stages, r enters xm and x'
            let g1a = (self.stepper.coeffs.g1)(x, &self.stepper.node_law[k]);
            let g1b = (self.stepper.coeffs.g1)(xm, &self.stepper.mid_law[k]);
            for c in 0..d1 {
                let mut acc = 0.0;
                for row in 0..d {
                    acc += dt * g1b[(row, c)] * lambda[row]
                        + 0.5 * dt * g1a[(row, c)] * lambda_m[row];
                }
                grad[k * w + c] += acc;
            }
            let lmat = &self.stepper.l_mats[k];
            for c in 0..d1 {
                let mut acc = 0.0;
                for row in 0..d {
                    acc += lmat[(row, c)] * (lambda[row] + 0.5 * lambda_m[row]);
                }
                g_r[k][c] = acc;
            }
            // λ_k = λ' + (I + (Δ/2) J1)ᵀ λ_m
            let mut lambda_k = lambda.clone();
            for c in 0..d {
                let mut acc = lambda_m[c];
                for row in 0..d {
                    acc += 0.5 * dt * j1[(row, c)] * lambda_m[row];
                }
                lambda_k[c] += acc;
            }
            lambda = lambda_k;
        }
        // chain g_r through the embedding matrix into the nodal h̄ block
        let off = self.layout.hbar_offset();
        for j in 0..=n {
            for c in 0..d1 {
                let mut acc = 0.0;
                for (k, gr) in g_r.iter().enumerate() {
                    acc += self.rh_rows[k][j] * gr[c];
                }
                grad[off + j * d1 + c] += acc;
            }
        }
        value
    }

    fn value_only(&mut self, u: &[f64]) -> f64 {
        let (cm, rk) = self.energies(u);
        let (b1, r) = self.controls_of(u);
        let (path, _) = self
            .stepper
            .solve(self.x0, &b1, &r)
            .expect("skeleton solve inside optimizer");
        let (misfit_sq, _) = self.terminal(path.last().unwrap());
        cm + rk + 0.5 * self.rho * misfit_sq
    }

    fn value_and_fd_grad(&mut self, u: &[f64], grad: &mut [f64]) -> f64 {
        self.evals += 1;
        let v0 = self.value_only(u);
        let mut up = u.to_vec();
        for i in 0..u.len() {
            let h = 1e-6 * (1.0 + u[i].abs());
            up[i] = u[i] + h;
            let vp = self.value_only(&up);
            up[i] = u[i] - h;
            let vm = self.value_only(&up);
            up[i] = u[i];
            grad[i] = (vp - vm) / (2.0 * h);
        }
        v0
    }

    fn violation(&mut self, u: &[f64]) -> f64 {
        let (b1, r) = self.controls_of(u);
        let (path, _) = self
            .stepper
            .solve(self.x0, &b1, &r)
            .expect("skeleton solve inside optimizer");
        let x_t = path.last().unwrap();
        match self.constraint {
            EndpointConstraint::Target(a) => x_t
                .iter()
                .zip(a)
                .map(|(x, t)| (x - t) * (x - t))
                .sum::<f64>()
                .sqrt(),
            EndpointConstraint::Terminal(g) => g(x_t).abs(),
        }
    }
}

/// Minimize `½∫|ḣ|² + ½‖h̄‖²_H` subject to the skeleton endpoint constraint
/// by quadratic-penalty continuation. Returns the best feasible value with
/// its controls, skeleton path and optimizer diagnostics; non-convergence is
/// an explicit error carrying the trace.
#[allow(clippy::too_many_arguments)]
pub fn rate_function(
    coeffs: &CoefficientSet,
    fbar: &FbarEvaluator,
    grid: &TimeGrid,
    hurst: HurstParam,
    constraint: EndpointConstraint,
    x0: &[f64],
    limit_path: &[Vec<f64>],
    opts: RateOptions,
) -> Result<RateResult, LdpError> {
    let n = grid.steps();
    let dims = coeffs.dims;
    let layout = DecisionLayout {
        n,
        d1: dims.d1,
        d2: dims.d2,
    };
    let tri = KappaTriangle::build(*grid, hurst)?;
    let rh_rows = rh_increment_matrix(grid, hurst, &tri)?;
    let gamma: Vec<f64> = (0..n)
        .map(|k| crate::frac_ops::fgn_covariance(k, grid.dt(), hurst))
        .collect();
    let stepper = SkeletonStepper::new(coeffs, fbar, grid, limit_path)?;
    let tol = match &constraint {
        EndpointConstraint::Target(a) => {
            let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            opts.endpoint_tol * (1.0 + norm)
        }
        EndpointConstraint::Terminal(_) => opts.endpoint_tol,
    };

    let run_once = |u_init: Vec<f64>| -> (Vec<f64>, RateDiagnostics) {
        let mut obj = PenaltyObjective {
            stepper: &stepper,
            layout: DecisionLayout {
                n,
                d1: dims.d1,
                d2: dims.d2,
            },
            rh_rows: &rh_rows,
            gamma: &gamma,
            dt: grid.dt(),
            x0,
            constraint: &constraint,
            rho: opts.penalty_init,
            fd_gradient: opts.fd_gradient,
            evals: 0,
        };
        let mut u = u_init;
        let mut diag = RateDiagnostics::default();
        for _round in 0..opts.rounds {
            let lopts = LbfgsOptions {
                max_iters: opts.max_inner_iters,
                grad_tol: 1e-10,
                ..Default::default()
            };
            let rho = obj.rho;
            let fd = obj.fd_gradient;
            let mut closure = |x: &[f64], g: &mut [f64]| {
                if fd {
                    obj.value_and_fd_grad(x, g)
                } else {
                    obj.value_and_adjoint_grad(x, g)
                }
            };
            let (u_next, report) = lbfgs(&mut closure, u, lopts);
            u = u_next;
            let (cm, rk) = obj.energies(&u);
            let violation = obj.violation(&u);
            diag.iterations += report.iterations;
            diag.penalty_trace.push(PenaltyRound {
                rho,
                energy: cm + rk,
                violation,
                inner_iterations: report.iterations,
            });
            diag.constraint_violation = violation;
            if violation < 0.1 * tol {
                break;
            }
            obj.rho *= opts.penalty_factor;
        }
        (u, diag)
    };

    let mut best: Option<(Vec<f64>, RateDiagnostics, f64)> = None;
    for restart in 0..=opts.restarts {
        let mut u0 = vec![0.0; layout.len()];
        if restart > 0 {
            use rand::prelude::*;
            let mut rng =
                crate::noise::SeedSpec::new(opts.seed, restart as u64, 0, 7).rng();
            for v in u0.iter_mut() {
                *v = 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        let (u, diag) = run_once(u0);
        let feasible = diag.constraint_violation <= tol;
        let probe = PenaltyObjective {
            stepper: &stepper,
            layout: DecisionLayout {
                n,
                d1: dims.d1,
                d2: dims.d2,
            },
            rh_rows: &rh_rows,
            gamma: &gamma,
            dt: grid.dt(),
            x0,
            constraint: &constraint,
            rho: 0.0,
            fd_gradient: false,
            evals: 0,
        };
        let (cm, rk) = probe.energies(&u);
        let score = if feasible { cm + rk } else { f64::INFINITY };
        if best.as_ref().map_or(true, |(_, _, s)| score < *s) {
            best = Some((u, diag, score));
        }
    }
    let (u, diagnostics, _) = best.expect("at least one optimizer run");
    if diagnostics.constraint_violation > tol {
        return Err(LdpError::NonConvergence {
            violation: diagnostics.constraint_violation,
            tol,
            rounds: opts.rounds,
            iterations: diagnostics.iterations,
            diagnostics,
        });
    }
    // package the optimum
    let w = dims.d1 + dims.d2;
    let hdot: Vec<Vec<f64>> = (0..n).map(|k| u[k * w..(k + 1) * w].to_vec()).collect();
    let off = n * w;
    let hbar_vals: Vec<Vec<f64>> = (0..=n)
        .map(|j| u[off + j * dims.d1..off + (j + 1) * dims.d1].to_vec())
        .collect();
    let hbar = GridFunction::pointwise(*grid, hbar_vals).expect("optimal hbar is well formed");
    let controls = ControlPair::new(*grid, hurst, dims.d1, dims.d2, hdot, hbar)?;
    let skeleton = solve_skeleton(coeffs, fbar, grid, hurst, &controls, x0, limit_path)?;
    Ok(RateResult {
        value: controls.total_energy(),
        cm_energy: controls.cm_energy(),
        rkhs_energy: controls.rkhs_energy(),
        controls,
        skeleton,
        diagnostics,
    })
}

// ---------------------------------------------------------------------------
// Monte Carlo estimators for the deviation predictions.
// ---------------------------------------------------------------------------

/// One row of the rare-event table: both speed scalings are reported, per
/// the two-speed deviation bounds.
#[derive(Debug, Clone)]
pub struct RareEventRow {
    pub epsilon: f64,
    pub n_samples: usize,
    pub hits: usize,
    pub p_hat: f64,
    pub ci: (f64, f64),
    /// `ϵ log P̂` (lower-bound speed); absent when no hits were seen.
    pub eps_log: Option<f64>,
    /// `ϵ^{2H} log P̂` (upper-bound speed).
    pub eps2h_log: Option<f64>,
    /// At least ~10 hits, so the log estimate is usable.
    pub usable: bool,
}

/// Plain Monte Carlo estimate of `P(X^{ϵ,ε} ∈ F)` per noise scale, with
/// binomial confidence intervals.
#[allow(clippy::too_many_arguments)]
pub fn estimate_rare_event(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    hurst: HurstParam,
    scales_list: &[ScaleParams],
    event: &(dyn Fn(&[Vec<f64>]) -> bool + Sync),
    n_mc: usize,
    n_particles: usize,
    x0: &[f64],
    y0: &[f64],
    master_seed: u64,
) -> Result<Vec<RareEventRow>, LdpError> {
    let opts = SimOptions {
        scaling: NoiseScaling::SmallNoise,
        with_noise: true,
    };
    let two_h = hurst.two_h();
    let mut rows = Vec::with_capacity(scales_list.len());
    for (row_idx, &scales) in scales_list.iter().enumerate() {
        let reps = n_mc.div_ceil(n_particles);
        let mut hits = 0usize;
        let mut total = 0usize;
        for rep in 0..reps {
            let out = simulate_slow_fast(
                coeffs,
                grid,
                hurst,
                scales,
                opts,
                n_particles,
                x0,
                y0,
                RunSeed::new(master_seed.wrapping_add(row_idx as u64), rep as u64),
            )?;
            for p in 0..n_particles {
                if total == n_mc {
                    break;
                }
                total += 1;
                if event(&out.slow[p]) {
                    hits += 1;
                }
            }
        }
        let p_hat = hits as f64 / total as f64;
        let ci = binomial_ci(hits, total);
        let (eps_log, eps2h_log) = if hits > 0 {
            (
                Some(scales.epsilon * p_hat.ln()),
                Some(scales.epsilon.powf(two_h) * p_hat.ln()),
            )
        } else {
            (None, None)
        };
        rows.push(RareEventRow {
            epsilon: scales.epsilon,
            n_samples: total,
            hits,
            p_hat,
            ci,
            eps_log,
            eps2h_log,
            usable: hits >= 10,
        });
    }
    Ok(rows)
}

/// Which deviation speed a Laplace value was computed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Speed {
    Epsilon,
    Epsilon2H,
}

#[derive(Debug, Clone)]
pub struct LaplaceRow {
    pub epsilon: f64,
    pub speed: Speed,
    pub speed_value: f64,
    /// `-l(ϵ) log Ê[exp(-ρ/l(ϵ))]`
    pub value: f64,
    /// All sampled functional values were (numerically) equal.
    pub degenerate: bool,
}

/// Ensemble estimate of the Laplace functional at both speeds. `rho` is
/// clamped to `[-bound, bound]` before exponentiation.
#[allow(clippy::too_many_arguments)]
pub fn laplace_functional(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    hurst: HurstParam,
    scales_list: &[ScaleParams],
    rho: &(dyn Fn(&[Vec<f64>]) -> f64 + Sync),
    bound: f64,
    n_mc: usize,
    n_particles: usize,
    x0: &[f64],
    y0: &[f64],
    master_seed: u64,
) -> Result<Vec<LaplaceRow>, LdpError> {
    let opts = SimOptions {
        scaling: NoiseScaling::SmallNoise,
        with_noise: true,
    };
    let two_h = hurst.two_h();
    let mut rows = Vec::new();
    for (row_idx, &scales) in scales_list.iter().enumerate() {
        let reps = n_mc.div_ceil(n_particles);
        let mut values = Vec::with_capacity(n_mc);
        for rep in 0..reps {
            let out = simulate_slow_fast(
                coeffs,
                grid,
                hurst,
                scales,
                opts,
                n_particles,
                x0,
                y0,
                RunSeed::new(master_seed.wrapping_add(1000 + row_idx as u64), rep as u64),
            )?;
            for p in 0..n_particles {
                if values.len() == n_mc {
                    break;
                }
                values.push(rho(&out.slow[p]).clamp(-bound, bound));
            }
        }
        let spread = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - values.iter().cloned().fold(f64::INFINITY, f64::min);
        let degenerate = spread < 1e-12;
        for (speed, l) in [
            (Speed::Epsilon, scales.epsilon),
            (Speed::Epsilon2H, scales.epsilon.powf(two_h)),
        ] {
            let exponents: Vec<f64> = values.iter().map(|r| -r / l).collect();
            let value = -l * log_mean_exp(&exponents);
            rows.push(LaplaceRow {
                epsilon: scales.epsilon,
                speed,
                speed_value: l,
                value,
                degenerate,
            });
        }
    }
    Ok(rows)
}
