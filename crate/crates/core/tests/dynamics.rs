//! Statistical validation of the particle solvers against closed-form
//! moment oracles: linear moment ODEs for the slow-fast system, OU
//! stationary laws for the frozen equation, exact control integration for
//! the controlled display, and pathwise coupling of the auxiliary process.

mod common;

use std::sync::Arc;

use slowfast::coeffs::CoefficientSet;
use slowfast::dynamics::*;
use slowfast::grid::{GridFunction, HurstParam, SampleKind, TimeGrid};
use slowfast::measure::{wasserstein2, EmpiricalMeasure};
use slowfast::models;
use slowfast::noise::{channel, SeedSpec};
use slowfast::stats::{mean, std_error, variance};
use slowfast::ControlPair;

fn hurst() -> HurstParam {
    HurstParam::new(0.75).unwrap()
}

/// Continuous-time mean ODE for the linear relaxation model
/// (dX = Y dt, dY = (X - Y)/ε dt + noise): RK4 at fine resolution.
fn linear_mean_oracle(x0: f64, y0: f64, eps: f64, t_end: f64) -> (f64, f64) {
    let n = 200_000;
    let dt = t_end / n as f64;
    let (mut mx, mut my) = (x0, y0);
    let f = |x: f64, y: f64| (y, (x - y) / eps);
    for _ in 0..n {
        let (k1x, k1y) = f(mx, my);
        let (k2x, k2y) = f(mx + 0.5 * dt * k1x, my + 0.5 * dt * k1y);
        let (k3x, k3y) = f(mx + 0.5 * dt * k2x, my + 0.5 * dt * k2y);
        let (k4x, k4y) = f(mx + dt * k3x, my + dt * k3y);
        mx += dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        my += dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
    }
    (mx, my)
}

#[test]
fn linear_model_means_match_moment_ode() {
    // E[X_T], E[Y_T] within 3 standard errors of the linear moment oracle
    let grid = TimeGrid::new(1.0, 8192).unwrap();
    let m = models::linear_relax();
    let eps_time = 0.1;
    let scales = ScaleParams {
        epsilon: 1.0,
        varepsilon: eps_time,
        delta: 0.25,
    };
    let (x0, y0) = (1.0, 0.0);
    let mut xt = Vec::new();
    let mut yt = Vec::new();
    for rep in 0..8 {
        let out = simulate_slow_fast(
            &m.coeffs,
            &grid,
            hurst(),
            scales,
            SimOptions::default(),
            256,
            &[x0],
            &[y0],
            RunSeed::new(101, rep),
        )
        .unwrap();
        for p in 0..256 {
            xt.push(out.slow[p][8192][0]);
            yt.push(out.fast[p][8192][0]);
        }
    }
    let (mx, my) = linear_mean_oracle(x0, y0, eps_time, 1.0);
    let (gx, gy) = (mean(&xt), mean(&yt));
    let (sx, sy) = (std_error(&xt), std_error(&yt));
    assert!((gx - mx).abs() < 3.0 * sx, "E[X_T]: got {gx}, oracle {mx} ± {sx}");
    assert!((gy - my).abs() < 3.0 * sy, "E[Y_T]: got {gy}, oracle {my} ± {sy}");
}

#[test]
fn fourth_moments_stay_bounded_across_epsilon() {
    // sup_t of the empirical fourth moments varies by < 50% across the
    // time-scale grid and stays finite
    let grid = TimeGrid::new(1.0, 4096).unwrap();
    let m = models::linear_relax();
    let mut sup_x4 = Vec::new();
    for (i, &eps) in [0.1, 0.05, 0.01].iter().enumerate() {
        let scales = ScaleParams {
            epsilon: 1.0,
            varepsilon: eps,
            delta: 0.25,
        };
        let out = simulate_slow_fast(
            &m.coeffs,
            &grid,
            hurst(),
            scales,
            SimOptions::default(),
            512,
            &[1.0],
            &[0.0],
            RunSeed::new(55 + i as u64, 0),
        )
        .unwrap();
        let mut sup = 0.0f64;
        for k in 0..=4096 {
            let m4: f64 = (0..512)
                .map(|p| out.slow[p][k][0].powi(4))
                .sum::<f64>()
                / 512.0;
            sup = sup.max(m4);
        }
        assert!(sup.is_finite());
        sup_x4.push(sup);
    }
    let lo = sup_x4.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sup_x4.iter().cloned().fold(0.0f64, f64::max);
    assert!(hi / lo < 1.5, "fourth-moment band {sup_x4:?}");
}

#[test]
fn frozen_fast_ou_stationary_law() {
    // OU with b = -(y - x), σ1 = √2: stationary N(x, 1); mean within 3 s.e.
    // and variance within 5% after burn-in
    let grid = TimeGrid::new(60.0, 4096).unwrap();
    let m = models::linear_relax();
    let x = [0.8];
    let mu = EmpiricalMeasure::dirac(&x);
    let mut samples = Vec::new();
    for p in 0..64 {
        let path = simulate_frozen_fast(
            &m.coeffs,
            &x,
            &mu,
            &[0.0],
            &grid,
            SeedSpec::new(7, 0, p, channel::PROBE),
        )
        .unwrap();
        // burn-in 10/α with α = 4: keep the second half well past it
        samples.extend(path[2048..].iter().map(|v| v[0]));
    }
    let m1 = mean(&samples);
    let v = variance(&samples);
    // autocorrelated samples: effective size ~ (samples / correlation time)
    let eff = samples.len() as f64 * grid.dt();
    let se_mean = (v / eff).sqrt();
    assert!((m1 - 0.8).abs() < 3.0 * se_mean, "mean {m1} vs 0.8 ± {se_mean}");
    assert!((v - 1.0).abs() < 0.05, "stationary variance {v}");
}

#[test]
fn invariant_measure_ou_mean_variance_and_self_consistency() {
    // 10^4 thinned samples spaced ~3 correlation times apart; variance of an
    // OU stationary-law estimate then resolves the 5% band
    let grid = TimeGrid::new(30_000.0, 1 << 22).unwrap();
    let m = models::linear_relax();
    let x = [0.5];
    let mu = EmpiricalMeasure::dirac(&x);
    let nu1 = estimate_invariant_measure(
        &m.coeffs,
        &x,
        &mu,
        &[0.0],
        &grid,
        0.01,
        10_000,
        SeedSpec::new(21, 0, 0, channel::PROBE),
    )
    .unwrap();
    let nu2 = estimate_invariant_measure(
        &m.coeffs,
        &x,
        &mu,
        &[0.0],
        &grid,
        0.01,
        10_000,
        SeedSpec::new(22, 0, 1, channel::PROBE),
    )
    .unwrap();
    let vals1: Vec<f64> = nu1.points().iter().map(|p| p[0]).collect();
    let m1 = mean(&vals1);
    let v1 = variance(&vals1);
    let se = (v1 / vals1.len() as f64).sqrt();
    assert!((m1 - 0.5).abs() < 3.0 * se, "mean {m1} vs 0.5 ± {se}");
    assert!((v1 - 1.0).abs() < 0.05, "variance {v1}");
    let w2 = wasserstein2(&nu1, &nu2).unwrap().value;
    assert!(w2 < 0.1, "seed-to-seed W2 {w2}");
}

#[test]
fn invariant_measure_zero_noise_collapses_to_point() {
    // σ = 0, b = -y: ν = δ_0
    let grid = TimeGrid::new(30.0, 2048).unwrap();
    let m = models::gauss_linear();
    let mu = EmpiricalMeasure::dirac(&[0.0]);
    let nu = estimate_invariant_measure(
        &m.coeffs,
        &[0.0],
        &mu,
        &[3.0],
        &grid,
        0.5,
        100,
        SeedSpec::new(5, 0, 0, channel::PROBE),
    )
    .unwrap();
    assert!(nu.moment_p(2.0) < 1e-10, "residual mass {}", nu.moment_p(2.0));
}

#[test]
fn ou_averaged_drift_recovers_x_within_3_se() {
    // f1 = y averaged over ν^{x,μ} = N(x, 1) gives f̄ = x
    let grid = TimeGrid::new(400.0, 16384).unwrap();
    let m = models::linear_relax();
    let x = [0.3];
    let mu = EmpiricalMeasure::dirac(&x);
    let nu = estimate_invariant_measure(
        &m.coeffs,
        &x,
        &mu,
        &[0.0],
        &grid,
        0.1,
        10_000,
        SeedSpec::new(33, 0, 0, channel::PROBE),
    )
    .unwrap();
    let fbar = averaged_drift(&m.coeffs, &x, &mu, &nu);
    let se = (1.0f64 / 360.0).sqrt();
    assert!((fbar[0] - 0.3).abs() < 3.0 * se, "f̄ = {} vs 0.3 ± {se}", fbar[0]);
}

// --- controlled system --------------------------------------------------------

#[test]
fn zero_controls_reproduce_uncontrolled_paths_bitwise() {
    let grid = TimeGrid::new(1.0, 128).unwrap();
    let m = models::two_channel();
    let scales = ScaleParams::with_default_delta(0.25, 0.05, &grid);
    let opts = SimOptions {
        scaling: NoiseScaling::SmallNoise,
        with_noise: true,
    };
    let seed = RunSeed::new(404, 2);
    let base = simulate_slow_fast(
        &m.coeffs, &grid, hurst(), scales, opts, 8, &[0.5], &[0.0], seed,
    )
    .unwrap();
    let law = base.slow_law_trajectory();
    let zero = ControlPair::zero(grid, hurst(), 1, 1);
    let ctrl = simulate_controlled(
        &m.coeffs, &grid, hurst(), scales, opts, &zero, 8, &[0.5], &[0.0], seed, &law,
    )
    .unwrap();
    assert_eq!(base.slow, ctrl.slow);
    assert_eq!(base.fast, ctrl.fast);
}

#[test]
fn pure_control_integration_is_exact_without_noise() {
    // g1 = 1, l = 0, f1 = 0, hdot = (v, 0): X_T = x0 + v T
    let grid = TimeGrid::new(2.0, 256).unwrap();
    let m = models::gauss_linear();
    let scales = ScaleParams::with_default_delta(0.25, 0.05, &grid);
    let opts = SimOptions {
        scaling: NoiseScaling::SmallNoise,
        with_noise: false,
    };
    let v = 0.7;
    let hdot = vec![vec![v, 0.0]; 256];
    let hbar = GridFunction::zeros(grid, SampleKind::Pointwise, 1);
    let ctrl = ControlPair::new(grid, hurst(), 1, 1, hdot, hbar).unwrap();
    let law = vec![EmpiricalMeasure::dirac(&[0.0]); 257];
    let out = simulate_controlled(
        &m.coeffs,
        &grid,
        hurst(),
        scales,
        opts,
        &ctrl,
        2,
        &[1.0],
        &[0.0],
        RunSeed::new(1, 0),
        &law,
    )
    .unwrap();
    let x_t = out.slow[0][256][0];
    assert!((x_t - (1.0 + v * 2.0)).abs() < 1e-10, "X_T = {x_t}");
}

#[test]
fn fbm_channel_control_reaches_t_power_2h() {
    // l = 1, others zero, h̄ = 1: X_T - x0 = (R_H 1)(T) = T^{2H} within 1%
    let grid = TimeGrid::new(1.0, 1 << 11).unwrap();
    let m = models::fbm_slow();
    let scales = ScaleParams::with_default_delta(0.25, 0.05, &grid);
    let opts = SimOptions {
        scaling: NoiseScaling::SmallNoise,
        with_noise: false,
    };
    let hdot = vec![vec![0.0, 0.0]; 1 << 11];
    let hbar = GridFunction::sample_scalar(grid, |_| 1.0);
    let ctrl = ControlPair::new(grid, hurst(), 1, 1, hdot, hbar).unwrap();
    let law = vec![EmpiricalMeasure::dirac(&[0.0]); (1 << 11) + 1];
    let out = simulate_controlled(
        &m.coeffs,
        &grid,
        hurst(),
        scales,
        opts,
        &ctrl,
        2,
        &[0.0],
        &[0.0],
        RunSeed::new(1, 0),
        &law,
    )
    .unwrap();
    let x_t = out.slow[0][1 << 11][0];
    assert!((x_t - 1.0).abs() < 1e-2, "X_T = {x_t}, want T^{{2H}} = 1");
}

// --- averaged equation ---------------------------------------------------------

#[test]
fn averaged_equation_matches_linear_sde_moments() {
    // dX̄ = -X̄ dt + dW (analytic f̄ injection, l = 0):
    // mean x0 e^{-t}, variance (1 - e^{-2t})/2
    let grid = TimeGrid::new(1.0, 1024).unwrap();
    let m = models::ou_averaged(1.0, 0.0);
    let fbar = FbarEvaluator::new(
        m.coeffs.clone(),
        FbarSource::Analytic(m.analytic_fbar.clone().unwrap()),
    );
    let mut xt = Vec::new();
    for rep in 0..16 {
        let out = simulate_averaged(
            &m.coeffs,
            &fbar,
            &grid,
            hurst(),
            256,
            &[1.0],
            RunSeed::new(808, rep),
        )
        .unwrap();
        xt.extend((0..256).map(|p| out.paths[p][1024][0]));
    }
    let m_target = (-1.0f64).exp();
    let v_target = 0.5 * (1.0 - (-2.0f64).exp());
    let got_m = mean(&xt);
    let got_v = variance(&xt);
    let se_m = std_error(&xt);
    let se_v = got_v * (2.0 / (xt.len() as f64 - 1.0)).sqrt();
    assert!(
        (got_m - m_target).abs() < 3.0 * se_m,
        "mean {got_m} vs {m_target} ± {se_m}"
    );
    assert!(
        (got_v - v_target).abs() < 3.0 * se_v + 0.01,
        "variance {got_v} vs {v_target}"
    );
}

#[test]
fn averaged_equation_monte_carlo_fbar_smoke() {
    // Monte Carlo f̄ route on the same model at desk scale: the ensemble
    // mean must decay toward zero (f̄ = -x + O(sampling error))
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let m = models::ou_averaged(0.3, 0.0);
    let frozen = FrozenFastConfig {
        grid: TimeGrid::new(40.0, 1024).unwrap(),
        burn_in_fraction: 0.25,
        n_samples: 500,
        y0: vec![0.0],
        seed: 99,
    };
    let fbar = FbarEvaluator::new(m.coeffs.clone(), FbarSource::MonteCarlo(frozen));
    let out = simulate_averaged(
        &m.coeffs,
        &fbar,
        &grid,
        hurst(),
        16,
        &[1.0],
        RunSeed::new(7, 0),
    )
    .unwrap();
    let end = mean(&(0..16).map(|p| out.paths[p][64][0]).collect::<Vec<_>>());
    assert!(
        (end - (-1.0f64).exp()).abs() < 0.2,
        "MC-averaged terminal mean {end}"
    );
    // law trajectory second moments stay bounded
    for k in 0..=64 {
        let m2: f64 = (0..16).map(|p| out.paths[p][k][0].powi(2)).sum::<f64>() / 16.0;
        assert!(m2.is_finite() && m2 < 10.0);
    }
}

// --- auxiliary process -----------------------------------------------------------

#[test]
fn auxiliary_equals_fast_path_when_coefficients_ignore_slow_state() {
    // b, σ independent of (x, μ): freezing changes nothing and the shared
    // streams make the auxiliary bitwise equal to the fast component
    let grid = TimeGrid::new(1.0, 128).unwrap();
    let dims = slowfast::coeffs::Dims { d: 1, d1: 1, d2: 1 };
    let coeffs = CoefficientSet {
        dims,
        f1: Arc::new(|_, _, y: &[f64]| vec![y[0]]),
        g1: Arc::new(|_, _| slowfast::linalg::DMat::scaled_identity(1, 0.5)),
        l: Arc::new(|_| slowfast::linalg::DMat::zeros(1, 1)),
        b: Arc::new(|_, _, y: &[f64]| vec![-y[0]]),
        sigma1: Arc::new(|_, _, _| slowfast::linalg::DMat::scaled_identity(1, 1.0)),
        sigma2: Arc::new(|_, _, _| slowfast::linalg::DMat::scaled_identity(1, 0.7)),
        lipschitz: 1.0,
        dissipativity: 4.0,
        growth: Some(2.0),
    };
    let scales = ScaleParams {
        epsilon: 1.0,
        varepsilon: 0.1,
        delta: 0.25,
    };
    let run = simulate_slow_fast(
        &coeffs,
        &grid,
        hurst(),
        scales,
        SimOptions::default(),
        4,
        &[0.2],
        &[1.0],
        RunSeed::new(606, 1),
    )
    .unwrap();
    let aux = simulate_auxiliary(&coeffs, &grid, hurst(), scales, &run, &[1.0]).unwrap();
    for p in 0..4 {
        for k in 0..=128 {
            assert_eq!(aux.paths[p][k][0], run.fast[p][k][0], "p={p}, k={k}");
        }
    }
}

#[test]
fn auxiliary_rejects_off_grid_delta() {
    let grid = TimeGrid::new(1.0, 64).unwrap();
    let m = models::linear_relax();
    let scales = ScaleParams {
        epsilon: 1.0,
        varepsilon: 0.1,
        delta: 0.013, // not a grid multiple
    };
    let run = simulate_slow_fast(
        &m.coeffs,
        &grid,
        hurst(),
        ScaleParams {
            delta: 0.25,
            ..scales
        },
        SimOptions::default(),
        2,
        &[0.0],
        &[0.0],
        RunSeed::new(1, 0),
    )
    .unwrap();
    let err = simulate_auxiliary(&m.coeffs, &grid, hurst(), scales, &run, &[0.0]);
    assert!(err.is_err());
}

#[test]
fn auxiliary_error_shrinks_with_delta_and_scale_ratio() {
    // coarse two-point version of the error estimate: shrinking both the
    // block size and ε/ϵ reduces the pathwise L² gap
    let grid = TimeGrid::new(1.0, 512).unwrap();
    let m = models::ou_averaged(1.0, 0.0);
    let mut gaps = Vec::new();
    for &(eps_noise, eps_time, delta) in &[(0.2, 0.02, 0.25), (0.4, 0.005, 0.0625)] {
        let scales = ScaleParams {
            epsilon: eps_noise,
            varepsilon: eps_time,
            delta,
        };
        let opts = SimOptions {
            scaling: NoiseScaling::SmallNoise,
            with_noise: true,
        };
        let base = simulate_slow_fast(
            &m.coeffs,
            &grid,
            hurst(),
            scales,
            opts,
            64,
            &[1.0],
            &[0.5],
            RunSeed::new(31337, 0),
        )
        .unwrap();
        let law = base.slow_law_trajectory();
        // a mild Cameron-Martin control to exercise the ε/ϵ control term
        let hdot = vec![vec![0.5, 0.5]; 512];
        let hbar = GridFunction::zeros(grid, SampleKind::Pointwise, 1);
        let ctrl = ControlPair::new(grid, hurst(), 1, 1, hdot, hbar).unwrap();
        let run = simulate_controlled(
            &m.coeffs,
            &grid,
            hurst(),
            scales,
            opts,
            &ctrl,
            64,
            &[1.0],
            &[0.5],
            RunSeed::new(31337, 0),
            &law,
        )
        .unwrap();
        let aux = simulate_auxiliary(&m.coeffs, &grid, hurst(), scales, &run, &[0.5]).unwrap();
        let mut gap = 0.0;
        for p in 0..64 {
            for k in 0..=512 {
                let d = run.fast[p][k][0] - aux.paths[p][k][0];
                gap += d * d;
            }
        }
        gaps.push(gap * grid.dt() / 64.0);
    }
    assert!(
        gaps[1] < gaps[0],
        "gap did not shrink: {gaps:?}"
    );
}
