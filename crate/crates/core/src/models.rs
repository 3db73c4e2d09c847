//! Built-in test models. These are the closed-form systems the statistical
//! checks and the acceptance suite lean on: linear relaxation dynamics whose
//! moments solve small linear ODEs, pure-noise channels with known laws, and
//! a deliberately non-dissipative negative control.

use std::sync::Arc;

use crate::coeffs::{CoefficientSet, Dims};
use crate::linalg::DMat;
use crate::measure::EmpiricalMeasure;

/// Analytic averaged drift `x ↦ f̄(x, μ)` when the model has one in closed
/// form.
pub type AnalyticFbar = Arc<dyn Fn(&[f64], &EmpiricalMeasure) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct TestModel {
    pub id: &'static str,
    pub description: &'static str,
    pub coeffs: CoefficientSet,
    /// Closed-form averaged drift, when known.
    pub analytic_fbar: Option<AnalyticFbar>,
}

fn const_mat(d: usize, cols: usize, v: f64) -> DMat {
    let mut m = DMat::zeros(d, cols);
    for i in 0..d.min(cols) {
        m[(i, i)] = v;
    }
    m
}

fn zero_vec(d: usize) -> Vec<f64> {
    vec![0.0; d]
}

/// All coefficients vanish; every path is constant.
pub fn zero() -> TestModel {
    let dims = Dims { d: 1, d1: 1, d2: 1 };
    TestModel {
        id: "zero",
        description: "all coefficients zero; constant paths",
        coeffs: CoefficientSet {
            dims,
            f1: Arc::new(|_, _, _| zero_vec(1)),
            g1: Arc::new(|_, _| DMat::zeros(1, 1)),
            l: Arc::new(|_| DMat::zeros(1, 1)),
            b: Arc::new(|_, _, _| zero_vec(1)),
            sigma1: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            sigma2: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            lipschitz: 1.0,
            dissipativity: 1.0,
            growth: Some(0.0),
        },
        analytic_fbar: Some(Arc::new(|_, _| zero_vec(1))),
    }
}

/// Linear relaxation probe: `f1 = y`, fast OU `b = -(y - x)`, `σ1 = √2`.
/// The joint moments solve a two-dimensional linear ODE; the frozen fast
/// equation is an OU process centered at `x` with stationary variance 1,
/// so `f̄(x, μ) = x`.
pub fn linear_relax() -> TestModel {
    let dims = Dims { d: 1, d1: 1, d2: 1 };
    TestModel {
        id: "linear-relax",
        description: "slow drift = fast state; fast OU centered at slow state",
        coeffs: CoefficientSet {
            dims,
            f1: Arc::new(|_, _, y| y.to_vec()),
            g1: Arc::new(|_, _| DMat::zeros(1, 1)),
            l: Arc::new(|_| DMat::zeros(1, 1)),
            b: Arc::new(|x, _, y| vec![-(y[0] - x[0])]),
            sigma1: Arc::new(|_, _, _| const_mat(1, 1, std::f64::consts::SQRT_2)),
            sigma2: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            lipschitz: 2.0,
            dissipativity: 4.0,
            growth: Some(2.0),
        },
        analytic_fbar: Some(Arc::new(|x, _| x.to_vec())),
    }
}

/// Averaging benchmark: `f1 = -y`, fast OU centered at `x` driven by `W^2`,
/// slow channels `g1 = g_scale`, `l = l_scale`. The averaged drift is
/// `f̄(x, μ) = -x` and the limit path is `x0 e^{-t}`.
pub fn ou_averaged(g_scale: f64, l_scale: f64) -> TestModel {
    let dims = Dims { d: 1, d1: 1, d2: 1 };
    TestModel {
        id: "ou-averaged",
        description: "averaged drift -x with exponential-decay limit path",
        coeffs: CoefficientSet {
            dims,
            f1: Arc::new(|_, _, y| vec![-y[0]]),
            g1: Arc::new(move |_, _| const_mat(1, 1, g_scale)),
            l: Arc::new(move |_| const_mat(1, 1, l_scale)),
            b: Arc::new(|x, _, y| vec![-(y[0] - x[0])]),
            sigma1: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            sigma2: Arc::new(|_, _, _| const_mat(1, 1, std::f64::consts::SQRT_2)),
            lipschitz: 2.0,
            dissipativity: 4.0,
            growth: Some(2.0),
        },
        analytic_fbar: Some(Arc::new(|x, _| vec![-x[0]])),
    }
}

/// Pure Gaussian slow channel: `X_T = x0 + √ϵ W^1_T` under small-noise
/// scaling. Tail probabilities and rate functions are in closed form.
pub fn gauss_linear() -> TestModel {
    let dims = Dims { d: 1, d1: 1, d2: 1 };
    TestModel {
        id: "gauss-linear",
        description: "slow component is a scaled Brownian motion",
        coeffs: CoefficientSet {
            dims,
            f1: Arc::new(|_, _, _| zero_vec(1)),
            g1: Arc::new(|_, _| const_mat(1, 1, 1.0)),
            l: Arc::new(|_| DMat::zeros(1, 1)),
            b: Arc::new(|_, _, y| vec![-y[0]]),
            sigma1: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            sigma2: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            lipschitz: 1.0,
            dissipativity: 4.0,
            growth: Some(0.0),
        },
        analytic_fbar: Some(Arc::new(|_, _| zero_vec(1))),
    }
}

/// Pure fractional slow channel: `X = x0 + ϵ^H l B^H`.
pub fn fbm_slow() -> TestModel {
    let dims = Dims { d: 1, d1: 1, d2: 1 };
    TestModel {
        id: "fbm-slow",
        description: "slow component is a scaled fractional Brownian motion",
        coeffs: CoefficientSet {
            dims,
            f1: Arc::new(|_, _, _| zero_vec(1)),
            g1: Arc::new(|_, _| DMat::zeros(1, 1)),
            l: Arc::new(|_| const_mat(1, 1, 1.0)),
            b: Arc::new(|_, _, y| vec![-y[0]]),
            sigma1: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            sigma2: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            lipschitz: 1.0,
            dissipativity: 4.0,
            growth: Some(0.0),
        },
        analytic_fbar: Some(Arc::new(|_, _| zero_vec(1))),
    }
}

/// Both control channels active: `g1 = 1`, `l = 1`, no drift. The rate of
/// hitting a terminal point splits across the channels in closed form.
pub fn two_channel() -> TestModel {
    let dims = Dims { d: 1, d1: 1, d2: 1 };
    TestModel {
        id: "two-channel",
        description: "Brownian and fractional channels both open, zero drift",
        coeffs: CoefficientSet {
            dims,
            f1: Arc::new(|_, _, _| zero_vec(1)),
            g1: Arc::new(|_, _| const_mat(1, 1, 1.0)),
            l: Arc::new(|_| const_mat(1, 1, 1.0)),
            b: Arc::new(|_, _, y| vec![-y[0]]),
            sigma1: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            sigma2: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            lipschitz: 1.0,
            dissipativity: 4.0,
            growth: Some(0.0),
        },
        analytic_fbar: Some(Arc::new(|_, _| zero_vec(1))),
    }
}

/// Negative control: `b = +y` violates dissipativity, the fast component
/// blows up. The checks must fail on it.
pub fn non_dissipative() -> TestModel {
    let dims = Dims { d: 1, d1: 1, d2: 1 };
    TestModel {
        id: "non-dissipative",
        description: "fast drift +y; violates the dissipativity condition",
        coeffs: CoefficientSet {
            dims,
            f1: Arc::new(|_, _, y| y.to_vec()),
            g1: Arc::new(|_, _| DMat::zeros(1, 1)),
            l: Arc::new(|_| DMat::zeros(1, 1)),
            b: Arc::new(|_, _, y| y.to_vec()),
            sigma1: Arc::new(|_, _, _| const_mat(1, 1, std::f64::consts::SQRT_2)),
            sigma2: Arc::new(|_, _, _| DMat::zeros(1, 1)),
            lipschitz: 2.0,
            // deliberately false claim, the probe check must refute it
            dissipativity: 1.0,
            growth: Some(2.0),
        },
        analytic_fbar: None,
    }
}

/// The registry of built-in models.
pub fn all() -> Vec<TestModel> {
    vec![
        zero(),
        linear_relax(),
        ou_averaged(1.0, 1.0),
        gauss_linear(),
        fbm_slow(),
        two_channel(),
        non_dissipative(),
    ]
}

/// Look up a built-in model by id.
pub fn by_id(id: &str) -> Option<TestModel> {
    all().into_iter().find(|m| m.id == id)
}
