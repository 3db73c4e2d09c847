//! Limited-memory BFGS with Armijo backtracking, for the inner minimization
//! of the penalized rate-function objective.

/// Objective interface: fill `grad` and return the value at `x`.
pub trait Objective {
    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64;
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Objective for F {
    fn value_grad(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        self(x, grad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub memory: usize,
    pub max_line_steps: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-10,
            memory: 8,
            max_line_steps: 30,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LbfgsReport {
    pub iterations: usize,
    pub final_value: f64,
    pub final_grad_norm: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f` from `x0`; returns the final iterate and a report.
pub fn lbfgs(f: &mut dyn Objective, x0: Vec<f64>, opts: LbfgsOptions) -> (Vec<f64>, LbfgsReport) {
    let n = x0.len();
    let mut x = x0;
    let mut grad = vec![0.0; n];
    let mut value = f.value_grad(&x, &mut grad);
    let mut s_list: Vec<Vec<f64>> = Vec::new();
    let mut y_list: Vec<Vec<f64>> = Vec::new();
    let mut rho_list: Vec<f64> = Vec::new();
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        let gnorm = dot(&grad, &grad).sqrt();
        if gnorm <= opts.grad_tol * (1.0 + value.abs()) {
            return (
                x,
                LbfgsReport {
                    iterations,
                    final_value: value,
                    final_grad_norm: gnorm,
                    converged: true,
                },
            );
        }
        // two-loop recursion
        let mut q = grad.clone();
        let m = s_list.len();
        let mut alphas = vec![0.0; m];
        for i in (0..m).rev() {
            let a = rho_list[i] * dot(&s_list[i], &q);
            alphas[i] = a;
            for (qv, yv) in q.iter_mut().zip(&y_list[i]) {
                *qv -= a * yv;
            }
        }
        if let (Some(s), Some(y)) = (s_list.last(), y_list.last()) {
            let scale = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= scale);
        }
        for i in 0..m {
            let b = rho_list[i] * dot(&y_list[i], &q);
            for (qv, sv) in q.iter_mut().zip(&s_list[i]) {
                *qv += (alphas[i] - b) * sv;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            // fall back to steepest descent when curvature info is stale
            dir = grad.iter().map(|v| -v).collect();
            slope = -dot(&grad, &grad);
            s_list.clear();
            y_list.clear();
            rho_list.clear();
        }
        // Armijo backtracking
        let mut step = 1.0;
        let mut accepted = false;
        let mut x_new = vec![0.0; n];
        let mut grad_new = vec![0.0; n];
        let mut value_new = value;
        for _ in 0..opts.max_line_steps {
            for ((xn, xv), dv) in x_new.iter_mut().zip(&x).zip(&dir) {
                *xn = xv + step * dv;
            }
            value_new = f.value_grad(&x_new, &mut grad_new);
            if value_new <= value + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            let gnorm = dot(&grad, &grad).sqrt();
            return (
                x,
                LbfgsReport {
                    iterations,
                    final_value: value,
                    final_grad_norm: gnorm,
                    converged: gnorm <= 1e-6 * (1.0 + value.abs()),
                },
            );
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 {
            if s_list.len() == opts.memory {
                s_list.remove(0);
                y_list.remove(0);
                rho_list.remove(0);
            }
            rho_list.push(1.0 / sy);
            s_list.push(s);
            y_list.push(yv);
        }
        x = x_new;
        grad = grad_new;
        value = value_new;
    }
    let gnorm = dot(&grad, &grad).sqrt();
    (
        x,
        LbfgsReport {
            iterations,
            final_value: value,
            final_grad_norm: gnorm,
            converged: gnorm <= opts.grad_tol * (1.0 + value.abs()),
        },
    )
}
