//! Statistical helpers shared by the generators, the verification checks and
//! the Monte Carlo estimators.

use crate::special::normal_sf;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the sample mean.
pub fn std_error(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let mx = mean(xs);
    let my = mean(ys);
    xs.iter()
        .zip(ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / (xs.len() as f64 - 1.0)
}

/// Ordinary least-squares line fit; returns (slope, intercept, r_squared).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    assert!(xs.len() == ys.len() && xs.len() >= 2);
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
        syy += (y - my) * (y - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Least squares for a small design matrix (rows of predictors), solved by
/// normal equations with partial-pivot Gauss elimination.
pub fn least_squares(design: &[Vec<f64>], ys: &[f64]) -> Vec<f64> {
    let n = design.len();
    let k = design[0].len();
    assert!(n >= k && ys.len() == n);
    let mut ata = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            ata[i][j] = (0..n).map(|r| design[r][i] * design[r][j]).sum();
        }
        ata[i][k] = (0..n).map(|r| design[r][i] * ys[r]).sum();
    }
    // gaussian elimination with partial pivoting on the augmented system
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&a, &b| ata[a][col].abs().partial_cmp(&ata[b][col].abs()).unwrap())
            .unwrap();
        ata.swap(col, pivot);
        let p = ata[col][col];
        assert!(p.abs() > 1e-14, "singular normal equations");
        for row in 0..k {
            if row == col {
                continue;
            }
            let f = ata[row][col] / p;
            for c in col..=k {
                ata[row][c] -= f * ata[col][c];
            }
        }
    }
    (0..k).map(|i| ata[i][k] / ata[i][i]).collect()
}

/// Normal-approximation binomial confidence interval at ~95%.
pub fn binomial_ci(hits: usize, n: usize) -> (f64, f64) {
    let p = hits as f64 / n as f64;
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    ((p - half).max(0.0), (p + half).min(1.0))
}

/// Two-sample Kolmogorov-Smirnov test; returns (statistic, p_value) using
/// the asymptotic Kolmogorov distribution with the Stephens correction.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (a.len(), b.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_sf(lambda))
}

/// Kolmogorov distribution survival function `Q(λ) = 2 Σ (-1)^{k-1} e^{-2k²λ²}`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Gaussian upper-tail probability `P(N(mu, sigma^2) >= a)`.
pub fn gaussian_tail(a: f64, mu: f64, sigma: f64) -> f64 {
    normal_sf((a - mu) / sigma)
}

/// Numerically stable `log( mean( exp(x_i) ) )`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + (sum / xs.len() as f64).ln()
}
