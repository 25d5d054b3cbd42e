//! Goodness-of-fit and dependence statistics.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Significance floor used by every test in the harness.
pub const ALPHA: f64 = 0.001;

/// Asymptotic Kolmogorov quantile at `ALPHA`.
pub const KOLMOGOROV_QUANTILE_001: f64 = 1.9495;

/// One-sample Kolmogorov-Smirnov distance against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Kolmogorov survival function `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.0 {
        // small-argument (theta-function) form
        let c = std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let s: f64 = (1..=20)
            .map(|j| {
                let m = (2 * j - 1) as f64;
                (-m * m * c).exp()
            })
            .sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let s: f64 = (1..=100)
        .map(|j| {
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

fn stephens_scale(n: usize) -> f64 {
    let r = (n as f64).sqrt();
    r + 0.12 + 0.11 / r
}

/// p-value of a KS distance `d` at sample size `n` (Stephens correction).
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    kolmogorov_sf(stephens_scale(n) * d)
}

/// Distance at which the KS p-value reaches `ALPHA`.
pub fn ks_critical_001(n: usize) -> f64 {
    KOLMOGOROV_QUANTILE_001 / stephens_scale(n)
}

pub fn exp1_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -(-x).exp_m1()
    }
}

/// Ranks starting at 1, ties averaged.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation; `NaN` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Chi-square statistic, degrees of freedom and p-value after pooling
/// adjacent cells until every pooled expected count is at least 5.
pub fn chi_square_pooled(observed: &[f64], expected_probs: &[f64], n: f64) -> (f64, usize, f64) {
    let mut groups: Vec<(f64, f64)> = Vec::new();
    let mut cur = (0.0, 0.0);
    for (o, p) in observed.iter().zip(expected_probs) {
        cur.0 += o;
        cur.1 += p * n;
        if cur.1 >= 5.0 {
            groups.push(cur);
            cur = (0.0, 0.0);
        }
    }
    if cur.0 > 0.0 || cur.1 > 0.0 {
        match groups.last_mut() {
            Some(last) => {
                last.0 += cur.0;
                last.1 += cur.1;
            }
            None => groups.push(cur),
        }
    }
    if groups.len() < 2 {
        return (0.0, 0, 1.0);
    }
    let chi2: f64 = groups
        .iter()
        .map(|(o, e)| if *e > 0.0 { (o - e) * (o - e) / e } else { 0.0 })
        .sum();
    let dof = groups.len() - 1;
    let p = ChiSquared::new(dof as f64).map(|d| d.sf(chi2)).unwrap_or(f64::NAN);
    (chi2, dof, p)
}

/// Whether `value` lies within `k` standard errors of `center`.
pub fn within_sigma(value: f64, center: f64, se: f64, k: f64) -> bool {
    (value - center).abs() <= k * se
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Exp1};

    #[test]
    fn kolmogorov_branches_agree() {
        for l in [0.9, 1.0, 1.1] {
            let c = std::f64::consts::PI.powi(2) / (8.0 * l * l);
            let small: f64 = 1.0
                - (2.0 * std::f64::consts::PI).sqrt() / l
                    * (1..=20).map(|j| (-((2 * j - 1) as f64).powi(2) * c).exp()).sum::<f64>();
            let large: f64 = 2.0
                * (1..=100)
                    .map(|j| (if j % 2 == 1 { 1.0 } else { -1.0 }) * (-2.0 * (j * j) as f64 * l * l).exp())
                    .sum::<f64>();
            assert!((small - large).abs() < 1e-12);
        }
        assert!((kolmogorov_sf(KOLMOGOROV_QUANTILE_001) - 0.001).abs() < 2e-6);
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
    }

    #[test]
    fn ks_accepts_exp_samples_and_flags_scaled_ones() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..10_000).map(|_| Exp1.sample(&mut rng)).collect();
        let d = ks_statistic(&x, exp1_cdf);
        assert!(ks_pvalue(d, x.len()) > ALPHA);
        let y: Vec<f64> = x.iter().map(|v| v * 1.2).collect();
        let d = ks_statistic(&y, exp1_cdf);
        assert!(d > ks_critical_001(y.len()));
        assert!(ks_pvalue(d, y.len()) < ALPHA);
    }

    #[test]
    fn ks_distance_of_exact_sample() {
        assert!((ks_statistic(&[0.5], |x| x) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-15);
        assert!(spearman(&[1.0, 2.0], &[5.0, 5.0]).is_nan());
    }

    #[test]
    fn chi_square_pools_small_cells() {
        let (chi2, dof, p) = chi_square_pooled(&[50.0, 48.0, 1.0, 1.0], &[0.5, 0.48, 0.01, 0.01], 100.0);
        assert_eq!(dof, 1);
        assert!(chi2 < 1e-12 && p > 0.99);
        let (_, _, p) = chi_square_pooled(&[70.0, 30.0], &[0.5, 0.5], 100.0);
        assert!(p < 1e-4);
    }
}
