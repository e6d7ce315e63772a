//! One-dimensional Gaussian kernel density estimates and a Monte Carlo KL
//! estimator built on them.

use std::f64::consts::PI;

/// Smallest bandwidth used when a sample has (near) zero spread.
const MIN_BANDWIDTH: f64 = 1e-6;

/// Silverman's rule of thumb, `1.06 * sd * n^(-1/5)` (population sd).
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (1.06 * var.sqrt() * n.powf(-0.2)).max(MIN_BANDWIDTH)
}

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log density at `x` of the KDE over `samples`, optionally leaving out the
/// sample at index `skip`.
pub fn log_density(x: f64, samples: &[f64], bandwidth: f64, skip: Option<usize>) -> f64 {
    let count = samples.len() - usize::from(skip.is_some());
    let terms = samples
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != skip)
        .map(|(_, s)| -0.5 * ((x - s) / bandwidth).powi(2));
    log_sum_exp(terms) - (count as f64).ln() - bandwidth.ln() - 0.5 * (2.0 * PI).ln()
}

/// `KL(P || Q)` estimated as the mean of `log p(x) - log q(x)` over P's
/// samples, with `p` evaluated leave-one-out. Needs at least two P samples.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let hp = silverman_bandwidth(p);
    let hq = silverman_bandwidth(q);
    let total: f64 = p
        .iter()
        .enumerate()
        .map(|(i, x)| log_density(*x, p, hp, Some(i)) - log_density(*x, q, hq, None))
        .sum();
    total / p.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_integrates_to_one() {
        let s = [0.0, 0.5, 2.0];
        let h = 0.4;
        let dx = 1e-3;
        let mass: f64 = (-8000..12000).map(|k| log_density(k as f64 * dx, &s, h, None).exp() * dx).sum();
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }

    #[test]
    fn constant_samples_do_not_blow_up() {
        let p = [1.0; 6];
        let kl = kl_divergence(&p, &p);
        assert!(kl.is_finite());
        assert!(kl.abs() < 1e-9);
    }
}
