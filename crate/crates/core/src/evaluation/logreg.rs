//! L2-regularized multinomial logistic regression, full-batch gradient descent.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRegSettings {
    pub l2: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LogRegSettings {
    fn default() -> Self {
        LogRegSettings {
            l2: 1e-3,
            tolerance: 1e-6,
            max_iterations: 10_000,
        }
    }
}

/// Fitted model over standardized features (standardization is part of the
/// model and applied by [`LogReg::predict`]).
#[derive(Clone, Debug)]
pub struct LogReg {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `[(features + 1) * classes]`, the last row is the bias.
    weights: Vec<f64>,
    classes: usize,
    pub iterations: usize,
    pub gradient_norm: f64,
}

fn standardizer(x: &[Vec<f64>], f: usize) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let mut mean = vec![0.0; f];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; f];
    for row in x {
        for k in 0..f {
            scale[k] += (row[k] - mean[k]).powi(2) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    (mean, scale)
}

/// Design matrix with a trailing constant column.
fn design(x: &[Vec<f64>], mean: &[f64], scale: &[f64]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let mut out: Vec<f64> = row.iter().zip(mean).zip(scale).map(|((v, m), s)| (v - m) / s).collect();
            out.push(1.0);
            out
        })
        .collect()
}

/// Largest eigenvalue of `X^T X / n` by power iteration.
fn gram_spectral_norm(x: &[Vec<f64>]) -> f64 {
    let p = x[0].len();
    let n = x.len() as f64;
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut w = vec![0.0; p];
        for row in x {
            let dot: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (wk, r) in w.iter_mut().zip(row) {
                *wk += dot * r / n;
            }
        }
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w.into_iter().map(|a| a / norm).collect();
        if (next - lambda).abs() <= 1e-12 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

fn softmax_rows(z: &mut [f64], classes: usize) {
    for row in z.chunks_mut(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

impl LogReg {
    /// Minimizes mean cross-entropy + `l2/2 * ||W||^2` (bias unpenalized)
    /// with step size `1/L`, `L = ||X^T X / n|| / 2 + l2` (Böhning bound).
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, settings: &LogRegSettings) -> Result<LogReg> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::InvalidArgument("logistic regression needs matching non-empty inputs".into()));
        }
        let f = x[0].len();
        if x.iter().any(|r| r.len() != f) || y.iter().any(|c| *c >= classes) || classes < 2 {
            return Err(Error::InvalidArgument("ragged features or label out of range".into()));
        }
        let (mean, scale) = standardizer(x, f);
        let a = design(x, &mean, &scale);
        let p = f + 1;
        let n = a.len() as f64;
        let step = 1.0 / (0.5 * gram_spectral_norm(&a) + settings.l2);
        let mut w = vec![0.0; p * classes];
        let mut grad = vec![0.0; p * classes];
        let mut probs = vec![0.0; a.len() * classes];
        let mut iterations = 0;
        let mut gnorm = f64::INFINITY;
        while iterations < settings.max_iterations {
            for (i, row) in a.iter().enumerate() {
                for k in 0..classes {
                    probs[i * classes + k] = (0..p).map(|j| row[j] * w[j * classes + k]).sum();
                }
            }
            softmax_rows(&mut probs, classes);
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (i, row) in a.iter().enumerate() {
                for k in 0..classes {
                    let r = (probs[i * classes + k] - if y[i] == k { 1.0 } else { 0.0 }) / n;
                    for j in 0..p {
                        grad[j * classes + k] += r * row[j];
                    }
                }
            }
            for j in 0..f {
                for k in 0..classes {
                    grad[j * classes + k] += settings.l2 * w[j * classes + k];
                }
            }
            gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < settings.tolerance {
                break;
            }
            for (wk, g) in w.iter_mut().zip(&grad) {
                *wk -= step * g;
            }
            iterations += 1;
        }
        Ok(LogReg {
            mean,
            scale,
            weights: w,
            classes,
            iterations,
            gradient_norm: gnorm,
        })
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<usize> {
        let a = design(x, &self.mean, &self.scale);
        a.iter()
            .map(|row| {
                let scores: Vec<f64> = (0..self.classes)
                    .map(|k| row.iter().enumerate().map(|(j, v)| v * self.weights[j * self.classes + k]).sum())
                    .collect();
                super::argmax(&scores)
            })
            .collect()
    }
}
