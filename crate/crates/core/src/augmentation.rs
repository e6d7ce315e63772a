//! Disentangling hidden representations into semantic and nuisance factors
//! and reassembling pairs of them into augmented representations.
//!
//! All functions operate on batches recorded on a [`Tape`]: `s` has shape
//! `[N, C, H, W]`, per-channel statistics have shape `[N, C]`. Prototype
//! values enter the graph as constants and never receive gradients.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::PrototypeBank;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Variance stabilizer inside the square root of the instance std.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Semantic factor `z` and nuisance statistics `(mu, sigma)` of a batch.
#[derive(Clone, Copy, Debug)]
pub struct Decomposition {
    pub z: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Interpolation weights for one augmented pair. `lambda_c` weights the
/// instance semantic factor against the class prototype, `lambda_d` weights
/// the instance statistics against the domain statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixCoefficients {
    pub lambda_c: f64,
    pub lambda_d: f64,
}

impl MixCoefficients {
    /// No prototype interpolation: plain swap of semantics and nuisances.
    pub const IDENTITY: MixCoefficients = MixCoefficients {
        lambda_c: 1.0,
        lambda_d: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_d", self.lambda_d)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Draw `lambda ~ Beta(alpha, alpha)`.
pub fn sample_beta<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "Beta concentration must be positive and finite, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| Error::InvalidArgument(format!("Beta({alpha}, {alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

/// Instance normalization without affine parameters.
///
/// `mu` is the spatial mean per channel, `sigma = sqrt(var + eps)` with the
/// population variance (divisor `H*W`), and `z = (s - mu) / sigma`.
pub fn disentangle(tape: &mut Tape, s: Var, eps: f64) -> Result<Decomposition> {
    let shape = tape.value(s).shape();
    if shape.len() != 4 {
        return Err(Error::shape("disentangle", format!("expected [N, C, H, W], got {:?}", shape)));
    }
    if shape[2] * shape[3] < 2 {
        return Err(Error::InvalidArgument(format!(
            "disentangle needs at least 2 spatial positions, got {}x{}",
            shape[2], shape[3]
        )));
    }
    let mu = tape.spatial_mean(s)?;
    let neg_mu = tape.scale(mu, -1.0);
    let centered = tape.channel_add(s, neg_mu)?;
    let sq = tape.square(centered);
    let var = tape.spatial_mean(sq)?;
    let var_eps = tape.add_scalar(var, eps);
    let sigma = tape.sqrt(var_eps)?;
    let z = tape.channel_div(centered, sigma)?;
    Ok(Decomposition { z, mu, sigma })
}

/// `sigma * z + mu`, broadcasting the statistics over spatial positions.
pub fn reassemble(tape: &mut Tape, z: Var, mu: Var, sigma: Var) -> Result<Var> {
    let scaled = tape.channel_mul(z, sigma)?;
    tape.channel_add(scaled, mu)
}

/// Per-row interpolation `lambda * x + (1 - lambda) * anchor`, where
/// `anchor` is a constant.
fn interpolate(tape: &mut Tape, x: Var, anchor: &Tensor, lambdas: &[f64]) -> Result<Var> {
    if tape.value(x).shape() != anchor.shape() {
        return Err(Error::shape(
            "interpolate",
            format!("{:?} vs {:?}", tape.value(x).shape(), anchor.shape()),
        ));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!("interpolation weight {l} outside [0, 1]")));
    }
    let rows = lambdas.len().max(1);
    let inner = anchor.numel() / rows;
    let weighted: Vec<f64> = anchor
        .data()
        .iter()
        .enumerate()
        .map(|(i, a)| (1.0 - lambdas[i / inner]) * a)
        .collect();
    let scaled = tape.row_scale(x, lambdas.to_vec())?;
    let anchor_part = tape.constant(Tensor::new(anchor.shape().to_vec(), weighted)?);
    tape.add(scaled, anchor_part)
}

/// Prototype-enhanced semantic factor `lambda_c * z + (1 - lambda_c) * r`.
pub fn enhance_semantic(tape: &mut Tape, z: Var, prototypes: &Tensor, lambda_c: &[f64]) -> Result<Var> {
    interpolate(tape, z, prototypes, lambda_c)
}

/// Prototype-enhanced nuisances: `mu` and `sigma` interpolated towards the
/// class-agnostic domain statistics `(u, v)`.
pub fn enhance_nuisance(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    u: &Tensor,
    v: &Tensor,
    lambda_d: &[f64],
) -> Result<(Var, Var)> {
    if v.data().iter().any(|x| !(*x > 0.0)) {
        return Err(Error::InvalidArgument(
            "domain std statistics must be positive".into(),
        ));
    }
    let mu2 = interpolate(tape, mu, u, lambda_d)?;
    let sigma2 = interpolate(tape, sigma, v, lambda_d)?;
    Ok((mu2, sigma2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub eps: f64,
    /// Stop gradients through the partner's statistics `(mu_j, sigma_j)`.
    pub detach_nuisance: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            eps: DEFAULT_EPS,
            detach_nuisance: false,
        }
    }
}

/// Result of [`augment_pairs`].
#[derive(Clone, Debug)]
pub struct Augmented {
    /// Augmented representations `[N, C, H, W]`.
    pub s: Var,
    /// Labels of the augmented examples; always the `y_i` sequence.
    pub labels: Vec<usize>,
    pub dec_i: Decomposition,
    pub dec_j: Decomposition,
}

/// Build `s' = sigma'(s_j) * z'(s_i) + mu'(s_j)` labelled `y_i` for each
/// pair in the batch.
///
/// Prototype entries are read only where they contribute, i.e. where
/// `lambda_c < 1` (class prototype of `y_i`) or `lambda_d < 1` (statistics of
/// `d_j`); a contributing entry that was never committed is an error.
pub fn augment_pairs(
    tape: &mut Tape,
    s_i: Var,
    y_i: &[usize],
    s_j: Var,
    d_j: &[usize],
    bank: &PrototypeBank,
    coeffs: &[MixCoefficients],
    opts: &AugmentOptions,
) -> Result<Augmented> {
    let shape = tape.value(s_i).shape().to_vec();
    if tape.value(s_j).shape() != shape.as_slice() {
        return Err(Error::shape(
            "augment_pairs",
            format!("s_i {:?} vs s_j {:?}", shape, tape.value(s_j).shape()),
        ));
    }
    let n = shape.first().copied().unwrap_or(0);
    if y_i.len() != n || d_j.len() != n || coeffs.len() != n {
        return Err(Error::shape(
            "augment_pairs",
            format!(
                "{n} pairs but {} labels, {} domains, {} coefficients",
                y_i.len(),
                d_j.len(),
                coeffs.len()
            ),
        ));
    }
    coeffs.iter().try_for_each(MixCoefficients::validate)?;
    let channels = shape[1];
    let spatial: usize = shape[2..].iter().product();

    let dec_i = disentangle(tape, s_i, opts.eps)?;
    let dec_j = disentangle(tape, s_j, opts.eps)?;

    let mut r = vec![0.0; n * channels * spatial];
    let mut u = vec![0.0; n * channels];
    let mut v = vec![1.0; n * channels];
    for p in 0..n {
        if coeffs[p].lambda_c < 1.0 {
            let proto = bank.class_prototype(y_i[p])?;
            if proto.len() != channels * spatial {
                return Err(Error::shape("augment_pairs", "prototype size differs from s"));
            }
            r[p * channels * spatial..(p + 1) * channels * spatial].copy_from_slice(proto);
        }
        if coeffs[p].lambda_d < 1.0 {
            let (ud, vd) = bank.domain_stats(d_j[p])?;
            u[p * channels..(p + 1) * channels].copy_from_slice(ud);
            v[p * channels..(p + 1) * channels].copy_from_slice(vd);
        }
    }
    let lambda_c: Vec<f64> = coeffs.iter().map(|c| c.lambda_c).collect();
    let lambda_d: Vec<f64> = coeffs.iter().map(|c| c.lambda_d).collect();

    let z_prime = enhance_semantic(tape, dec_i.z, &Tensor::new(shape.clone(), r)?, &lambda_c)?;
    let (mu_j, sigma_j) = if opts.detach_nuisance {
        (tape.detach(dec_j.mu), tape.detach(dec_j.sigma))
    } else {
        (dec_j.mu, dec_j.sigma)
    };
    let (mu_p, sigma_p) = enhance_nuisance(
        tape,
        mu_j,
        sigma_j,
        &Tensor::new(vec![n, channels], u)?,
        &Tensor::new(vec![n, channels], v)?,
        &lambda_d,
    )?;
    let s = reassemble(tape, z_prime, mu_p, sigma_p)?;
    Ok(Augmented {
        s,
        labels: y_i.to_vec(),
        dec_i,
        dec_j,
    })
}

/// Plain-value decomposition of a batch of hidden representations:
/// `(z, mu, sigma)` with shapes `[N, C, H, W]`, `[N, C]`, `[N, C]`.
pub fn decompose_values(s: &Tensor, eps: f64) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let d = disentangle(&mut tape, sv, eps)?;
    Ok((
        tape.value(d.z).clone(),
        tape.value(d.mu).clone(),
        tape.value(d.sigma).clone(),
    ))
}
