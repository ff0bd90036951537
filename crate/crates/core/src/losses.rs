//! Clustering losses and divergences.
//!
//! Closed forms (Euclidean clustering loss, Gaussian KL divergence), a
//! quadrature Jensen-Shannon estimate for one-dimensional Gaussians, the
//! optimal discriminator `p / (p + q)`, and the two adversarial objectives
//! used to train the discriminator and the encoder.

use std::f64::consts::LN_2;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::par::{self, Exec};

/// Discriminator outputs are clamped into `[D_CLAMP, 1 - D_CLAMP]` before logs.
pub const D_CLAMP: f64 = 1e-7;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian with diagonal covariance, parameterised by precision.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag {
    mean: Vec<f64>,
    precision: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mean: Vec<f64>, precision: Vec<f64>) -> Result<Self> {
        if mean.len() != precision.len() || mean.is_empty() {
            return Err(Error::shape("GaussianDiag", mean.len(), precision.len()));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidInput("Gaussian mean must be finite".into()));
        }
        if precision.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::InvalidInput(
                "Gaussian precision must be finite and positive".into(),
            ));
        }
        Ok(GaussianDiag { mean, precision })
    }

    /// Unit-variance Gaussian.
    pub fn unit(mean: Vec<f64>) -> Result<Self> {
        let n = mean.len();
        GaussianDiag::new(mean, vec![1.0; n])
    }

    /// One-dimensional Gaussian from mean and standard deviation.
    pub fn scalar(mean: f64, std_dev: f64) -> Result<Self> {
        GaussianDiag::new(vec![mean], vec![1.0 / (std_dev * std_dev)])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    pub fn std_dev(&self, d: usize) -> f64 {
        self.precision[d].sqrt().recip()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.precision)
            .zip(z)
            .map(|((m, t), x)| 0.5 * (t.ln() - LN_2PI) - 0.5 * t * (x - m) * (x - m))
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .enumerate()
            .map(|(d, m)| {
                let e: f64 = rng.sample(StandardNormal);
                m + self.std_dev(d) * e
            })
            .collect()
    }
}

fn same_shape(a: &Matrix, b: &Matrix, context: &'static str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(
            context,
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    if a.rows() == 0 {
        return Err(Error::InvalidInput(format!("{context}: empty batch")));
    }
    Ok(())
}

/// Euclidean clustering loss: batch mean of `½‖z − η*‖²`.
pub fn abc_loss(latents: &Matrix, assigned_means: &Matrix) -> Result<f64> {
    abc_loss_grad(latents, assigned_means).map(|(v, _)| v)
}

/// [`abc_loss`] and its gradient with respect to the latents.
pub fn abc_loss_grad(latents: &Matrix, assigned_means: &Matrix) -> Result<(f64, Matrix)> {
    same_shape(latents, assigned_means, "abc_loss")?;
    let n = latents.rows() as f64;
    let mut grad = Matrix::zeros(latents.rows(), latents.cols());
    let mut total = 0.0;
    for (g, (z, m)) in grad
        .data_mut()
        .iter_mut()
        .zip(latents.data().iter().zip(assigned_means.data()))
    {
        let d = z - m;
        total += 0.5 * d * d;
        *g = d / n;
    }
    Ok((total / n, grad))
}

/// `KL(p ‖ q)` between diagonal Gaussians, summed over dimensions.
pub fn kld_diag_gaussians(p: &GaussianDiag, q: &GaussianDiag) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::shape("kld_diag_gaussians", p.dim(), q.dim()));
    }
    Ok((0..p.dim())
        .map(|d| {
            let (var_p, var_q) = (p.precision[d].recip(), q.precision[d].recip());
            let diff = p.mean[d] - q.mean[d];
            // ln σ_q − ln σ_p = ½ (ln τ_p − ln τ_q)
            0.5 * (p.precision[d].ln() - q.precision[d].ln())
                + (var_p + diff * diff) / (2.0 * var_q)
                - 0.5
        })
        .sum())
}

/// Batch mean of `KL(N(η*, τ*⁻¹) ‖ N(z, 1/latent_precision))` with its
/// gradient with respect to the latents `z`.
pub fn kld_clustering_loss(
    latents: &Matrix,
    assigned_means: &Matrix,
    assigned_precisions: &Matrix,
    latent_precision: f64,
) -> Result<(f64, Matrix)> {
    same_shape(latents, assigned_means, "kld_clustering_loss")?;
    same_shape(
        latents,
        assigned_precisions,
        "kld_clustering_loss precisions",
    )?;
    if !(latent_precision.is_finite() && latent_precision > 0.0) {
        return Err(Error::InvalidInput(
            "latent precision must be positive".into(),
        ));
    }
    let n = latents.rows();
    let dim = latents.cols();
    let q_prec = vec![latent_precision; dim];
    let mut total = 0.0;
    let mut grad = Matrix::zeros(n, dim);
    for i in 0..n {
        let p = GaussianDiag::new(
            assigned_means.row(i).to_vec(),
            assigned_precisions.row(i).to_vec(),
        )?;
        let q = GaussianDiag::new(latents.row(i).to_vec(), q_prec.clone())?;
        total += kld_diag_gaussians(&p, &q)?;
        for (g, (z, m)) in grad
            .row_mut(i)
            .iter_mut()
            .zip(latents.row(i).iter().zip(assigned_means.row(i)))
        {
            *g = latent_precision * (z - m) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

/// Uniform trapezoid grid on `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl QuadratureGrid {
    /// Smallest grid covering ±12 standard deviations of both Gaussians.
    pub fn covering(p: &GaussianDiag, q: &GaussianDiag) -> Self {
        let lo = (p.mean[0] - 12.0 * p.std_dev(0)).min(q.mean[0] - 12.0 * q.std_dev(0));
        let hi = (p.mean[0] + 12.0 * p.std_dev(0)).max(q.mean[0] + 12.0 * q.std_dev(0));
        QuadratureGrid {
            lo,
            hi,
            points: 100_001,
        }
    }

    fn covers(&self, g: &GaussianDiag) -> bool {
        let s = 8.0 * g.std_dev(0);
        self.lo <= g.mean[0] - s && self.hi >= g.mean[0] + s
    }

    /// Trapezoid rule for `f` over the grid.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        let h = (self.hi - self.lo) / (self.points - 1) as f64;
        let mut total = 0.5 * (f(self.lo) + f(self.hi));
        for i in 1..self.points - 1 {
            total += f(self.lo + i as f64 * h);
        }
        total * h
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Jensen-Shannon divergence of two one-dimensional Gaussians by quadrature
/// of both KL-to-midpoint integrals. Result lies in `[0, ln 2]`.
pub fn jsd_quadrature(p: &GaussianDiag, q: &GaussianDiag) -> Result<f64> {
    let grid = QuadratureGrid::covering(p, q);
    jsd_quadrature_on(p, q, &grid)
}

pub fn jsd_quadrature_on(p: &GaussianDiag, q: &GaussianDiag, grid: &QuadratureGrid) -> Result<f64> {
    if p.dim() != 1 || q.dim() != 1 {
        return Err(Error::InvalidInput(
            "quadrature JSD is defined for one-dimensional Gaussians".into(),
        ));
    }
    if grid.points < 3 || grid.hi.partial_cmp(&grid.lo) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::InvalidInput(format!(
            "degenerate quadrature grid {grid:?}"
        )));
    }
    if !grid.covers(p) || !grid.covers(q) {
        return Err(Error::InvalidInput(format!(
            "quadrature grid [{}, {}] does not cover 8 standard deviations of both Gaussians",
            grid.lo, grid.hi
        )));
    }
    let v = grid.integrate(|z| {
        let lp = p.log_density(&[z]);
        let lq = q.log_density(&[z]);
        let lm = log_add_exp(lp, lq) - LN_2;
        0.5 * lp.exp() * (lp - lm) + 0.5 * lq.exp() * (lq - lm)
    });
    Ok(v.clamp(0.0, LN_2))
}

/// Value of the optimal discriminator at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimalD {
    pub value: f64,
    /// Both densities underflowed to zero; `value` is then 0.5.
    pub degenerate: bool,
}

/// `p(z) / (p(z) + q(z))`, evaluated in log space.
pub fn optimal_discriminator(p: &GaussianDiag, q: &GaussianDiag, z: &[f64]) -> Result<OptimalD> {
    if p.dim() != q.dim() || z.len() != p.dim() {
        return Err(Error::shape("optimal_discriminator", p.dim(), z.len()));
    }
    let lp = p.log_density(z);
    let lq = q.log_density(z);
    if lp.exp() == 0.0 && lq.exp() == 0.0 {
        return Ok(OptimalD {
            value: 0.5,
            degenerate: true,
        });
    }
    // 1 / (1 + q/p)
    Ok(OptimalD {
        value: 1.0 / (1.0 + (lq - lp).exp()),
        degenerate: false,
    })
}

fn clamp_d(d: f64) -> f64 {
    if d.is_nan() {
        0.5
    } else {
        d.clamp(D_CLAMP, 1.0 - D_CLAMP)
    }
}

fn clamped_grad(d: f64, g: f64) -> f64 {
    if d > D_CLAMP && d < 1.0 - D_CLAMP {
        g
    } else {
        0.0
    }
}

/// Adversarial objective the discriminator ascends:
/// `mean ln D(positive) + mean ln(1 − D(negative))`.
pub fn dcan_discriminator_objective(d_pos: &[f64], d_neg: &[f64]) -> f64 {
    let pos = d_pos.iter().map(|&d| clamp_d(d).ln()).sum::<f64>() / d_pos.len().max(1) as f64;
    let neg =
        d_neg.iter().map(|&d| (1.0 - clamp_d(d)).ln()).sum::<f64>() / d_neg.len().max(1) as f64;
    pos + neg
}

/// Objective value plus its gradient with respect to each `D` output.
pub fn dcan_discriminator_objective_grad(
    d_pos: &[f64],
    d_neg: &[f64],
) -> (f64, Vec<f64>, Vec<f64>) {
    let (np, nn) = (d_pos.len().max(1) as f64, d_neg.len().max(1) as f64);
    let gp = d_pos
        .iter()
        .map(|&d| clamped_grad(d, 1.0 / (d * np)))
        .collect();
    let gn = d_neg
        .iter()
        .map(|&d| clamped_grad(d, -1.0 / ((1.0 - d) * nn)))
        .collect();
    (dcan_discriminator_objective(d_pos, d_neg), gp, gn)
}

/// How the encoder consumes the discriminator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderMode {
    /// Descend `mean ln(1 − D(G(x)))`.
    #[default]
    #[serde(rename = "minimax")]
    Minimax,
    /// Ascend `mean ln D(G(x))`.
    #[serde(rename = "non-saturating")]
    NonSaturating,
}

impl EncoderMode {
    pub fn direction(self) -> crate::numerics::Direction {
        match self {
            EncoderMode::Minimax => crate::numerics::Direction::Descend,
            EncoderMode::NonSaturating => crate::numerics::Direction::Ascend,
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderMode::Minimax => "minimax",
            EncoderMode::NonSaturating => "non-saturating",
        })
    }
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimax" => Ok(EncoderMode::Minimax),
            "non-saturating" => Ok(EncoderMode::NonSaturating),
            other => Err(Error::InvalidInput(format!(
                "unknown encoder mode {other:?}"
            ))),
        }
    }
}

/// Encoder objective for `mode`; follow `mode.direction()` when stepping.
pub fn dcan_encoder_objective(d_neg: &[f64], mode: EncoderMode) -> f64 {
    let n = d_neg.len().max(1) as f64;
    match mode {
        EncoderMode::Minimax => d_neg.iter().map(|&d| (1.0 - clamp_d(d)).ln()).sum::<f64>() / n,
        EncoderMode::NonSaturating => d_neg.iter().map(|&d| clamp_d(d).ln()).sum::<f64>() / n,
    }
}

pub fn dcan_encoder_objective_grad(d_neg: &[f64], mode: EncoderMode) -> (f64, Vec<f64>) {
    let n = d_neg.len().max(1) as f64;
    let g = d_neg
        .iter()
        .map(|&d| match mode {
            EncoderMode::Minimax => clamped_grad(d, -1.0 / ((1.0 - d) * n)),
            EncoderMode::NonSaturating => clamped_grad(d, 1.0 / (d * n)),
        })
        .collect();
    (dcan_encoder_objective(d_neg, mode), g)
}

/// Monte-Carlo estimate of the discriminator objective at the optimal
/// discriminator, drawing `samples` points from each of `p` and `q`.
pub fn optimal_objective_mc(
    p: &GaussianDiag,
    q: &GaussianDiag,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    optimal_objective_mc_with(Exec::default(), p, q, samples, seed)
}

pub fn optimal_objective_mc_with(
    exec: Exec,
    p: &GaussianDiag,
    q: &GaussianDiag,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::shape("optimal_objective_mc", p.dim(), q.dim()));
    }
    if samples == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    // Block b draws from stream 2b (positives) and 2b+1 (negatives), so the
    // sample set is independent of how blocks are scheduled.
    let block_sum = |range: std::ops::Range<usize>, from_p: bool| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * (range.start / par::SUM_BLOCK) as u64 + u64::from(!from_p));
        range
            .map(|_| {
                let z = if from_p {
                    p.sample(&mut rng)
                } else {
                    q.sample(&mut rng)
                };
                let d = optimal_discriminator(p, q, &z)
                    .map(|o| o.value)
                    .unwrap_or(0.5);
                if from_p {
                    clamp_d(d).ln()
                } else {
                    (1.0 - clamp_d(d)).ln()
                }
            })
            .sum()
    };
    let pos = par::sum_blocks(exec, samples, |r| block_sum(r, true));
    let neg = par::sum_blocks(exec, samples, |r| block_sum(r, false));
    Ok((pos + neg) / samples as f64)
}
