//! Verification suites: gradient checks against finite differences, the
//! unit-variance KLD/Euclidean identity, the optimal-discriminator
//! JSD identity, and discriminator optimality on a fixed pair.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{
    abc_loss, abc_loss_grad, dcan_discriminator_objective, dcan_discriminator_objective_grad,
    dcan_encoder_objective, dcan_encoder_objective_grad, jsd_quadrature, kld_clustering_loss,
    kld_diag_gaussians, optimal_discriminator, optimal_objective_mc, EncoderMode, GaussianDiag,
};
use crate::numerics::{
    finite_diff_grad, finite_diff_input_grad, mlp_backward, mlp_forward, mlp_predict,
    relative_error, Activation, Direction, GradBundle, Matrix, MlpParams, OptState, FD_EPSILON,
};
use crate::training::abc_objective;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
pub const OPTIMUM_TOLERANCE: f64 = 5e-3;
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;
pub const ASYMMETRY_MIN_GAP: f64 = 0.01;

/// Worst coordinate of one layer.
#[derive(Clone, Debug, Serialize)]
pub struct LayerWorst {
    pub network: &'static str,
    pub layer: usize,
    pub coordinate: String,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub layers: Vec<LayerWorst>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub const GRADCHECK_NAMES: [&str; 7] = [
    "abc",
    "kld",
    "dcan-discriminator",
    "dcan-encoder-minimax",
    "dcan-encoder-non-saturating",
    "encoder-discriminator-input",
    "abc-reconstruction",
];

fn random_net(
    rng: &mut ChaCha8Rng,
    input: usize,
    output: usize,
    out_act: Activation,
) -> Result<MlpParams> {
    let layers = rng.random_range(1..=3usize);
    let mut dims = vec![input];
    for _ in 1..layers {
        dims.push(rng.random_range(2..=32));
    }
    dims.push(output);
    let mut net = MlpParams::init(&dims, Activation::Tanh, out_act, rng)?;
    // Nonzero biases exercise the bias path.
    for l in net.layers_mut() {
        for b in &mut l.bias {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    Ok(net)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite random matrix")
}

fn layer_worst(
    network: &'static str,
    analytic: &GradBundle,
    numeric: &GradBundle,
) -> Vec<LayerWorst> {
    let mut out = Vec::new();
    for (li, (a, n)) in analytic.layers.iter().zip(&numeric.layers).enumerate() {
        let cols = a.weight.cols();
        let mut best: Option<LayerWorst> = None;
        let mut consider = |coordinate: String, av: f64, nv: f64| {
            let e = (av - nv).abs();
            if best.as_ref().is_none_or(|b| e > b.abs_error) {
                best = Some(LayerWorst {
                    network,
                    layer: li,
                    coordinate,
                    analytic: av,
                    numeric: nv,
                    abs_error: e,
                });
            }
        };
        for (k, (&av, &nv)) in a.weight.data().iter().zip(n.weight.data()).enumerate() {
            consider(format!("weight[{},{}]", k / cols, k % cols), av, nv);
        }
        for (k, (&av, &nv)) in a.bias.iter().zip(&n.bias).enumerate() {
            consider(format!("bias[{k}]"), av, nv);
        }
        out.extend(best);
    }
    out
}

fn corrupt(g: &mut GradBundle) {
    let w = &mut g.layers[0].weight.data_mut()[0];
    *w += 1e-2 * (1.0 + w.abs());
}

struct Part {
    network: &'static str,
    analytic: GradBundle,
    numeric: GradBundle,
}

fn assemble(name: &'static str, mut parts: Vec<Part>, corrupted: bool) -> GradCheck {
    if corrupted {
        corrupt(&mut parts[0].analytic);
    }
    let mut a = Vec::new();
    let mut n = Vec::new();
    let mut layers = Vec::new();
    for p in &parts {
        a.extend(p.analytic.flat());
        n.extend(p.numeric.flat());
        layers.extend(layer_worst(p.network, &p.analytic, &p.numeric));
    }
    GradCheck {
        name,
        max_rel_error: relative_error(&a, &n),
        tolerance: GRADCHECK_TOLERANCE,
        layers,
    }
}

/// Runs one named gradient check on seeded random networks.
pub fn gradcheck(name: &str, seed: u64, corrupted: bool) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=8usize);
    let input = rng.random_range(2..=6usize);
    let latent = rng.random_range(1..=4usize);
    let eps = FD_EPSILON;
    match name {
        "abc" | "kld" => {
            let enc = random_net(&mut rng, input, latent, Activation::Identity)?;
            let x = random_matrix(&mut rng, n, input, 1.5);
            let means = random_matrix(&mut rng, n, latent, 1.5);
            let precisions = Matrix::from_vec(
                n,
                latent,
                (0..n * latent)
                    .map(|_| rng.random_range(0.3..3.0))
                    .collect(),
            )?;
            let latent_precision = rng.random_range(0.5..2.0);
            let is_abc = name == "abc";
            let loss = |z: &Matrix| -> Result<(f64, Matrix)> {
                if is_abc {
                    abc_loss_grad(z, &means)
                } else {
                    kld_clustering_loss(z, &means, &precisions, latent_precision)
                }
            };
            let (z, tape) = mlp_forward(&enc, &x)?;
            let (_, gz) = loss(&z)?;
            let (analytic, _) = mlp_backward(&enc, &tape, &gz)?;
            let numeric = finite_diff_grad(
                &enc,
                |p| {
                    mlp_predict(p, &x)
                        .and_then(|z| loss(&z))
                        .map_or(f64::NAN, |v| v.0)
                },
                eps,
            )?;
            let static_name = if is_abc { "abc" } else { "kld" };
            Ok(assemble(
                static_name,
                vec![Part {
                    network: "encoder",
                    analytic,
                    numeric,
                }],
                corrupted,
            ))
        }
        "dcan-discriminator" => {
            let disc = random_net(&mut rng, latent, 1, Activation::Sigmoid)?;
            let pos = random_matrix(&mut rng, n, latent, 2.0);
            let neg = random_matrix(&mut rng, n, latent, 2.0);
            let (dp, tp) = mlp_forward(&disc, &pos)?;
            let (dn, tn) = mlp_forward(&disc, &neg)?;
            let (_, gp, gn) = dcan_discriminator_objective_grad(dp.data(), dn.data());
            let (a1, _) = mlp_backward(&disc, &tp, &Matrix::from_vec(n, 1, gp)?)?;
            let (a2, _) = mlp_backward(&disc, &tn, &Matrix::from_vec(n, 1, gn)?)?;
            let mut analytic = a1;
            analytic.accumulate(&a2);
            let numeric = finite_diff_grad(
                &disc,
                |p| match (mlp_predict(p, &pos), mlp_predict(p, &neg)) {
                    (Ok(a), Ok(b)) => dcan_discriminator_objective(a.data(), b.data()),
                    _ => f64::NAN,
                },
                eps,
            )?;
            Ok(assemble(
                "dcan-discriminator",
                vec![Part {
                    network: "discriminator",
                    analytic,
                    numeric,
                }],
                corrupted,
            ))
        }
        "dcan-encoder-minimax" | "dcan-encoder-non-saturating" => {
            let mode = if name == "dcan-encoder-minimax" {
                EncoderMode::Minimax
            } else {
                EncoderMode::NonSaturating
            };
            let enc = random_net(&mut rng, input, latent, Activation::Identity)?;
            let disc = random_net(&mut rng, latent, 1, Activation::Sigmoid)?;
            let x = random_matrix(&mut rng, n, input, 1.5);
            let (z, te) = mlp_forward(&enc, &x)?;
            let (d, td) = mlp_forward(&disc, &z)?;
            let (_, g) = dcan_encoder_objective_grad(d.data(), mode);
            let (_, gz) = mlp_backward(&disc, &td, &Matrix::from_vec(n, 1, g)?)?;
            let (analytic, _) = mlp_backward(&enc, &te, &gz)?;
            let numeric = finite_diff_grad(
                &enc,
                |p| {
                    mlp_predict(p, &x)
                        .and_then(|z| mlp_predict(&disc, &z))
                        .map_or(f64::NAN, |d| dcan_encoder_objective(d.data(), mode))
                },
                eps,
            )?;
            let static_name = match mode {
                EncoderMode::Minimax => "dcan-encoder-minimax",
                EncoderMode::NonSaturating => "dcan-encoder-non-saturating",
            };
            Ok(assemble(
                static_name,
                vec![Part {
                    network: "encoder",
                    analytic,
                    numeric,
                }],
                corrupted,
            ))
        }
        "encoder-discriminator-input" => {
            // Gradient of sum D(G(x)) with respect to the input batch.
            let enc = random_net(&mut rng, input, latent, Activation::Identity)?;
            let disc = random_net(&mut rng, latent, 1, Activation::Sigmoid)?;
            let x = random_matrix(&mut rng, n, input, 1.5);
            let (z, te) = mlp_forward(&enc, &x)?;
            let (_, td) = mlp_forward(&disc, &z)?;
            let (_, gz) = mlp_backward(&disc, &td, &Matrix::from_vec(n, 1, vec![1.0; n])?)?;
            let (_, gx) = mlp_backward(&enc, &te, &gz)?;
            let numeric = finite_diff_input_grad(
                &x,
                |xp| {
                    mlp_predict(&enc, xp)
                        .and_then(|z| mlp_predict(&disc, &z))
                        .map_or(f64::NAN, |d| d.data().iter().sum())
                },
                eps,
            )?;
            let wrap = |m: &Matrix| GradBundle {
                layers: vec![crate::numerics::LayerGrad {
                    weight: m.clone(),
                    bias: Vec::new(),
                }],
            };
            Ok(assemble(
                "encoder-discriminator-input",
                vec![Part {
                    network: "input",
                    analytic: wrap(&gx),
                    numeric: wrap(&numeric),
                }],
                corrupted,
            ))
        }
        "abc-reconstruction" => {
            let hidden = rng.random_range(2..=16usize);
            let dims = [input, hidden, latent];
            let enc = MlpParams::init(&dims, Activation::Tanh, Activation::Identity, &mut rng)?;
            let rev: Vec<usize> = dims.iter().rev().copied().collect();
            let dec = MlpParams::init(&rev, Activation::Tanh, Activation::Identity, &mut rng)?;
            let x = random_matrix(&mut rng, n, input, 1.5);
            let means = random_matrix(&mut rng, n, latent, 1.5);
            let lambda = 1.0;
            let loss = abc_objective(&enc, &dec, &x, &means, lambda)?;
            let num_enc = finite_diff_grad(
                &enc,
                |p| {
                    abc_objective(p, &dec, &x, &means, lambda).map_or(f64::NAN, |l| l.total(lambda))
                },
                eps,
            )?;
            let num_dec = finite_diff_grad(
                &dec,
                |p| {
                    abc_objective(&enc, p, &x, &means, lambda).map_or(f64::NAN, |l| l.total(lambda))
                },
                eps,
            )?;
            Ok(assemble(
                "abc-reconstruction",
                vec![
                    Part {
                        network: "encoder",
                        analytic: loss.encoder_grads,
                        numeric: num_enc,
                    },
                    Part {
                        network: "decoder",
                        analytic: loss.decoder_grads,
                        numeric: num_dec,
                    },
                ],
                corrupted,
            ))
        }
        other => Err(Error::InvalidInput(format!(
            "unknown gradient check {other:?}"
        ))),
    }
}

/// Every gradient check at `trials` seeds; each entry is the worst trial.
pub fn gradcheck_all(seed: u64, trials: usize, corrupted: bool) -> Result<Vec<GradCheck>> {
    GRADCHECK_NAMES
        .iter()
        .map(|name| {
            let mut worst: Option<GradCheck> = None;
            for t in 0..trials.max(1) as u64 {
                let c = gradcheck(
                    name,
                    seed.wrapping_mul(1_000_003).wrapping_add(t),
                    corrupted,
                )?;
                if worst
                    .as_ref()
                    .is_none_or(|w| c.max_rel_error > w.max_rel_error)
                {
                    worst = Some(c);
                }
            }
            Ok(worst.expect("at least one trial"))
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct IdentityReport {
    pub pairs: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.max_abs_error <= self.tolerance
    }
}

/// Unit-variance KLD against the Euclidean loss over seeded pairs in
/// dimensions 1 to 16.
pub fn unit_variance_sweep(pairs: usize, seed: u64) -> Result<IdentityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let dim = rng.random_range(1..=16usize);
        let eta: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let kld = kld_diag_gaussians(
            &GaussianDiag::unit(eta.clone())?,
            &GaussianDiag::unit(mu.clone())?,
        )?;
        let abc = abc_loss(
            &Matrix::from_vec(1, dim, mu)?,
            &Matrix::from_vec(1, dim, eta)?,
        )?;
        worst = worst.max((kld - abc).abs());
    }
    Ok(IdentityReport {
        pairs,
        max_abs_error: worst,
        tolerance: IDENTITY_TOLERANCE,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimumPair {
    pub p_mean: f64,
    pub p_std: f64,
    pub q_mean: f64,
    pub q_std: f64,
    pub jsd: f64,
    /// `2·JSD − 2 ln 2`.
    pub expected: f64,
    /// Monte-Carlo objective at the optimal discriminator.
    pub measured: f64,
    pub abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimumReport {
    pub pairs: Vec<OptimumPair>,
    pub samples: usize,
    pub tolerance: f64,
}

impl OptimumReport {
    pub fn max_abs_error(&self) -> f64 {
        self.pairs.iter().map(|p| p.abs_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.pairs.iter().all(|p| p.abs_error <= self.tolerance)
    }
}

/// Objective at `D = p/(p+q)` by Monte Carlo against `2·JSD − 2 ln 2` by
/// quadrature, on seeded 1-D Gaussian pairs.
pub fn optimum_check(
    pairs: usize,
    samples: usize,
    seed: u64,
    tolerance: f64,
) -> Result<OptimumReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let (pm, ps) = (rng.random_range(-3.0..3.0), rng.random_range(0.5..2.0));
        let (qm, qs) = (rng.random_range(-3.0..3.0), rng.random_range(0.5..2.0));
        let p = GaussianDiag::scalar(pm, ps)?;
        let q = GaussianDiag::scalar(qm, qs)?;
        let jsd = jsd_quadrature(&p, &q)?;
        let expected = 2.0 * jsd - 2.0 * LN_2;
        let measured = optimal_objective_mc(&p, &q, samples, seed.wrapping_add(1 + i as u64))?;
        out.push(OptimumPair {
            p_mean: pm,
            p_std: ps,
            q_mean: qm,
            q_std: qs,
            jsd,
            expected,
            measured,
            abs_error: (measured - expected).abs(),
        });
    }
    Ok(OptimumReport {
        pairs: out,
        samples,
        tolerance,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AsymmetryReport {
    pub kld_pq: f64,
    pub kld_qp: f64,
    pub jsd_pq: f64,
    pub jsd_qp: f64,
}

impl AsymmetryReport {
    pub fn passed(&self) -> bool {
        (self.kld_pq - self.kld_qp).abs() > ASYMMETRY_MIN_GAP
            && (self.jsd_pq - self.jsd_qp).abs() <= SYMMETRY_TOLERANCE
    }
}

/// KLD and JSD in both directions between `N(0, 1)` and `N(0, 4)`
/// (variance 4).
pub fn asymmetry_check() -> Result<AsymmetryReport> {
    let p = GaussianDiag::scalar(0.0, 1.0)?;
    let q = GaussianDiag::scalar(0.0, 2.0)?;
    Ok(AsymmetryReport {
        kld_pq: kld_diag_gaussians(&p, &q)?,
        kld_qp: kld_diag_gaussians(&q, &p)?,
        jsd_pq: jsd_quadrature(&p, &q)?,
        jsd_qp: jsd_quadrature(&q, &p)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscriminatorFit {
    pub steps: usize,
    /// Mean `|D(z) − p/(p+q)|` over the evaluation grid.
    pub mean_abs_error: f64,
    pub max_abs_error: f64,
    pub grid: Vec<(f64, f64, f64)>,
}

/// Trains a 1-16-1 discriminator alone, with `p` as positives and `q` as
/// negatives, then compares it with the optimal discriminator on 41
/// points in `[-4, 4]`.
pub fn fit_discriminator(
    p: &GaussianDiag,
    q: &GaussianDiag,
    steps: usize,
    batch: usize,
    lr: f64,
    momentum: f64,
    seed: u64,
) -> Result<DiscriminatorFit> {
    if p.dim() != 1 || q.dim() != 1 {
        return Err(Error::InvalidInput(
            "discriminator fit is one-dimensional".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disc = MlpParams::init(&[1, 16, 1], Activation::Tanh, Activation::Sigmoid, &mut rng)?;
    let mut opt = OptState::new(&disc, lr, momentum)?;
    for _ in 0..steps {
        let pos = Matrix::from_vec(
            batch,
            1,
            (0..batch).flat_map(|_| p.sample(&mut rng)).collect(),
        )?;
        let neg = Matrix::from_vec(
            batch,
            1,
            (0..batch).flat_map(|_| q.sample(&mut rng)).collect(),
        )?;
        let (dp, tp) = mlp_forward(&disc, &pos)?;
        let (dn, tn) = mlp_forward(&disc, &neg)?;
        let (_, gp, gn) = dcan_discriminator_objective_grad(dp.data(), dn.data());
        let (mut g, _) = mlp_backward(&disc, &tp, &Matrix::from_vec(batch, 1, gp)?)?;
        let (g2, _) = mlp_backward(&disc, &tn, &Matrix::from_vec(batch, 1, gn)?)?;
        g.accumulate(&g2);
        opt.apply(&mut disc, &g, Direction::Ascend)?;
    }
    let zs: Vec<f64> = (0..41).map(|i| -4.0 + 0.2 * i as f64).collect();
    let d = mlp_predict(&disc, &Matrix::from_vec(41, 1, zs.clone())?)?;
    let mut grid = Vec::with_capacity(41);
    for (z, &dz) in zs.iter().zip(d.data()) {
        grid.push((*z, dz, optimal_discriminator(p, q, &[*z])?.value));
    }
    let errs: Vec<f64> = grid.iter().map(|(_, a, b)| (a - b).abs()).collect();
    Ok(DiscriminatorFit {
        steps,
        mean_abs_error: errs.iter().sum::<f64>() / errs.len() as f64,
        max_abs_error: errs.iter().copied().fold(0.0, f64::max),
        grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_gradchecks_pass() {
        for c in gradcheck_all(7, 3, false).unwrap() {
            assert!(c.passed(), "{} {}", c.name, c.max_rel_error);
            assert!(!c.layers.is_empty());
        }
    }

    #[test]
    fn corrupted_gradients_fail() {
        for c in gradcheck_all(7, 1, true).unwrap() {
            assert!(!c.passed(), "{} {}", c.name, c.max_rel_error);
        }
    }

    #[test]
    fn unknown_check_rejected() {
        assert!(gradcheck("nope", 0, false).is_err());
    }

    #[test]
    fn unit_variance_identity_holds() {
        let r = unit_variance_sweep(200, 3).unwrap();
        assert!(r.passed(), "{}", r.max_abs_error);
    }

    #[test]
    fn optimum_small_sample() {
        let r = optimum_check(3, 200_000, 5, 2e-2).unwrap();
        assert!(r.passed(), "{}", r.max_abs_error());
        let strict = optimum_check(3, 1000, 5, 1e-15).unwrap();
        assert!(!strict.passed());
    }

    #[test]
    fn asymmetry_values() {
        let r = asymmetry_check().unwrap();
        // KL(N(0,1)||N(0,4)) = ln 2 + 1/8 - 1/2, reverse = -ln 2 + 2 - 1/2.
        assert!((r.kld_pq - (LN_2 - 0.375)).abs() < 1e-12);
        assert!((r.kld_qp - (1.5 - LN_2)).abs() < 1e-12);
        assert!(r.passed());
    }
}
