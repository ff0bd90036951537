//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criterion 6 needs MNIST IDX files; set `DCAN_MNIST_DIR` to a directory
//! holding `train-images-idx3-ubyte` and `train-labels-idx1-ubyte`.

use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcan::clustering::ClusterMode;
use dcan::data::{gen_blobs, load_idx_images, Downsample};
use dcan::evaluation::{
    accuracy_hungarian, clustering_accuracy, kmeans_accuracy, max_matching_exhaustive,
    max_matching_hungarian, LabeledPrediction,
};
use dcan::losses::GaussianDiag;
use dcan::numerics::mlp_predict;
use dcan::training::{DcanTrainer, TrainConfig};
use dcan::verify;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn() -> Verdict,
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn unit_variance() -> Verdict {
    let r = verify::unit_variance_sweep(1000, 1).expect("sweep");
    verdict(
        r.passed(),
        format!(
            "{} pairs, max |KLD - Euclidean| {:.3e} (tol {:.0e})",
            r.pairs, r.max_abs_error, r.tolerance
        ),
    )
}

fn optimum() -> Verdict {
    let r = verify::optimum_check(20, 1_000_000, 2, 5e-3).expect("check");
    verdict(
        r.passed(),
        format!(
            "20 pairs, max |objective - (2 JSD - 2 ln 2)| {:.3e} (tol 5e-3)",
            r.max_abs_error()
        ),
    )
}

fn discriminator_optimality() -> Verdict {
    let p = GaussianDiag::scalar(-1.0, 1.0).unwrap();
    let q = GaussianDiag::scalar(1.0, 1.0).unwrap();
    let d = TrainConfig::default();
    let fit =
        verify::fit_discriminator(&p, &q, 20_000, d.batch_size, d.lr, d.momentum, 3).expect("fit");
    verdict(
        fit.mean_abs_error <= 0.05,
        format!(
            "{} steps, mean |D - p/(p+q)| {:.4} over 41 points (tol 0.05)",
            fit.steps, fit.mean_abs_error
        ),
    )
}

fn gradients() -> Verdict {
    let checks = verify::gradcheck_all(4, 5, false).expect("gradcheck");
    let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| c.name)
        .collect();
    verdict(
        failed.is_empty() && worst < 1e-4,
        format!(
            "{} losses, worst relative error {worst:.3e} (tol 1e-4) failed {failed:?}",
            checks.len()
        ),
    )
}

fn end_to_end_blobs() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let data = gen_blobs(3, 10, 300, 6.0, 1.0, seed).unwrap();
        let labels = data.labels.clone().unwrap();
        let config = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let trainer = DcanTrainer::new(&data, config).unwrap();
        let untrained = mlp_predict(trainer.encoder(), &data.features).unwrap();
        let baseline = kmeans_accuracy(&untrained, &labels, 3, seed).unwrap();
        let acc = trainer.run().unwrap().final_acc.unwrap();
        ok &= acc >= 0.95 && acc > baseline;
        parts.push(format!(
            "seed {seed}: ACC {acc:.4} vs untrained {baseline:.4}"
        ));
    }
    verdict(
        ok,
        format!("{} (need >= 0.95 and > untrained)", parts.join("; ")),
    )
}

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("DCAN_MNIST_DIR").map(PathBuf::from)?;
    let ok = dir.join("train-images-idx3-ubyte").is_file()
        && dir.join("train-labels-idx1-ubyte").is_file();
    ok.then_some(dir)
}

fn mnist_smoke() -> Verdict {
    let Some(dir) = mnist_dir() else {
        return Verdict::Skip("DCAN_MNIST_DIR with IDX files not set".into());
    };
    let full = load_idx_images(
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        Downsample::X2,
        None,
    )
    .expect("load MNIST");
    let data = full.filter_classes(&[0, 1, 2], Some(1000)).unwrap();
    let labels = data.labels.clone().unwrap();
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let raw = kmeans_accuracy(&data.features, &labels, 3, seed).unwrap();
        let config = TrainConfig {
            encoder_layers: vec![196, 384, 16],
            discriminator_layers: vec![16, 16, 1],
            k: 3,
            seed,
            clustering_mode: ClusterMode::Kmeans,
            ..TrainConfig::default()
        };
        let acc = DcanTrainer::new(&data, config)
            .unwrap()
            .run()
            .unwrap()
            .final_acc
            .unwrap();
        if acc - raw >= 0.05 {
            wins += 1;
        }
        parts.push(format!("seed {seed}: ACC {acc:.4} vs raw {raw:.4}"));
    }
    verdict(
        wins >= 2,
        format!("{} ({wins}/3 seeds gain >= 0.05, need 2)", parts.join("; ")),
    )
}

fn acc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=8usize);
        let c = rng.random_range(1..=8usize);
        let n = rng.random_range(1..=200usize);
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let lp = LabeledPrediction::new(&pred, &truth).unwrap();
        let table = lp.contingency();
        if max_matching_hungarian(&table) != max_matching_exhaustive(&table)
            || accuracy_hungarian(&lp) != clustering_accuracy(&lp)
        {
            mismatches += 1;
        }
    }
    verdict(
        mismatches == 0,
        format!("1000 tables, {mismatches} mismatches between Hungarian and exhaustive"),
    )
}

fn asymmetry() -> Verdict {
    let r = verify::asymmetry_check().unwrap();
    verdict(
        r.passed(),
        format!(
            "KLD gap {:.4} (need > 0.01), |JSD(p,q) - JSD(q,p)| {:.1e} (tol 1e-10)",
            (r.kld_pq - r.kld_qp).abs(),
            (r.jsd_pq - r.jsd_qp).abs()
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_dcan"))
            .args(["train", "--seed", "11", "--out"])
            .arg(&out)
            .output()
            .expect("spawn dcan");
        assert!(
            status.status.success(),
            "{}",
            String::from_utf8_lossy(&status.stderr)
        );
        std::fs::read(out.join("history.jsonl")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    let lines = a.iter().filter(|&&c| c == b'\n').count();
    verdict(
        a == b && lines == 501,
        format!("two runs, {lines} log lines, identical: {}", a == b),
    )
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "unit-variance KLD equals Euclidean loss",
            limit: Duration::from_secs(1),
            run: unit_variance,
        },
        Criterion {
            id: 2,
            name: "objective at optimal discriminator",
            limit: Duration::from_secs(30),
            run: optimum,
        },
        Criterion {
            id: 3,
            name: "trained discriminator optimality",
            limit: Duration::from_secs(60),
            run: discriminator_optimality,
        },
        Criterion {
            id: 4,
            name: "gradient checks",
            limit: Duration::from_secs(30),
            run: gradients,
        },
        Criterion {
            id: 5,
            name: "end-to-end DCAN on blobs",
            limit: Duration::from_secs(300),
            run: end_to_end_blobs,
        },
        Criterion {
            id: 6,
            name: "MNIST smoke",
            limit: Duration::from_secs(900),
            run: mnist_smoke,
        },
        Criterion {
            id: 7,
            name: "ACC Hungarian vs exhaustive",
            limit: Duration::from_secs(10),
            run: acc_oracle,
        },
        Criterion {
            id: 8,
            name: "KLD asymmetry and JSD symmetry",
            limit: Duration::MAX,
            run: asymmetry,
        },
        Criterion {
            id: 9,
            name: "deterministic training log",
            limit: Duration::MAX,
            run: determinism,
        },
    ];
    let mut failures = 0;
    for c in &criteria {
        let start = Instant::now();
        let v = (c.run)();
        let took = start.elapsed();
        let in_time = took <= c.limit;
        let limit = if c.limit == Duration::MAX {
            String::new()
        } else {
            format!(" (limit {:.0} s)", c.limit.as_secs_f64())
        };
        let (tag, detail) = match v {
            Verdict::Pass(d) if in_time => ("PASS", d),
            Verdict::Pass(d) => ("FAIL", format!("{d}; over time limit")),
            Verdict::Fail(d) => ("FAIL", d),
            Verdict::Skip(d) => ("SKIP", d),
        };
        if tag == "FAIL" {
            failures += 1;
        }
        println!(
            "[{tag}] {} {}: {detail} [{:.2} s{limit}]",
            c.id,
            c.name,
            took.as_secs_f64()
        );
    }
    println!("acceptance: {failures} failed");
    if failures > 0 {
        std::process::exit(1);
    }
}
