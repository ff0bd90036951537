//! Command-line driver.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration or input
//! error, 3 training divergence.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{assign_all, ClusterMode, ClusterModel};
use crate::data::{
    gen_blobs, load_dense_features, load_idx_images, write_dense_features, Dataset, Downsample,
};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, summarize_run, RunSummary};
use crate::losses::EncoderMode;
use crate::numerics::{mlp_predict, MlpParams};
use crate::training::{train_abc_observed, DcanTrainer, IterRecord, TrainConfig};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "dcan",
    version,
    about = "Deep clustering with an adversarial clustering loss"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train an encoder and write history, summary and parameters.
    Train(TrainArgs),
    /// Evaluate a trained encoder and cluster model on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients of every loss with finite differences.
    Gradcheck(CheckArgs),
    /// Run the KLD/Euclidean identity sweep and the optimal-discriminator check.
    LemmaCheck(CheckArgs),
    /// Write a Gaussian-blob dataset as delimited text.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, value_enum, default_value_t = Mode::Dcan)]
    pub mode: Mode,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the gradient tolerance, or the Monte-Carlo tolerance for
    /// `lemma-check`.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Perturbs every analytic gradient; the checks must then fail.
    #[arg(long)]
    pub corrupt_gradient: bool,
    /// Write the report as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub dim: usize,
    #[arg(long, default_value_t = 300)]
    pub per_cluster: usize,
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Dcan,
    Abc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    #[default]
    Dense,
    Idx,
}

/// Flat run configuration: every [`TrainConfig`] key plus dataset keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder_layers: Vec<usize>,
    pub discriminator_layers: Vec<usize>,
    pub k: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub clustering_mode: ClusterMode,
    pub encoder_mode: EncoderMode,
    pub buffer_min: usize,
    pub seed: u64,
    pub disc_steps_per_enc_step: usize,
    pub lambda: f64,
    pub allow_lr_outside_range: bool,

    /// `"blobs"` or a file path.
    pub dataset: String,
    pub format: DataFormat,
    /// IDX label file.
    pub labels: Option<String>,
    pub has_labels: bool,
    pub delimiter: char,
    pub downsample: Downsample,
    pub limit: Option<usize>,
    pub classes: Option<Vec<usize>>,
    pub blob_per_cluster: usize,
    pub blob_separation: f64,
    pub blob_sigma: f64,
    /// Defaults to `seed`.
    pub blob_seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            encoder_layers: t.encoder_layers,
            discriminator_layers: t.discriminator_layers,
            k: t.k,
            batch_size: t.batch_size,
            iterations: t.iterations,
            lr: t.lr,
            momentum: t.momentum,
            clustering_mode: t.clustering_mode,
            encoder_mode: t.encoder_mode,
            buffer_min: t.buffer_min,
            seed: t.seed,
            disc_steps_per_enc_step: t.disc_steps_per_enc_step,
            lambda: t.lambda,
            allow_lr_outside_range: t.allow_lr_outside_range,
            dataset: "blobs".into(),
            format: DataFormat::Dense,
            labels: None,
            has_labels: true,
            delimiter: ',',
            downsample: Downsample::None,
            limit: None,
            classes: None,
            blob_per_cluster: 300,
            blob_separation: 6.0,
            blob_sigma: 1.0,
            blob_seed: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Config file (or defaults) with CLI overrides applied.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>, dataset: Option<&str>) -> Result<Self> {
        let mut c = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            c.seed = s;
        }
        if let Some(d) = dataset {
            c.dataset = d.to_string();
        }
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            encoder_layers: self.encoder_layers.clone(),
            discriminator_layers: self.discriminator_layers.clone(),
            k: self.k,
            batch_size: self.batch_size,
            iterations: self.iterations,
            lr: self.lr,
            momentum: self.momentum,
            clustering_mode: self.clustering_mode,
            encoder_mode: self.encoder_mode,
            buffer_min: self.buffer_min,
            seed: self.seed,
            disc_steps_per_enc_step: self.disc_steps_per_enc_step,
            lambda: self.lambda,
            allow_lr_outside_range: self.allow_lr_outside_range,
        }
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        if self.dataset == "blobs" {
            return gen_blobs(
                self.k,
                self.encoder_layers.first().copied().unwrap_or(0),
                self.blob_per_cluster,
                self.blob_separation,
                self.blob_sigma,
                self.blob_seed.unwrap_or(self.seed),
            );
        }
        let read_limit = if self.classes.is_some() {
            None
        } else {
            self.limit
        };
        let data = match self.format {
            DataFormat::Dense => {
                let d = load_dense_features(&self.dataset, self.has_labels, self.delimiter)?;
                match read_limit {
                    Some(m) if m < d.len() => {
                        let keep: Vec<usize> = (0..m).collect();
                        Dataset::new(
                            d.features.select_rows(&keep),
                            d.labels.map(|l| l[..m].to_vec()),
                            d.class_count,
                            format!("{} limit={m}", d.provenance),
                        )?
                    }
                    _ => d,
                }
            }
            DataFormat::Idx => {
                let labels = self
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Config("format = \"idx\" needs a labels path".into()))?;
                load_idx_images(&self.dataset, labels, self.downsample, read_limit)?
            }
        };
        match &self.classes {
            Some(classes) => data.filter_classes(classes, self.limit),
            None => Ok(data),
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Config(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::InvalidInput(_)
        | Error::Shape { .. } => EXIT_CONFIG,
        Error::Oracle(_) | Error::EmptyCluster { .. } => EXIT_VERIFY,
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::LemmaCheck(a) => cmd_lemma_check(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Serialize)]
struct Header<'a> {
    config_hash: &'a str,
    seed: u64,
    mode: Mode,
    dataset: &'a str,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    diverged: bool,
    error: &'a str,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: &'a str,
    seed: u64,
    mode: Mode,
    /// Accuracy of the final model over the whole dataset.
    acc: Option<f64>,
    /// Per-iteration statistics; accuracies here are on the refresh buffer.
    history: RunSummary,
}

struct HistoryLog {
    out: BufWriter<fs::File>,
    path: PathBuf,
}

impl HistoryLog {
    fn create(path: PathBuf) -> Result<Self> {
        let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(HistoryLog {
            out: BufWriter::new(f),
            path,
        })
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let s = serde_json::to_string(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(self.out, "{s}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serialisable value") + "\n"
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let cfg = RunConfig::resolve(a.config.as_deref(), a.seed, a.dataset.as_deref())?;
    let train = cfg.train_config();
    train.validate()?;
    let data = cfg.load_dataset()?;
    train.validate_for(&data)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let hash = cfg.hash();
    let mut log = HistoryLog::create(a.out.join("history.jsonl"))?;
    log.line(&Header {
        config_hash: &hash,
        seed: cfg.seed,
        mode: a.mode,
        dataset: &data.provenance,
    })?;

    let outcome = match a.mode {
        Mode::Dcan => {
            let mut trainer = DcanTrainer::new(&data, train.clone())?;
            let mut failure = None;
            while trainer.history().records.len() < train.iterations {
                match trainer.step() {
                    Ok(r) => log.line(&r.record)?,
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            match failure {
                Some(e) => Err(e),
                None => trainer.finish().map(|o| {
                    (
                        o.encoder,
                        vec![("discriminator.txt", o.discriminator)],
                        o.model,
                        o.history,
                        o.final_acc,
                    )
                }),
            }
        }
        Mode::Abc => {
            train_abc_observed(&data, train.clone(), |r: &IterRecord| log.line(r)).map(|o| {
                (
                    o.encoder,
                    vec![("decoder.txt", o.decoder)],
                    o.model,
                    o.history,
                    o.final_acc,
                )
            })
        }
    };
    let (encoder, extra, model, history, final_acc) = match outcome {
        Ok(v) => v,
        Err(e) => {
            let msg = e.to_string();
            log.line(&Diagnostic {
                diverged: matches!(e, Error::Diverged { .. }),
                error: &msg,
            })?;
            log.flush()?;
            return Err(e);
        }
    };
    log.flush()?;

    write_file(&a.out.join("encoder.txt"), &encoder.to_text())?;
    for (name, params) in extra {
        write_file(&a.out.join(name), &params.to_text())?;
    }
    write_file(&a.out.join("clusters.json"), &to_json(&model))?;
    let summary = TrainSummary {
        config_hash: &hash,
        seed: cfg.seed,
        mode: a.mode,
        acc: final_acc,
        history: summarize_run(&history)?,
    };
    write_file(&a.out.join("summary.json"), &to_json(&summary))?;
    match final_acc {
        Some(acc) => println!("trained {} iterations, ACC {acc:.4}", history.records.len()),
        None => println!("trained {} iterations", history.records.len()),
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    acc: Option<f64>,
    cluster_sizes: Vec<usize>,
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let cfg = RunConfig::resolve(a.config.as_deref(), a.seed, a.dataset.as_deref())?;
    let data = cfg.load_dataset()?;
    let enc_path = a.out.join("encoder.txt");
    let encoder =
        MlpParams::from_text(&fs::read_to_string(&enc_path).map_err(|e| Error::io(&enc_path, e))?)?;
    let model_path = a.out.join("clusters.json");
    let model: ClusterModel = serde_json::from_str(
        &fs::read_to_string(&model_path).map_err(|e| Error::io(&model_path, e))?,
    )
    .map_err(|e| Error::Format {
        path: model_path.clone(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    if encoder.output_dim() != model.dim() {
        return Err(Error::shape(
            "eval latent dimension",
            model.dim(),
            encoder.output_dim(),
        ));
    }
    let z = mlp_predict(&encoder, &data.features)?;
    let assignments = assign_all(&z, &model);
    let mut sizes = vec![0; model.k()];
    for &k in &assignments {
        sizes[k] += 1;
    }
    let acc = match &data.labels {
        Some(l) => Some(accuracy(&assignments, l)?),
        None => None,
    };
    let report = EvalReport {
        samples: data.len(),
        acc,
        cluster_sizes: sizes,
    };
    print!("{}", to_json(&report));
    write_file(&a.out.join("eval.json"), &to_json(&report))?;
    Ok(EXIT_OK)
}

fn write_report<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    match path {
        Some(p) => write_file(p, &to_json(value)),
        None => Ok(()),
    }
}

pub fn cmd_gradcheck(a: &CheckArgs) -> Result<i32> {
    let mut checks = verify::gradcheck_all(a.seed, 3, a.corrupt_gradient)?;
    if let Some(t) = a.tolerance {
        checks.iter_mut().for_each(|c| c.tolerance = t);
    }
    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.passed() { "pass" } else { "FAIL" };
        println!(
            "{verdict} {:<28} max rel error {:.3e} (tol {:.1e})",
            c.name, c.max_rel_error, c.tolerance
        );
        for w in &c.layers {
            println!(
                "     {} layer {} worst {}: analytic {:.6e} numeric {:.6e} |diff| {:.3e}",
                w.network, w.layer, w.coordinate, w.analytic, w.numeric, w.abs_error
            );
        }
        if !c.passed() {
            failed.push(c.name);
        }
    }
    write_report(a.out.as_deref(), &checks)?;
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("gradient checks failed: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}

#[derive(Serialize)]
struct IdentityChecks {
    unit_variance: verify::IdentityReport,
    optimum: verify::OptimumReport,
    asymmetry: verify::AsymmetryReport,
}

pub fn cmd_lemma_check(a: &CheckArgs) -> Result<i32> {
    let unit_variance = verify::unit_variance_sweep(1000, a.seed)?;
    let tol = a.tolerance.unwrap_or(verify::OPTIMUM_TOLERANCE);
    let optimum = verify::optimum_check(20, 1_000_000, a.seed, tol)?;
    let asymmetry = verify::asymmetry_check()?;
    let mut failed = Vec::new();

    let v = |ok: bool| if ok { "pass" } else { "FAIL" };
    println!(
        "{} unit-variance KLD vs Euclidean loss: {} pairs, max |error| {:.3e} (tol {:.1e})",
        v(unit_variance.passed()),
        unit_variance.pairs,
        unit_variance.max_abs_error,
        unit_variance.tolerance
    );
    if !unit_variance.passed() {
        failed.push("kld-euclidean identity".to_string());
    }
    for (i, p) in optimum.pairs.iter().enumerate() {
        let ok = p.abs_error <= optimum.tolerance;
        println!(
            "{} pair {i:2}: p=N({:+.3},{:.3}^2) q=N({:+.3},{:.3}^2) 2JSD-2ln2 {:+.6} measured {:+.6} |error| {:.3e} (tol {:.1e})",
            v(ok),
            p.p_mean,
            p.p_std,
            p.q_mean,
            p.q_std,
            p.expected,
            p.measured,
            p.abs_error,
            optimum.tolerance
        );
        if !ok {
            failed.push(format!("optimal-discriminator pair {i}"));
        }
    }
    println!(
        "{} asymmetry: KLD(p||q) {:.6} KLD(q||p) {:.6} JSD(p||q) {:.12} JSD(q||p) {:.12}",
        v(asymmetry.passed()),
        asymmetry.kld_pq,
        asymmetry.kld_qp,
        asymmetry.jsd_pq,
        asymmetry.jsd_qp
    );
    if !asymmetry.passed() {
        failed.push("asymmetry".to_string());
    }
    write_report(
        a.out.as_deref(),
        &IdentityChecks {
            unit_variance,
            optimum,
            asymmetry,
        },
    )?;
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("failed checks: {}", failed.join(", "));
        Ok(EXIT_VERIFY)
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let d = gen_blobs(a.k, a.dim, a.per_cluster, a.separation, a.sigma, a.seed)?;
    write_dense_features(&d, &a.out, ',')?;
    println!(
        "wrote {} samples of dimension {} to {}",
        d.len(),
        d.input_dim(),
        a.out.display()
    );
    Ok(EXIT_OK)
}
