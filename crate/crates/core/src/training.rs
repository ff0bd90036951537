//! Adversarial clustering trainer and the Euclidean-loss autoencoder
//! baseline.
//!
//! Each iteration of [`DcanTrainer`] re-encodes a buffer of at least
//! `buffer_min` samples, refreshes the cluster parameters with a single
//! clustering iteration, and then:
//!
//! 1. encodes a minibatch (negatives, target 0) and draws one positive
//!    (target 1) from each input's maximum-likelihood cluster;
//! 2. ascends the discriminator objective with the encoder frozen;
//! 3. steps the encoder through the updated, frozen discriminator.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{
    assign_all, assign_max_likelihood, estimate_cluster_params, hard_em_step, init_centers,
    kmeans_step, sample_assigned, ClusterMode, ClusterModel,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation;
use crate::losses::{
    abc_loss_grad, dcan_discriminator_objective_grad, dcan_encoder_objective_grad, EncoderMode,
};
use crate::numerics::{
    mlp_backward, mlp_forward, mlp_predict, Activation, Direction, GradBundle, Matrix, MlpParams,
    OptState,
};

/// Learning rates outside this range need `allow_lr_outside_range`.
pub const LR_RANGE: (f64, f64) = (1e-5, 1e-3);

/// Objectives leaving `[-DIVERGENCE_BOUND, DIVERGENCE_BOUND]` abort a run.
pub const DIVERGENCE_BOUND: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub encoder_layers: Vec<usize>,
    pub discriminator_layers: Vec<usize>,
    /// Cluster count; equal to the number of classes.
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
    /// Weight of the clustering term in the autoencoder baseline.
    pub lambda: f64,
    pub allow_lr_outside_range: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder_layers: vec![10, 16, 2],
            discriminator_layers: vec![2, 16, 1],
            k: 3,
            batch_size: 16,
            iterations: 500,
            lr: 1e-4,
            momentum: 0.9,
            clustering_mode: ClusterMode::Kmeans,
            encoder_mode: EncoderMode::Minimax,
            buffer_min: 600,
            seed: 0,
            disc_steps_per_enc_step: 1,
            lambda: 1.0,
            allow_lr_outside_range: false,
        }
    }
}

impl TrainConfig {
    /// Checks the configuration on its own.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_layers.len() < 2 || self.encoder_layers.contains(&0) {
            return bad(format!(
                "encoder_layers {:?} needs at least two positive widths",
                self.encoder_layers
            ));
        }
        if self.discriminator_layers.len() < 2 || self.discriminator_layers.contains(&0) {
            return bad(format!(
                "discriminator_layers {:?} needs at least two positive widths",
                self.discriminator_layers
            ));
        }
        if self.encoder_layers.last() != self.discriminator_layers.first() {
            return bad(format!(
                "encoder output {} must equal discriminator input {}",
                self.encoder_layers.last().unwrap(),
                self.discriminator_layers[0]
            ));
        }
        if self.discriminator_layers.last() != Some(&1) {
            return bad("discriminator must end in a single output".into());
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !self.allow_lr_outside_range && !(LR_RANGE.0..=LR_RANGE.1).contains(&self.lr) {
            return bad(format!(
                "lr {} outside [{}, {}]; set allow_lr_outside_range to override",
                self.lr, LR_RANGE.0, LR_RANGE.1
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.disc_steps_per_enc_step == 0 {
            return bad("disc_steps_per_enc_step must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        Ok(())
    }

    /// Checks the configuration against a dataset.
    pub fn validate_for(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        if data.input_dim() != self.encoder_layers[0] {
            return Err(Error::Config(format!(
                "dataset has {} features but the encoder expects {}",
                data.input_dim(),
                self.encoder_layers[0]
            )));
        }
        if data.len() < self.buffer_min {
            return Err(Error::Config(format!(
                "dataset has {} samples, fewer than buffer_min {}",
                data.len(),
                self.buffer_min
            )));
        }
        if data.len() < self.k.max(self.batch_size) {
            return Err(Error::Config(format!(
                "dataset of {} samples is smaller than k or batch_size",
                data.len()
            )));
        }
        Ok(())
    }

    fn latent_dim(&self) -> usize {
        *self.encoder_layers.last().unwrap()
    }

    /// Buffer used for each clustering refresh: `min(N, max(buffer_min, 4·K·Z))`.
    pub fn buffer_size(&self, n: usize) -> usize {
        n.min(self.buffer_min.max(4 * self.k * self.latent_dim()))
    }
}

/// One iteration of a run. Fields that do not apply to a trainer are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub disc_objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub enc_objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_d_pos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_d_neg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recon_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cluster_loss: Option<f64>,
    /// Accuracy of the refreshed buffer assignments.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acc: Option<f64>,
    /// Seconds since the run started. Kept out of serialised logs so that
    /// logs are reproducible.
    #[serde(skip)]
    pub elapsed_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<IterRecord>,
}

impl RunHistory {
    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &RunHistory) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                let mut b = b.clone();
                b.elapsed_secs = a.elapsed_secs;
                *a == b
            })
    }
}

fn check_finite(iteration: usize, values: &[(&str, f64)]) -> Result<()> {
    for (name, v) in values {
        if !v.is_finite() || v.abs() > DIVERGENCE_BOUND {
            return Err(Error::Diverged {
                iteration,
                message: format!("{name} = {v}"),
            });
        }
    }
    Ok(())
}

/// Re-encodes `sample` and runs one clustering iteration, warm-started from
/// `prev` when given. Returns the model and the encoded sample.
pub fn refresh_clustering_with_latents(
    encoder: &MlpParams,
    sample: &Matrix,
    prev: Option<&ClusterModel>,
    k: usize,
    mode: ClusterMode,
    rng: &mut ChaCha8Rng,
) -> Result<(ClusterModel, Matrix)> {
    let latents = mlp_predict(encoder, sample)?;
    let model = match (prev, mode) {
        (Some(prev), ClusterMode::GmmHard) => hard_em_step(&latents, prev)?,
        (Some(prev), ClusterMode::Kmeans) => {
            let step = kmeans_step(&latents, &prev.means_matrix())?;
            estimate_cluster_params(&latents, &step.assignments, k, mode)?
        }
        (None, _) => {
            let centers = init_centers(&latents, k, rng)?;
            let step = kmeans_step(&latents, &centers)?;
            estimate_cluster_params(&latents, &step.assignments, k, mode)?
        }
    };
    Ok((model, latents))
}

pub fn refresh_clustering(
    encoder: &MlpParams,
    sample: &Matrix,
    prev: Option<&ClusterModel>,
    k: usize,
    mode: ClusterMode,
    rng: &mut ChaCha8Rng,
) -> Result<ClusterModel> {
    refresh_clustering_with_latents(encoder, sample, prev, k, mode, rng).map(|(m, _)| m)
}

/// Seeded epoch order over the dataset with a moving minibatch cursor.
#[derive(Clone, Debug)]
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
    buffer: usize,
}

impl Sampler {
    fn new(n: usize, buffer: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Sampler {
            order,
            cursor: 0,
            buffer,
        }
    }

    fn buffer(&self) -> &[usize] {
        &self.order[..self.buffer]
    }

    /// Next minibatch; a new epoch (and buffer) begins when the current
    /// order cannot supply a full batch.
    fn next_batch(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.cursor + size > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let b = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        b
    }
}

/// Details of one DCAN iteration, for auditing.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub record: IterRecord,
    /// Dataset indices of the minibatch used by the encoder step.
    pub batch: Vec<usize>,
    /// Encoder outputs for `batch` before the encoder step.
    pub latents: Matrix,
    /// Cluster each positive was drawn from, aligned with `batch`.
    pub positive_clusters: Vec<usize>,
    /// Cluster model the positives were drawn from.
    pub model: ClusterModel,
}

#[derive(Clone, Debug)]
pub struct DcanOutcome {
    pub encoder: MlpParams,
    pub discriminator: MlpParams,
    pub model: ClusterModel,
    pub history: RunHistory,
    /// Accuracy of the final model's assignments over the whole dataset.
    pub final_acc: Option<f64>,
}

/// Outcome of one discriminator update; statistics are taken before it.
struct DiscStep {
    batch: Vec<usize>,
    latents: Matrix,
    clusters: Vec<usize>,
    objective: f64,
    mean_d_pos: f64,
    mean_d_neg: f64,
}

/// Stepwise adversarial clustering trainer.
pub struct DcanTrainer<'a> {
    data: &'a Dataset,
    config: TrainConfig,
    encoder: MlpParams,
    discriminator: MlpParams,
    enc_opt: OptState,
    disc_opt: OptState,
    model: Option<ClusterModel>,
    sampler: Sampler,
    rng: ChaCha8Rng,
    history: RunHistory,
    started: Instant,
}

impl<'a> DcanTrainer<'a> {
    pub fn new(data: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate_for(data)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = MlpParams::init(
            &config.encoder_layers,
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )?;
        let discriminator = MlpParams::init(
            &config.discriminator_layers,
            Activation::Tanh,
            Activation::Sigmoid,
            &mut rng,
        )?;
        let enc_opt = OptState::new(&encoder, config.lr, config.momentum)?;
        let disc_opt = OptState::new(&discriminator, config.lr, config.momentum)?;
        let sampler = Sampler::new(data.len(), config.buffer_size(data.len()), &mut rng);
        Ok(DcanTrainer {
            data,
            config,
            encoder,
            discriminator,
            enc_opt,
            disc_opt,
            model: None,
            sampler,
            rng,
            history: RunHistory::default(),
            started: Instant::now(),
        })
    }

    pub fn encoder(&self) -> &MlpParams {
        &self.encoder
    }

    pub fn discriminator(&self) -> &MlpParams {
        &self.discriminator
    }

    pub fn model(&self) -> Option<&ClusterModel> {
        self.model.as_ref()
    }

    pub fn history(&self) -> &RunHistory {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    fn refresh(&mut self) -> Result<(ClusterModel, Matrix)> {
        let buffer = self.sampler.buffer().to_vec();
        let sample = self.data.features.select_rows(&buffer);
        let (model, latents) = refresh_clustering_with_latents(
            &self.encoder,
            &sample,
            self.model.as_ref(),
            self.config.k,
            self.config.clustering_mode,
            &mut self.rng,
        )?;
        self.model = Some(model.clone());
        Ok((model, latents))
    }

    fn buffer_acc(&self, model: &ClusterModel) -> Result<Option<f64>> {
        match &self.data.labels {
            Some(labels) => {
                let truth: Vec<usize> = self.sampler.buffer().iter().map(|&i| labels[i]).collect();
                Ok(Some(evaluation::accuracy(&model.assignments, &truth)?))
            }
            None => Ok(None),
        }
    }

    /// One discriminator update on a fresh minibatch.
    fn discriminator_step(&mut self, model: &ClusterModel) -> Result<DiscStep> {
        let batch = self
            .sampler
            .next_batch(self.config.batch_size, &mut self.rng);
        let x = self.data.features.select_rows(&batch);
        let z = mlp_predict(&self.encoder, &x)?;
        let clusters: Vec<usize> = z
            .iter_rows()
            .map(|row| assign_max_likelihood(row, model))
            .collect();
        let mut pos = Vec::with_capacity(z.rows() * z.cols());
        for &k in &clusters {
            pos.extend(sample_assigned(model, k, 1, &mut self.rng)?.into_vec());
        }
        let positives = Matrix::from_vec(z.rows(), z.cols(), pos)?;

        let (d_pos, tape_pos) = mlp_forward(&self.discriminator, &positives)?;
        let (d_neg, tape_neg) = mlp_forward(&self.discriminator, &z)?;
        let (obj, g_pos, g_neg) = dcan_discriminator_objective_grad(d_pos.data(), d_neg.data());
        let (grads_pos, _) = mlp_backward(
            &self.discriminator,
            &tape_pos,
            &Matrix::from_vec(g_pos.len(), 1, g_pos)?,
        )?;
        let (grads_neg, _) = mlp_backward(
            &self.discriminator,
            &tape_neg,
            &Matrix::from_vec(g_neg.len(), 1, g_neg)?,
        )?;
        let mut grads = grads_pos;
        grads.accumulate(&grads_neg);
        self.disc_opt
            .apply(&mut self.discriminator, &grads, Direction::Ascend)?;

        let mean = |m: &Matrix| m.data().iter().sum::<f64>() / m.rows() as f64;
        Ok(DiscStep {
            batch,
            latents: z,
            clusters,
            objective: obj,
            mean_d_pos: mean(&d_pos),
            mean_d_neg: mean(&d_neg),
        })
    }

    /// Encoder update through the frozen discriminator. Returns the
    /// pre-update encoder objective.
    fn encoder_step(&mut self, batch: &[usize]) -> Result<f64> {
        let x = self.data.features.select_rows(batch);
        let (z, enc_tape) = mlp_forward(&self.encoder, &x)?;
        let (d, disc_tape) = mlp_forward(&self.discriminator, &z)?;
        let (obj, g) = dcan_encoder_objective_grad(d.data(), self.config.encoder_mode);
        let (_, dz) = mlp_backward(
            &self.discriminator,
            &disc_tape,
            &Matrix::from_vec(g.len(), 1, g)?,
        )?;
        let (grads, _) = mlp_backward(&self.encoder, &enc_tape, &dz)?;
        self.enc_opt.apply(
            &mut self.encoder,
            &grads,
            self.config.encoder_mode.direction(),
        )?;
        Ok(obj)
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let iteration = self.history.records.len();
        let mut last = None;
        let mut acc = None;
        for _ in 0..self.config.disc_steps_per_enc_step {
            let (model, _) = self.refresh()?;
            acc = self.buffer_acc(&model)?;
            last = Some((self.discriminator_step(&model)?, model));
        }
        let (
            DiscStep {
                batch,
                latents,
                clusters: positive_clusters,
                objective: disc_obj,
                mean_d_pos: d_pos,
                mean_d_neg: d_neg,
            },
            model,
        ) = last.expect("at least one discriminator step");
        let enc_obj = self.encoder_step(&batch)?;
        check_finite(
            iteration,
            &[
                ("discriminator objective", disc_obj),
                ("encoder objective", enc_obj),
            ],
        )?;
        if !self.encoder.layers().iter().all(|l| l.weight.is_finite()) {
            return Err(Error::Diverged {
                iteration,
                message: "encoder weights became non-finite".into(),
            });
        }
        let record = IterRecord {
            iteration,
            disc_objective: Some(disc_obj),
            enc_objective: Some(enc_obj),
            mean_d_pos: Some(d_pos),
            mean_d_neg: Some(d_neg),
            acc,
            elapsed_secs: self.started.elapsed().as_secs_f64(),
            ..IterRecord::default()
        };
        self.history.records.push(record.clone());
        Ok(StepReport {
            record,
            batch,
            latents,
            positive_clusters,
            model,
        })
    }

    /// Runs the remaining iterations and evaluates the final encoder.
    pub fn run(mut self) -> Result<DcanOutcome> {
        while self.history.records.len() < self.config.iterations {
            self.step()?;
        }
        self.finish()
    }

    /// Final refresh with the trained encoder and whole-dataset accuracy.
    pub fn finish(mut self) -> Result<DcanOutcome> {
        let (model, _) = self.refresh()?;
        let final_acc = final_accuracy(self.data, &self.encoder, &model)?;
        Ok(DcanOutcome {
            encoder: self.encoder,
            discriminator: self.discriminator,
            model,
            history: self.history,
            final_acc,
        })
    }
}

fn final_accuracy(
    data: &Dataset,
    encoder: &MlpParams,
    model: &ClusterModel,
) -> Result<Option<f64>> {
    match &data.labels {
        Some(labels) => {
            let z = mlp_predict(encoder, &data.features)?;
            Ok(Some(evaluation::accuracy(&assign_all(&z, model), labels)?))
        }
        None => Ok(None),
    }
}

pub fn train_dcan(data: &Dataset, config: TrainConfig) -> Result<DcanOutcome> {
    DcanTrainer::new(data, config)?.run()
}

/// Decoder mirroring an encoder: reversed widths, tanh hidden layers,
/// identity output.
pub fn mirror_dims(encoder_layers: &[usize]) -> Vec<usize> {
    encoder_layers.iter().rev().copied().collect()
}

/// Gradients and value of the autoencoder baseline loss
/// `mean ½‖x − x̂‖² + λ · mean ½‖z − η*‖²` on one batch.
pub struct AbcLoss {
    pub recon: f64,
    pub cluster: f64,
    pub encoder_grads: GradBundle,
    pub decoder_grads: GradBundle,
}

impl AbcLoss {
    pub fn total(&self, lambda: f64) -> f64 {
        self.recon + lambda * self.cluster
    }
}

/// Evaluates the baseline loss and its gradients. `assigned_means` holds
/// `η*` for each row of `x`.
pub fn abc_objective(
    encoder: &MlpParams,
    decoder: &MlpParams,
    x: &Matrix,
    assigned_means: &Matrix,
    lambda: f64,
) -> Result<AbcLoss> {
    let (z, enc_tape) = mlp_forward(encoder, x)?;
    let (xr, dec_tape) = mlp_forward(decoder, &z)?;
    if xr.cols() != x.cols() {
        return Err(Error::shape(
            "abc_objective reconstruction",
            x.cols(),
            xr.cols(),
        ));
    }
    let n = x.rows() as f64;
    let mut recon = 0.0;
    let mut g_rec = Matrix::zeros(x.rows(), x.cols());
    for ((g, a), b) in g_rec.data_mut().iter_mut().zip(xr.data()).zip(x.data()) {
        let d = a - b;
        recon += 0.5 * d * d;
        *g = d / n;
    }
    recon /= n;
    let (decoder_grads, mut dz) = mlp_backward(decoder, &dec_tape, &g_rec)?;
    let (cluster, g_cluster) = abc_loss_grad(&z, assigned_means)?;
    for (a, b) in dz.data_mut().iter_mut().zip(g_cluster.data()) {
        *a += lambda * b;
    }
    let (encoder_grads, _) = mlp_backward(encoder, &enc_tape, &dz)?;
    Ok(AbcLoss {
        recon,
        cluster,
        encoder_grads,
        decoder_grads,
    })
}

#[derive(Clone, Debug)]
pub struct AbcOutcome {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub model: ClusterModel,
    pub history: RunHistory,
    pub final_acc: Option<f64>,
}

/// Autoencoder trained on reconstruction plus `λ` times the Euclidean
/// clustering loss, with the same clustering-refresh protocol as DCAN.
///
/// Each record's `recon_loss` and `cluster_loss` are measured on the
/// refresh buffer before that iteration's update.
pub fn train_abc(data: &Dataset, config: TrainConfig) -> Result<AbcOutcome> {
    train_abc_observed(data, config, |_| Ok(()))
}

/// [`train_abc`] calling `observe` with each record as it is produced.
pub fn train_abc_observed<F>(
    data: &Dataset,
    config: TrainConfig,
    mut observe: F,
) -> Result<AbcOutcome>
where
    F: FnMut(&IterRecord) -> Result<()>,
{
    config.validate_for(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = MlpParams::init(
        &config.encoder_layers,
        Activation::Tanh,
        Activation::Identity,
        &mut rng,
    )?;
    let mut decoder = MlpParams::init(
        &mirror_dims(&config.encoder_layers),
        Activation::Tanh,
        Activation::Identity,
        &mut rng,
    )?;
    let mut enc_opt = OptState::new(&encoder, config.lr, config.momentum)?;
    let mut dec_opt = OptState::new(&decoder, config.lr, config.momentum)?;
    let mut sampler = Sampler::new(data.len(), config.buffer_size(data.len()), &mut rng);
    let mut model: Option<ClusterModel> = None;
    let mut history = RunHistory::default();
    let started = Instant::now();

    for iteration in 0..config.iterations {
        let buffer = sampler.buffer().to_vec();
        let sample = data.features.select_rows(&buffer);
        let (m, latents) = refresh_clustering_with_latents(
            &encoder,
            &sample,
            model.as_ref(),
            config.k,
            config.clustering_mode,
            &mut rng,
        )?;

        let recon_buf = mlp_predict(&decoder, &latents)?;
        let recon_loss = recon_buf
            .data()
            .iter()
            .zip(sample.data())
            .map(|(a, b)| 0.5 * (a - b) * (a - b))
            .sum::<f64>()
            / sample.rows() as f64;
        let buf_means = m.means_matrix().select_rows(&m.assignments);
        let (cluster_loss, _) = abc_loss_grad(&latents, &buf_means)?;
        let acc = match &data.labels {
            Some(labels) => {
                let truth: Vec<usize> = buffer.iter().map(|&i| labels[i]).collect();
                Some(evaluation::accuracy(&m.assignments, &truth)?)
            }
            None => None,
        };

        let batch = sampler.next_batch(config.batch_size, &mut rng);
        let x = data.features.select_rows(&batch);
        let z = mlp_predict(&encoder, &x)?;
        let assigned: Vec<usize> = z
            .iter_rows()
            .map(|r| assign_max_likelihood(r, &m))
            .collect();
        let eta = m.means_matrix().select_rows(&assigned);
        let loss = abc_objective(&encoder, &decoder, &x, &eta, config.lambda)?;
        check_finite(
            iteration,
            &[
                ("reconstruction loss", loss.recon),
                ("cluster loss", loss.cluster),
            ],
        )?;
        enc_opt.apply(&mut encoder, &loss.encoder_grads, Direction::Descend)?;
        dec_opt.apply(&mut decoder, &loss.decoder_grads, Direction::Descend)?;

        let record = IterRecord {
            iteration,
            recon_loss: Some(recon_loss),
            cluster_loss: Some(cluster_loss),
            acc,
            elapsed_secs: started.elapsed().as_secs_f64(),
            ..IterRecord::default()
        };
        observe(&record)?;
        history.records.push(record);
        model = Some(m);
    }

    let sample = data.features.select_rows(sampler.buffer());
    let final_model = refresh_clustering(
        &encoder,
        &sample,
        model.as_ref(),
        config.k,
        config.clustering_mode,
        &mut rng,
    )?;
    let final_acc = final_accuracy(data, &encoder, &final_model)?;
    Ok(AbcOutcome {
        encoder,
        decoder,
        model: final_model,
        history,
        final_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn blobs() -> Dataset {
        gen_blobs(3, 10, 300, 6.0, 1.0, 17).unwrap()
    }

    #[test]
    fn config_rejects_bad_values() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        let cases = [
            TrainConfig {
                lr: 1e-2,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 1,
                ..ok.clone()
            },
            TrainConfig {
                discriminator_layers: vec![3, 16, 1],
                ..ok.clone()
            },
            TrainConfig {
                discriminator_layers: vec![2, 16, 2],
                ..ok.clone()
            },
            TrainConfig {
                momentum: 1.0,
                ..ok.clone()
            },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let lr = TrainConfig {
            lr: 1e-2,
            allow_lr_outside_range: true,
            ..ok
        };
        assert!(lr.validate().is_ok());
    }

    #[test]
    fn config_rejects_small_dataset() {
        let d = gen_blobs(3, 10, 100, 6.0, 1.0, 1).unwrap();
        assert!(matches!(
            DcanTrainer::new(&d, TrainConfig::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_config_keys_rejected() {
        let e = toml::from_str::<TrainConfig>("learning_rt = 0.001\n").unwrap_err();
        assert!(e.to_string().contains("learning_rt"));
    }

    #[test]
    fn buffer_size_rule() {
        let c = TrainConfig::default();
        assert_eq!(c.buffer_size(900), 600);
        assert_eq!(c.buffer_size(500), 500);
        let wide = TrainConfig {
            k: 10,
            encoder_layers: vec![196, 384, 16],
            ..c
        };
        assert_eq!(wide.buffer_size(5000), 640);
    }

    #[test]
    fn frozen_networks_stay_frozen() {
        let d = blobs();
        let mut t = DcanTrainer::new(&d, TrainConfig::default()).unwrap();
        for _ in 0..5 {
            let (model, _) = t.refresh().unwrap();
            let enc_before = t.encoder.clone();
            t.discriminator_step(&model).unwrap();
            assert_eq!(t.encoder, enc_before);
            let disc_before = t.discriminator.clone();
            let batch = t.sampler.next_batch(16, &mut t.rng);
            t.encoder_step(&batch).unwrap();
            assert_eq!(t.discriminator, disc_before);
            assert_ne!(t.encoder, enc_before);
        }
    }

    #[test]
    fn positives_come_from_own_cluster() {
        let d = blobs();
        let mut t = DcanTrainer::new(&d, TrainConfig::default()).unwrap();
        for _ in 0..10 {
            let r = t.step().unwrap();
            for (row, &k) in r.latents.iter_rows().zip(&r.positive_clusters) {
                assert_eq!(assign_max_likelihood(row, &r.model), k);
            }
            assert_eq!(r.batch.len(), 16);
        }
    }

    #[test]
    fn same_seed_same_history() {
        let d = blobs();
        let c = TrainConfig {
            iterations: 40,
            ..TrainConfig::default()
        };
        let a = train_dcan(&d, c.clone()).unwrap();
        let b = train_dcan(&d, c).unwrap();
        assert!(a.history.same_trajectory(&b.history));
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.history.records.len(), 40);
    }

    #[test]
    fn refresh_cold_start_and_fixed_point() {
        let d = blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = MlpParams::init(
            &[10, 16, 2],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )
        .unwrap();
        let sample = d
            .features
            .select_rows(&(0..900).step_by(1).collect::<Vec<_>>());
        let mut m =
            refresh_clustering(&enc, &sample, None, 3, ClusterMode::Kmeans, &mut rng).unwrap();
        let mut prev_means = Vec::new();
        for _ in 0..100 {
            m = refresh_clustering(&enc, &sample, Some(&m), 3, ClusterMode::Kmeans, &mut rng)
                .unwrap();
            if m.means == prev_means {
                break;
            }
            prev_means = m.means.clone();
        }
        let again =
            refresh_clustering(&enc, &sample, Some(&m), 3, ClusterMode::Kmeans, &mut rng).unwrap();
        assert_eq!(again.means, m.means);
        assert_eq!(again.assignments, m.assignments);
    }

    #[test]
    fn one_refresh_on_separated_blobs() {
        let d = gen_blobs(3, 10, 300, 10.0, 0.5, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let identity = MlpParams::new(vec![crate::numerics::Layer {
            weight: {
                let mut w = Matrix::zeros(10, 10);
                (0..10).for_each(|i| w.set(i, i, 1.0));
                w
            },
            bias: vec![0.0; 10],
            activation: Activation::Identity,
        }])
        .unwrap();
        let m = refresh_clustering(
            &identity,
            &d.features,
            None,
            3,
            ClusterMode::GmmHard,
            &mut rng,
        )
        .unwrap();
        let acc = evaluation::accuracy(&m.assignments, d.labels.as_ref().unwrap()).unwrap();
        assert!(acc >= 0.9, "{acc}");
    }

    #[test]
    fn gmm_mode_runs() {
        let d = blobs();
        let c = TrainConfig {
            iterations: 20,
            clustering_mode: ClusterMode::GmmHard,
            encoder_mode: EncoderMode::NonSaturating,
            disc_steps_per_enc_step: 2,
            ..TrainConfig::default()
        };
        let out = train_dcan(&d, c).unwrap();
        assert_eq!(out.history.records.len(), 20);
        assert_eq!(out.model.mode, ClusterMode::GmmHard);
    }

    #[test]
    fn divergence_guard_trips() {
        assert!(matches!(
            check_finite(4, &[("x", f64::NAN)]),
            Err(Error::Diverged { iteration: 4, .. })
        ));
        assert!(check_finite(0, &[("x", -51.0)]).is_err());
        assert!(check_finite(0, &[("x", -49.0)]).is_ok());
    }

    #[test]
    fn abc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc =
            MlpParams::init(&[4, 6, 2], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let dec =
            MlpParams::init(&[2, 6, 4], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let x = Matrix::from_rows(&[
            [0.1, -0.4, 0.9, 0.3],
            [1.2, 0.0, -0.7, 0.5],
            [-0.3, 0.8, 0.2, -1.0],
        ])
        .unwrap();
        let eta = Matrix::from_rows(&[[0.5, -0.5], [0.2, 0.1], [-0.4, 0.3]]).unwrap();
        let loss = abc_objective(&enc, &dec, &x, &eta, 1.0).unwrap();
        let fd_enc = crate::numerics::finite_diff_grad(
            &enc,
            |e| abc_objective(e, &dec, &x, &eta, 1.0).unwrap().total(1.0),
            1e-5,
        )
        .unwrap();
        let fd_dec = crate::numerics::finite_diff_grad(
            &dec,
            |d| abc_objective(&enc, d, &x, &eta, 1.0).unwrap().total(1.0),
            1e-5,
        )
        .unwrap();
        assert!(crate::numerics::relative_error(&loss.encoder_grads.flat(), &fd_enc.flat()) < 1e-4);
        assert!(crate::numerics::relative_error(&loss.decoder_grads.flat(), &fd_dec.flat()) < 1e-4);
    }
}
