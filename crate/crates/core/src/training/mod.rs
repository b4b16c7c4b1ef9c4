//! Optimizer, batch sampling, checkpoints and the training loop.

pub mod adam;
pub mod checkpoint;
pub mod sampler;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::{topk_indices, Graph};
use crate::model::{model_forward, ModelParams, DEFAULT_DROPOUT};
use crate::objective::{total_loss_nodes, Label, LossBreakdown, LossWeights};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState};
pub use sampler::{sample_batch, Batch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    /// Videos per class in each mini-batch.
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossWeights,
    pub dropout: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 32,
            epochs: 500,
            loss: LossWeights::default(),
            dropout: DEFAULT_DROPOUT,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if [a.learning_rate, a.weight_decay, a.epsilon].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("learning rate, weight decay and epsilon must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.loss.validate()
    }
}

/// Epoch means over every (abnormal, normal) pair seen in the epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossBreakdown,
}

pub const LOG_HEADER: &str = "epoch,l_magnitude,l_bce,l_smooth,l_sparse,total,delta_score";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, l.l_magnitude, l.l_bce, l.l_smooth, l.l_sparse, l.total, l.delta_score
        )
    }
}

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Mean top-k magnitude of abnormal videos minus that of normal videos,
/// in inference mode. Equals the mean separability over all pairs.
pub fn mean_delta_score(model: &ModelParams, dataset: &Dataset, k: usize) -> Result<f64> {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for v in &dataset.videos {
        let bag = model.score(&v.features, v.label)?;
        let (idx, _) = topk_indices(&bag.magnitudes, k)?;
        let top = idx.iter().map(|&i| bag.magnitudes[i]).sum::<f64>() / k as f64;
        let slot = usize::from(v.label == Label::Abnormal);
        sums[slot] += top;
        counts[slot] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Dataset("need at least one video of each class".into()));
    }
    Ok(sums[1] / counts[1] as f64 - sums[0] / counts[0] as f64)
}

/// Owns the model, optimizer state and random stream for one run.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    config: TrainConfig,
    model: ModelParams,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (dim, snippets) = dims_of(dataset)?;
        let mut model = ModelParams::init(dim, snippets, config.seed)?;
        model.classifier.dropout_rate = config.dropout;
        let adam = AdamState::new(model.parameters());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // Keep the sampling/dropout stream apart from parameter init.
        rng.set_stream(1);
        Ok(Self {
            dataset,
            config,
            model,
            adam,
            rng,
            epoch: 0,
        })
    }

    /// Continues from `ckpt`. The model must match the dataset's feature
    /// dimension.
    pub fn resume(dataset: &'a Dataset, ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (dim, _) = dims_of(dataset)?;
        let mut model = ckpt.model_with_dim(dim)?;
        model.classifier.dropout_rate = config.dropout;
        if ckpt.adam.first.len() != model.parameters().len() {
            return Err(Error::Config("checkpoint optimizer state does not match the model".into()));
        }
        Ok(Self {
            dataset,
            config,
            model,
            adam: ckpt.adam.clone(),
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n_a = self.dataset.indices_of(Label::Abnormal).len();
        let n_n = self.dataset.indices_of(Label::Normal).len();
        n_a.max(n_n).div_ceil(self.config.batch_size).max(1)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            feature_dim: self.model.feature_dim,
            snippet_count: self.model.snippet_count,
            epoch: self.epoch,
            params: self.model.named_tensors(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    fn step(&mut self, step: usize) -> Result<LossBreakdown> {
        let epoch = self.epoch + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { op } => Error::Diverged {
                epoch,
                step,
                detail: format!("non-finite value from {op}"),
            },
            other => other,
        };
        let batch = sample_batch(self.dataset, self.config.batch_size, &mut self.rng)?;
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true)?;
        let mut sum = LossBreakdown::default();
        let mut total = None;
        for (&ai, &ni) in batch.abnormal.iter().zip(&batch.normal) {
            let mut forward = |idx: usize, label| -> Result<_> {
                let f = g.constant(self.dataset.videos[idx].features.clone())?;
                model_forward(&mut g, &bound, f, label, true, &mut self.rng)
            };
            let a = forward(ai, Label::Abnormal).map_err(diverged)?;
            let n = forward(ni, Label::Normal).map_err(diverged)?;
            let nodes = total_loss_nodes(&mut g, &a, &n, &self.config.loss).map_err(diverged)?;
            let b = nodes.breakdown(&g);
            sum.l_magnitude += b.l_magnitude;
            sum.l_bce += b.l_bce;
            sum.l_smooth += b.l_smooth;
            sum.l_sparse += b.l_sparse;
            sum.total += b.total;
            sum.delta_score += b.delta_score;
            total = Some(match total {
                None => nodes.total,
                Some(acc) => g.add(acc, nodes.total).map_err(diverged)?,
            });
        }
        let pairs = batch.abnormal.len() as f64;
        let mean = g.scale(total.expect("batch is non-empty"), 1.0 / pairs).map_err(diverged)?;
        g.backward(mean)?;
        self.model.collect_grads(&g, &bound);
        adam_step(self.model.parameters_mut(), &mut self.adam, &self.config.adam)?;
        if !self.model.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                detail: "parameters became non-finite after the optimizer step".into(),
            });
        }
        Ok(sum)
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let steps = self.steps_per_epoch();
        let mut sum = LossBreakdown::default();
        for s in 0..steps {
            let b = self.step(s)?;
            sum.l_magnitude += b.l_magnitude;
            sum.l_bce += b.l_bce;
            sum.l_smooth += b.l_smooth;
            sum.l_sparse += b.l_sparse;
            sum.total += b.total;
            sum.delta_score += b.delta_score;
        }
        let pairs = (steps * self.config.batch_size) as f64;
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            losses: LossBreakdown {
                l_magnitude: sum.l_magnitude / pairs,
                l_bce: sum.l_bce / pairs,
                l_smooth: sum.l_smooth / pairs,
                l_sparse: sum.l_sparse / pairs,
                total: sum.total / pairs,
                delta_score: sum.delta_score / pairs,
            },
        })
    }
}

fn dims_of(dataset: &Dataset) -> Result<(usize, usize)> {
    match (dataset.feature_dim(), dataset.snippets()) {
        (Some(d), Some(t)) => Ok((d, t)),
        _ => Err(Error::Dataset("training split is empty".into())),
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    pub initial_delta: f64,
    pub final_delta: f64,
}

/// Runs `trainer` until `config.epochs` epochs are complete. `on_epoch` sees
/// every log row and the trainer state after that epoch, and may persist
/// checkpoints.
pub fn run(
    mut trainer: Trainer<'_>,
    mut on_epoch: impl FnMut(&EpochLog, &Trainer<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let k = trainer.config.loss.k;
    let initial_delta = mean_delta_score(&trainer.model, trainer.dataset, k)?;
    let mut log = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let row = trainer.run_epoch()?;
        on_epoch(&row, &trainer)?;
        log.push(row);
    }
    let final_delta = mean_delta_score(&trainer.model, trainer.dataset, k)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        model: trainer.model,
        log,
        initial_delta,
        final_delta,
    })
}

/// Trains from scratch on `dataset`.
pub fn train(dataset: &Dataset, config: TrainConfig) -> Result<TrainOutcome> {
    run(Trainer::new(dataset, config)?, |_, _| Ok(()))
}
