//! Minibatch training with validated-ATTC feedback into the AdaLEA schedule.
//!
//! Each epoch `e` shuffles the training clips with a seed derived from
//! `(seed, e)`, takes an optimizer step per minibatch using
//! `EpochContext { e, Φ(e−1) }`, then evaluates the validation split. The
//! validation macro ATTC becomes `Φ(e)`; it is held at `Φ(e−1)` when
//! undefined or when the validation AP is below `phi_gate`. `Φ(0) = 0`.

mod checkpoint;
mod optim;
mod run;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::diff::{DiffError, Tape};
use crate::eval::{per_class_report, EvalConfig, EvalError, EvalReport};
use crate::loss::{clip_loss_on_tape, EpochContext, LossConfig, LossError, LossVariant};
use crate::model::{
    forward_on_tape, model_forward_with, Model, ModelConfig, ModelError, RiskTrajectory,
};
use crate::tensor::Tensor;

pub use checkpoint::{
    dataset_fingerprint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    Checkpoint, EpochMetrics, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerState};
pub use run::{
    compare, evaluate_checkpoint, generate_dataset, read_history_csv, run_training,
    write_history_csv, write_report, write_run_dir, CompareRow, Comparison, GenDataConfig,
    HistoryRow, RunSummary, CHECKPOINT_FILE, CONFIG_FILE, HISTORY_FILE, REPORT_FILE,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: u32,
        batch: usize,
        detail: String,
    },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
    Other,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Divergence => 4,
            ErrorKind::Other => 1,
        }
    }
}

impl TrainError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            TrainError::Config(_) => ErrorKind::Config,
            TrainError::Data(DataError::Config { .. } | DataError::Fractions { .. }) => {
                ErrorKind::Config
            }
            TrainError::Data(_) => ErrorKind::Data,
            TrainError::Model(ModelError::Dims { .. }) => ErrorKind::Data,
            TrainError::Model(ModelError::Diff(DiffError::NonFinite { .. })) => {
                ErrorKind::Divergence
            }
            TrainError::Model(_) => ErrorKind::Config,
            TrainError::Loss(LossError::Precondition { .. }) => ErrorKind::Config,
            TrainError::Loss(LossError::Diff(DiffError::NonFinite { .. })) => ErrorKind::Divergence,
            TrainError::Loss(_) => ErrorKind::Data,
            TrainError::Eval(EvalError::Config(_)) => ErrorKind::Config,
            TrainError::Eval(_) => ErrorKind::Data,
            TrainError::Divergence { .. } => ErrorKind::Divergence,
            TrainError::Checkpoint { .. } => ErrorKind::Data,
            TrainError::Io { .. } => ErrorKind::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub epochs: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Seeds the per-epoch shuffles.
    #[serde(default)]
    pub seed: u64,
    /// Minimum validation AP for a new Φ to be accepted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_gate: Option<f64>,
    /// Defaults to per-class evaluation when the model has several classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalConfig>,
    /// Check every recorded tape value for NaN/Inf.
    #[serde(default)]
    pub checked: bool,
}

fn default_batch_size() -> usize {
    16
}

fn default_learning_rate() -> f64 {
    1e-3
}

impl TrainConfig {
    pub fn new(loss: LossConfig, model: ModelConfig, epochs: u32) -> Self {
        Self {
            loss,
            model,
            epochs,
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            phi_gate: None,
            eval: None,
            checked: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if let Some(g) = self.phi_gate {
            if !(0.0..=1.0).contains(&g) {
                return bad(format!("phi_gate must be in [0, 1], got {g}"));
            }
        }
        self.optimizer.validate().map_err(TrainError::Config)?;
        self.loss.validate()?;
        if let Some(e) = &self.eval {
            e.validate()?;
        }
        Ok(())
    }

    /// The evaluation settings actually used for validation and test.
    pub fn eval_config(&self) -> EvalConfig {
        self.eval.clone().unwrap_or(EvalConfig {
            per_class: self.model.num_classes > 1,
            ..EvalConfig::default()
        })
    }
}

/// Metrics of one completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    /// Mean of the minibatch losses.
    pub train_loss: f64,
    pub val_ap: f64,
    pub val_attc: Option<f64>,
    /// Φ(e−1) as used by the loss this epoch (0 for EL and LEA).
    pub phi_used: f64,
    pub batch_losses: Vec<f64>,
}

/// Φ history with a counter of how often the loss schedule consumed it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PhiTracker {
    history: Vec<f64>,
    reads: u64,
}

impl PhiTracker {
    pub fn from_history(history: Vec<f64>) -> Self {
        Self { history, reads: 0 }
    }

    /// Φ of the last completed epoch (`Φ(0) = 0`), counted as a read.
    pub fn read(&mut self) -> f64 {
        self.reads += 1;
        self.last()
    }

    fn last(&self) -> f64 {
        self.history.last().copied().unwrap_or(0.0)
    }

    pub fn push(&mut self, phi: f64) {
        self.history.push(phi);
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }
}

/// Risk trajectories for every clip, in dataset order.
pub fn predict(model: &Model, dataset: &Dataset, checked: bool) -> Result<Vec<RiskTrajectory>> {
    dataset
        .clips
        .par_iter()
        .map(|c| model_forward_with(&c.features, model, checked).map_err(TrainError::from))
        .collect()
}

/// Report for `model` on `dataset`.
pub fn evaluate_model(
    model: &Model,
    dataset: &Dataset,
    config: &EvalConfig,
    checked: bool,
) -> Result<EvalReport> {
    let risks = predict(model, dataset, checked)?;
    Ok(per_class_report(&risks, &dataset.annotations(), config)?)
}

/// Validation macro AP and macro ATTC (`None` when undefined).
pub fn validate_epoch(
    model: &Model,
    val: &Dataset,
    config: &EvalConfig,
    checked: bool,
) -> Result<(f64, Option<f64>)> {
    let report = evaluate_model(model, val, config, checked)?;
    Ok((report.macro_ap, report.macro_attc))
}

/// Stateful trainer over fixed train and validation splits.
pub struct Trainer<'a> {
    config: TrainConfig,
    model: Model,
    optimizer: OptimizerState,
    phi: PhiTracker,
    history: Vec<EpochRecord>,
    train: &'a Dataset,
    val: &'a Dataset,
    fingerprint: [u8; 32],
    events: Vec<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, train: &'a Dataset, val: &'a Dataset) -> Result<Self> {
        let config = prepare(config, train, val)?;
        let model = Model::init(&config.model)?;
        let optimizer = OptimizerState::new(&config.optimizer, &tensors(&model));
        Ok(Self {
            fingerprint: dataset_fingerprint(train, val),
            config,
            model,
            optimizer,
            phi: PhiTracker::default(),
            history: Vec::new(),
            train,
            val,
            events: Vec::new(),
        })
    }

    /// Resumes from a checkpoint taken on the same splits.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        train: &'a Dataset,
        val: &'a Dataset,
    ) -> Result<Self> {
        let fingerprint = dataset_fingerprint(train, val);
        if fingerprint != ckpt.dataset_fingerprint {
            return Err(TrainError::Config(
                "checkpoint was trained on different data".into(),
            ));
        }
        let config = prepare(&ckpt.config, train, val)?;
        let model = ckpt.model()?;
        let history = ckpt
            .history
            .iter()
            .enumerate()
            .map(|(i, h)| EpochRecord {
                epoch: i as u32 + 1,
                train_loss: h.train_loss,
                val_ap: h.val_ap,
                val_attc: h.val_attc,
                phi_used: h.phi_used,
                batch_losses: Vec::new(),
            })
            .collect();
        Ok(Self {
            config,
            model,
            optimizer: ckpt.optimizer.clone(),
            phi: PhiTracker::from_history(ckpt.phi_history.clone()),
            history,
            train,
            val,
            fingerprint,
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn phi(&self) -> &PhiTracker {
        &self.phi
    }

    /// Notable events such as held or decreasing Φ.
    pub fn events(&self) -> &[String] {
        &self.events
    }

    pub fn completed_epochs(&self) -> u32 {
        self.history.len() as u32
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            &self.model,
            &self.optimizer,
            self.phi.history(),
            &self.history,
            self.fingerprint,
        )
    }

    /// Trains one epoch and validates.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let epoch = self.completed_epochs() + 1;
        let phi_used = if self.config.loss.variant == LossVariant::AdaLea {
            self.phi.read()
        } else {
            0.0
        };
        let ctx = EpochContext::new(epoch, phi_used);

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(u64::from(epoch));
        order.shuffle(&mut rng);

        let mut batch_losses = Vec::new();
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let (loss, grads) = self.batch_gradients(batch, &ctx, epoch, b + 1)?;
            let grads_ok = grads.iter().all(Tensor::is_finite);
            if !loss.is_finite() || !grads_ok {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: b + 1,
                    detail: format!("loss {loss}, finite gradients {grads_ok}"),
                });
            }
            let mut params = self.model.params_mut();
            optimizer_step(
                &mut params,
                &grads,
                &mut self.optimizer,
                &self.config.optimizer,
                self.config.learning_rate,
            );
            batch_losses.push(loss);
        }
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;

        let eval = self.config.eval_config();
        let (val_ap, val_attc) = validate_epoch(&self.model, self.val, &eval, self.config.checked)?;
        let prev = self.phi.last();
        let gate_ok = self.config.phi_gate.map_or(true, |g| val_ap >= g);
        match val_attc {
            Some(a) if gate_ok => {
                if a < prev {
                    self.events
                        .push(format!("epoch {epoch}: Φ decreased from {prev} to {a}"));
                }
                self.phi.push(a);
            }
            Some(_) => {
                self.events.push(format!(
                    "epoch {epoch}: validation AP {val_ap} below phi_gate; Φ held at {prev}"
                ));
                self.phi.push(prev);
            }
            None => {
                self.events.push(format!(
                    "epoch {epoch}: validation ATTC undefined; Φ held at {prev}"
                ));
                self.phi.push(prev);
            }
        }
        self.history.push(EpochRecord {
            epoch,
            train_loss,
            val_ap,
            val_attc,
            phi_used,
            batch_losses,
        });
        Ok(self.history.last().expect("just pushed"))
    }

    /// Mean loss and mean gradients over the clips at `indices`.
    fn batch_gradients(
        &self,
        indices: &[usize],
        ctx: &EpochContext,
        epoch: u32,
        batch: usize,
    ) -> Result<(f64, Vec<Tensor>)> {
        let per_clip: Vec<Result<(f64, Vec<Tensor>)>> = indices
            .par_iter()
            .map(|&i| self.clip_gradients(i, ctx))
            .collect();
        let mut loss = 0.0;
        let mut total: Vec<Tensor> = Vec::new();
        for r in per_clip {
            let (l, g) = r.map_err(|e| match e.kind() {
                ErrorKind::Divergence => TrainError::Divergence {
                    epoch,
                    batch,
                    detail: e.to_string(),
                },
                _ => e,
            })?;
            loss += l;
            if total.is_empty() {
                total = g;
            } else {
                for (t, gi) in total.iter_mut().zip(&g) {
                    t.add_assign(gi);
                }
            }
        }
        let scale = 1.0 / indices.len() as f64;
        for t in &mut total {
            t.scale_assign(scale);
        }
        Ok((loss * scale, total))
    }

    fn clip_gradients(&self, index: usize, ctx: &EpochContext) -> Result<(f64, Vec<Tensor>)> {
        let clip = &self.train.clips[index];
        let mut tape = Tape::with_checks(self.config.checked);
        let vars = self.model.bind(&mut tape)?;
        let risk = forward_on_tape(&mut tape, &self.model.config, &vars, &clip.features)?;
        let loss = clip_loss_on_tape(&mut tape, risk, &clip.annotation, &self.config.loss, ctx)?;
        let value = tape.value(loss).item().expect("scalar loss");
        let grads = tape.backward(loss).map_err(LossError::from)?;
        Ok((value, Model::collect_grads(&vars, &grads)))
    }

    /// Runs the remaining epochs.
    pub fn fit(mut self) -> Result<TrainOutcome> {
        while self.completed_epochs() < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(TrainOutcome {
            checkpoint: self.checkpoint(),
            phi_reads: self.phi.reads(),
            model: self.model,
            history: self.history,
            events: self.events,
            config: self.config,
        })
    }
}

/// Everything produced by a finished run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub events: Vec<String>,
    /// How often the loss schedule read Φ; zero for EL and LEA.
    pub phi_reads: u64,
}

fn tensors(model: &Model) -> Vec<&Tensor> {
    model.named_params().into_iter().map(|(_, t)| t).collect()
}

fn prepare(config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainConfig> {
    config.validate()?;
    if train.is_empty() {
        return Err(DataError::Empty.into());
    }
    if val.num_positive() == 0 {
        return Err(TrainError::Eval(EvalError::NoPositives));
    }
    if train.dims != val.dims {
        return Err(TrainError::Data(DataError::Invariant {
            clip_id: val.clips[0].annotation.clip_id.clone(),
            reason: "validation features differ in shape from training features".into(),
        }));
    }
    let mut config = config.clone();
    config.model = config.model.resolved(train.dims)?;
    Ok(config)
}

/// Trains `config.epochs` epochs from a fresh initialization.
pub fn train(config: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    Trainer::new(config, train_set, val_set)?.fit()
}
