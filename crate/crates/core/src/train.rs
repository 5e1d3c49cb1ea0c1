//! Epoch loop, plateau LR reduction, early stopping and the stage runners.

use std::fmt::Write as _;
use std::path::Path;

use crate::models::{build_finetune, ModelKind};
use crate::nn::{bce_vector, Mode, NetworkSpec, Optimizer, OptimizerSpec, ParamStore, Rng, Tensor};
use crate::{Error, Result};

/// One training or validation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// One tensor per network input, in declaration order.
    pub inputs: Vec<Tensor>,
    pub target: Vec<f32>,
}

impl Sample {
    pub fn new(id: impl Into<String>, inputs: Vec<Tensor>, target: Vec<f32>) -> Self {
        Sample {
            id: id.into(),
            inputs,
            target,
        }
    }

    pub fn binary(id: impl Into<String>, input: Tensor, label: u8) -> Self {
        Sample::new(id, vec![input], vec![f32::from(label)])
    }
}

/// Scalar outputs are thresholded at 0.5 (>=), vector outputs use argmax.
pub fn prediction_correct(output: &[f32], target: &[f32]) -> bool {
    if output.len() == 1 {
        (output[0] >= 0.5) == (target[0] >= 0.5)
    } else {
        argmax(output) == argmax(target)
    }
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStoppingConfig {
    pub min_delta: f64,
    pub patience: usize,
}

impl EarlyStoppingConfig {
    pub const FULL: EarlyStoppingConfig = EarlyStoppingConfig {
        min_delta: 0.01,
        patience: 50,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub min_delta: f64,
    pub patience: usize,
    pub best: f64,
    pub wait: usize,
}

impl EarlyStopping {
    pub fn new(config: EarlyStoppingConfig) -> Self {
        EarlyStopping {
            min_delta: config.min_delta,
            patience: config.patience,
            best: f64::NEG_INFINITY,
            wait: 0,
        }
    }

    /// Improvement is strict: `val_acc > best + min_delta`.
    pub fn update(&mut self, val_acc: f64) -> Decision {
        if val_acc > self.best + self.min_delta {
            self.best = val_acc;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        if self.wait >= self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
}

impl PlateauConfig {
    pub const FEATURE_EXTRACTOR: PlateauConfig = PlateauConfig {
        factor: 0.1,
        patience: 5,
        min_delta: 0.0,
    };
    pub const FINETUNE: PlateauConfig = PlateauConfig {
        factor: 0.1,
        patience: 25,
        min_delta: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub wait: usize,
    pub lr: f64,
}

impl Plateau {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        Plateau {
            factor: config.factor,
            patience: config.patience,
            min_delta: config.min_delta,
            best: f64::NEG_INFINITY,
            wait: 0,
            lr,
        }
    }

    /// Returns the learning rate for the next epoch.
    pub fn update(&mut self, val_acc: f64) -> f64 {
        if val_acc > self.best + self.min_delta {
            self.best = val_acc;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr *= self.factor;
                self.wait = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: OptimizerSpec,
    pub plateau: Option<PlateauConfig>,
    pub early_stopping: Option<EarlyStoppingConfig>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerSpec, max_epochs: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs,
            optimizer,
            plateau: None,
            early_stopping: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    /// Base learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned checkpoint.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,train_acc,val_acc,lr";

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.epochs.get(self.best_epoch.checked_sub(1)?).map(|e| e.val_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{HISTORY_HEADER}\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.train_acc, e.val_acc, e.lr
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the earliest epoch with the highest validation accuracy.
    pub best_params: ParamStore,
    pub history: History,
}

/// Fraction of samples predicted correctly in eval mode.
pub fn evaluate_accuracy(net: &NetworkSpec, params: &ParamStore, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty sample set".into()));
    }
    let mut correct = 0usize;
    for s in samples {
        let out = net.predict(params, &s.inputs)?;
        if prediction_correct(out.data(), &s.target) {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Eval-mode outputs, one vector per sample.
pub fn predict_all(net: &NetworkSpec, params: &ParamStore, samples: &[Sample]) -> Result<Vec<Vec<f32>>> {
    samples
        .iter()
        .map(|s| Ok(net.predict(params, &s.inputs)?.into_data()))
        .collect()
}

/// Mini-batch training with BCE loss, monitored on validation accuracy.
///
/// Each epoch shuffles the train list with a stream derived from the seed and
/// the epoch number; per-example gradients are averaged over the batch. After
/// validation the plateau callback runs, then early stopping.
pub fn train(
    net: &NetworkSpec,
    params: ParamStore,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(net, params, train_set, val_set, config, |_, _| {})
}

/// [`train`] with a callback after every epoch's validation, receiving the
/// epoch record and the current parameters.
pub fn train_observed<F>(
    net: &NetworkSpec,
    mut params: ParamStore,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &ParamStore),
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    net.check_params(&params)?;
    let mut optimizer = Optimizer::new(config.optimizer)?;
    let mut plateau = config.plateau.map(|p| Plateau::new(p, optimizer.learning_rate()));
    let mut early = config.early_stopping.map(EarlyStopping::new);
    let base = Rng::new(config.seed);
    let mut history = History::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        let epoch_rng = base.derive(epoch as u64);
        let mut shuffle_rng = epoch_rng.derive(0);
        order.sort_unstable();
        shuffle_rng.shuffle(&mut order);
        let lr = optimizer.learning_rate();
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads = net.zero_grads::<f32>();
            let scale = 1.0 / batch.len() as f32;
            for (k, &i) in batch.iter().enumerate() {
                let sample = &train_set[i];
                let position = (b * config.batch_size + k) as u64;
                let mut dropout_rng = epoch_rng.derive(position + 1);
                let (out, cache) = net.forward(&params, &sample.inputs, Mode::Train, &mut dropout_rng)?;
                let (loss, mut grad) = bce_vector(&out, &sample.target)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {loss} at epoch {epoch} on `{}`",
                        sample.id
                    )));
                }
                loss_sum += loss;
                if prediction_correct(out.data(), &sample.target) {
                    correct += 1;
                }
                if grads.is_empty() {
                    continue;
                }
                for g in grad.data_mut() {
                    *g *= scale;
                }
                net.backward(&params, &cache, &grad, &mut grads)?;
            }
            optimizer.step(&mut params, &grads)?;
        }
        if !params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let val_acc = evaluate_accuracy(net, &params, val_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
            lr,
        });
        observer(history.epochs.last().expect("just pushed"), &params);
        if best.as_ref().map_or(true, |(acc, _)| val_acc > *acc) {
            best = Some((val_acc, params.clone()));
            history.best_epoch = epoch;
        }
        if let Some(p) = plateau.as_mut() {
            optimizer.set_learning_rate(p.update(val_acc));
        }
        if let Some(e) = early.as_mut() {
            if e.update(val_acc) == Decision::Stop {
                history.stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }
    let (_, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best_params,
        history,
    })
}

/// Epoch budgets and callback settings for every stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub batch_size: usize,
    pub scratch_epochs: usize,
    pub stage1_epochs: usize,
    pub stage1_plateau: PlateauConfig,
    pub finetune_max_epochs: usize,
    pub finetune_plateau: PlateauConfig,
    pub finetune_early_stopping: EarlyStoppingConfig,
}

impl Schedule {
    /// Full-size schedule. Scratch runs 50 epochs.
    pub const FULL: Schedule = Schedule {
        batch_size: 32,
        scratch_epochs: 50,
        stage1_epochs: 20,
        stage1_plateau: PlateauConfig::FEATURE_EXTRACTOR,
        finetune_max_epochs: 200,
        finetune_plateau: PlateauConfig::FINETUNE,
        finetune_early_stopping: EarlyStoppingConfig::FULL,
    };

    /// Desk-scale variant: stage 1 unchanged, fine-tune budget and patience
    /// windows divided by five, Scratch capped at 20 epochs.
    pub const DESK: Schedule = Schedule {
        batch_size: 32,
        scratch_epochs: 20,
        stage1_epochs: 20,
        stage1_plateau: PlateauConfig::FEATURE_EXTRACTOR,
        finetune_max_epochs: 40,
        finetune_plateau: PlateauConfig {
            factor: 0.1,
            patience: 5,
            min_delta: 0.0,
        },
        finetune_early_stopping: EarlyStoppingConfig {
            min_delta: 0.01,
            patience: 10,
        },
    };

    pub fn scratch_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            ..TrainConfig::new(OptimizerSpec::SCRATCH_SGD, self.scratch_epochs, seed)
        }
    }

    pub fn stage1_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            plateau: Some(self.stage1_plateau),
            ..TrainConfig::new(OptimizerSpec::RMSPROP_DEFAULT, self.stage1_epochs, seed)
        }
    }

    pub fn finetune_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            plateau: Some(self.finetune_plateau),
            early_stopping: Some(self.finetune_early_stopping),
            ..TrainConfig::new(OptimizerSpec::FINETUNE_SGD, self.finetune_max_epochs, seed)
        }
    }

    /// Config of the (single) stage that trains `model` from its initial state.
    pub fn config_for(&self, model: ModelKind, seed: u64) -> TrainConfig {
        match model {
            ModelKind::Scratch => self.scratch_config(seed),
            ModelKind::FeatureExtractor => self.stage1_config(seed),
            ModelKind::FineTune | ModelKind::Hybrid => self.finetune_config(seed),
        }
    }
}

/// Single SGD stage for the Scratch network.
pub fn run_scratch_stage(
    net: &NetworkSpec,
    params: ParamStore,
    train_set: &[Sample],
    val_set: &[Sample],
    schedule: &Schedule,
    seed: u64,
) -> Result<TrainOutcome> {
    train(net, params, train_set, val_set, &schedule.scratch_config(seed))
}

/// RMSprop over the head with plateau reduction; no early stopping.
pub fn run_feature_extractor_stage(
    net: &NetworkSpec,
    params: ParamStore,
    train_set: &[Sample],
    val_set: &[Sample],
    schedule: &Schedule,
    seed: u64,
) -> Result<TrainOutcome> {
    train(net, params, train_set, val_set, &schedule.stage1_config(seed))
}

/// Unfreezes the last two backbone blocks of the stage-1 network and trains
/// them with the head under fine-tune SGD. Returns the unfrozen network too.
pub fn run_finetune_stage(
    stage1_net: &NetworkSpec,
    stage1_best: Option<ParamStore>,
    train_set: &[Sample],
    val_set: &[Sample],
    schedule: &Schedule,
    seed: u64,
) -> Result<(NetworkSpec, TrainOutcome)> {
    let (net, params) = build_finetune(stage1_net, stage1_best)?;
    let outcome = train(&net, params, train_set, val_set, &schedule.finetune_config(seed))?;
    Ok((net, outcome))
}

/// Joint training of both Hybrid branches under fine-tune settings.
pub fn run_hybrid_stage(
    net: &NetworkSpec,
    params: ParamStore,
    train_set: &[Sample],
    val_set: &[Sample],
    schedule: &Schedule,
    seed: u64,
) -> Result<TrainOutcome> {
    train(net, params, train_set, val_set, &schedule.finetune_config(seed))
}
