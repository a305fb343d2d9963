use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pn_core::PnOperators;
use crate::rng::{stream, tags};
use crate::scalar::Real;

use super::adamw::{adamw_step, AdamWConfig, AdamWState};
use super::loss::{loss_and_gradient, residual_loss, LossOperators, SampleSet};
use super::network::{Architecture, InputScaler, MlpParams, NetworkShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub order: usize,
    pub width: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    pub architecture: Architecture,
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            order: 3,
            width: 64,
            depth: 2,
            learning_rate: 1e-3,
            batch_size: 1024,
            epochs: 1000,
            seed: 0,
            val_fraction: 0.1,
            weight_decay: 1e-4,
            epsilon: crate::closure_model::DEFAULT_EPSILON,
            architecture: Architecture::SeparateHeads,
            normalize_inputs: false,
        }
    }
}

impl TrainConfig {
    pub fn shape(&self) -> NetworkShape {
        NetworkShape {
            order: self.order,
            width: self.width,
            depth: self.depth,
            architecture: self.architecture,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.order < 1 {
            return bad("order must be at least 1");
        }
        if self.width < 1 || self.depth < 1 {
            return bad("width and depth must be positive");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One line of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord<T> {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub params: MlpParams<T>,
    pub seed: u64,
    pub epsilon: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Lowest validation loss seen; the first such epoch wins ties.
    pub best: CheckpointRecord<T>,
    pub curve: Vec<CurveRecord>,
}

/// Seeded permutation split; returns `(train, validation)` row indices.
pub fn split_indices(len: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
    }
    let n_val = ((len as f64) * val_fraction).round() as usize;
    let n_val = n_val.max(1);
    if len < 2 || n_val >= len {
        return Err(Error::Config(format!(
            "cannot split {len} samples with validation fraction {val_fraction}"
        )));
    }
    let mut perm: Vec<usize> = (0..len).collect();
    perm.shuffle(&mut stream(seed, 0, tags::SPLIT));
    let train = perm.split_off(n_val);
    Ok((train, perm))
}

/// Splits `dataset` and trains; see [`train_split`].
pub fn train<T: Real>(
    dataset: &SampleSet<T>,
    ops: &PnOperators<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let (tr, va) = split_indices(dataset.len(), config.val_fraction, config.seed)?;
    train_split(&dataset.select(&tr), &dataset.select(&va), ops, config, |_| {})
}

/// Mini-batch AdamW on the residual loss, keeping the checkpoint with the
/// smallest validation loss. `observer` sees each curve record as it is made.
pub fn train_split<T: Real>(
    train_set: &SampleSet<T>,
    val_set: &SampleSet<T>,
    ops: &PnOperators<T>,
    config: &TrainConfig,
    mut observer: impl FnMut(&CurveRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    if ops.order() != config.order || train_set.order != config.order || val_set.order != config.order {
        return Err(Error::DimensionMismatch(format!(
            "configured order {} does not match operators ({}) or data ({}, {})",
            config.order,
            ops.order(),
            train_set.order,
            val_set.order
        )));
    }
    let lops = LossOperators::new(ops, T::lit(config.epsilon))?;
    let mut params = MlpParams::init(config.shape(), &mut stream(config.seed, 0, tags::INIT))?;
    if config.normalize_inputs {
        params.scaler = Some(InputScaler::fit(train_set.u.view()));
    }
    let mut opt = AdamWState::new(&params, config.optimizer());
    let mut shuffle_rng = stream(config.seed, 0, tags::SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut curve = Vec::with_capacity(config.epochs);
    let mut best: Option<CheckpointRecord<T>> = None;
    let mut last_finite = None;
    let diverged = |epoch, last_finite| {
        log::error!("training diverged at epoch {epoch}; last finite epoch {last_finite:?}");
        Error::Diverged { epoch, last_finite }
    };

    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = train_set.select(chunk);
            let (loss, grad) = loss_and_gradient(&batch, &params, &lops).map_err(|_| diverged(epoch, last_finite))?;
            adamw_step(&mut params, &grad, &mut opt)?;
            weighted += loss.as_f64() * chunk.len() as f64;
        }
        let train_loss = weighted / train_set.len() as f64;
        let val_loss = residual_loss(val_set, &params, &lops)
            .map_err(|_| diverged(epoch, last_finite))?
            .as_f64();
        if !params.is_finite() || !train_loss.is_finite() {
            return Err(diverged(epoch, last_finite));
        }
        last_finite = Some(epoch);
        let record = CurveRecord {
            epoch,
            train_loss,
            val_loss,
        };
        observer(&record);
        curve.push(record);
        if best.as_ref().map_or(true, |b| val_loss < b.val_loss) {
            best = Some(CheckpointRecord {
                epoch,
                train_loss,
                val_loss,
                params: params.clone(),
                seed: config.seed,
                epsilon: config.epsilon,
            });
        }
        if epoch % 100 == 0 || epoch == config.epochs {
            log::info!("epoch {epoch}: train {train_loss:.6e}, validation {val_loss:.6e}");
        }
    }

    let best = match best {
        Some(b) => b,
        None => {
            // Zero epochs: report the initialization.
            let val_loss = residual_loss(val_set, &params, &lops)?.as_f64();
            let train_loss = residual_loss(train_set, &params, &lops)?.as_f64();
            CheckpointRecord {
                epoch: 0,
                train_loss,
                val_loss,
                params,
                seed: config.seed,
                epsilon: config.epsilon,
            }
        }
    };
    Ok(TrainOutcome { best, curve })
}
