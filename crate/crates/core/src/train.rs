//! Mini-batch training with Adam, validation, and resumable checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::Trajectory;
use crate::eval::{evaluate, predict_all, EvalError, DEFAULT_PROBABILITY_THRESHOLD, SLICE_ALL};
use crate::grad::{AdamConfig, AdamState, Checkpoint, CheckpointError, GradError, Tensor};
use crate::losses::{batch_loss, batch_loss_and_grad, DistanceKind, DistancePolicy, LossError, LossKind, MtpConfig};
use crate::model::{Model, ModelError, ModelPredictor};
use crate::scenegen::{stream_seed, Sample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss or gradient at step {step}; last finite step {last_finite:?}")]
    NonFinite {
        step: u64,
        /// `(step, loss)` of the most recent finite update.
        last_finite: Option<(u64, f64)>,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint does not match: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Canonical name of a loss, inverse of [`LossKind::parse`] for the defaults.
pub fn loss_name(kind: &LossKind) -> &'static str {
    match kind {
        LossKind::Displacement => "stp",
        LossKind::Me => "me",
        LossKind::Mtp(c) if c.policy.kind == DistanceKind::Angle => "mtp-angle",
        LossKind::Mtp(_) => "mtp-disp",
        LossKind::Mdn => "mdn",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub epochs: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    /// Validation samples scored per epoch (all when `None`).
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mtp(MtpConfig::default()),
            epochs: 10,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(TrainError::InvalidConfig("lr must be positive".into()));
        }
        if !(a.decay_factor > 0.0 && a.decay_factor <= 1.0) || a.decay_interval == 0 {
            return Err(TrainError::InvalidConfig("decay factor must be in (0, 1], interval > 0".into()));
        }
        Ok(())
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Current epoch (0-based) and the next batch within it.
    pub epoch: u64,
    pub batch: usize,
    pub best_val: f64,
    pub last_finite: Option<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    /// Average displacement of the chosen mode on the validation set.
    pub val_ade: f64,
}

pub const LOG_HEADER: &str = "epoch,step,train_loss,val_loss,lr,val_ade";

impl EpochLog {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.train_loss, self.val_loss, self.lr, self.val_ade
        )
    }
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, epoch));
    idx.shuffle(&mut rng);
    idx
}

fn all_finite(t: &Tensor) -> bool {
    t.data().iter().all(|v| v.is_finite())
}

impl TrainState {
    pub fn new(model: Model, adam: AdamConfig) -> Self {
        let adam = AdamState::new(&model.params, adam);
        Self {
            model,
            adam,
            epoch: 0,
            batch: 0,
            best_val: f64::INFINITY,
            last_finite: None,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    fn batches_per_epoch(n: usize, bs: usize) -> usize {
        n.div_ceil(bs)
    }

    /// One optimizer update; returns the batch loss before the update.
    pub fn step(&mut self, train: &[Sample], cfg: &TrainConfig, order: &[usize]) -> Result<f64, TrainError> {
        let start = self.batch * cfg.batch_size;
        let end = (start + cfg.batch_size).min(train.len());
        let batch: Vec<&Sample> = order[start..end].iter().map(|i| &train[*i]).collect();
        let (loss, grads, _) = batch_loss_and_grad(&self.model, &batch, &cfg.loss)?;
        let dense: Vec<Tensor> = self
            .model
            .params
            .ids()
            .map(|id| grads.param_or_zeros(id, &self.model.params))
            .collect();
        if !loss.is_finite() || !dense.iter().all(all_finite) {
            return Err(TrainError::NonFinite {
                step: self.adam.step + 1,
                last_finite: self.last_finite,
            });
        }
        self.adam.step(&mut self.model.params, &dense)?;
        self.last_finite = Some((self.adam.step, loss));
        self.batch += 1;
        if self.batch >= Self::batches_per_epoch(train.len(), cfg.batch_size) {
            self.batch = 0;
            self.epoch += 1;
        }
        Ok(loss)
    }

    /// Runs the remainder of the current epoch; returns the mean batch loss.
    pub fn run_epoch(&mut self, train: &[Sample], cfg: &TrainConfig) -> Result<f64, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let order = epoch_order(train.len(), cfg.seed, self.epoch);
        let epoch = self.epoch;
        let (mut total, mut count) = (0.0, 0usize);
        while self.epoch == epoch {
            total += self.step(train, cfg, &order)?;
            count += 1;
        }
        Ok(total / count as f64)
    }

    /// Runs exactly `n` updates, crossing epoch boundaries as needed.
    pub fn run_steps(&mut self, train: &[Sample], cfg: &TrainConfig, n: u64) -> Result<Vec<f64>, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let mut losses = Vec::new();
        let mut order_epoch = self.epoch;
        let mut order = epoch_order(train.len(), cfg.seed, self.epoch);
        for _ in 0..n {
            if self.epoch != order_epoch {
                order_epoch = self.epoch;
                order = epoch_order(train.len(), cfg.seed, self.epoch);
            }
            losses.push(self.step(train, cfg, &order)?);
        }
        Ok(losses)
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new();
        self.model.write_checkpoint(&mut ck);
        ck.set_meta("train.loss", loss_name(&cfg.loss));
        if let LossKind::Mtp(m) = &cfg.loss {
            ck.set_meta("train.alpha", m.alpha);
            ck.set_meta("train.angle_threshold", m.policy.angle_threshold);
        }
        ck.set_meta("train.epoch", self.epoch);
        ck.set_meta("train.batch", self.batch);
        ck.set_meta("train.best_val", self.best_val);
        ck.set_meta("train.seed", cfg.seed);
        ck.set_meta("train.batch_size", cfg.batch_size);
        if let Some((s, l)) = self.last_finite {
            ck.set_meta("train.last_finite_step", s);
            ck.set_meta("train.last_finite_loss", l);
        }
        let a = &self.adam;
        ck.set_meta("adam.step", a.step);
        ck.set_meta("adam.lr", a.config.lr);
        ck.set_meta("adam.beta1", a.config.beta1);
        ck.set_meta("adam.beta2", a.config.beta2);
        ck.set_meta("adam.eps", a.config.eps);
        ck.set_meta("adam.decay_factor", a.config.decay_factor);
        ck.set_meta("adam.decay_interval", a.config.decay_interval);
        for (id, name, _) in self.model.params.iter() {
            ck.push(format!("adam.m.{name}"), a.m[id.0].clone());
            ck.push(format!("adam.v.{name}"), a.v[id.0].clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let model = Model::from_checkpoint(ck)?;
        let config = AdamConfig {
            lr: ck.meta_parse("adam.lr")?,
            beta1: ck.meta_parse("adam.beta1")?,
            beta2: ck.meta_parse("adam.beta2")?,
            eps: ck.meta_parse("adam.eps")?,
            decay_factor: ck.meta_parse("adam.decay_factor")?,
            decay_interval: ck.meta_parse("adam.decay_interval")?,
        };
        let mut adam = AdamState::new(&model.params, config);
        adam.step = ck.meta_parse("adam.step")?;
        for (id, name, p) in model.params.iter() {
            for (slot, prefix) in [(&mut adam.m, "adam.m"), (&mut adam.v, "adam.v")] {
                let t = ck.tensor(&format!("{prefix}.{name}"))?;
                if t.shape() != p.shape() {
                    return Err(TrainError::Incompatible(format!("{prefix}.{name} has shape {:?}", t.shape())));
                }
                slot[id.0] = t.clone();
            }
        }
        let last_finite = match (ck.meta("train.last_finite_step"), ck.meta("train.last_finite_loss")) {
            (Ok(_), Ok(_)) => Some((ck.meta_parse("train.last_finite_step")?, ck.meta_parse("train.last_finite_loss")?)),
            _ => None,
        };
        Ok(Self {
            model,
            adam,
            epoch: ck.meta_parse("train.epoch")?,
            batch: ck.meta_parse("train.batch")?,
            best_val: ck.meta_parse("train.best_val")?,
            last_finite,
        })
    }

    pub fn save(&self, cfg: &TrainConfig, path: &Path) -> Result<(), TrainError> {
        Ok(self.to_checkpoint(cfg).save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Loss kind recorded in a checkpoint, if any.
pub fn checkpoint_loss(ck: &Checkpoint) -> Result<Option<LossKind>, TrainError> {
    let Ok(name) = ck.meta("train.loss") else {
        return Ok(None);
    };
    let mut kind = LossKind::parse(name).ok_or_else(|| TrainError::Incompatible(format!("unknown loss `{name}`")))?;
    if let LossKind::Mtp(m) = &mut kind {
        if ck.meta("train.alpha").is_ok() {
            m.alpha = ck.meta_parse("train.alpha")?;
        }
        if ck.meta("train.angle_threshold").is_ok() {
            m.policy = DistancePolicy {
                angle_threshold: ck.meta_parse("train.angle_threshold")?,
                ..m.policy
            };
        }
    }
    Ok(Some(kind))
}

/// Mean validation loss in batches of `batch`.
pub fn validation_loss(model: &Model, val: &[Sample], kind: &LossKind, batch: usize) -> Result<f64, TrainError> {
    if val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in val.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        total += batch_loss(model, &refs, kind)? * refs.len() as f64;
    }
    Ok(total / val.len() as f64)
}

/// Average displacement of the chosen mode over all horizons.
pub fn validation_ade(model: &Model, val: &[Sample]) -> Result<f64, TrainError> {
    let predictor = ModelPredictor { model, name: "val" };
    let preds = predict_all(&predictor, val, 256)?;
    let report = evaluate("val", val, &preds, DEFAULT_PROBABILITY_THRESHOLD)?;
    Ok(report.cell(SLICE_ALL, "avg").map(|c| c.displacement).unwrap_or(f64::NAN))
}

/// Lloyd's k-means over flattened trajectories with k-means++ seeding.
/// Returns `k` centers ordered by first appearance of their seeds.
pub fn kmeans_anchors(trajectories: &[&Trajectory], k: usize, iters: usize, seed: u64) -> Result<Vec<Trajectory>, TrainError> {
    if trajectories.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if k == 0 {
        return Err(TrainError::InvalidConfig("k-means needs k > 0".into()));
    }
    let dt = trajectories[0].dt();
    let horizon = trajectories[0].horizon();
    if trajectories.iter().any(|t| t.horizon() != horizon) {
        return Err(TrainError::Incompatible("trajectories differ in horizon".into()));
    }
    let data: Vec<Vec<f64>> = trajectories.iter().map(|t| t.to_flat()).collect();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![data[rng.gen_range(0..data.len())].clone()];
    let mut nearest: Vec<f64> = data.iter().map(|d| dist2(d, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = data.len() - 1;
            for (i, w) in nearest.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.gen_range(0..data.len())
        };
        centers.push(data[next].clone());
        for (n, d) in nearest.iter_mut().zip(&data) {
            *n = n.min(dist2(d, &centers[centers.len() - 1]));
        }
    }
    let dim = data[0].len();
    for _ in 0..iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for d in &data {
            let c = (0..k)
                .min_by(|&a, &b| dist2(d, &centers[a]).total_cmp(&dist2(d, &centers[b])))
                .expect("k > 0");
            counts[c] += 1;
            sums[c].iter_mut().zip(d).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
        .iter()
        .map(|c| Trajectory::from_flat(c, dt).map_err(|e| TrainError::InvalidConfig(e.to_string())))
        .collect()
}

/// Sets the model's mode anchors to k-means centers of the training futures.
pub fn anchor_init(model: &mut Model, train: &[Sample], seed: u64) -> Result<(), TrainError> {
    const MAX_POINTS: usize = 5000;
    const ITERS: usize = 25;
    let step = train.len().div_ceil(MAX_POINTS).max(1);
    let trajs: Vec<&Trajectory> = train.iter().step_by(step).map(|s| &s.ground_truth).collect();
    let anchors = kmeans_anchors(&trajs, model.config.modes, ITERS, seed)?;
    model.set_mode_anchors(&anchors)?;
    Ok(())
}

/// Trains until `cfg.epochs` epochs are complete. `on_epoch` sees every log
/// line and whether the epoch improved the best validation loss.
pub fn fit(
    state: &mut TrainState,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState, bool) -> Result<(), TrainError>,
) -> Result<Vec<EpochLog>, TrainError> {
    cfg.validate()?;
    cfg.loss.check_layout(&state.model.config.layout())?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let val = match cfg.val_limit {
        Some(n) => &val[..n.min(val.len())],
        None => val,
    };
    let mut logs = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let train_loss = state.run_epoch(train, cfg)?;
        let (val_loss, val_ade) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                validation_loss(&state.model, val, &cfg.loss, 256)?,
                validation_ade(&state.model, val)?,
            )
        };
        let score = if val.is_empty() { train_loss } else { val_loss };
        let improved = score < state.best_val;
        if improved {
            state.best_val = score;
        }
        let log = EpochLog {
            epoch,
            step: state.step_count(),
            train_loss,
            val_loss,
            lr: state.adam.current_lr(),
            val_ade,
        };
        on_epoch(&log, state, improved)?;
        logs.push(log);
    }
    Ok(logs)
}
