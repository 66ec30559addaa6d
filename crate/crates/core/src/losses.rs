//! Training objectives and the best-mode selector.
//!
//! Each loss exists twice: a value-level function over decoded predictions,
//! and a graph builder over the raw head output used for training. Tests pin
//! the two against each other.

use std::f64::consts::PI;

use thiserror::Error;

use crate::geom::{trajectory_endpoint_bearing, normalize_angle, GeomError, MultimodalPrediction, Trajectory};
use crate::grad::{GradError, Gradients, Graph, NodeRef, Tensor};
use crate::model::{HeadKind, Model, ModelError, OutputLayout};
use crate::scenegen::Sample;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("horizon mismatch: ground truth has {gt} steps, prediction {pred}")]
    HorizonMismatch { gt: usize, pred: usize },
    #[error("trajectory endpoint too close to the origin for an angle")]
    DegenerateTrajectory,
    #[error("covariance of mode {mode} at step {step} is singular")]
    SingularCovariance { mode: usize, step: usize },
    #[error("prediction carries no covariances")]
    MissingCovariances,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("loss does not fit the model output: {0}")]
    Incompatible(String),
    #[error("invalid loss parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

impl From<GeomError> for LossError {
    fn from(e: GeomError) -> Self {
        match e {
            GeomError::DegenerateTrajectory => LossError::DegenerateTrajectory,
            other => LossError::Model(ModelError::Geom(other)),
        }
    }
}

/// Default angular window for treating a mode as a match: 5 degrees.
pub const DEFAULT_ANGLE_THRESHOLD: f64 = 5.0 * PI / 180.0;

/// Determinant below which a covariance is rejected.
pub const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    Displacement,
    Angle,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistancePolicy {
    pub kind: DistanceKind,
    pub angle_threshold: f64,
}

impl DistancePolicy {
    pub fn displacement() -> Self {
        Self {
            kind: DistanceKind::Displacement,
            angle_threshold: DEFAULT_ANGLE_THRESHOLD,
        }
    }

    pub fn angle() -> Self {
        Self {
            kind: DistanceKind::Angle,
            angle_threshold: DEFAULT_ANGLE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtpConfig {
    /// Weight of the regression term against the classification term.
    pub alpha: f64,
    pub policy: DistancePolicy,
}

impl Default for MtpConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            policy: DistancePolicy::displacement(),
        }
    }
}

impl MtpConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LossError::InvalidParameter(format!("alpha {} must be >= 0", self.alpha)));
        }
        if !(self.policy.angle_threshold > 0.0) {
            return Err(LossError::InvalidParameter("angle threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Single-mode average displacement; needs M = 1.
    Displacement,
    Me,
    Mtp(MtpConfig),
    Mdn,
}

impl LossKind {
    /// `me`, `mtp-disp`, `mtp-angle`, `mdn` or `stp`.
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "stp" => LossKind::Displacement,
            "me" => LossKind::Me,
            "mtp-disp" | "mtp" => LossKind::Mtp(MtpConfig::default()),
            "mtp-angle" => LossKind::Mtp(MtpConfig {
                policy: DistancePolicy::angle(),
                ..MtpConfig::default()
            }),
            "mdn" => LossKind::Mdn,
            _ => return None,
        })
    }

    pub fn head(&self) -> HeadKind {
        match self {
            LossKind::Mdn => HeadKind::Mdn,
            _ => HeadKind::Regression,
        }
    }

    pub fn check_layout(&self, layout: &OutputLayout) -> Result<(), LossError> {
        if let LossKind::Mtp(cfg) = self {
            cfg.validate()?;
        }
        if matches!(self, LossKind::Displacement) && layout.modes != 1 {
            return Err(LossError::Incompatible(format!("displacement loss needs 1 mode, model has {}", layout.modes)));
        }
        if matches!(self, LossKind::Mdn) != (layout.head == HeadKind::Mdn) {
            return Err(LossError::Incompatible(format!("{self:?} does not match a {} head", layout.head.as_str())));
        }
        Ok(())
    }
}

fn check_horizon(gt: &Trajectory, pred: &Trajectory) -> Result<(), LossError> {
    if gt.horizon() != pred.horizon() {
        return Err(LossError::HorizonMismatch {
            gt: gt.horizon(),
            pred: pred.horizon(),
        });
    }
    Ok(())
}

/// Mean Euclidean distance between corresponding points.
pub fn displacement_loss(gt: &Trajectory, pred: &Trajectory) -> Result<f64, LossError> {
    check_horizon(gt, pred)?;
    let total: f64 = gt
        .points()
        .iter()
        .zip(pred.points())
        .map(|(a, b)| a.distance(*b))
        .sum();
    Ok(total / gt.horizon() as f64)
}

/// Absolute difference of endpoint bearings seen from the origin, in `[0, π]`.
pub fn angle_distance(gt: &Trajectory, pred: &Trajectory) -> Result<f64, LossError> {
    let a = trajectory_endpoint_bearing(gt)?;
    let b = trajectory_endpoint_bearing(pred)?;
    Ok(normalize_angle(a - b).abs())
}

fn argmin(values: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the mode matching `gt` under `policy`; lowest index on ties.
pub fn select_best_mode(gt: &Trajectory, modes: &[Trajectory], policy: &DistancePolicy) -> Result<usize, LossError> {
    if modes.is_empty() {
        return Err(LossError::Incompatible("no modes to select from".into()));
    }
    let disp = modes
        .iter()
        .map(|m| displacement_loss(gt, m))
        .collect::<Result<Vec<_>, _>>()?;
    let pick = match policy.kind {
        DistanceKind::Displacement => argmin(disp.iter().copied().enumerate()),
        DistanceKind::Angle => {
            let angles = modes
                .iter()
                .map(|m| angle_distance(gt, m))
                .collect::<Result<Vec<_>, _>>()?;
            let within: Vec<usize> = (0..modes.len())
                .filter(|&i| angles[i] < policy.angle_threshold)
                .collect();
            if within.is_empty() {
                argmin(angles.iter().copied().enumerate())
            } else {
                argmin(within.iter().map(|&i| (i, disp[i])))
            }
        }
    };
    Ok(pick.expect("non-empty"))
}

/// Like [`select_best_mode`], but an undefined angle falls back to displacement.
pub fn select_winner(gt: &Trajectory, modes: &[Trajectory], policy: &DistancePolicy) -> Result<usize, LossError> {
    match select_best_mode(gt, modes, policy) {
        Err(LossError::DegenerateTrajectory) => select_best_mode(gt, modes, &DistancePolicy::displacement()),
        other => other,
    }
}

/// Probability-weighted displacement over modes.
pub fn me_loss(gt: &Trajectory, pred: &MultimodalPrediction) -> Result<f64, LossError> {
    pred.modes
        .iter()
        .zip(&pred.probabilities)
        .try_fold(0.0, |acc, (m, p)| Ok(acc + p * displacement_loss(gt, m)?))
}

/// Cross-entropy of the winning mode plus `alpha` times its displacement.
pub fn mtp_loss(gt: &Trajectory, pred: &MultimodalPrediction, cfg: &MtpConfig) -> Result<(f64, usize), LossError> {
    cfg.validate()?;
    let w = select_winner(gt, &pred.modes, &cfg.policy)?;
    let reg = displacement_loss(gt, &pred.modes[w])?;
    Ok((-pred.probabilities[w].ln() + cfg.alpha * reg, w))
}

/// Negative log-likelihood of `gt` under the per-point Gaussian mixture.
pub fn mdn_loss(gt: &Trajectory, pred: &MultimodalPrediction) -> Result<f64, LossError> {
    let covs = pred.covariances.as_ref().ok_or(LossError::MissingCovariances)?;
    let mut terms = Vec::with_capacity(pred.modes.len());
    for (m, (mode, p)) in pred.modes.iter().zip(&pred.probabilities).enumerate() {
        check_horizon(gt, mode)?;
        let mut ll = p.ln();
        for (h, ((g, mu), cov)) in gt.points().iter().zip(mode.points()).zip(&covs[m]).enumerate() {
            if cov.det() < SINGULAR_DET {
                return Err(LossError::SingularCovariance { mode: m, step: h });
            }
            ll += cov.log_density(*g - *mu);
        }
        terms.push(ll);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok(-(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()))
}

/// Loss of a single sample under `kind`.
pub fn sample_loss(gt: &Trajectory, pred: &MultimodalPrediction, kind: &LossKind) -> Result<f64, LossError> {
    match kind {
        LossKind::Displacement => {
            if pred.num_modes() != 1 {
                return Err(LossError::Incompatible("displacement loss needs 1 mode".into()));
            }
            displacement_loss(gt, &pred.modes[0])
        }
        LossKind::Me => me_loss(gt, pred),
        LossKind::Mtp(cfg) => mtp_loss(gt, pred, cfg).map(|(l, _)| l),
        LossKind::Mdn => mdn_loss(gt, pred),
    }
}

/// Scalar loss node for a batch and the MTP winners, if any.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub loss: NodeRef,
    pub winners: Option<Vec<usize>>,
}

/// Ground truth repeated across modes: `[n, m, h, 2]`.
fn tiled_ground_truth(gts: &[&Trajectory], layout: &OutputLayout) -> Result<Tensor, LossError> {
    let mut data = Vec::with_capacity(gts.len() * layout.positions_len());
    for gt in gts {
        if gt.horizon() != layout.horizon {
            return Err(LossError::HorizonMismatch {
                gt: gt.horizon(),
                pred: layout.horizon,
            });
        }
        let flat = gt.to_flat();
        for _ in 0..layout.modes {
            data.extend_from_slice(&flat);
        }
    }
    Ok(Tensor::new(vec![gts.len(), layout.modes, layout.horizon, 2], data)?)
}

/// `[n, m]` per-mode average displacement.
fn mode_displacements(g: &mut Graph, pos: NodeRef, gt: NodeRef) -> Result<NodeRef, LossError> {
    let diff = g.sub(pos, gt)?;
    let sq = g.square(diff);
    let d2 = g.sum_last(sq);
    let d = g.sqrt(d2);
    Ok(g.mean_last(d))
}

/// Winner per sample from the current output values.
fn winners_from_values(
    values: &[f64],
    layout: &OutputLayout,
    gts: &[&Trajectory],
    policy: &DistancePolicy,
) -> Result<Vec<usize>, LossError> {
    let dt = gts.first().map(|t| t.dt()).unwrap_or(crate::geom::DEFAULT_DT);
    values
        .chunks_exact(layout.len())
        .zip(gts)
        .map(|(row, gt)| {
            let modes = row[..layout.positions_len()]
                .chunks_exact(2 * layout.horizon)
                .map(|f| Trajectory::from_flat(f, dt))
                .collect::<Result<Vec<_>, _>>()?;
            select_winner(gt, &modes, policy)
        })
        .collect()
}

/// Records the mean per-sample loss on top of a `[n, output_dim]` raw output node.
pub fn loss_graph(
    g: &mut Graph,
    out: NodeRef,
    layout: &OutputLayout,
    gts: &[&Trajectory],
    kind: &LossKind,
) -> Result<BatchLoss, LossError> {
    if gts.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    kind.check_layout(layout)?;
    let n = gts.len();
    if g.value(out).shape() != [n, layout.len()] {
        return Err(LossError::Incompatible(format!(
            "output {:?} for batch {n} with layout width {}",
            g.value(out).shape(),
            layout.len()
        )));
    }
    let (m, h) = (layout.modes, layout.horizon);
    let pos = g.slice_last(out, 0, layout.positions_len())?;
    let pos = g.reshape(pos, &[n, m, h, 2])?;
    let gt = g.constant(tiled_ground_truth(gts, layout)?);
    let logits = g.slice_last(out, layout.logits_offset(), m)?;
    let mut winners = None;
    let per_sample = match kind {
        LossKind::Displacement => {
            let d = mode_displacements(g, pos, gt)?;
            g.sum_last(d)
        }
        LossKind::Me => {
            let d = mode_displacements(g, pos, gt)?;
            let p = g.softmax_last(logits);
            let pd = g.mul(p, d)?;
            g.sum_last(pd)
        }
        LossKind::Mtp(cfg) => {
            let w = winners_from_values(g.value(out).data(), layout, gts, &cfg.policy)?;
            let mut onehot = vec![0.0; n * m];
            for (i, wi) in w.iter().enumerate() {
                onehot[i * m + wi] = 1.0;
            }
            let mask = g.constant(Tensor::new(vec![n, m], onehot)?);
            let d = mode_displacements(g, pos, gt)?;
            let lp = g.log_softmax_last(logits);
            let picked_lp = g.mul(mask, lp)?;
            let picked_lp = g.sum_last(picked_lp);
            let picked_d = g.mul(mask, d)?;
            let picked_d = g.sum_last(picked_d);
            let reg = g.scale(picked_d, cfg.alpha);
            winners = Some(w);
            g.sub(reg, picked_lp)?
        }
        LossKind::Mdn => {
            let cov = g.slice_last(out, layout.cov_offset(), layout.cov_len())?;
            let cov = g.reshape(cov, &[n, m, h, 3])?;
            let a = g.slice_last(cov, 0, 1)?;
            let b = g.slice_last(cov, 1, 1)?;
            let c = g.slice_last(cov, 2, 1)?;
            let l11 = g.softplus(a);
            let l22 = g.softplus(b);
            let r = g.sub(gt, pos)?;
            let r1 = g.slice_last(r, 0, 1)?;
            let r2 = g.slice_last(r, 1, 1)?;
            let z1 = g.div(r1, l11)?;
            let cz = g.mul(c, z1)?;
            let r2c = g.sub(r2, cz)?;
            let z2 = g.div(r2c, l22)?;
            let q1 = g.square(z1);
            let q2 = g.square(z2);
            let q = g.add(q1, q2)?;
            let half_q = g.scale(q, -0.5);
            let log1 = g.log(l11);
            let log2 = g.log(l22);
            let logs = g.add(log1, log2)?;
            let ll = g.sub(half_q, logs)?;
            let ll = g.add_scalar(ll, -(2.0 * PI).ln());
            let ll = g.reshape(ll, &[n, m, h])?;
            let ll = g.sum_last(ll);
            let lp = g.log_softmax_last(logits);
            let joint = g.add(ll, lp)?;
            let lse = g.logsumexp_last(joint);
            g.neg(lse)
        }
    };
    let loss = g.mean(per_sample);
    Ok(BatchLoss { loss, winners })
}

/// Mean loss and parameter gradients over `samples`.
pub fn batch_loss_and_grad(
    model: &Model,
    samples: &[&Sample],
    kind: &LossKind,
) -> Result<(f64, Gradients, Option<Vec<usize>>), LossError> {
    if samples.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let (images, feats) = model.batch_inputs(samples)?;
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, images, feats)?;
    let gts: Vec<&Trajectory> = samples.iter().map(|s| &s.ground_truth).collect();
    let bl = loss_graph(&mut g, out, &model.config.layout(), &gts, kind)?;
    let grads = g.backward(bl.loss)?;
    Ok((g.value(bl.loss).item(), grads, bl.winners))
}

/// Mean loss over `samples` without gradients.
pub fn batch_loss(model: &Model, samples: &[&Sample], kind: &LossKind) -> Result<f64, LossError> {
    if samples.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let (images, feats) = model.batch_inputs(samples)?;
    let mut g = Graph::inference();
    let out = model.forward_graph(&mut g, images, feats)?;
    let gts: Vec<&Trajectory> = samples.iter().map(|s| &s.ground_truth).collect();
    let bl = loss_graph(&mut g, out, &model.config.layout(), &gts, kind)?;
    Ok(g.value(bl.loss).item())
}
