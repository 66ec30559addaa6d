//! Kinematic propagation baseline and the single-trajectory model config.

use crate::geom::{ActorState, MultimodalPrediction, Trajectory, Vec2};
use crate::eval::{EvalError, Predictor};
use crate::model::{HeadKind, ModelConfig};
use crate::scenegen::Sample;

/// Rolls a constant turn-rate and acceleration model forward `horizon` steps
/// and returns the positions in the actor frame at the start. Speed is not
/// allowed to drop below zero.
pub fn propagate_state(state: &ActorState, horizon: usize, dt: f64) -> Trajectory {
    propagate_features(state.features(), horizon, dt)
}

/// Same as [`propagate_state`], from `[speed, acceleration, heading rate]`.
pub fn propagate_features(features: [f64; 3], horizon: usize, dt: f64) -> Trajectory {
    let [mut speed, accel, omega] = features;
    let mut heading = 0.0f64;
    let mut pos = Vec2::ZERO;
    let mut points = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        pos = pos + Vec2::from_angle(heading) * (speed * dt);
        speed = (speed + accel * dt).max(0.0);
        heading += omega * dt;
        points.push(pos);
    }
    Trajectory::new(points, dt).expect("finite kinematic rollout")
}

/// Single-mode regression model over the default architecture.
pub fn stp_config() -> ModelConfig {
    stp_from(&ModelConfig::default())
}

/// `base` with one mode and a regression head.
pub fn stp_from(base: &ModelConfig) -> ModelConfig {
    ModelConfig {
        modes: 1,
        head: HeadKind::Regression,
        ..base.clone()
    }
}

/// Propagates each sample's state scalars over its ground-truth horizon.
#[derive(Debug, Clone, Copy, Default)]
pub struct PropagationPredictor;

impl Predictor for PropagationPredictor {
    fn name(&self) -> String {
        "propagation".into()
    }

    fn predict_batch(&self, samples: &[&Sample]) -> Result<Vec<MultimodalPrediction>, EvalError> {
        Ok(samples
            .iter()
            .map(|s| {
                let gt = &s.ground_truth;
                MultimodalPrediction::single(propagate_features(s.state_features, gt.horizon(), gt.dt()))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{displacement_loss, me_loss, mtp_loss, MtpConfig};

    fn state(v: f64, a: f64, w: f64) -> ActorState {
        let mut s = ActorState::vehicle(1, Vec2::new(5.0, -3.0), 0.7, v);
        s.acceleration = a;
        s.heading_change_rate = w;
        s
    }

    #[test]
    fn uniform_motion() {
        let t = propagate_state(&state(10.0, 0.0, 0.0), 60, 0.1);
        assert!((t.last().x - 60.0).abs() < 1e-9 && t.last().y == 0.0);
        for (k, p) in t.points().iter().enumerate() {
            assert!((p.x - (k + 1) as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_acceleration_discrete_sum() {
        let t = propagate_state(&state(10.0, 1.0, 0.0), 60, 0.1);
        let oracle: f64 = (0..60).map(|k| (10.0 + 0.1 * k as f64) * 0.1).sum();
        assert!((oracle - 77.7).abs() < 1e-9);
        assert!((t.last().x - oracle).abs() < 1e-12);
    }

    #[test]
    fn positive_turn_rate_curves_left() {
        // pi/3 rad/s completes one revolution in 6 s, so every point before that lies left
        let t = propagate_state(&state(10.0, 0.0, std::f64::consts::PI / 3.0), 60, 0.1);
        assert!(t.points()[1..59].iter().all(|p| p.y > 0.0));
        assert!(t.last().y.abs() < 1e-9);
        let half = propagate_state(&state(10.0, 0.0, std::f64::consts::PI / 3.0), 30, 0.1);
        assert!(half.last().y > 15.0);
    }

    #[test]
    fn braking_stops_at_zero_speed() {
        let t = propagate_state(&state(2.0, -4.0, 0.0), 30, 0.1);
        let end = t.last();
        assert!((t.points()[10].x - end.x).abs() < 1e-12);
    }

    #[test]
    fn converges_to_analytic_circle() {
        let (v, w, total) = (10.0, 0.15, 6.0);
        let coarse = propagate_state(&state(v, 0.0, w), 60, 0.1).last();
        let fine = propagate_state(&state(v, 0.0, w), 6000, 0.001).last();
        let r = v / w;
        let exact = Vec2::new(r * (w * total).sin(), r * (1.0 - (w * total).cos()));
        assert!(coarse.distance(fine) < 0.01 * fine.norm());
        assert!(fine.distance(exact) < 0.01 * exact.norm());
    }

    #[test]
    fn stp_losses_reduce_to_displacement() {
        let cfg = stp_config();
        assert_eq!(cfg.modes, 1);
        assert_eq!(cfg.head, HeadKind::Regression);
        let gt = propagate_state(&state(10.0, 0.0, 0.1), 20, 0.1);
        let pred = MultimodalPrediction::single(propagate_state(&state(9.0, 0.5, 0.0), 20, 0.1));
        let d = displacement_loss(&gt, &pred.modes[0]).unwrap();
        assert_eq!(me_loss(&gt, &pred).unwrap(), d);
        let cfg = MtpConfig {
            alpha: 1.3,
            ..MtpConfig::default()
        };
        assert!((mtp_loss(&gt, &pred, &cfg).unwrap().0 - 1.3 * d).abs() < 1e-12);
    }
}
