use crate::raster::RasterConfig;

use super::world::{build_straight_road, build_t_intersection, lane_ids, ActorSpec, Policy, Scenario};
use super::{DatasetRecipe, ExtractConfig, SceneError};

/// A single actor approaching a T-junction that goes straight or turns right.
///
/// Samples are taken between `max_distance` and `min_distance` meters before
/// the junction; the route is drawn at `min_distance`, after the last sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TIntersectionPreset {
    pub arm_length: f64,
    pub lane_width: f64,
    pub speed: f64,
    pub speed_noise: f64,
    pub max_distance: f64,
    pub min_distance: f64,
    pub start_jitter: f64,
    /// Probability of the right turn.
    pub right_fraction: f64,
    pub episodes: usize,
    pub seed: u64,
    pub stride: usize,
    pub raster: RasterConfig,
    pub horizon: usize,
    pub dt: f64,
}

/// Compact 32 x 32 raster at 2 m per pixel.
pub fn compact_raster() -> RasterConfig {
    RasterConfig {
        height: 32,
        width: 32,
        resolution: 2.0,
        ..RasterConfig::default()
    }
}

impl Default for TIntersectionPreset {
    fn default() -> Self {
        Self {
            arm_length: 120.0,
            lane_width: 3.5,
            speed: 10.0,
            speed_noise: 0.05,
            max_distance: 35.0,
            min_distance: 5.0,
            start_jitter: 3.0,
            right_fraction: 0.5,
            episodes: 100,
            seed: 7,
            stride: 3,
            raster: compact_raster(),
            horizon: crate::geom::DEFAULT_HORIZON,
            dt: crate::geom::DEFAULT_DT,
        }
    }
}

fn check(cond: bool, msg: &str) -> Result<(), SceneError> {
    if cond {
        Ok(())
    } else {
        Err(SceneError::InvalidConfig(msg.to_string()))
    }
}

impl TIntersectionPreset {
    pub fn scenario(&self) -> Result<Scenario, SceneError> {
        check(
            (0.0..=1.0).contains(&self.right_fraction),
            "right_fraction must be in [0, 1]",
        )?;
        check(
            self.min_distance >= 0.0 && self.max_distance > self.min_distance,
            "need 0 <= min_distance < max_distance",
        )?;
        check(
            self.max_distance + self.start_jitter < self.arm_length,
            "start must lie on the approach lane",
        )?;
        let mut scenario = build_t_intersection(self.arm_length, self.lane_width)?;
        let straight = Policy {
            name: "straight".into(),
            route: vec![lane_ids::STRAIGHT],
            target_speed: None,
        };
        let right = Policy {
            name: "right".into(),
            route: vec![lane_ids::RIGHT_CONNECTOR, lane_ids::RIGHT_ARM],
            target_speed: None,
        };
        let mut actor = ActorSpec::new(
            1,
            lane_ids::APPROACH,
            self.arm_length - self.max_distance,
            self.speed,
        )
        .with_policies(vec![(straight, 1.0 - self.right_fraction), (right, self.right_fraction)]);
        actor.speed_noise = self.speed_noise;
        actor.start_jitter = self.start_jitter;
        actor.decision_s = self.arm_length - self.min_distance;
        scenario.actors.push(actor);
        Ok(scenario)
    }

    pub fn recipe(&self) -> Result<DatasetRecipe, SceneError> {
        let travel = self.max_distance + self.start_jitter;
        let approach_ticks = (travel / (self.speed * 0.8) / self.dt).ceil() as usize;
        Ok(DatasetRecipe {
            scenario: self.scenario()?,
            episodes: self.episodes,
            seed: self.seed,
            ticks: approach_ticks + self.horizon + 1,
            raster: self.raster.clone(),
            extract: ExtractConfig {
                horizon: self.horizon,
                dt: self.dt,
                stride: self.stride,
                before_decision: true,
                ..ExtractConfig::default()
            },
        })
    }
}

/// A single actor on a straight road that speeds up or slows down after the
/// sampled window.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedChoicePreset {
    pub lane_width: f64,
    pub speed: f64,
    pub speed_noise: f64,
    pub fast_speed: f64,
    pub slow_speed: f64,
    pub fast_fraction: f64,
    pub max_accel: f64,
    /// Distance travelled before the speed policy is drawn.
    pub decision_after: f64,
    pub start_jitter: f64,
    pub episodes: usize,
    pub seed: u64,
    pub stride: usize,
    pub raster: RasterConfig,
    pub horizon: usize,
    pub dt: f64,
}

impl Default for SpeedChoicePreset {
    fn default() -> Self {
        Self {
            lane_width: 3.5,
            speed: 10.0,
            speed_noise: 0.05,
            fast_speed: 15.0,
            slow_speed: 5.0,
            fast_fraction: 0.5,
            max_accel: 2.5,
            decision_after: 25.0,
            start_jitter: 3.0,
            episodes: 100,
            seed: 11,
            stride: 3,
            raster: compact_raster(),
            horizon: crate::geom::DEFAULT_HORIZON,
            dt: crate::geom::DEFAULT_DT,
        }
    }
}

impl SpeedChoicePreset {
    const START: f64 = 10.0;

    fn road_length(&self) -> f64 {
        let top = self.speed.max(self.fast_speed) * 1.2;
        Self::START + self.start_jitter + self.decision_after + top * self.horizon as f64 * self.dt + 50.0
    }

    pub fn scenario(&self) -> Result<Scenario, SceneError> {
        check((0.0..=1.0).contains(&self.fast_fraction), "fast_fraction must be in [0, 1]")?;
        check(self.decision_after > 0.0, "decision_after must be positive")?;
        check(self.start_jitter < Self::START, "start_jitter must be below 10 m")?;
        let mut scenario = build_straight_road(self.road_length(), self.lane_width)?;
        let fast = Policy {
            name: "fast".into(),
            route: Vec::new(),
            target_speed: Some(self.fast_speed),
        };
        let slow = Policy {
            name: "slow".into(),
            route: Vec::new(),
            target_speed: Some(self.slow_speed),
        };
        let mut actor = ActorSpec::new(1, 0, Self::START, self.speed)
            .with_policies(vec![(fast, self.fast_fraction), (slow, 1.0 - self.fast_fraction)]);
        actor.speed_noise = self.speed_noise;
        actor.start_jitter = self.start_jitter;
        actor.max_accel = self.max_accel;
        actor.decision_s = Self::START + self.decision_after;
        scenario.actors.push(actor);
        Ok(scenario)
    }

    pub fn recipe(&self) -> Result<DatasetRecipe, SceneError> {
        let travel = self.decision_after + self.start_jitter;
        let approach_ticks = (travel / (self.speed * 0.8) / self.dt).ceil() as usize;
        Ok(DatasetRecipe {
            scenario: self.scenario()?,
            episodes: self.episodes,
            seed: self.seed,
            ticks: approach_ticks + self.horizon + 1,
            raster: self.raster.clone(),
            extract: ExtractConfig {
                horizon: self.horizon,
                dt: self.dt,
                stride: self.stride,
                before_decision: true,
                ..ExtractConfig::default()
            },
        })
    }
}
