//! Synthetic scenes with scripted actors, sample extraction and dataset persistence.
//!
//! Branch and speed choices are drawn at a decision point the raster cannot
//! see, so the futures of samples taken before the junction are genuinely
//! multimodal with known mode frequencies.

mod dataset;
mod presets;
mod sim;
mod world;

use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

pub use dataset::{read_dataset, write_dataset, DatasetError, DatasetMeta, FORMAT_VERSION};
pub use presets::{compact_raster, SpeedChoicePreset, TIntersectionPreset};
pub use sim::{simulate_actor, simulate_episode, stream_seed, Rollout, SimConfig};
pub use world::{
    build_intersection, build_straight_road, build_t_intersection, lane_chord_bearing, lane_ids,
    ActorSpec, IntersectionLayout, LaneGeometry, LaneId, Path, Policy, Scenario,
};

use crate::geom::{to_actor_frame, trajectory_endpoint_bearing, ActorState, Trajectory, Vec2};
use crate::raster::{rasterize, rasterize_with_lane, RasterConfig, RasterError, RasterImage, SceneView};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("unknown lane id {0}")]
    UnknownLane(LaneId),
    #[error("invalid actor: {0}")]
    InvalidActor(String),
    #[error("actor left every lane at tick {tick}")]
    OffMap { tick: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Maneuver {
    Left,
    Straight,
    Right,
}

impl Maneuver {
    pub const ALL: [Maneuver; 3] = [Maneuver::Left, Maneuver::Straight, Maneuver::Right];

    pub fn code(self) -> u8 {
        match self {
            Maneuver::Left => 0,
            Maneuver::Straight => 1,
            Maneuver::Right => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Maneuver::Left),
            1 => Some(Maneuver::Straight),
            2 => Some(Maneuver::Right),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Maneuver::Left => "left",
            Maneuver::Straight => "straight",
            Maneuver::Right => "right",
        }
    }
}

/// Default half-width of the "straight" cone for maneuver labels: 10°.
pub const STRAIGHT_THRESHOLD: f64 = 10.0 * PI / 180.0;

/// Labels a trajectory by its endpoint bearing: within `threshold` of the
/// forward axis is straight, otherwise the sign picks left or right.
/// Degenerate (near-zero) endpoints count as straight.
pub fn classify_maneuver(t: &Trajectory, threshold: f64) -> Maneuver {
    match trajectory_endpoint_bearing(t) {
        Ok(b) if b.abs() < threshold => Maneuver::Straight,
        Ok(b) if b > 0.0 => Maneuver::Left,
        Ok(_) => Maneuver::Right,
        Err(_) => Maneuver::Straight,
    }
}

/// One training or test record in the frame of the target actor at its tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub raster: RasterImage,
    /// Speed (m/s), acceleration (m/s²) and heading-change rate (rad/s).
    pub state_features: [f64; 3],
    pub ground_truth: Trajectory,
    pub followed_lane_id: Option<LaneId>,
    pub maneuver: Maneuver,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Emit every `stride`-th eligible tick.
    pub stride: usize,
    pub first_tick: usize,
    pub last_tick: Option<usize>,
    /// Only ticks strictly before the actor's policy decision.
    pub before_decision: bool,
    /// Windows where the actor never reaches this speed are dropped.
    pub static_speed: f64,
    pub straight_threshold: f64,
    /// Paint the followed lane into the lane-following channel.
    pub lane_following: bool,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            horizon: crate::geom::DEFAULT_HORIZON,
            dt: crate::geom::DEFAULT_DT,
            stride: 1,
            first_tick: 0,
            last_tick: None,
            before_decision: false,
            static_speed: 0.1,
            straight_threshold: STRAIGHT_THRESHOLD,
            lane_following: false,
        }
    }
}

/// Rounds through `f32` so persisted records reload bit-identically.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

/// Where a sample came from inside an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOrigin {
    pub actor_index: usize,
    pub tick: usize,
}

fn step_ratio(rollout_dt: f64, dt: f64) -> Result<usize, SceneError> {
    let ratio = dt / rollout_dt;
    let step = ratio.round();
    if step < 1.0 || (ratio - step).abs() > 1e-9 {
        return Err(SceneError::InvalidConfig(format!(
            "sample dt {dt} is not a positive multiple of the rollout dt {rollout_dt}"
        )));
    }
    Ok(step as usize)
}

/// Ticks of each rollout that yield a sample under `cfg`, in emission order.
pub fn eligible_ticks(rollouts: &[Rollout], cfg: &ExtractConfig) -> Result<Vec<SampleOrigin>, SceneError> {
    if cfg.horizon == 0 || cfg.stride == 0 {
        return Err(SceneError::InvalidConfig("horizon and stride must be positive".into()));
    }
    let mut out = Vec::new();
    for (actor_index, r) in rollouts.iter().enumerate() {
        let step = step_ratio(r.dt, cfg.dt)?;
        let span = cfg.horizon * step;
        if r.states.len() <= span {
            continue;
        }
        let mut last = r.states.len() - 1 - span;
        if let Some(l) = cfg.last_tick {
            last = last.min(l);
        }
        if cfg.before_decision {
            match r.decision_tick {
                Some(0) => continue,
                Some(d) => last = last.min(d - 1),
                None => {}
            }
        }
        let mut tick = cfg.first_tick;
        while tick <= last {
            let window = &r.states[tick..=tick + span];
            if window.iter().any(|s| s.velocity >= cfg.static_speed) {
                out.push(SampleOrigin { actor_index, tick });
            }
            tick += cfg.stride;
        }
    }
    Ok(out)
}

/// States of every actor alive at `tick`.
pub fn states_at(rollouts: &[Rollout], tick: usize) -> Vec<&ActorState> {
    rollouts.iter().filter_map(|r| r.states.get(tick)).collect()
}

/// Builds the sample for one origin. The raster shows every actor alive at that tick.
pub fn build_sample(
    scenario: &Scenario,
    rollouts: &[Rollout],
    origin: SampleOrigin,
    raster: &RasterConfig,
    cfg: &ExtractConfig,
) -> Result<Sample, SceneError> {
    let r = &rollouts[origin.actor_index];
    let step = step_ratio(r.dt, cfg.dt)?;
    let state = &r.states[origin.tick];
    let points: Vec<Vec2> = (1..=cfg.horizon)
        .map(|j| {
            let p = to_actor_frame(state, r.states[origin.tick + j * step].position);
            Vec2::new(f32_exact(p.x), f32_exact(p.y))
        })
        .collect();
    let ground_truth = Trajectory::new(points, cfg.dt).map_err(|e| SceneError::InvalidConfig(e.to_string()))?;
    let view = SceneView {
        scenario,
        actors: states_at(rollouts, origin.tick),
    };
    let image = match (cfg.lane_following, r.followed_lane) {
        (true, Some(lane)) => rasterize_with_lane(&view, state.actor_id, lane, raster)?,
        (true, None) => rasterize_with_lane(&view, state.actor_id, scenario_start_lane(scenario, state), raster)?,
        (false, _) => rasterize(&view, state.actor_id, raster)?,
    };
    let features = state.features().map(f32_exact);
    Ok(Sample {
        raster: image,
        state_features: features,
        maneuver: classify_maneuver(&ground_truth, cfg.straight_threshold),
        ground_truth,
        followed_lane_id: r.followed_lane,
    })
}

fn scenario_start_lane(scenario: &Scenario, state: &ActorState) -> LaneId {
    scenario
        .actors
        .iter()
        .find(|a| a.actor_id == state.actor_id)
        .map(|a| a.start_lane)
        .unwrap_or(0)
}

/// Pairs each eligible tick with its next `horizon` positions in that tick's
/// actor frame. Static windows are dropped; an empty result is not an error.
pub fn extract_samples(
    scenario: &Scenario,
    rollouts: &[Rollout],
    raster: &RasterConfig,
    cfg: &ExtractConfig,
) -> Result<Vec<Sample>, SceneError> {
    eligible_ticks(rollouts, cfg)?
        .into_par_iter()
        .map(|o| build_sample(scenario, rollouts, o, raster, cfg))
        .collect()
}

/// A full generation recipe: episodes of the scenario simulated under derived seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecipe {
    pub scenario: Scenario,
    pub episodes: usize,
    pub seed: u64,
    pub ticks: usize,
    pub raster: RasterConfig,
    pub extract: ExtractConfig,
}

impl DatasetRecipe {
    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            ticks: self.ticks,
            dt: self.extract.dt,
        }
    }

    pub fn episode(&self, index: usize) -> Result<Vec<Rollout>, SceneError> {
        simulate_episode(&self.scenario, stream_seed(self.seed, index as u64), self.sim_config())
    }

    /// Every sample origin as `(episode, origin)` in emission order.
    pub fn origins(&self) -> Result<Vec<(usize, SampleOrigin)>, SceneError> {
        let mut out = Vec::new();
        for e in 0..self.episodes {
            let rollouts = self.episode(e)?;
            out.extend(eligible_ticks(&rollouts, &self.extract)?.into_iter().map(|o| (e, o)));
        }
        Ok(out)
    }

    pub fn generate(&self) -> Result<Vec<Sample>, SceneError> {
        self.scenario.validate()?;
        let per_episode: Result<Vec<Vec<Sample>>, SceneError> = (0..self.episodes)
            .into_par_iter()
            .map(|e| {
                let rollouts = self.episode(e)?;
                let origins = eligible_ticks(&rollouts, &self.extract)?;
                origins
                    .into_iter()
                    .map(|o| build_sample(&self.scenario, &rollouts, o, &self.raster, &self.extract))
                    .collect()
            })
            .collect();
        Ok(per_episode?.into_iter().flatten().collect())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            horizon: self.extract.horizon,
            dt: self.extract.dt,
            channels: self.raster.channel_count(),
            height: self.raster.height,
            width: self.raster.width,
            resolution: self.raster.resolution,
        }
    }
}
