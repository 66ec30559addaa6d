use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::geom::{normalize_angle, ActorState};

use super::world::{ActorSpec, LaneId, Path, Scenario};
use super::SceneError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub ticks: usize,
    pub dt: f64,
}

/// Simulated states of one actor, one per tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub actor_id: u64,
    pub dt: f64,
    pub states: Vec<ActorState>,
    /// Index into the actor's policy list, once drawn.
    pub policy: Option<usize>,
    pub decision_tick: Option<usize>,
    /// First lane of the chosen route, if the route leaves the start lane.
    pub followed_lane: Option<LaneId>,
}

/// Mixes a dataset seed with an actor id into an independent stream seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rolls out one scripted actor. Deterministic in `(scenario, actor, seed)`.
///
/// The actor moves along its start lane at a noisy nominal speed; once it passes
/// `decision_s` a policy is drawn from the mix, fixing the route past the start
/// lane and, optionally, a target speed tracked under `max_accel`.
pub fn simulate_actor(
    scenario: &Scenario,
    spec: &ActorSpec,
    seed: u64,
    config: SimConfig,
) -> Result<Rollout, SceneError> {
    scenario.validate_actor(spec)?;
    if !(config.dt > 0.0) {
        return Err(SceneError::InvalidConfig(format!("dt must be positive, got {}", config.dt)));
    }
    let start_lane = scenario
        .lane(spec.start_lane)
        .ok_or(SceneError::UnknownLane(spec.start_lane))?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, spec.actor_id));

    let noise = if spec.speed_noise > 0.0 {
        let sigma = spec.speed_noise;
        let e: f64 = Normal::new(0.0, sigma).expect("positive sigma").sample(&mut rng);
        e.clamp(-3.0 * sigma, 3.0 * sigma)
    } else {
        0.0
    };
    let jitter = if spec.start_jitter > 0.0 {
        rng.gen_range(-spec.start_jitter..=spec.start_jitter)
    } else {
        0.0
    };
    let weights = WeightedIndex::new(&spec.weights)
        .map_err(|e| SceneError::InvalidActor(format!("actor {}: {e}", spec.actor_id)))?;

    let dt = config.dt;
    let mut speed = spec.speed * (1.0 + noise);
    let mut s = spec.start_s + jitter;
    if s < 0.0 || s > start_lane.length() {
        return Err(SceneError::OffMap { tick: 0 });
    }
    let mut path = Path::from_lanes([start_lane]);
    let mut policy = None;
    let mut decision_tick = None;
    let mut target_speed = None;
    let mut accel = 0.0;
    let mut states = Vec::with_capacity(config.ticks);

    for tick in 0..config.ticks {
        if policy.is_none() && s >= spec.decision_s {
            let idx = weights.sample(&mut rng);
            let chosen = &spec.policies[idx];
            let mut lanes = vec![start_lane];
            for id in &chosen.route {
                lanes.push(scenario.lane(*id).ok_or(SceneError::UnknownLane(*id))?);
            }
            path = Path::from_lanes(lanes);
            target_speed = chosen.target_speed;
            policy = Some(idx);
            decision_tick = Some(tick);
        }
        if s > path.length() + 1e-9 {
            return Err(SceneError::OffMap { tick });
        }
        let (position, heading) = path.pose_at(s);
        let (_, prev_heading) = path.pose_at(s - speed * dt);
        states.push(ActorState {
            actor_id: spec.actor_id,
            tick: tick as i64,
            position,
            velocity: speed,
            acceleration: accel,
            heading: normalize_angle(heading),
            heading_change_rate: normalize_angle(heading - prev_heading) / dt,
            bbox_length: spec.bbox_length,
            bbox_width: spec.bbox_width,
        });

        s += speed * dt;
        let next_speed = match target_speed {
            Some(target) => {
                let max_dv = spec.max_accel * dt;
                speed + (target - speed).clamp(-max_dv, max_dv)
            }
            None => speed,
        };
        accel = (next_speed - speed) / dt;
        speed = next_speed.max(0.0);
    }

    let followed_lane = policy.and_then(|i| spec.policies[i].route.first().copied());
    Ok(Rollout {
        actor_id: spec.actor_id,
        dt,
        states,
        policy,
        decision_tick,
        followed_lane,
    })
}

/// Simulates every actor of the scenario for one episode.
pub fn simulate_episode(
    scenario: &Scenario,
    seed: u64,
    config: SimConfig,
) -> Result<Vec<Rollout>, SceneError> {
    scenario
        .actors
        .iter()
        .map(|a| simulate_actor(scenario, a, seed, config))
        .collect()
}
