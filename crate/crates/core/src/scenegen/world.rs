use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;

use crate::geom::{normalize_angle, Vec2};

use super::SceneError;

pub type LaneId = u32;

/// Points per quarter-circle connector.
const ARC_SEGMENTS: usize = 24;

/// A directed lane: traffic flows in polyline order.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneGeometry {
    pub lane_id: LaneId,
    pub centerline: Vec<Vec2>,
    pub width: f64,
}

impl LaneGeometry {
    pub fn new(lane_id: LaneId, centerline: Vec<Vec2>, width: f64) -> Result<Self, SceneError> {
        if centerline.len() < 2 {
            return Err(SceneError::InvalidGeometry(format!(
                "lane {lane_id} needs at least two points"
            )));
        }
        if centerline.windows(2).any(|w| w[0].distance(w[1]) < 1e-9) {
            return Err(SceneError::InvalidGeometry(format!(
                "lane {lane_id} has coincident consecutive points"
            )));
        }
        if !(width > 0.0) {
            return Err(SceneError::InvalidGeometry(format!(
                "lane {lane_id} width must be positive"
            )));
        }
        Ok(Self {
            lane_id,
            centerline,
            width,
        })
    }

    pub fn length(&self) -> f64 {
        self.centerline.windows(2).map(|w| w[0].distance(w[1])).sum()
    }

    /// Heading of the final centerline segment.
    pub fn end_heading(&self) -> f64 {
        let n = self.centerline.len();
        (self.centerline[n - 1] - self.centerline[n - 2]).angle()
    }
}

/// A polyline with cumulative arc length, used to move actors along routes.
#[derive(Debug, Clone)]
pub struct Path {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

impl Path {
    pub fn from_lanes<'a>(lanes: impl IntoIterator<Item = &'a LaneGeometry>) -> Self {
        let mut points: Vec<Vec2> = Vec::new();
        for lane in lanes {
            for p in &lane.centerline {
                if points.last().is_none_or(|q| q.distance(*p) > 1e-9) {
                    points.push(*p);
                }
            }
        }
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in points.windows(2) {
            acc += w[0].distance(w[1]);
            cumulative.push(acc);
        }
        Self { points, cumulative }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }

    fn segment(&self, s: f64) -> usize {
        let n = self.points.len();
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).expect("finite arc length"))
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    /// Position and tangent heading at arc length `s` (clamped to the path).
    pub fn pose_at(&self, s: f64) -> (Vec2, f64) {
        let s = s.clamp(0.0, self.length());
        let i = self.segment(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let seg = b - a;
        let len = seg.norm();
        let t = ((s - self.cumulative[i]) / len).clamp(0.0, 1.0);
        (a + seg * t, seg.angle())
    }
}

/// One scripted behavior: the lanes taken after the start lane and an optional
/// speed the actor converges to after its decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub name: String,
    pub route: Vec<LaneId>,
    pub target_speed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorSpec {
    pub actor_id: u64,
    pub start_lane: LaneId,
    /// Arc length along the start lane at tick 0.
    pub start_s: f64,
    /// Start offsets are drawn uniformly from `[-start_jitter, start_jitter]`.
    pub start_jitter: f64,
    pub speed: f64,
    /// Standard deviation of the per-rollout speed noise, as a fraction of `speed`.
    pub speed_noise: f64,
    /// Limit on longitudinal acceleration when tracking a target speed.
    pub max_accel: f64,
    /// Arc length along the start lane where the policy is drawn.
    pub decision_s: f64,
    pub policies: Vec<Policy>,
    pub weights: Vec<f64>,
    pub bbox_length: f64,
    pub bbox_width: f64,
}

impl ActorSpec {
    pub fn new(actor_id: u64, start_lane: LaneId, start_s: f64, speed: f64) -> Self {
        Self {
            actor_id,
            start_lane,
            start_s,
            start_jitter: 0.0,
            speed,
            speed_noise: 0.05,
            max_accel: 2.0,
            decision_s: start_s,
            policies: vec![Policy {
                name: "keep".into(),
                route: Vec::new(),
                target_speed: None,
            }],
            weights: vec![1.0],
            bbox_length: 4.5,
            bbox_width: 2.0,
        }
    }

    pub fn with_policies(mut self, policies: Vec<(Policy, f64)>) -> Self {
        let (p, w) = policies.into_iter().unzip();
        self.policies = p;
        self.weights = w;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub lanes: Vec<LaneGeometry>,
    pub successors: BTreeMap<LaneId, Vec<LaneId>>,
    pub actors: Vec<ActorSpec>,
}

impl Scenario {
    pub fn lane(&self, id: LaneId) -> Option<&LaneGeometry> {
        self.lanes.iter().find(|l| l.lane_id == id)
    }

    pub fn successors_of(&self, id: LaneId) -> &[LaneId] {
        self.successors.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The lane followed by its chain of successors while the chain does not branch.
    pub fn successor_path(&self, id: LaneId) -> Vec<LaneId> {
        let mut out = vec![id];
        let mut cur = id;
        while let [next] = self.successors_of(cur) {
            if out.contains(next) {
                break;
            }
            out.push(*next);
            cur = *next;
        }
        out
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for (from, tos) in &self.successors {
            for id in std::iter::once(from).chain(tos) {
                if self.lane(*id).is_none() {
                    return Err(SceneError::UnknownLane(*id));
                }
            }
        }
        for actor in &self.actors {
            self.validate_actor(actor)?;
        }
        Ok(())
    }

    pub fn validate_actor(&self, actor: &ActorSpec) -> Result<(), SceneError> {
        let lane = self
            .lane(actor.start_lane)
            .ok_or(SceneError::UnknownLane(actor.start_lane))?;
        if actor.policies.is_empty() || actor.policies.len() != actor.weights.len() {
            return Err(SceneError::InvalidActor(format!(
                "actor {} needs one weight per policy",
                actor.actor_id
            )));
        }
        let total: f64 = actor.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || actor.weights.iter().any(|w| *w < 0.0) {
            return Err(SceneError::InvalidActor(format!(
                "actor {} policy weights must be non-negative and sum to 1 (got {total})",
                actor.actor_id
            )));
        }
        if actor.decision_s > lane.length() {
            return Err(SceneError::InvalidActor(format!(
                "actor {} decides after leaving its start lane",
                actor.actor_id
            )));
        }
        if !(actor.speed >= 0.0 && actor.bbox_length > 0.0 && actor.bbox_width > 0.0) {
            return Err(SceneError::InvalidActor(format!(
                "actor {} has invalid speed or box",
                actor.actor_id
            )));
        }
        for policy in &actor.policies {
            let mut prev = actor.start_lane;
            for next in &policy.route {
                if !self.successors_of(prev).contains(next) {
                    return Err(SceneError::InvalidActor(format!(
                        "policy '{}' steps from lane {prev} to non-successor {next}",
                        policy.name
                    )));
                }
                prev = *next;
            }
        }
        Ok(())
    }
}

/// Lane ids used by [`build_intersection`].
pub mod lane_ids {
    use super::LaneId;
    pub const APPROACH: LaneId = 0;
    pub const STRAIGHT: LaneId = 1;
    pub const RIGHT_CONNECTOR: LaneId = 2;
    pub const RIGHT_ARM: LaneId = 3;
    pub const LEFT_CONNECTOR: LaneId = 4;
    pub const LEFT_ARM: LaneId = 5;
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionLayout {
    pub arm_length: f64,
    pub lane_width: f64,
    pub left_turn: bool,
}

impl IntersectionLayout {
    pub fn right_radius(&self) -> f64 {
        3.0 * self.lane_width
    }

    pub fn left_radius(&self) -> f64 {
        5.0 * self.lane_width
    }
}

/// Quarter-circle from the junction (origin, heading +x) turning left (`sign = 1`)
/// or right (`sign = -1`).
fn quarter_arc(radius: f64, sign: f64) -> Vec<Vec2> {
    (0..=ARC_SEGMENTS)
        .map(|i| {
            let phi = FRAC_PI_2 * i as f64 / ARC_SEGMENTS as f64;
            Vec2::new(radius * phi.sin(), sign * radius * (1.0 - phi.cos()))
        })
        .collect()
}

/// Approach lane ending at the origin heading +x, with straight and right-turn
/// successors (plus left when configured). Actors are added by the caller.
pub fn build_intersection(layout: &IntersectionLayout) -> Result<Scenario, SceneError> {
    use lane_ids::*;
    let IntersectionLayout {
        arm_length: arm,
        lane_width: w,
        ..
    } = *layout;
    if !(arm > 0.0 && w > 0.0) {
        return Err(SceneError::InvalidGeometry(format!(
            "arm length and lane width must be positive (got {arm}, {w})"
        )));
    }
    let rr = layout.right_radius();
    let mut lanes = vec![
        LaneGeometry::new(APPROACH, vec![Vec2::new(-arm, 0.0), Vec2::ZERO], w)?,
        LaneGeometry::new(STRAIGHT, vec![Vec2::ZERO, Vec2::new(arm, 0.0)], w)?,
        LaneGeometry::new(RIGHT_CONNECTOR, quarter_arc(rr, -1.0), w)?,
        LaneGeometry::new(
            RIGHT_ARM,
            vec![Vec2::new(rr, -rr), Vec2::new(rr, -rr - arm)],
            w,
        )?,
    ];
    let mut successors = BTreeMap::new();
    let mut from_approach = vec![STRAIGHT, RIGHT_CONNECTOR];
    successors.insert(RIGHT_CONNECTOR, vec![RIGHT_ARM]);
    if layout.left_turn {
        let lr = layout.left_radius();
        lanes.push(LaneGeometry::new(LEFT_CONNECTOR, quarter_arc(lr, 1.0), w)?);
        lanes.push(LaneGeometry::new(
            LEFT_ARM,
            vec![Vec2::new(lr, lr), Vec2::new(lr, lr + arm)],
            w,
        )?);
        from_approach.push(LEFT_CONNECTOR);
        successors.insert(LEFT_CONNECTOR, vec![LEFT_ARM]);
    }
    successors.insert(APPROACH, from_approach);
    Ok(Scenario {
        lanes,
        successors,
        actors: Vec::new(),
    })
}

/// Straight-plus-right-turn intersection without a left turn.
pub fn build_t_intersection(arm_length: f64, lane_width: f64) -> Result<Scenario, SceneError> {
    build_intersection(&IntersectionLayout {
        arm_length,
        lane_width,
        left_turn: false,
    })
}

/// Single straight lane from the origin along +x.
pub fn build_straight_road(length: f64, lane_width: f64) -> Result<Scenario, SceneError> {
    if !(length > 0.0 && lane_width > 0.0) {
        return Err(SceneError::InvalidGeometry(format!(
            "road length and width must be positive (got {length}, {lane_width})"
        )));
    }
    Ok(Scenario {
        lanes: vec![LaneGeometry::new(
            0,
            vec![Vec2::ZERO, Vec2::new(length, 0.0)],
            lane_width,
        )?],
        successors: BTreeMap::new(),
        actors: Vec::new(),
    })
}

/// Bearing of a lane's end point as seen from its start point.
pub fn lane_chord_bearing(lane: &LaneGeometry) -> f64 {
    let first = lane.centerline[0];
    let last = *lane.centerline.last().expect("lane has points");
    normalize_angle((last - first).angle())
}
