//! Planar geometry, actor kinematic state, trajectories and the actor-centric frame.
//!
//! The actor frame puts the origin at the bounding-box centroid, `x` along the
//! heading and `y` to the actor's left.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("trajectory endpoint is too close to the origin to define a bearing")]
    DegenerateTrajectory,
    #[error("trajectory must have at least one point")]
    EmptyTrajectory,
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("bounding box dimensions must be positive ({length} x {width})")]
    InvalidBox { length: f64, width: f64 },
}

/// Endpoints closer than this to the origin have no usable bearing.
pub const MIN_BEARING_NORM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Self::new(theta.cos(), theta.sin())
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counter-clockwise rotation by `theta`.
    pub fn rotate(self, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    /// Left-hand normal (rotation by +90°).
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut r = a.rem_euclid(two_pi);
    if r > PI {
        r -= two_pi;
    }
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if r <= -PI {
        r += two_pi;
    }
    r
}

/// Kinematic state of one tracked actor at one tick.
///
/// Speed and acceleration are scalars along the heading.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorState {
    pub actor_id: u64,
    pub tick: i64,
    pub position: Vec2,
    pub velocity: f64,
    pub acceleration: f64,
    pub heading: f64,
    pub heading_change_rate: f64,
    pub bbox_length: f64,
    pub bbox_width: f64,
}

impl ActorState {
    /// A 4.5 m x 2 m vehicle at `position` with the given heading and speed.
    pub fn vehicle(actor_id: u64, position: Vec2, heading: f64, velocity: f64) -> Self {
        Self {
            actor_id,
            tick: 0,
            position,
            velocity,
            acceleration: 0.0,
            heading: normalize_angle(heading),
            heading_change_rate: 0.0,
            bbox_length: 4.5,
            bbox_width: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.bbox_length > 0.0 && self.bbox_width > 0.0) {
            return Err(GeomError::InvalidBox {
                length: self.bbox_length,
                width: self.bbox_width,
            });
        }
        Ok(())
    }

    pub fn frame(&self) -> ActorFrame {
        ActorFrame::new(self.position, self.heading)
    }

    /// The scalar inputs fed to the network: speed, acceleration, heading-change rate.
    pub fn features(&self) -> [f64; 3] {
        [self.velocity, self.acceleration, self.heading_change_rate]
    }
}

/// Rigid transform between the global frame and an actor-centric frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorFrame {
    pub origin: Vec2,
    pub rotation: f64,
}

impl ActorFrame {
    pub fn new(origin: Vec2, rotation: f64) -> Self {
        Self {
            origin,
            rotation: normalize_angle(rotation),
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec2::ZERO, 0.0)
    }

    pub fn to_local(&self, global: Vec2) -> Vec2 {
        (global - self.origin).rotate(-self.rotation)
    }

    pub fn to_global(&self, local: Vec2) -> Vec2 {
        local.rotate(self.rotation) + self.origin
    }

    /// Heading expressed relative to the frame's forward axis.
    pub fn heading_to_local(&self, heading: f64) -> f64 {
        normalize_angle(heading - self.rotation)
    }
}

/// Expresses a global point in the frame of `state`.
pub fn to_actor_frame(state: &ActorState, point_global: Vec2) -> Vec2 {
    state.frame().to_local(point_global)
}

/// Inverse of [`to_actor_frame`].
pub fn from_actor_frame(state: &ActorState, point_local: Vec2) -> Vec2 {
    state.frame().to_global(point_local)
}

/// Fixed-step sequence of future positions in an actor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    points: Vec<Vec2>,
    dt: f64,
}

pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_HORIZON: usize = 60;

impl Trajectory {
    pub fn new(points: Vec<Vec2>, dt: f64) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyTrajectory);
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(GeomError::InvalidTimeStep(dt));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(GeomError::NonFinite(i));
        }
        Ok(Self { points, dt })
    }

    /// Builds a trajectory from interleaved `x0, y0, x1, y1, ...` values.
    pub fn from_flat(flat: &[f64], dt: f64) -> Result<Self, GeomError> {
        let points = flat.chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect();
        Self::new(points, dt)
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn horizon(&self) -> usize {
        self.points.len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn last(&self) -> Vec2 {
        *self.points.last().expect("trajectory is never empty")
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }
}

/// Bearing of the final waypoint as seen from the frame origin.
pub fn trajectory_endpoint_bearing(t: &Trajectory) -> Result<f64, GeomError> {
    let last = t.last();
    if last.norm() < MIN_BEARING_NORM {
        return Err(GeomError::DegenerateTrajectory);
    }
    Ok(last.angle())
}

/// Symmetric 2x2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    pub fn identity() -> Self {
        Self {
            xx: 1.0,
            xy: 0.0,
            yy: 1.0,
        }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    /// Log-density of a zero-mean Gaussian with this covariance at `r`.
    pub fn log_density(&self, r: Vec2) -> f64 {
        let det = self.det();
        let quad = (self.yy * r.x * r.x - 2.0 * self.xy * r.x * r.y + self.xx * r.y * r.y) / det;
        -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictionError {
    #[error("prediction needs at least one mode")]
    NoModes,
    #[error("{modes} modes but {probs} probabilities")]
    CountMismatch { modes: usize, probs: usize },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("probability {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("modes have inconsistent horizons")]
    HorizonMismatch,
    #[error("covariance at mode {mode}, step {step} is not positive definite")]
    NotPositiveDefinite { mode: usize, step: usize },
}

/// M candidate trajectories with probabilities, optionally with per-point covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalPrediction {
    pub modes: Vec<Trajectory>,
    pub probabilities: Vec<f64>,
    pub covariances: Option<Vec<Vec<Cov2>>>,
}

impl MultimodalPrediction {
    pub fn new(modes: Vec<Trajectory>, probabilities: Vec<f64>) -> Result<Self, PredictionError> {
        let p = Self {
            modes,
            probabilities,
            covariances: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_covariances(
        modes: Vec<Trajectory>,
        probabilities: Vec<f64>,
        covariances: Vec<Vec<Cov2>>,
    ) -> Result<Self, PredictionError> {
        let p = Self {
            modes,
            probabilities,
            covariances: Some(covariances),
        };
        p.validate()?;
        Ok(p)
    }

    /// A single mode with probability one.
    pub fn single(mode: Trajectory) -> Self {
        Self {
            modes: vec![mode],
            probabilities: vec![1.0],
            covariances: None,
        }
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn validate(&self) -> Result<(), PredictionError> {
        if self.modes.is_empty() {
            return Err(PredictionError::NoModes);
        }
        if self.modes.len() != self.probabilities.len() {
            return Err(PredictionError::CountMismatch {
                modes: self.modes.len(),
                probs: self.probabilities.len(),
            });
        }
        if let Some(p) = self
            .probabilities
            .iter()
            .find(|p| !(0.0..=1.0).contains(*p))
        {
            return Err(PredictionError::OutOfRange(*p));
        }
        let total: f64 = self.probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(PredictionError::NotNormalized(total));
        }
        let h = self.modes[0].horizon();
        if self.modes.iter().any(|m| m.horizon() != h) {
            return Err(PredictionError::HorizonMismatch);
        }
        if let Some(covs) = &self.covariances {
            if covs.len() != self.modes.len() {
                return Err(PredictionError::HorizonMismatch);
            }
            for (m, per_mode) in covs.iter().enumerate() {
                if per_mode.len() != h {
                    return Err(PredictionError::HorizonMismatch);
                }
                if let Some(step) = per_mode.iter().position(|c| !(c.det() > 0.0 && c.xx > 0.0)) {
                    return Err(PredictionError::NotPositiveDefinite { mode: m, step });
                }
            }
        }
        Ok(())
    }

    /// Index of the highest-probability mode, lowest index on ties.
    pub fn most_likely(&self) -> usize {
        let mut best = 0;
        for (i, p) in self.probabilities.iter().enumerate() {
            if *p > self.probabilities[best] {
                best = i;
            }
        }
        best
    }
}
