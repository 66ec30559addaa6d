//! Actor-centric bird's-eye-view rasterization.
//!
//! Each channel is a binary semantic layer. The target actor faces image "up"
//! and sits `anchor` of the image height above the bottom edge. A pixel is set
//! when its center falls inside the geometry; nothing is anti-aliased.

use std::fs;
use std::io;
use std::path::Path as FsPath;

use thiserror::Error;

use crate::geom::{ActorFrame, ActorState, Vec2};
use crate::scenegen::{LaneGeometry, LaneId, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RasterError {
    #[error("invalid raster config: {0}")]
    InvalidConfig(String),
    #[error("target actor {0} is not in the scene")]
    TargetMissing(u64),
    #[error("unknown lane id {0}")]
    UnknownLane(LaneId),
    #[error("channel {0} out of range")]
    BadChannel(usize),
    #[error("io error: {0}")]
    Io(String),
}

impl From<io::Error> for RasterError {
    fn from(e: io::Error) -> Self {
        RasterError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    LaneSurface,
    LaneBoundaries,
    TargetActor,
    OtherActors,
    FollowedLane,
}

impl Layer {
    pub fn name(self) -> &'static str {
        match self {
            Layer::LaneSurface => "lane_surface",
            Layer::LaneBoundaries => "lane_boundaries",
            Layer::TargetActor => "target_actor",
            Layer::OtherActors => "other_actors",
            Layer::FollowedLane => "followed_lane",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [
            Layer::LaneSurface,
            Layer::LaneBoundaries,
            Layer::TargetActor,
            Layer::OtherActors,
            Layer::FollowedLane,
        ]
        .into_iter()
        .find(|l| l.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterConfig {
    pub height: usize,
    pub width: usize,
    /// Meters per pixel.
    pub resolution: f64,
    /// Fraction of the image height between the bottom edge and the actor centroid.
    pub anchor: f64,
    /// Semantic layers in channel order; the followed-lane layer is appended
    /// separately when `include_lf_layer` is set.
    pub layers: Vec<Layer>,
    pub include_lf_layer: bool,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            resolution: 0.5,
            anchor: 0.25,
            layers: vec![
                Layer::LaneSurface,
                Layer::LaneBoundaries,
                Layer::TargetActor,
                Layer::OtherActors,
            ],
            include_lf_layer: false,
        }
    }
}

impl RasterConfig {
    /// The full-resolution preset: 300 x 300 pixels at 0.2 m.
    pub fn full_scale() -> Self {
        Self {
            height: 300,
            width: 300,
            resolution: 0.2,
            ..Self::default()
        }
    }

    pub fn channel_count(&self) -> usize {
        self.layers.len() + usize::from(self.include_lf_layer)
    }

    pub fn channel_of(&self, layer: Layer) -> Option<usize> {
        if layer == Layer::FollowedLane {
            return self.include_lf_layer.then_some(self.layers.len());
        }
        self.layers.iter().position(|l| *l == layer)
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        if self.height == 0 || self.width == 0 {
            return Err(RasterError::InvalidConfig("raster must be non-empty".into()));
        }
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return Err(RasterError::InvalidConfig(format!(
                "resolution must be positive, got {}",
                self.resolution
            )));
        }
        if !(self.anchor > 0.0 && self.anchor < 1.0) {
            return Err(RasterError::InvalidConfig(format!(
                "anchor must lie in (0, 1), got {}",
                self.anchor
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if *l == Layer::FollowedLane {
                return Err(RasterError::InvalidConfig(
                    "the followed-lane layer is enabled through include_lf_layer".into(),
                ));
            }
            if self.layers[..i].contains(l) {
                return Err(RasterError::InvalidConfig(format!("layer {} listed twice", l.name())));
            }
        }
        Ok(())
    }

    /// Continuous pixel coordinates `(col, row)` of an actor-frame point; the
    /// center of pixel `(r, c)` is `(c + 0.5, r + 0.5)`.
    fn to_pixel(&self, local: Vec2) -> (f64, f64) {
        let col = self.width as f64 / 2.0 - local.y / self.resolution;
        let row = self.height as f64 * (1.0 - self.anchor) - local.x / self.resolution;
        (col, row)
    }

    /// Actor-frame position of the center of pixel `(row, col)`.
    pub fn pixel_center(&self, row: usize, col: usize) -> Vec2 {
        let res = self.resolution;
        let x = (self.height as f64 * (1.0 - self.anchor) - (row as f64 + 0.5)) * res;
        let y = (self.width as f64 / 2.0 - (col as f64 + 0.5)) * res;
        Vec2::new(x, y)
    }
}

/// A `channels x height x width` grid, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub data: Vec<f32>,
    /// Frame the raster was rendered in; unknown for rasters loaded from disk.
    pub frame: Option<ActorFrame>,
}

impl RasterImage {
    pub fn zeros(channels: usize, height: usize, width: usize, resolution: f64) -> Self {
        Self {
            channels,
            height,
            width,
            resolution,
            data: vec![0.0; channels * height * width],
            frame: None,
        }
    }

    pub fn from_parts(
        channels: usize,
        height: usize,
        width: usize,
        resolution: f64,
        data: Vec<f32>,
    ) -> Result<Self, RasterError> {
        if data.len() != channels * height * width {
            return Err(RasterError::InvalidConfig(format!(
                "data length {} != {channels}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RasterError::InvalidConfig("raster values must lie in [0, 1]".into()));
        }
        if !(resolution > 0.0) {
            return Err(RasterError::InvalidConfig("resolution must be positive".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            resolution,
            data,
            frame: None,
        })
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.height + row) * self.width + col]
    }

    pub fn count_nonzero(&self, c: usize) -> usize {
        self.channel(c).iter().filter(|v| **v != 0.0).count()
    }
}

/// The world at one tick: map plus every actor's state.
#[derive(Debug, Clone)]
pub struct SceneView<'a> {
    pub scenario: &'a Scenario,
    pub actors: Vec<&'a ActorState>,
}

/// Even-odd test of point `(px, py)` against a closed polygon.
fn inside(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

struct Painter<'a> {
    config: &'a RasterConfig,
    frame: ActorFrame,
}

impl Painter<'_> {
    /// Sets every pixel whose center lies inside the global-frame polygon.
    fn fill(&self, plane: &mut [f32], polygon_global: &[Vec2]) {
        let (w, h) = (self.config.width, self.config.height);
        let poly: Vec<(f64, f64)> = polygon_global
            .iter()
            .map(|p| self.config.to_pixel(self.frame.to_local(*p)))
            .collect();
        let (mut c0, mut c1, mut r0, mut r1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for (c, r) in &poly {
            c0 = c0.min(*c);
            c1 = c1.max(*c);
            r0 = r0.min(*r);
            r1 = r1.max(*r);
        }
        if c1 < 0.0 || r1 < 0.0 || c0 > w as f64 || r0 > h as f64 {
            return;
        }
        let col_lo = (c0 - 0.5).ceil().max(0.0) as usize;
        let col_hi = ((c1 - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
        let row_lo = (r0 - 0.5).ceil().max(0.0) as usize;
        let row_hi = ((r1 - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
        if col_hi < 0.0 || row_hi < 0.0 {
            return;
        }
        for row in row_lo..=row_hi as usize {
            for col in col_lo..=col_hi as usize {
                if inside(&poly, col as f64 + 0.5, row as f64 + 0.5) {
                    plane[row * w + col] = 1.0;
                }
            }
        }
    }

    fn lane_surface(&self, plane: &mut [f32], lane: &LaneGeometry) {
        let half = lane.width / 2.0;
        for seg in lane.centerline.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let n = (b - a).perp() * (1.0 / (b - a).norm());
            self.fill(plane, &[a + n * half, b + n * half, b - n * half, a - n * half]);
        }
    }

    fn lane_boundaries(&self, plane: &mut [f32], lane: &LaneGeometry) {
        let half = lane.width / 2.0;
        let stripe = self.config.resolution / 2.0;
        for seg in lane.centerline.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let n = (b - a).perp() * (1.0 / (b - a).norm());
            for side in [half, -half] {
                let (ea, eb) = (a + n * side, b + n * side);
                self.fill(
                    plane,
                    &[ea + n * stripe, eb + n * stripe, eb - n * stripe, ea - n * stripe],
                );
            }
        }
    }

    fn actor_box(&self, plane: &mut [f32], s: &ActorState) {
        let fwd = Vec2::from_angle(s.heading) * (s.bbox_length / 2.0);
        let left = Vec2::from_angle(s.heading).perp() * (s.bbox_width / 2.0);
        let c = s.position;
        self.fill(
            plane,
            &[c + fwd + left, c - fwd + left, c - fwd - left, c + fwd - left],
        );
    }
}

fn render(
    scene: &SceneView<'_>,
    target_actor: u64,
    config: &RasterConfig,
    followed: Option<LaneId>,
) -> Result<RasterImage, RasterError> {
    config.validate()?;
    let target = scene
        .actors
        .iter()
        .find(|a| a.actor_id == target_actor)
        .ok_or(RasterError::TargetMissing(target_actor))?;
    let frame = target.frame();
    let painter = Painter { config, frame };
    let mut image = RasterImage::zeros(config.channel_count(), config.height, config.width, config.resolution);
    image.frame = Some(frame);

    for (channel, layer) in config.layers.iter().enumerate() {
        let plane = image.channel_mut(channel);
        match layer {
            Layer::LaneSurface => {
                for lane in &scene.scenario.lanes {
                    painter.lane_surface(plane, lane);
                }
            }
            Layer::LaneBoundaries => {
                for lane in &scene.scenario.lanes {
                    painter.lane_boundaries(plane, lane);
                }
            }
            Layer::TargetActor => painter.actor_box(plane, target),
            Layer::OtherActors => {
                for other in scene.actors.iter().filter(|a| a.actor_id != target_actor) {
                    painter.actor_box(plane, other);
                }
            }
            Layer::FollowedLane => unreachable!("rejected by validate"),
        }
    }
    if let Some(lane_id) = followed {
        let channel = config.channel_of(Layer::FollowedLane).expect("lf layer enabled");
        let plane = image.channel_mut(channel);
        for id in scene.scenario.successor_path(lane_id) {
            let lane = scene.scenario.lane(id).ok_or(RasterError::UnknownLane(id))?;
            painter.lane_surface(plane, lane);
        }
    }
    Ok(image)
}

/// Renders the scene around `target_actor`. When the config enables the
/// followed-lane layer it is left empty here.
pub fn rasterize(scene: &SceneView<'_>, target_actor: u64, config: &RasterConfig) -> Result<RasterImage, RasterError> {
    render(scene, target_actor, config, None)
}

/// Like [`rasterize`] with the followed-lane layer enabled and painted with
/// `lane_id` and its non-branching successors.
pub fn rasterize_with_lane(
    scene: &SceneView<'_>,
    target_actor: u64,
    lane_id: LaneId,
    config: &RasterConfig,
) -> Result<RasterImage, RasterError> {
    if scene.scenario.lane(lane_id).is_none() {
        return Err(RasterError::UnknownLane(lane_id));
    }
    let config = RasterConfig {
        include_lf_layer: true,
        ..config.clone()
    };
    render(scene, target_actor, &config, Some(lane_id))
}

/// Binary PPM (P6) bytes with the three channels mapped to red, green and blue.
pub fn ppm_bytes(raster: &RasterImage, channels: [usize; 3]) -> Result<Vec<u8>, RasterError> {
    if let Some(c) = channels.iter().find(|c| **c >= raster.channels) {
        return Err(RasterError::BadChannel(*c));
    }
    let mut out = format!("P6\n{} {}\n255\n", raster.width, raster.height).into_bytes();
    for row in 0..raster.height {
        for col in 0..raster.width {
            for c in channels {
                let v = raster.get(c, row, col).clamp(0.0, 1.0);
                out.push((255.0 * v).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn dump_ppm(raster: &RasterImage, channels: [usize; 3], path: &FsPath) -> Result<(), RasterError> {
    fs::write(path, ppm_bytes(raster, channels)?)?;
    Ok(())
}
