//! Convolutional encoder over the raster, fused with the state scalars, and a
//! linear head producing M trajectories, M logits and optionally per-point
//! covariance parameters.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::eval::{EvalError, Predictor};
use crate::geom::{Cov2, GeomError, MultimodalPrediction, PredictionError, Trajectory, Vec2};
use crate::grad::{Checkpoint, CheckpointError, GradError, Graph, NodeRef, ParamId, ParamStore, Tensor};
use crate::raster::RasterImage;
use crate::scenegen::Sample;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("decoded prediction invalid: {0}")]
    Prediction(#[from] PredictionError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Positions and logits.
    Regression,
    /// Positions, Cholesky covariance parameters and logits.
    Mdn,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Regression => "regression",
            HeadKind::Mdn => "mdn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "regression" => Some(HeadKind::Regression),
            "mdn" => Some(HeadKind::Mdn),
            _ => None,
        }
    }
}

/// One convolution, followed by ReLU and an optional `pool x pool` max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Pool window and stride; 0 or 1 disables pooling.
    pub pool: usize,
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}s{}", self.filters, self.kernel, self.stride)?;
        if self.pool > 1 {
            write!(f, "p{}", self.pool)?;
        }
        Ok(())
    }
}

impl ConvSpec {
    /// Parses `FILTERSxKERNELsSTRIDE[pPOOL]`, e.g. `8x3s2p2`.
    pub fn parse(s: &str) -> Option<Self> {
        let (filters, rest) = s.split_once('x')?;
        let (kernel, rest) = rest.split_once('s')?;
        let (stride, pool) = match rest.split_once('p') {
            Some((st, p)) => (st, p.parse().ok()?),
            None => (rest, 0),
        };
        Some(Self {
            filters: filters.parse().ok()?,
            kernel: kernel.parse().ok()?,
            stride: stride.parse().ok()?,
            pool,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub conv: Vec<ConvSpec>,
    pub dense: Vec<usize>,
    pub modes: usize,
    pub horizon: usize,
    pub dt: f64,
    pub head: HeadKind,
    /// Head position outputs are multiplied by this (meters per unit).
    pub output_scale: f64,
    /// Std of the per-mode Gaussian perturbation of the head position biases.
    pub bias_jitter: f64,
    /// Initial mode endpoints are spread over headings in `[-mode_fan, mode_fan]`
    /// (radians) at distance `mode_reach` (head units), with a linear ramp in time.
    pub mode_reach: f64,
    pub mode_fan: f64,
    /// Multipliers for speed, acceleration and heading-change rate.
    pub feature_scale: [f64; 3],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 4,
            input_height: 32,
            input_width: 32,
            conv: vec![
                ConvSpec {
                    filters: 8,
                    kernel: 4,
                    stride: 2,
                    pool: 0,
                },
                ConvSpec {
                    filters: 16,
                    kernel: 3,
                    stride: 2,
                    pool: 0,
                },
            ],
            dense: vec![64],
            modes: 2,
            horizon: crate::geom::DEFAULT_HORIZON,
            dt: crate::geom::DEFAULT_DT,
            head: HeadKind::Regression,
            output_scale: 10.0,
            bias_jitter: 0.5,
            mode_reach: 4.0,
            mode_fan: 0.8,
            feature_scale: [0.1, 0.5, 1.0],
            seed: 0,
        }
    }
}

/// Where each quantity lives inside one sample's raw output vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputLayout {
    pub modes: usize,
    pub horizon: usize,
    pub head: HeadKind,
}

impl OutputLayout {
    pub fn positions_len(&self) -> usize {
        2 * self.horizon * self.modes
    }

    pub fn cov_offset(&self) -> usize {
        self.positions_len()
    }

    pub fn cov_len(&self) -> usize {
        match self.head {
            HeadKind::Regression => 0,
            HeadKind::Mdn => 3 * self.horizon * self.modes,
        }
    }

    pub fn logits_offset(&self) -> usize {
        self.positions_len() + self.cov_len()
    }

    pub fn len(&self) -> usize {
        self.logits_offset() + self.modes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ModelConfig {
    pub fn layout(&self) -> OutputLayout {
        OutputLayout {
            modes: self.modes,
            horizon: self.horizon,
            head: self.head,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layout().len()
    }

    /// Spatial shape after each conv (and pool) stage.
    fn stage_shapes(&self) -> Result<Vec<(usize, usize, usize)>, ModelError> {
        let (mut h, mut w) = (self.input_height, self.input_width);
        let mut out = Vec::new();
        for (i, s) in self.conv.iter().enumerate() {
            if s.filters == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(ModelError::InvalidConfig(format!("conv layer {i} has a zero size")));
            }
            if s.kernel > h || s.kernel > w {
                return Err(ModelError::InvalidConfig(format!(
                    "conv layer {i} kernel {} exceeds input {h}x{w}",
                    s.kernel
                )));
            }
            h = (h - s.kernel) / s.stride + 1;
            w = (w - s.kernel) / s.stride + 1;
            if s.pool > 1 {
                if s.pool > h || s.pool > w {
                    return Err(ModelError::InvalidConfig(format!("pool in layer {i} exceeds map {h}x{w}")));
                }
                h = (h - s.pool) / s.pool + 1;
                w = (w - s.pool) / s.pool + 1;
            }
            out.push((s.filters, h, w));
        }
        Ok(out)
    }

    /// Width of the flattened encoder output.
    pub fn encoder_width(&self) -> Result<usize, ModelError> {
        Ok(match self.stage_shapes()?.last() {
            Some((c, h, w)) => c * h * w,
            None => self.input_channels * self.input_height * self.input_width,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.modes == 0 {
            return bad("modes must be at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.dense.is_empty() || self.dense.contains(&0) {
            return bad("need at least one dense layer, all widths positive");
        }
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return bad("input shape must be positive");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return bad("output_scale must be positive");
        }
        if !(self.bias_jitter >= 0.0 && self.bias_jitter.is_finite()) {
            return bad("bias_jitter must be non-negative");
        }
        if !(self.mode_reach.is_finite() && self.mode_fan.is_finite()) {
            return bad("mode_reach and mode_fan must be finite");
        }
        if self.feature_scale.iter().any(|v| !v.is_finite()) {
            return bad("feature_scale must be finite");
        }
        self.stage_shapes().map(|_| ())
    }

    /// Flat `key -> value` form, also used for checkpoint metadata.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("input_channels", self.input_channels.to_string());
        put("input_height", self.input_height.to_string());
        put("input_width", self.input_width.to_string());
        put("conv", join(&self.conv));
        put("dense", join(&self.dense));
        put("modes", self.modes.to_string());
        put("horizon", self.horizon.to_string());
        put("dt", self.dt.to_string());
        put("head", self.head.as_str().to_string());
        put("output_scale", self.output_scale.to_string());
        put("bias_jitter", self.bias_jitter.to_string());
        put("mode_reach", self.mode_reach.to_string());
        put("mode_fan", self.mode_fan.to_string());
        put("feature_scale", join(&self.feature_scale));
        put("seed", self.seed.to_string());
        kv
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ModelError> {
            v.trim()
                .parse()
                .map_err(|_| ModelError::InvalidConfig(format!("{key}: cannot parse `{v}`")))
        }
        let v = value.trim();
        match key {
            "input_channels" => self.input_channels = num(key, v)?,
            "input_height" => self.input_height = num(key, v)?,
            "input_width" => self.input_width = num(key, v)?,
            "conv" => {
                self.conv = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|s| {
                            ConvSpec::parse(s.trim())
                                .ok_or_else(|| ModelError::InvalidConfig(format!("conv: bad layer `{s}`")))
                        })
                        .collect::<Result<_, _>>()?
                }
            }
            "dense" => {
                self.dense = v
                    .split(',')
                    .map(|s| num(key, s))
                    .collect::<Result<_, _>>()?
            }
            "modes" => self.modes = num(key, v)?,
            "horizon" => self.horizon = num(key, v)?,
            "dt" => self.dt = num(key, v)?,
            "head" => {
                self.head =
                    HeadKind::parse(v).ok_or_else(|| ModelError::InvalidConfig(format!("head: unknown `{v}`")))?
            }
            "output_scale" => self.output_scale = num(key, v)?,
            "bias_jitter" => self.bias_jitter = num(key, v)?,
            "mode_reach" => self.mode_reach = num(key, v)?,
            "mode_fan" => self.mode_fan = num(key, v)?,
            "feature_scale" => {
                let parts: Vec<f64> = v.split(',').map(|s| num(key, s)).collect::<Result<_, _>>()?;
                self.feature_scale = parts
                    .try_into()
                    .map_err(|_| ModelError::InvalidConfig("feature_scale needs 3 values".into()))?;
            }
            "seed" => self.seed = num(key, v)?,
            _ => return Err(ModelError::InvalidConfig(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_kv<'a>(kv: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, ModelError> {
        let mut cfg = ModelConfig::default();
        for (k, v) in kv {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

struct LayerIds {
    conv: Vec<(ParamId, ParamId)>,
    dense: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

/// Network parameters together with the config that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut channels = config.input_channels;
        for (i, s) in config.conv.iter().enumerate() {
            let fan_in = channels * s.kernel * s.kernel;
            params.add(
                format!("conv{i}.w"),
                he_uniform(&mut rng, &[s.filters, channels, s.kernel, s.kernel], fan_in),
            );
            params.add(format!("conv{i}.b"), Tensor::zeros(&[s.filters]));
            channels = s.filters;
        }
        let mut width = config.encoder_width()? + 3;
        for (i, d) in config.dense.iter().enumerate() {
            params.add(format!("dense{i}.w"), he_uniform(&mut rng, &[width, *d], width));
            params.add(format!("dense{i}.b"), Tensor::zeros(&[*d]));
            width = *d;
        }
        let layout = config.layout();
        let out = layout.len();
        params.add("head.w", he_uniform(&mut rng, &[width, out], width));
        let mut bias = vec![0.0; out];
        let (m_count, h_count) = (config.modes, config.horizon);
        for m in 0..m_count {
            let heading = if m_count > 1 {
                config.mode_fan * (2.0 * m as f64 / (m_count - 1) as f64 - 1.0)
            } else {
                0.0
            };
            for h in 0..h_count {
                let r = config.mode_reach * (h + 1) as f64 / h_count as f64;
                bias[m * 2 * h_count + 2 * h] = r * heading.cos();
                bias[m * 2 * h_count + 2 * h + 1] = r * heading.sin();
            }
        }
        if config.bias_jitter > 0.0 {
            let normal = Normal::new(0.0, config.bias_jitter).expect("validated std");
            for b in bias.iter_mut().take(layout.positions_len()) {
                *b += normal.sample(&mut rng);
            }
        }
        params.add("head.b", Tensor::new(vec![out], bias).expect("sized"));
        Ok(Self { config, params })
    }

    /// Overwrites each mode's head position bias with an anchor trajectory
    /// (meters) and zeroes the position weights, so every input initially
    /// predicts exactly the anchors.
    pub fn set_mode_anchors(&mut self, anchors: &[Trajectory]) -> Result<(), ModelError> {
        let c = &self.config;
        if anchors.len() != c.modes {
            return Err(ModelError::ShapeMismatch(format!(
                "{} anchors for {} modes",
                anchors.len(),
                c.modes
            )));
        }
        if let Some(a) = anchors.iter().find(|a| a.horizon() != c.horizon) {
            return Err(ModelError::ShapeMismatch(format!(
                "anchor horizon {} != model horizon {}",
                a.horizon(),
                c.horizon
            )));
        }
        let scale = c.output_scale;
        let id = self.params.id("head.b").expect("parameter created at init");
        let bias = self.params.get_mut(id).data_mut();
        for (m, a) in anchors.iter().enumerate() {
            for (h, p) in a.points().iter().enumerate() {
                bias[m * 2 * a.horizon() + 2 * h] = p.x / scale;
                bias[m * 2 * a.horizon() + 2 * h + 1] = p.y / scale;
            }
        }
        let positions = c.layout().positions_len();
        let out = c.layout().len();
        let id = self.params.id("head.w").expect("parameter created at init");
        for row in self.params.get_mut(id).data_mut().chunks_mut(out) {
            row[..positions].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }

    fn layer_ids(&self) -> LayerIds {
        let id = |name: String| self.params.id(&name).expect("parameter created at init");
        LayerIds {
            conv: (0..self.config.conv.len())
                .map(|i| (id(format!("conv{i}.w")), id(format!("conv{i}.b"))))
                .collect(),
            dense: (0..self.config.dense.len())
                .map(|i| (id(format!("dense{i}.w")), id(format!("dense{i}.b"))))
                .collect(),
            head: (id("head.w".into()), id("head.b".into())),
        }
    }

    /// Stacks rasters into `[n, c, h, w]` and scaled features into `[n, 3]`.
    pub fn batch_inputs(&self, samples: &[&Sample]) -> Result<(Tensor, Tensor), ModelError> {
        let c = &self.config;
        let per = c.input_channels * c.input_height * c.input_width;
        let mut images = Vec::with_capacity(samples.len() * per);
        let mut feats = Vec::with_capacity(samples.len() * 3);
        for s in samples {
            self.check_raster(&s.raster)?;
            images.extend(s.raster.data.iter().map(|v| f64::from(*v)));
            feats.extend(s.state_features.iter().zip(&c.feature_scale).map(|(f, k)| f * k));
        }
        let n = samples.len();
        Ok((
            Tensor::new(vec![n, c.input_channels, c.input_height, c.input_width], images)?,
            Tensor::new(vec![n, 3], feats)?,
        ))
    }

    fn check_raster(&self, r: &RasterImage) -> Result<(), ModelError> {
        let c = &self.config;
        if (r.channels, r.height, r.width) != (c.input_channels, c.input_height, c.input_width) {
            return Err(ModelError::ShapeMismatch(format!(
                "raster {}x{}x{}, model expects {}x{}x{}",
                r.channels, r.height, r.width, c.input_channels, c.input_height, c.input_width
            )));
        }
        Ok(())
    }

    /// Records the forward pass; returns the `[n, output_dim]` raw output node
    /// with positions already in meters.
    pub fn forward_graph(&self, g: &mut Graph, images: Tensor, features: Tensor) -> Result<NodeRef, ModelError> {
        let ids = self.layer_ids();
        let n = images.shape().first().copied().unwrap_or(0);
        if features.shape() != [n, 3] {
            return Err(ModelError::ShapeMismatch(format!("features {:?} for batch {n}", features.shape())));
        }
        let mut x = g.constant(images);
        for (spec, (w, b)) in self.config.conv.iter().zip(&ids.conv) {
            let (w, b) = (g.param(&self.params, *w), g.param(&self.params, *b));
            x = g.conv2d(x, w, b, spec.stride)?;
            x = g.relu(x);
            if spec.pool > 1 {
                x = g.max_pool2d(x, spec.pool, spec.pool)?;
            }
        }
        x = g.flatten(x)?;
        let f = g.constant(features);
        x = g.concat_last(x, f)?;
        for (w, b) in &ids.dense {
            let (w, b) = (g.param(&self.params, *w), g.param(&self.params, *b));
            x = g.matmul(x, w)?;
            x = g.add_bias(x, b)?;
            x = g.relu(x);
        }
        let (w, b) = (g.param(&self.params, ids.head.0), g.param(&self.params, ids.head.1));
        let y = g.matmul(x, w)?;
        let y = g.add_bias(y, b)?;
        let layout = self.config.layout();
        let pos = g.slice_last(y, 0, layout.positions_len())?;
        let pos = g.scale(pos, self.config.output_scale);
        let rest = g.slice_last(y, layout.positions_len(), layout.len() - layout.positions_len())?;
        Ok(g.concat_last(pos, rest)?)
    }

    /// Inference on a batch; one raw vector per sample.
    pub fn forward_batch(&self, samples: &[&Sample]) -> Result<Vec<RawOutput>, ModelError> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let (images, feats) = self.batch_inputs(samples)?;
        let mut g = Graph::inference();
        let out = self.forward_graph(&mut g, images, feats)?;
        let layout = self.config.layout();
        Ok(g.value(out)
            .data()
            .chunks_exact(layout.len())
            .map(|v| RawOutput {
                layout,
                values: v.to_vec(),
            })
            .collect())
    }

    pub fn forward(&self, raster: &RasterImage, state_features: [f64; 3]) -> Result<RawOutput, ModelError> {
        self.check_raster(raster)?;
        let c = &self.config;
        let images = Tensor::new(
            vec![1, c.input_channels, c.input_height, c.input_width],
            raster.data.iter().map(|v| f64::from(*v)).collect(),
        )?;
        let feats = Tensor::new(
            vec![1, 3],
            state_features.iter().zip(&c.feature_scale).map(|(f, k)| f * k).collect(),
        )?;
        let mut g = Graph::inference();
        let out = self.forward_graph(&mut g, images, feats)?;
        Ok(RawOutput {
            layout: c.layout(),
            values: g.value(out).data().to_vec(),
        })
    }

    pub fn predict_batch(&self, samples: &[&Sample]) -> Result<Vec<MultimodalPrediction>, ModelError> {
        self.forward_batch(samples)?
            .iter()
            .map(|r| r.decode(self.config.dt))
            .collect()
    }

    /// Writes `model.<key>` metadata and the parameters into `ck`.
    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        for (k, v) in self.config.to_kv() {
            ck.set_meta(&format!("model.{k}"), v);
        }
        for (_, name, t) in self.params.iter() {
            ck.push(format!("param.{name}"), t.clone());
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let kv: Vec<(&str, &str)> = ck
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k, v.as_str())))
            .collect();
        if kv.is_empty() {
            return Err(ModelError::Incompatible("no model configuration in checkpoint".into()));
        }
        let config = ModelConfig::from_kv(kv)?;
        let mut model = Model::new(config)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let stored = ck.tensor(&format!("param.{name}"))?;
            if stored.shape() != model.params.get(id).shape() {
                return Err(ModelError::Incompatible(format!(
                    "{name}: stored {:?}, config implies {:?}",
                    stored.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = stored.clone();
        }
        Ok(model)
    }
}

/// Adapts a [`Model`] to [`Predictor`] under a display name.
#[derive(Debug, Clone, Copy)]
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub name: &'a str,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        self.name.to_string()
    }

    fn predict_batch(&self, samples: &[&Sample]) -> Result<Vec<MultimodalPrediction>, EvalError> {
        self.model
            .predict_batch(samples)
            .map_err(|e| EvalError::Predictor(e.to_string()))
    }
}

/// One sample's head output.
#[derive(Debug, Clone, PartialEq)]
pub struct RawOutput {
    pub layout: OutputLayout,
    pub values: Vec<f64>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Smallest Cholesky diagonal emitted by [`cholesky_cov`].
pub const MIN_CHOLESKY_DIAG: f64 = 1e-4;

/// `Σ = L Lᵀ` with `L = [[softplus(a), 0], [c, softplus(b)]]`, the diagonal
/// floored at [`MIN_CHOLESKY_DIAG`] so the stored matrix stays positive definite
/// in floating point.
pub fn cholesky_cov(a: f64, b: f64, c: f64) -> Cov2 {
    let l11 = softplus(a).max(MIN_CHOLESKY_DIAG);
    let l22 = softplus(b).max(MIN_CHOLESKY_DIAG);
    Cov2 {
        xx: l11 * l11,
        xy: l11 * c,
        yy: c * c + l22 * l22,
    }
}

impl RawOutput {
    /// `(x, y)` of mode `m` at step `h`.
    pub fn position(&self, m: usize, h: usize) -> Vec2 {
        let i = 2 * (m * self.layout.horizon + h);
        Vec2::new(self.values[i], self.values[i + 1])
    }

    pub fn mode_flat(&self, m: usize) -> &[f64] {
        let n = 2 * self.layout.horizon;
        &self.values[m * n..(m + 1) * n]
    }

    pub fn logits(&self) -> &[f64] {
        &self.values[self.layout.logits_offset()..]
    }

    /// `(a, b, c)` for mode `m` at step `h`; `None` for a regression head.
    pub fn cov_params(&self, m: usize, h: usize) -> Option<[f64; 3]> {
        if self.layout.head != HeadKind::Mdn {
            return None;
        }
        let i = self.layout.cov_offset() + 3 * (m * self.layout.horizon + h);
        Some([self.values[i], self.values[i + 1], self.values[i + 2]])
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let l = self.logits();
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|v| v / total).collect()
    }

    pub fn decode(&self, dt: f64) -> Result<MultimodalPrediction, ModelError> {
        let lay = self.layout;
        if self.values.len() != lay.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "raw output has {} values, layout needs {}",
                self.values.len(),
                lay.len()
            )));
        }
        let modes = (0..lay.modes)
            .map(|m| Trajectory::from_flat(self.mode_flat(m), dt))
            .collect::<Result<Vec<_>, _>>()?;
        let probs = self.probabilities();
        Ok(match lay.head {
            HeadKind::Regression => MultimodalPrediction::new(modes, probs)?,
            HeadKind::Mdn => {
                let covs = (0..lay.modes)
                    .map(|m| {
                        (0..lay.horizon)
                            .map(|h| {
                                let [a, b, c] = self.cov_params(m, h).expect("mdn head");
                                cholesky_cov(a, b, c)
                            })
                            .collect()
                    })
                    .collect();
                MultimodalPrediction::with_covariances(modes, probs, covs)?
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RasterImage;
    use crate::scenegen::Maneuver;

    fn small_config(head: HeadKind, modes: usize, horizon: usize) -> ModelConfig {
        ModelConfig {
            input_channels: 2,
            input_height: 12,
            input_width: 12,
            conv: vec![ConvSpec {
                filters: 3,
                kernel: 3,
                stride: 2,
                pool: 0,
            }],
            dense: vec![8],
            modes,
            horizon,
            head,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn sample(cfg: &ModelConfig, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raster = RasterImage::zeros(cfg.input_channels, cfg.input_height, cfg.input_width, 0.5);
        raster.data.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        let gt: Vec<f64> = (0..2 * cfg.horizon).map(|i| i as f64 * 0.3).collect();
        Sample {
            raster,
            state_features: [8.0, 0.5, 0.05],
            ground_truth: Trajectory::from_flat(&gt, cfg.dt).unwrap(),
            followed_lane_id: None,
            maneuver: Maneuver::Straight,
        }
    }

    #[test]
    fn output_dimension_law() {
        for m in 1..5 {
            for h in [1, 3, 60] {
                let r = small_config(HeadKind::Regression, m, h);
                assert_eq!(r.output_dim(), (2 * h + 1) * m);
                let d = small_config(HeadKind::Mdn, m, h);
                assert_eq!(d.output_dim(), (5 * h + 1) * m);
                let model = Model::new(d.clone()).unwrap();
                let out = model.forward_batch(&[&sample(&d, 1)]).unwrap();
                assert_eq!(out[0].values.len(), (5 * h + 1) * m);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_biases_follow_rule() {
        let cfg = small_config(HeadKind::Regression, 3, 4);
        let a = Model::new(cfg.clone()).unwrap();
        assert_eq!(a, Model::new(cfg.clone()).unwrap());
        for (_, name, t) in a.params.iter() {
            if name.ends_with(".b") && name != "head.b" {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
            }
        }
        let lay = cfg.layout();
        let hb = a.params.get(a.params.id("head.b").unwrap()).data().to_vec();
        assert!(hb[lay.logits_offset()..].iter().all(|v| *v == 0.0));
        let modes: Vec<&[f64]> = hb[..lay.positions_len()].chunks(2 * cfg.horizon).collect();
        assert!(modes.iter().all(|m| m.iter().any(|v| *v != 0.0)));
        assert_ne!(modes[0], modes[1]);
    }

    #[test]
    fn bias_fan_without_jitter() {
        let cfg = ModelConfig {
            bias_jitter: 0.0,
            mode_reach: 2.0,
            mode_fan: 0.5,
            ..small_config(HeadKind::Regression, 3, 4)
        };
        let model = Model::new(cfg.clone()).unwrap();
        let hb = model.params.get(model.params.id("head.b").unwrap()).data().to_vec();
        for (m, heading) in [-0.5f64, 0.0, 0.5].iter().enumerate() {
            let end = &hb[m * 8 + 6..m * 8 + 8];
            assert!((end[0] - 2.0 * heading.cos()).abs() < 1e-12);
            assert!((end[1] - 2.0 * heading.sin()).abs() < 1e-12);
            let first = &hb[m * 8..m * 8 + 2];
            assert!((first[0] - 0.5 * heading.cos()).abs() < 1e-12);
        }
        let single = Model::new(ModelConfig { modes: 1, ..cfg }).unwrap();
        let hb = single.params.get(single.params.id("head.b").unwrap()).data().to_vec();
        assert_eq!(&hb[6..8], &[2.0, 0.0]);
    }

    #[test]
    fn zero_everything_gives_zero_positions_uniform_probs() {
        let cfg = small_config(HeadKind::Regression, 3, 5);
        let mut model = Model::new(cfg.clone()).unwrap();
        for id in model.params.ids().collect::<Vec<_>>() {
            model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let raster = RasterImage::zeros(2, 12, 12, 0.5);
        let raw = model.forward(&raster, [0.0; 3]).unwrap();
        let pred = raw.decode(cfg.dt).unwrap();
        for m in &pred.modes {
            assert!(m.points().iter().all(|p| *p == Vec2::ZERO));
            assert_eq!(m.horizon(), 5);
        }
        for p in &pred.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn conv_weight_perturbation_changes_output() {
        let cfg = small_config(HeadKind::Regression, 2, 3);
        let model = Model::new(cfg.clone()).unwrap();
        let s = sample(&cfg, 3);
        let base = model.forward_batch(&[&s]).unwrap();
        let mut changed = model.clone();
        let id = changed.params.id("conv0.w").unwrap();
        for i in 0..changed.params.get(id).len() {
            changed.params.get_mut(id).data_mut()[i] += 0.5;
        }
        let after = changed.forward_batch(&[&s]).unwrap();
        assert_ne!(base, after);
    }

    #[test]
    fn batch_and_single_forward_agree() {
        let cfg = small_config(HeadKind::Mdn, 2, 3);
        let model = Model::new(cfg.clone()).unwrap();
        let s1 = sample(&cfg, 1);
        let s2 = sample(&cfg, 2);
        let batch = model.forward_batch(&[&s1, &s2]).unwrap();
        let single = model.forward(&s2.raster, s2.state_features).unwrap();
        for (a, b) in batch[1].values.iter().zip(&single.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_examples() {
        let layout = OutputLayout {
            modes: 3,
            horizon: 1,
            head: HeadKind::Regression,
        };
        let raw = RawOutput {
            layout,
            values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0],
        };
        let pred = raw.decode(0.1).unwrap();
        assert_eq!(pred.modes[1].points()[0], Vec2::new(3.0, 4.0));
        for p in &pred.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = (std::f64::consts::E - 1.0).ln();
        let cov = cholesky_cov(a, a, 0.0);
        assert!((cov.xx - 1.0).abs() < 1e-12 && cov.xy == 0.0 && (cov.yy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_logits_normalize_and_covariances_stay_pd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layout = OutputLayout {
            modes: 4,
            horizon: 3,
            head: HeadKind::Mdn,
        };
        for _ in 0..200 {
            let values = (0..layout.len()).map(|_| rng.gen_range(-20.0..20.0)).collect();
            let pred = RawOutput { layout, values }.decode(0.1).unwrap();
            assert!((pred.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for c in pred.covariances.unwrap().iter().flatten() {
                assert!(c.det() > 0.0);
            }
        }
    }

    #[test]
    fn config_kv_round_trip_and_errors() {
        let mut cfg = small_config(HeadKind::Mdn, 3, 7);
        cfg.conv[0].pool = 2;
        cfg.output_scale = 0.1 + 0.2;
        let kv = cfg.to_kv();
        let back = ModelConfig::from_kv(kv.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, cfg);
        let mut c = ModelConfig::default();
        assert!(c.set("modes", "x").is_err());
        assert!(c.set("nope", "1").is_err());
        assert!(ModelConfig::from_kv([("modes", "0")]).is_err());
        assert!(ModelConfig::from_kv([("dense", "")]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = small_config(HeadKind::Regression, 2, 4);
        let model = Model::new(cfg).unwrap();
        let mut ck = Checkpoint::new();
        model.write_checkpoint(&mut ck);
        let bytes = ck.to_bytes().unwrap();
        let back = Model::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn wrong_raster_shape_rejected() {
        let model = Model::new(small_config(HeadKind::Regression, 2, 4)).unwrap();
        let raster = RasterImage::zeros(3, 12, 12, 0.5);
        assert!(matches!(model.forward(&raster, [0.0; 3]), Err(ModelError::ShapeMismatch(_))));
    }
}
