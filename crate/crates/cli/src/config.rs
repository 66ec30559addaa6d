//! `section.key = value` run configuration.

use std::fmt::Write as _;

use mtp_core::losses::{DistancePolicy, LossKind, MtpConfig};
use mtp_core::model::ModelConfig;
use mtp_core::scenegen::{DatasetRecipe, SceneError, SpeedChoicePreset, TIntersectionPreset};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    TIntersection,
    SpeedChoice,
}

impl ScenarioKind {
    fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::TIntersection => "t-intersection",
            ScenarioKind::SpeedChoice => "speed-choice",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub loss: String,
    pub alpha: f64,
    pub angle_threshold: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_interval: u64,
    pub seed: u64,
    /// Tail fraction of the dataset held out when no validation set is given.
    pub val_fraction: f64,
    pub val_limit: Option<usize>,
    pub anchor_init: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let adam = mtp_core::grad::AdamConfig::default();
        let mtp = MtpConfig::default();
        Self {
            loss: "mtp-disp".into(),
            alpha: mtp.alpha,
            angle_threshold: mtp.policy.angle_threshold,
            epochs: 15,
            batch_size: 32,
            lr: adam.lr,
            decay_factor: adam.decay_factor,
            decay_interval: adam.decay_interval,
            seed: 0,
            val_fraction: 0.1,
            val_limit: Some(500),
            anchor_init: true,
        }
    }
}

impl TrainSettings {
    /// The configured loss with `alpha` and the angle threshold applied.
    pub fn loss_kind(&self) -> Result<LossKind, String> {
        let kind = LossKind::parse(&self.loss).ok_or_else(|| {
            format!("unknown loss `{}` (expected me, mtp-disp, mtp-angle, mdn or stp)", self.loss)
        })?;
        Ok(match kind {
            LossKind::Mtp(c) => LossKind::Mtp(MtpConfig {
                alpha: self.alpha,
                policy: DistancePolicy {
                    angle_threshold: self.angle_threshold,
                    ..c.policy
                },
            }),
            other => other,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub threshold: f64,
    pub buckets: usize,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: mtp_core::eval::DEFAULT_PROBABILITY_THRESHOLD,
            buckets: 10,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub scenario: ScenarioKind,
    pub t_intersection: TIntersectionPreset,
    pub speed_choice: SpeedChoicePreset,
    pub lane_following: bool,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::TIntersection,
            t_intersection: TIntersectionPreset::default(),
            speed_choice: SpeedChoicePreset {
                seed: TIntersectionPreset::default().seed,
                ..SpeedChoicePreset::default()
            },
            lane_following: false,
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

impl Settings {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut s = Settings::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::Config { line: line_no, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected `section.key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let (section, name) = key
                .split_once('.')
                .ok_or_else(|| err(format!("key `{key}` has no section")))?;
            s.set(section, name, value).map_err(err)?;
        }
        Ok(s)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let t = &mut self.t_intersection;
        let sp = &mut self.speed_choice;
        match (section, key) {
            ("scenario", "kind") => {
                self.scenario = match v {
                    "t-intersection" => ScenarioKind::TIntersection,
                    "speed-choice" => ScenarioKind::SpeedChoice,
                    _ => return Err(format!("unknown scenario `{v}` (t-intersection or speed-choice)")),
                }
            }
            ("scenario", "lane_width") => (t.lane_width, sp.lane_width) = both(parse_num(v)?),
            ("scenario", "speed") => (t.speed, sp.speed) = both(parse_num(v)?),
            ("scenario", "speed_noise") => (t.speed_noise, sp.speed_noise) = both(parse_num(v)?),
            ("scenario", "start_jitter") => (t.start_jitter, sp.start_jitter) = both(parse_num(v)?),
            ("scenario", "arm_length") => t.arm_length = parse_num(v)?,
            ("scenario", "max_distance") => t.max_distance = parse_num(v)?,
            ("scenario", "min_distance") => t.min_distance = parse_num(v)?,
            ("scenario", "right_fraction") => t.right_fraction = parse_num(v)?,
            ("scenario", "fast_speed") => sp.fast_speed = parse_num(v)?,
            ("scenario", "slow_speed") => sp.slow_speed = parse_num(v)?,
            ("scenario", "fast_fraction") => sp.fast_fraction = parse_num(v)?,
            ("scenario", "max_accel") => sp.max_accel = parse_num(v)?,
            ("scenario", "decision_after") => sp.decision_after = parse_num(v)?,
            ("dataset", "episodes") => (t.episodes, sp.episodes) = both(parse_num(v)?),
            ("dataset", "seed") => (t.seed, sp.seed) = both(parse_num(v)?),
            ("dataset", "stride") => (t.stride, sp.stride) = both(parse_num(v)?),
            ("dataset", "horizon") => (t.horizon, sp.horizon) = both(parse_num(v)?),
            ("dataset", "dt") => (t.dt, sp.dt) = both(parse_num(v)?),
            ("dataset", "lane_following") => self.lane_following = parse_bool(v)?,
            ("raster", "height") => (t.raster.height, sp.raster.height) = both(parse_num(v)?),
            ("raster", "width") => (t.raster.width, sp.raster.width) = both(parse_num(v)?),
            ("raster", "resolution") => (t.raster.resolution, sp.raster.resolution) = both(parse_num(v)?),
            ("raster", "anchor") => (t.raster.anchor, sp.raster.anchor) = both(parse_num(v)?),
            ("model", _) => self.model.set(key, v).map_err(|e| e.to_string())?,
            ("train", "loss") => {
                self.train.loss = v.to_string();
                self.train.loss_kind()?;
            }
            ("train", "alpha") => self.train.alpha = parse_num(v)?,
            ("train", "angle_threshold") => self.train.angle_threshold = parse_num(v)?,
            ("train", "epochs") => self.train.epochs = parse_num(v)?,
            ("train", "batch_size") => self.train.batch_size = parse_num(v)?,
            ("train", "lr") => self.train.lr = parse_num(v)?,
            ("train", "decay_factor") => self.train.decay_factor = parse_num(v)?,
            ("train", "decay_interval") => self.train.decay_interval = parse_num(v)?,
            ("train", "seed") => self.train.seed = parse_num(v)?,
            ("train", "val_fraction") => self.train.val_fraction = parse_num(v)?,
            ("train", "val_limit") => {
                self.train.val_limit = if v == "all" { None } else { Some(parse_num(v)?) }
            }
            ("train", "anchor_init") => self.train.anchor_init = parse_bool(v)?,
            ("eval", "threshold") => self.eval.threshold = parse_num(v)?,
            ("eval", "buckets") => self.eval.buckets = parse_num(v)?,
            ("eval", "batch_size") => self.eval.batch_size = parse_num(v)?,
            _ => return Err(format!("unknown key `{section}.{key}`")),
        }
        Ok(())
    }

    pub fn recipe(&self) -> Result<DatasetRecipe, SceneError> {
        let mut recipe = match self.scenario {
            ScenarioKind::TIntersection => self.t_intersection.recipe()?,
            ScenarioKind::SpeedChoice => self.speed_choice.recipe()?,
        };
        if self.lane_following {
            recipe.extract.lane_following = true;
            recipe.raster.include_lf_layer = true;
        }
        Ok(recipe)
    }

    /// Every key with its current value, grouped by section.
    pub fn dump(&self) -> String {
        let t = &self.t_intersection;
        let sp = &self.speed_choice;
        let mut out = String::new();
        let mut line = |k: &str, v: String, note: &str| {
            if note.is_empty() {
                let _ = writeln!(out, "{k} = {v}");
            } else {
                let _ = writeln!(out, "{k} = {v}  # {note}");
            }
        };
        line("scenario.kind", self.scenario.as_str().into(), "t-intersection | speed-choice");
        line("scenario.lane_width", t.lane_width.to_string(), "m");
        line("scenario.speed", t.speed.to_string(), "initial speed, m/s");
        line("scenario.speed_noise", t.speed_noise.to_string(), "relative speed jitter");
        line("scenario.start_jitter", t.start_jitter.to_string(), "m");
        line("scenario.arm_length", t.arm_length.to_string(), "t-intersection, m");
        line("scenario.max_distance", t.max_distance.to_string(), "t-intersection, first sample distance to the junction");
        line("scenario.min_distance", t.min_distance.to_string(), "t-intersection, branch decision distance");
        line("scenario.right_fraction", t.right_fraction.to_string(), "t-intersection, probability of turning right");
        line("scenario.fast_speed", sp.fast_speed.to_string(), "speed-choice, m/s");
        line("scenario.slow_speed", sp.slow_speed.to_string(), "speed-choice, m/s");
        line("scenario.fast_fraction", sp.fast_fraction.to_string(), "speed-choice");
        line("scenario.max_accel", sp.max_accel.to_string(), "speed-choice, m/s^2");
        line("scenario.decision_after", sp.decision_after.to_string(), "speed-choice, m travelled before the speed decision");
        let active = match self.scenario {
            ScenarioKind::TIntersection => (t.episodes, t.seed, t.stride, t.horizon, t.dt, &t.raster),
            ScenarioKind::SpeedChoice => (sp.episodes, sp.seed, sp.stride, sp.horizon, sp.dt, &sp.raster),
        };
        line("dataset.episodes", active.0.to_string(), "");
        line("dataset.seed", active.1.to_string(), "");
        line("dataset.stride", active.2.to_string(), "keep every n-th eligible tick");
        line("dataset.horizon", active.3.to_string(), "future steps H");
        line("dataset.dt", active.4.to_string(), "s");
        line("dataset.lane_following", self.lane_following.to_string(), "paint the followed lane channel");
        line("raster.height", active.5.height.to_string(), "px");
        line("raster.width", active.5.width.to_string(), "px");
        line("raster.resolution", active.5.resolution.to_string(), "m per px");
        line("raster.anchor", active.5.anchor.to_string(), "actor height above the bottom edge, fraction");
        for (k, v) in self.model.to_kv() {
            let note = match k.as_str() {
                "input_channels" | "input_height" | "input_width" | "horizon" | "dt" => "taken from the dataset",
                "head" => "regression | mdn, taken from the loss",
                "conv" => "filters x kernel s stride [p pool], comma separated",
                _ => "",
            };
            line(&format!("model.{k}"), v, note);
        }
        let tr = &self.train;
        line("train.loss", tr.loss.clone(), "me | mtp-disp | mtp-angle | mdn | stp");
        line("train.alpha", tr.alpha.to_string(), "regression weight of the winning mode");
        line("train.angle_threshold", tr.angle_threshold.to_string(), "rad, mtp-angle only");
        line("train.epochs", tr.epochs.to_string(), "");
        line("train.batch_size", tr.batch_size.to_string(), "");
        line("train.lr", tr.lr.to_string(), "");
        line("train.decay_factor", tr.decay_factor.to_string(), "");
        line("train.decay_interval", tr.decay_interval.to_string(), "steps");
        line("train.seed", tr.seed.to_string(), "shuffle seed");
        line("train.val_fraction", tr.val_fraction.to_string(), "held-out tail when --val is absent");
        line(
            "train.val_limit",
            tr.val_limit.map_or("all".into(), |v| v.to_string()),
            "validation samples scored per epoch",
        );
        line("train.anchor_init", tr.anchor_init.to_string(), "k-means mode anchors before training");
        line("eval.threshold", self.eval.threshold.to_string(), "minimum mode probability");
        line("eval.buckets", self.eval.buckets.to_string(), "calibration buckets");
        line("eval.batch_size", self.eval.batch_size.to_string(), "");
        out
    }
}

fn both<T: Clone>(v: T) -> (T, T) {
    (v.clone(), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_dump() {
        let s = Settings::default();
        assert_eq!(Settings::parse(&s.dump()).unwrap(), s);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# header\nscenario.kind = speed-choice\n\ndataset.episodes = 7 # few\nmodel.modes = 4\ntrain.loss = mdn\n";
        let s = Settings::parse(text).unwrap();
        assert_eq!(s.scenario, ScenarioKind::SpeedChoice);
        assert_eq!(s.speed_choice.episodes, 7);
        assert_eq!(s.model.modes, 4);
        assert_eq!(s.train.loss_kind().unwrap(), LossKind::Mdn);
        assert_eq!(Settings::parse(&s.dump()).unwrap(), s);
    }

    #[test]
    fn errors_carry_line_numbers() {
        match Settings::parse("dataset.seed = 1\nbogus.key = 3\n") {
            Err(CliError::Config { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match Settings::parse("\n\ndataset.seed = x\n") {
            Err(CliError::Config { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Settings::parse("no equals sign"), Err(CliError::Config { line: 1, .. })));
        assert!(Settings::parse("train.loss = huber").is_err());
    }

    #[test]
    fn mtp_overrides_reach_the_loss() {
        let s = Settings::parse("train.loss = mtp-angle\ntrain.alpha = 2.5\ntrain.angle_threshold = 0.2").unwrap();
        match s.train.loss_kind().unwrap() {
            LossKind::Mtp(c) => {
                assert_eq!(c.alpha, 2.5);
                assert_eq!(c.policy.angle_threshold, 0.2);
                assert_eq!(c.policy, DistancePolicy { angle_threshold: 0.2, ..DistancePolicy::angle() });
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lane_following_adds_a_channel() {
        let s = Settings::parse("dataset.lane_following = true").unwrap();
        let r = s.recipe().unwrap();
        assert_eq!(r.meta().channels, 5);
        assert!(r.extract.lane_following);
    }
}
