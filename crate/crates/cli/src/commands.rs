use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use mtp_core::baselines::{stp_from, PropagationPredictor};
use mtp_core::eval::{
    calibration, evaluate, parse_report_csv, predict_all, report_csv, report_markdown, OraclePredictor, Predictor,
};
use mtp_core::geom::MultimodalPrediction;
use mtp_core::grad::{AdamConfig, Checkpoint, CheckpointError};
use mtp_core::losses::{DistancePolicy, LossKind};
use mtp_core::model::{Model, ModelConfig, ModelPredictor};
use mtp_core::raster::{ppm_bytes, rasterize as render, rasterize_with_lane, Layer, RasterImage, SceneView};
use mtp_core::scenegen::{read_dataset, states_at, write_dataset, DatasetMeta, Maneuver, Sample};
use mtp_core::train::{anchor_init, checkpoint_loss, fit, loss_name, TrainConfig, TrainError, TrainState, LOG_HEADER};

use crate::config::Settings;
use crate::error::CliError;
use crate::{EvalArgs, PredictorKind, RasterizeArgs, TrainArgs};

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent.display(), e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path.display(), e))
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn generate(settings: &Settings, out: &Path) -> Result<(), CliError> {
    let recipe = settings.recipe()?;
    let samples = recipe.generate()?;
    write_dataset(out, &recipe.meta(), &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    let total = samples.len().max(1) as f64;
    for m in Maneuver::ALL {
        let n = samples.iter().filter(|s| s.maneuver == m).count();
        println!("maneuver {:8} {n:7} ({:5.1}%)", m.as_str(), 100.0 * n as f64 / total);
    }
    let mut lanes: BTreeMap<Option<u32>, usize> = BTreeMap::new();
    for s in &samples {
        *lanes.entry(s.followed_lane_id).or_default() += 1;
    }
    for (lane, n) in lanes {
        let label = lane.map_or("none".to_string(), |l| l.to_string());
        println!("followed lane {label:4} {n:7} ({:5.1}%)", 100.0 * n as f64 / total);
    }
    Ok(())
}

/// The model config implied by the settings, the dataset shape and the loss.
fn model_config_for(base: &ModelConfig, meta: &DatasetMeta, loss: &LossKind) -> ModelConfig {
    let cfg = ModelConfig {
        input_channels: meta.channels,
        input_height: meta.height,
        input_width: meta.width,
        horizon: meta.horizon,
        dt: meta.dt,
        head: loss.head(),
        ..base.clone()
    };
    match loss {
        LossKind::Displacement => stp_from(&cfg),
        _ => cfg,
    }
}

fn check_compat(cfg: &ModelConfig, meta: &DatasetMeta) -> Result<(), CliError> {
    let model = (cfg.input_channels, cfg.input_height, cfg.input_width, cfg.horizon);
    let data = (meta.channels, meta.height, meta.width, meta.horizon);
    if model != data || cfg.dt != meta.dt {
        return Err(CliError::Incompatible(format!(
            "model expects {}x{}x{} rasters with H = {} at dt {}, dataset has {}x{}x{} with H = {} at dt {}",
            model.0, model.1, model.2, model.3, cfg.dt, data.0, data.1, data.2, data.3, meta.dt
        )));
    }
    Ok(())
}

fn split_validation(mut samples: Vec<Sample>, fraction: f64) -> Result<(Vec<Sample>, Vec<Sample>), CliError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(CliError::Usage("train.val_fraction must be in [0, 1)".into()));
    }
    let n_val = (samples.len() as f64 * fraction).round() as usize;
    let val = samples.split_off(samples.len() - n_val);
    Ok((samples, val))
}

fn last_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".last");
    PathBuf::from(name)
}

pub fn train(settings: &Settings, args: &TrainArgs) -> Result<(), CliError> {
    let loss = settings.train.loss_kind().map_err(CliError::Usage)?;
    let (meta, samples) = read_dataset(&args.data)?;
    let (train, val) = match &args.val {
        Some(path) => {
            let (val_meta, val) = read_dataset(path)?;
            if val_meta != meta {
                return Err(CliError::Incompatible("validation dataset shape differs from training dataset".into()));
            }
            (samples, val)
        }
        None => split_validation(samples, settings.train.val_fraction)?,
    };
    let t = &settings.train;
    let cfg = TrainConfig {
        loss,
        epochs: t.epochs,
        batch_size: t.batch_size,
        adam: AdamConfig {
            lr: t.lr,
            decay_factor: t.decay_factor,
            decay_interval: t.decay_interval,
            ..AdamConfig::default()
        },
        seed: t.seed,
        val_limit: t.val_limit,
    };
    let wanted = model_config_for(&settings.model, &meta, &loss);
    let mut state = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if let Some(stored) = checkpoint_loss(&ck)? {
                if loss_name(&stored) != loss_name(&loss) {
                    return Err(CliError::Incompatible(format!(
                        "checkpoint was trained with {}, config asks for {}",
                        loss_name(&stored),
                        loss_name(&loss)
                    )));
                }
            }
            let state = TrainState::from_checkpoint(&ck)?;
            check_compat(&state.model.config, &meta)?;
            let (a, b) = (&state.model.config, &wanted);
            if (a.modes, a.head) != (b.modes, b.head) {
                return Err(CliError::Incompatible(format!(
                    "checkpoint has {} modes with a {} head, config implies {} with {}",
                    a.modes,
                    a.head.as_str(),
                    b.modes,
                    b.head.as_str()
                )));
            }
            state
        }
        None => {
            let mut model = Model::new(wanted)?;
            if t.anchor_init {
                anchor_init(&mut model, &train, t.seed)?;
            }
            TrainState::new(model, cfg.adam)
        }
    };
    eprintln!(
        "training {} on {} samples ({} validation), epochs {}..{}",
        loss_name(&loss),
        train.len(),
        val.len(),
        state.epoch,
        cfg.epochs
    );
    let mut log: Box<dyn Write> = match &args.log {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| CliError::io(p.display(), e))?),
        None => Box::new(io::stdout()),
    };
    let io_err = |e: io::Error| TrainError::Checkpoint(CheckpointError::Io(e));
    writeln!(log, "{LOG_HEADER}").map_err(|e| CliError::io("training log", e))?;
    let last = last_path(&args.out);
    fit(&mut state, &train, &val, &cfg, |entry, st, improved| {
        writeln!(log, "{}", entry.csv_line()).and_then(|_| log.flush()).map_err(io_err)?;
        if improved {
            st.save(&cfg, &args.out)?;
        }
        st.save(&cfg, &last)
    })?;
    if !args.out.exists() {
        state.save(&cfg, &args.out)?;
    }
    eprintln!("best validation loss {:.6}; checkpoint {}", state.best_val, args.out.display());
    Ok(())
}

pub fn eval(settings: &Settings, args: &EvalArgs) -> Result<(), CliError> {
    let (meta, samples) = read_dataset(&args.data)?;
    let batch = settings.eval.batch_size.max(1);
    let (name, preds): (String, Vec<MultimodalPrediction>) = match args.predictor {
        PredictorKind::Model => {
            let path = args
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--predictor model needs --checkpoint".into()))?;
            let ck = Checkpoint::load(path)?;
            let model = Model::from_checkpoint(&ck)?;
            check_compat(&model.config, &meta)?;
            let name = match (&args.name, checkpoint_loss(&ck)?) {
                (Some(n), _) => n.clone(),
                (None, Some(kind)) => loss_name(&kind).to_string(),
                (None, None) => "model".to_string(),
            };
            let preds = predict_all(&ModelPredictor { model: &model, name: &name }, &samples, batch)?;
            (name, preds)
        }
        PredictorKind::Baseline => named(&PropagationPredictor, args, &samples, batch)?,
        PredictorKind::Oracle => named(&OraclePredictor, args, &samples, batch)?,
    };
    let report = evaluate(&name, &samples, &preds, settings.eval.threshold)?;
    write_or_print(args.out.as_deref(), &report_csv(std::slice::from_ref(&report)))?;
    let mut markdown = report_markdown(std::slice::from_ref(&report), false)?;
    if let Some(path) = &args.calibration {
        let table = calibration(&samples, &preds, settings.eval.buckets, &DistancePolicy::displacement())?;
        write_file(path, table.to_csv().as_bytes())?;
        markdown.push('\n');
        markdown.push_str(&table.to_markdown());
    }
    if let Some(path) = &args.markdown {
        write_file(path, markdown.as_bytes())?;
    }
    Ok(())
}

fn named(
    predictor: &dyn Predictor,
    args: &EvalArgs,
    samples: &[Sample],
    batch: usize,
) -> Result<(String, Vec<MultimodalPrediction>), CliError> {
    let name = args.name.clone().unwrap_or_else(|| predictor.name());
    Ok((name, predict_all(predictor, samples, batch)?))
}

fn default_channels(image: &RasterImage) -> [usize; 3] {
    let last = image.channels.saturating_sub(1);
    [0, 1.min(last), 2.min(last)]
}

fn channel_triplet(args: &RasterizeArgs, fallback: [usize; 3]) -> Result<[usize; 3], CliError> {
    match &args.channels {
        None => Ok(fallback),
        Some(c) => c
            .as_slice()
            .try_into()
            .map_err(|_| CliError::Usage("--channels needs exactly three indices".into())),
    }
}

pub fn rasterize(args: &RasterizeArgs, settings: Settings) -> Result<(), CliError> {
    let mut outputs: Vec<(String, Vec<u8>)> = Vec::new();
    if let Some(data) = &args.data {
        if !args.lane.is_empty() {
            return Err(CliError::Usage("--lane needs the scene; use --config instead of --data".into()));
        }
        let (_, samples) = read_dataset(data)?;
        for &i in &args.indices {
            let s = samples
                .get(i)
                .ok_or_else(|| CliError::Usage(format!("index {i} out of range (dataset has {})", samples.len())))?;
            let channels = channel_triplet(args, default_channels(&s.raster))?;
            outputs.push((format!("sample_{i}.ppm"), ppm_bytes(&s.raster, channels)?));
        }
    } else {
        let recipe = settings.recipe()?;
        let origins = recipe.origins()?;
        if let Some(&bad) = args.indices.iter().find(|&&i| i >= origins.len()) {
            return Err(CliError::Usage(format!("index {bad} out of range (scenario yields {})", origins.len())));
        }
        for &i in &args.indices {
            let (episode, origin) = origins[i];
            let rollouts = recipe.episode(episode)?;
            let view = SceneView {
                scenario: &recipe.scenario,
                actors: states_at(&rollouts, origin.tick),
            };
            let target = rollouts[origin.actor_index].states[origin.tick].actor_id;
            if args.lane.is_empty() {
                let image = render(&view, target, &recipe.raster)?;
                let channels = channel_triplet(args, default_channels(&image))?;
                outputs.push((format!("sample_{i}.ppm"), ppm_bytes(&image, channels)?));
            }
            for &lane in &args.lane {
                let lane = u32::try_from(lane).map_err(|_| CliError::Usage(format!("bad lane id {lane}")))?;
                let image = rasterize_with_lane(&view, target, lane, &recipe.raster)?;
                let lf = image.channels - 1;
                let mut cfg = recipe.raster.clone();
                cfg.include_lf_layer = true;
                let pick = |layer| cfg.channel_of(layer).unwrap_or(0);
                let fallback = [pick(Layer::LaneSurface), pick(Layer::TargetActor), lf];
                let channels = channel_triplet(args, fallback)?;
                outputs.push((format!("sample_{i}_lane_{lane}.ppm"), ppm_bytes(&image, channels)?));
            }
        }
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(args.out.display(), e))?;
    for (name, bytes) in &outputs {
        write_file(&args.out.join(name), bytes)?;
        println!("{}", args.out.join(name).display());
    }
    Ok(())
}

pub fn compare(paths: &[PathBuf], out: Option<&Path>) -> Result<(), CliError> {
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p.display(), e))?;
        reports.extend(parse_report_csv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?);
    }
    reports.sort_by(|a, b| a.method.cmp(&b.method).then(a.modes.cmp(&b.modes)));
    let table = mtp_core::eval::compare(&reports)?;
    write_or_print(out, &table)
}
