//! Error metrics, mode filtering, maneuver slicing, calibration and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::geom::{MultimodalPrediction, Trajectory, Vec2};
use crate::losses::{displacement_loss, select_winner, DistancePolicy, LossError};
use crate::scenegen::{Maneuver, Sample};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{predictions} predictions for {samples} samples")]
    CountMismatch { samples: usize, predictions: usize },
    #[error("calibration needs at least 2 modes, got {0}")]
    TooFewModes(usize),
    #[error("predictor failed: {0}")]
    Predictor(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("report line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("reports are not comparable: {0}")]
    Schema(String),
}

/// Minimum probability for a mode to be considered by [`filter_and_pick`].
pub const DEFAULT_PROBABILITY_THRESHOLD: f64 = 0.2;

/// Anything that turns samples into multimodal predictions.
pub trait Predictor: Sync {
    fn name(&self) -> String;

    fn predict_batch(&self, samples: &[&Sample]) -> Result<Vec<MultimodalPrediction>, EvalError>;
}

/// Predictions for every sample, in batches of `batch`.
pub fn predict_all(
    predictor: &dyn Predictor,
    samples: &[Sample],
    batch: usize,
) -> Result<Vec<MultimodalPrediction>, EvalError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let preds = predictor.predict_batch(&refs)?;
        if preds.len() != refs.len() {
            return Err(EvalError::CountMismatch {
                samples: refs.len(),
                predictions: preds.len(),
            });
        }
        out.extend(preds);
    }
    Ok(out)
}

/// Returns the ground truth itself with probability one.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict_batch(&self, samples: &[&Sample]) -> Result<Vec<MultimodalPrediction>, EvalError> {
        Ok(samples
            .iter()
            .map(|s| MultimodalPrediction::single(s.ground_truth.clone()))
            .collect())
    }
}

/// Unit tangent of `path` at index `h`, treating the origin as the point before
/// index 0. `None` when the neighbours coincide.
fn tangent(path: &[Vec2], h: usize) -> Option<Vec2> {
    let at = |i: isize| if i < 0 { Vec2::ZERO } else { path[i as usize] };
    let h = h as isize;
    let last = path.len() as isize - 1;
    let d = if h < last { at(h + 1) - at(h - 1) } else { at(h) - at(h - 1) };
    let n = d.norm();
    (n > 1e-9).then(|| d * (1.0 / n))
}

/// Absolute longitudinal and lateral error at step `h` relative to the
/// ground-truth path direction; actor-frame axes where the tangent is undefined.
pub fn along_cross_errors(gt: &Trajectory, pred: &Trajectory, h: usize) -> Result<(f64, f64), EvalError> {
    if gt.horizon() != pred.horizon() {
        return Err(LossError::HorizonMismatch {
            gt: gt.horizon(),
            pred: pred.horizon(),
        }
        .into());
    }
    assert!(h < gt.horizon(), "horizon index {h} out of range");
    let e = pred.points()[h] - gt.points()[h];
    let t = tangent(gt.points(), h).unwrap_or(Vec2::new(1.0, 0.0));
    Ok((e.dot(t).abs(), e.dot(t.perp()).abs()))
}

/// Lowest-error mode among those with probability at least `threshold`;
/// the most likely mode if none qualifies.
pub fn filter_and_pick(pred: &MultimodalPrediction, gt: &Trajectory, threshold: f64) -> Result<usize, EvalError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, (m, p)) in pred.modes.iter().zip(&pred.probabilities).enumerate() {
        if *p < threshold {
            continue;
        }
        let d = displacement_loss(gt, m)?;
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    Ok(best.map(|(i, _)| i).unwrap_or_else(|| pred.most_likely()))
}

/// A reported horizon: a single step or the mean over all steps.
#[derive(Debug, Clone, PartialEq)]
pub enum HorizonPoint {
    Step { label: String, index: usize },
    Average,
}

impl HorizonPoint {
    pub fn label(&self) -> &str {
        match self {
            HorizonPoint::Step { label, .. } => label,
            HorizonPoint::Average => "avg",
        }
    }
}

fn seconds_label(s: f64) -> String {
    let r = (s * 10.0).round() / 10.0;
    if (r - r.round()).abs() < 1e-9 {
        format!("{}s", r.round() as i64)
    } else {
        format!("{r}s")
    }
}

/// `1s`, the final step and `avg` (deduplicated for short horizons).
pub fn horizon_points(horizon: usize, dt: f64) -> Vec<HorizonPoint> {
    let one = ((1.0 / dt).round() as usize).clamp(1, horizon) - 1;
    let last = horizon - 1;
    let mut out = vec![HorizonPoint::Step {
        label: seconds_label((one + 1) as f64 * dt),
        index: one,
    }];
    if last != one {
        out.push(HorizonPoint::Step {
            label: seconds_label(horizon as f64 * dt),
            index: last,
        });
    }
    out.push(HorizonPoint::Average);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricCell {
    pub slice: String,
    pub horizon: String,
    pub count: usize,
    pub displacement: f64,
    pub along_track: f64,
    pub cross_track: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub modes: usize,
    pub horizon: usize,
    pub cells: Vec<MetricCell>,
}

pub const SLICE_ALL: &str = "all";

impl MetricReport {
    pub fn cell(&self, slice: &str, horizon: &str) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.slice == slice && c.horizon == horizon)
    }
}

/// Per-sample errors of the chosen mode at every step.
struct SampleErrors {
    disp: Vec<f64>,
    along: Vec<f64>,
    cross: Vec<f64>,
}

fn sample_errors(gt: &Trajectory, mode: &Trajectory) -> Result<SampleErrors, EvalError> {
    let h = gt.horizon();
    let mut e = SampleErrors {
        disp: Vec::with_capacity(h),
        along: Vec::with_capacity(h),
        cross: Vec::with_capacity(h),
    };
    for i in 0..h {
        let (a, c) = along_cross_errors(gt, mode, i)?;
        e.disp.push(mode.points()[i].distance(gt.points()[i]));
        e.along.push(a);
        e.cross.push(c);
    }
    Ok(e)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Aggregates chosen-mode errors over all samples and per maneuver slice.
pub fn evaluate(
    method: &str,
    samples: &[Sample],
    predictions: &[MultimodalPrediction],
    threshold: f64,
) -> Result<MetricReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if samples.len() != predictions.len() {
        return Err(EvalError::CountMismatch {
            samples: samples.len(),
            predictions: predictions.len(),
        });
    }
    let horizon = samples[0].ground_truth.horizon();
    let dt = samples[0].ground_truth.dt();
    let points = horizon_points(horizon, dt);
    let mut per_slice: BTreeMap<&str, Vec<SampleErrors>> = BTreeMap::new();
    for (s, p) in samples.iter().zip(predictions) {
        let chosen = filter_and_pick(p, &s.ground_truth, threshold)?;
        let e = sample_errors(&s.ground_truth, &p.modes[chosen])?;
        per_slice.entry(s.maneuver.as_str()).or_default().push(e);
    }
    let mut cells = Vec::new();
    let mut emit = |slice: &str, errs: &[&SampleErrors]| {
        for hp in &points {
            let pick = |v: &[f64]| match hp {
                HorizonPoint::Step { index, .. } => v[*index],
                HorizonPoint::Average => mean(v),
            };
            let col = |f: fn(&SampleErrors) -> &Vec<f64>| mean(&errs.iter().map(|e| pick(f(e))).collect::<Vec<_>>());
            cells.push(MetricCell {
                slice: slice.to_string(),
                horizon: hp.label().to_string(),
                count: errs.len(),
                displacement: col(|e| &e.disp),
                along_track: col(|e| &e.along),
                cross_track: col(|e| &e.cross),
            });
        }
    };
    let all: Vec<&SampleErrors> = Maneuver::ALL
        .iter()
        .filter_map(|m| per_slice.get(m.as_str()))
        .flatten()
        .collect();
    emit(SLICE_ALL, &all);
    for m in Maneuver::ALL {
        if let Some(errs) = per_slice.get(m.as_str()) {
            emit(m.as_str(), &errs.iter().collect::<Vec<_>>());
        }
    }
    Ok(MetricReport {
        method: method.to_string(),
        modes: predictions[0].num_modes(),
        horizon,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBucket {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_predicted: f64,
    /// Fraction of the bucket's modes that were the best match.
    pub frequency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTable {
    /// Populated buckets only, in increasing probability.
    pub buckets: Vec<CalibrationBucket>,
}

impl CalibrationTable {
    /// Mean over populated buckets of `|frequency - mean_predicted|`.
    pub fn mean_abs_deviation(&self) -> f64 {
        if self.buckets.is_empty() {
            return 0.0;
        }
        self.buckets
            .iter()
            .map(|b| (b.frequency - b.mean_predicted).abs())
            .sum::<f64>()
            / self.buckets.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower,upper,count,mean_predicted,frequency\n");
        for b in &self.buckets {
            let _ = writeln!(s, "{},{},{},{},{}", b.lower, b.upper, b.count, b.mean_predicted, b.frequency);
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let rows: Vec<Vec<String>> = self
            .buckets
            .iter()
            .map(|b| {
                vec![
                    format!("[{:.1}, {:.1})", b.lower, b.upper),
                    b.count.to_string(),
                    format!("{:.3}", b.mean_predicted),
                    format!("{:.3}", b.frequency),
                ]
            })
            .collect();
        let mut out = aligned_table(&["Bucket", "Count", "Mean predicted", "Match frequency"], &rows);
        let _ = writeln!(out, "\nMean absolute deviation: {:.4}", self.mean_abs_deviation());
        out
    }
}

/// Buckets every mode's probability and records whether it was the best match.
pub fn calibration(
    samples: &[Sample],
    predictions: &[MultimodalPrediction],
    buckets: usize,
    policy: &DistancePolicy,
) -> Result<CalibrationTable, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if samples.len() != predictions.len() {
        return Err(EvalError::CountMismatch {
            samples: samples.len(),
            predictions: predictions.len(),
        });
    }
    let buckets = buckets.max(1);
    let mut count = vec![0usize; buckets];
    let mut psum = vec![0.0; buckets];
    let mut hits = vec![0usize; buckets];
    for (s, p) in samples.iter().zip(predictions) {
        if p.num_modes() < 2 {
            return Err(EvalError::TooFewModes(p.num_modes()));
        }
        let best = select_winner(&s.ground_truth, &p.modes, policy)?;
        for (m, prob) in p.probabilities.iter().enumerate() {
            let b = ((prob * buckets as f64).floor() as usize).min(buckets - 1);
            count[b] += 1;
            psum[b] += prob;
            hits[b] += usize::from(m == best);
        }
    }
    let width = 1.0 / buckets as f64;
    Ok(CalibrationTable {
        buckets: (0..buckets)
            .filter(|b| count[*b] > 0)
            .map(|b| CalibrationBucket {
                lower: b as f64 * width,
                upper: (b + 1) as f64 * width,
                count: count[b],
                mean_predicted: psum[b] / count[b] as f64,
                frequency: hits[b] as f64 / count[b] as f64,
            })
            .collect(),
    })
}

pub const REPORT_HEADER: &str = "method,modes,slice,horizon,H,count,displacement,along_track,cross_track";

/// One CSV row per slice and horizon.
pub fn report_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in reports {
        for c in &r.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.method, r.modes, c.slice, c.horizon, r.horizon, c.count, c.displacement, c.along_track, c.cross_track
            );
        }
    }
    s
}

pub fn parse_report_csv(text: &str) -> Result<Vec<MetricReport>, EvalError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == REPORT_HEADER => {}
        Some((i, h)) => {
            return Err(EvalError::Schema(format!("line {}: unexpected header `{h}`", i + 1)));
        }
        None => return Err(EvalError::Schema("empty report".into())),
    }
    let mut reports: Vec<MetricReport> = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |reason: &str| EvalError::Parse {
            line: i + 1,
            reason: reason.to_string(),
        };
        if f.len() != 9 {
            return Err(err("expected 9 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
        let int = |s: &str| s.parse::<usize>().map_err(|_| err("bad integer"));
        let cell = MetricCell {
            slice: f[2].to_string(),
            horizon: f[3].to_string(),
            count: int(f[5])?,
            displacement: num(f[6])?,
            along_track: num(f[7])?,
            cross_track: num(f[8])?,
        };
        let (modes, h) = (int(f[1])?, int(f[4])?);
        match reports.iter_mut().find(|r| r.method == f[0] && r.modes == modes) {
            Some(r) => {
                if r.horizon != h {
                    return Err(err("horizon changes within one method"));
                }
                r.cells.push(cell);
            }
            None => reports.push(MetricReport {
                method: f[0].to_string(),
                modes,
                horizon: h,
                cells: vec![cell],
            }),
        }
    }
    Ok(reports)
}

fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&width)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header.iter().map(|s| s.to_string()).collect());
    out.push_str(&line(width.iter().map(|w| "-".repeat(*w)).collect()));
    for r in rows {
        out.push_str(&line(r.clone()));
    }
    out
}

fn slice_rank(slice: &str) -> usize {
    match slice {
        SLICE_ALL => 0,
        s => 1 + Maneuver::ALL.iter().position(|m| m.as_str() == s).unwrap_or(3),
    }
}

/// Markdown table with one row per method and slice; with `highlight`, the
/// smallest value of each column within a slice is bold.
pub fn report_markdown(reports: &[MetricReport], highlight: bool) -> Result<String, EvalError> {
    let Some(first) = reports.first() else {
        return Err(EvalError::Schema("no reports".into()));
    };
    let labels: Vec<String> = {
        let mut seen = Vec::new();
        for c in &first.cells {
            if !seen.contains(&c.horizon) {
                seen.push(c.horizon.clone());
            }
        }
        seen
    };
    for r in reports {
        if r.horizon != first.horizon {
            return Err(EvalError::Schema(format!(
                "`{}` has H = {}, `{}` has H = {}",
                first.method, first.horizon, r.method, r.horizon
            )));
        }
        for c in &r.cells {
            if !labels.contains(&c.horizon) {
                return Err(EvalError::Schema(format!("`{}` reports horizon `{}`", r.method, c.horizon)));
            }
        }
    }
    let mut keys: Vec<(usize, &str, &str, usize)> = Vec::new();
    for r in reports {
        let mut slices: Vec<&str> = Vec::new();
        for c in &r.cells {
            if !slices.contains(&c.slice.as_str()) {
                slices.push(&c.slice);
            }
        }
        for s in slices {
            keys.push((slice_rank(s), s, &r.method, r.modes));
        }
    }
    keys.sort_by(|a, b| (a.0, a.1, a.2, a.3).cmp(&(b.0, b.1, b.2, b.3)));
    keys.dedup();

    let metrics: [(&str, fn(&MetricCell) -> f64); 3] = [
        ("Disp", |c| c.displacement),
        ("Along", |c| c.along_track),
        ("Cross", |c| c.cross_track),
    ];
    let mut header = vec!["Method".to_string(), "M".into(), "Slice".into(), "N".into()];
    for (name, _) in &metrics {
        for l in &labels {
            header.push(format!("{name} @{l}"));
        }
    }
    let find = |method: &str, modes: usize, slice: &str, h: &str| {
        reports
            .iter()
            .filter(|r| r.method == method && r.modes == modes)
            .find_map(|r| r.cell(slice, h))
    };
    let mut value_rows: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    let mut rows: Vec<Vec<String>> = Vec::new();
    for (_, slice, method, modes) in &keys {
        let n = labels.iter().find_map(|l| find(method, *modes, slice, l)).map(|c| c.count).unwrap_or(0);
        let mut vals = Vec::new();
        for (_, f) in &metrics {
            for l in &labels {
                vals.push(find(method, *modes, slice, l).map(f));
            }
        }
        rows.push(vec![method.to_string(), modes.to_string(), slice.to_string(), n.to_string()]);
        value_rows.push((slice.to_string(), vals));
    }
    for (i, (slice, vals)) in value_rows.iter().enumerate() {
        for (j, v) in vals.iter().enumerate() {
            let text = match v {
                None => "-".to_string(),
                Some(x) => {
                    let best = value_rows
                        .iter()
                        .filter(|(s, _)| s == slice)
                        .filter_map(|(_, vs)| vs[j])
                        .fold(f64::INFINITY, f64::min);
                    if highlight && *x == best && value_rows.iter().filter(|(s, _)| s == slice).count() > 1 {
                        format!("**{x:.3}**")
                    } else {
                        format!("{x:.3}")
                    }
                }
            };
            rows[i].push(text);
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    Ok(aligned_table(&header_refs, &rows))
}

/// Merges reports after checking they share a schema and horizon.
pub fn compare(reports: &[MetricReport]) -> Result<String, EvalError> {
    report_markdown(reports, true)
}
