//! Final-window performance estimates from truncated traces.

mod fit;
pub mod laws;

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::Stream;
use crate::trace::{ConfigId, EvalWindow, PerformanceTrace, SliceId, TraceError};
use fit::Problem;
pub use laws::{LawKind, ALL_LAWS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PredictError {
    #[error("window [{start}, {t_stop}] starts before step 1")]
    WindowUnderflow { t_stop: u64, start: i64 },
    #[error("insufficient history: {0}")]
    InsufficientHistory(String),
    #[error("trajectory fit failed for every start")]
    FitDiverged,
    #[error("evaluation window holds no examples")]
    EmptyEvaluationWindow,
    #[error("joint fitting needs at least two configurations")]
    TooFewConfigs,
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Mean over `[t_stop − Δ, t_stop]`.
pub fn constant_predict(trace: &PerformanceTrace, t_stop: u64, width: u64) -> Result<f64, PredictError> {
    if t_stop <= width {
        return Err(PredictError::WindowUnderflow {
            t_stop,
            start: t_stop as i64 - width as i64,
        });
    }
    Ok(trace.window_mean(t_stop - width, t_stop)?)
}

fn default_windows() -> usize {
    3
}

fn default_restarts() -> usize {
    10
}

fn default_max_iters() -> usize {
    200
}

/// Placement of the fitted window aggregates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowLayout {
    /// `F` windows ending at `t_stop`, `t_stop − spacing`, ... .
    #[default]
    Trailing,
    /// `F` windows whose end points split the observed prefix evenly.
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySettings {
    pub law: LawKind,
    /// Number of window aggregates `F` fitted per trace.
    #[serde(default = "default_windows")]
    pub windows: usize,
    /// Aggregation width; defaults to the evaluation width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_width: Option<u64>,
    /// Distance between consecutive aggregate end points; defaults to
    /// `fit_width + 1` (adjacent, non-overlapping windows).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<u64>,
    #[serde(default)]
    pub layout: WindowLayout,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrajectorySettings {
    pub fn new(law: LawKind) -> Self {
        Self {
            law,
            windows: default_windows(),
            fit_width: None,
            spacing: None,
            layout: WindowLayout::Trailing,
            restarts: default_restarts(),
            max_iters: default_max_iters(),
            seed: 0,
        }
    }

    /// Aggregate windows `(start, end)` for a stop at `t_stop` on traces
    /// whose first recorded step is `first`.
    pub fn windows_at(&self, first: u64, t_stop: u64, eval_width: u64) -> Result<Vec<(u64, u64)>, PredictError> {
        let width = self.fit_width.unwrap_or(eval_width);
        let f = self.windows as u64;
        if self.windows < self.law.free_params() {
            return Err(PredictError::InsufficientHistory(format!(
                "{} aggregates cannot determine {} parameters of {}",
                self.windows,
                self.law.free_params(),
                self.law
            )));
        }
        let short = |need: u64| {
            PredictError::InsufficientHistory(format!("{f} windows need more than {need} steps before {t_stop}"))
        };
        match self.layout {
            WindowLayout::Trailing => {
                let spacing = self.spacing.unwrap_or(width + 1).max(1);
                let back = (f - 1) * spacing + width;
                if back >= t_stop {
                    return Err(short(back));
                }
                Ok((0..f)
                    .map(|j| {
                        let end = t_stop - (f - 1 - j) * spacing;
                        (end - width, end)
                    })
                    .collect())
            }
            WindowLayout::Spread => {
                let first = first.max(1);
                let span = (t_stop + 1).saturating_sub(first);
                if span < 2 * f {
                    return Err(short(2 * f));
                }
                let ends: Vec<u64> = (1..=f).map(|j| first - 1 + (span * j).div_ceil(f)).collect();
                let width = width.min(ends[0] - first);
                Ok(ends.into_iter().map(|e| (e - width, e)).collect())
            }
        }
    }
}

/// Fitted law for one configuration. `prediction = f(1) + offset`, where the
/// offset carries the absolute level shared by all configurations of a
/// joint fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LawFit {
    pub config: ConfigId,
    pub law: LawKind,
    pub params: Vec<f64>,
    pub offset: f64,
    pub residual: f64,
    pub prediction: f64,
}

pub fn trajectory_predict(fit: &LawFit) -> f64 {
    fit.law.eval(&fit.params, 1.0) + fit.offset
}

/// Writes `config_id,law_kind,params...,residual,prediction` records.
pub fn write_law_fits<W: Write>(writer: W, fits: &[LawFit]) -> Result<(), TraceError> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    let err = |e: csv::Error| TraceError::Format(e.to_string());
    for fit in fits {
        let mut row = vec![fit.config.to_string(), fit.law.name().to_string()];
        row.extend(fit.params.iter().map(|p| p.to_string()));
        row.push(fit.residual.to_string());
        row.push(fit.prediction.to_string());
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| TraceError::Format(e.to_string()))
}

/// Joint pairwise-difference fit over the traces truncated at `t_stop`.
///
/// Differences between configurations come from minimizing the pairwise
/// objective; the shared absolute level is then fixed by an independent
/// absolute fit of the configuration with the smallest id.
pub fn fit_trajectory_joint(
    traces: &[PerformanceTrace],
    t_stop: u64,
    eval_width: u64,
    settings: &TrajectorySettings,
) -> Result<BTreeMap<ConfigId, LawFit>, PredictError> {
    if traces.len() < 2 {
        return Err(PredictError::TooFewConfigs);
    }
    let horizon = traces[0].horizon();
    let first = traces
        .iter()
        .filter_map(|t| t.points().first().map(|p| p.0))
        .max()
        .unwrap_or(1);
    let windows = settings.windows_at(first, t_stop, eval_width)?;
    let d: Vec<f64> = windows.iter().map(|w| w.1 as f64 / horizon as f64).collect();
    let mut a = Vec::with_capacity(traces.len());
    for t in traces {
        let row = windows
            .iter()
            .map(|(s, e)| {
                t.window_mean(*s, *e).map_err(|_| {
                    PredictError::InsufficientHistory(format!(
                        "config {} has no points in [{s}, {e}]",
                        t.config()
                    ))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        a.push(row);
    }
    fit_aggregates(traces.iter().map(|t| t.config()).collect(), &d, &a, settings)
}

/// Joint fit on precomputed aggregates `a[ω][j]` observed at times `d[j]`.
pub fn fit_aggregates(
    ids: Vec<ConfigId>,
    d: &[f64],
    a: &[Vec<f64>],
    settings: &TrajectorySettings,
) -> Result<BTreeMap<ConfigId, LawFit>, PredictError> {
    if ids.len() < 2 {
        return Err(PredictError::TooFewConfigs);
    }
    if d.len() < settings.law.free_params() {
        return Err(PredictError::InsufficientHistory(format!(
            "{} aggregates for {} parameters",
            d.len(),
            settings.law.free_params()
        )));
    }
    let law = settings.law;
    let joint = Problem {
        law,
        d,
        a,
        shared_offsets: true,
        max_iters: settings.max_iters,
    };
    let sol = joint
        .solve_multistart(settings.restarts, settings.seed)
        .ok_or(PredictError::FitDiverged)?;

    let anchor = (0..ids.len()).min_by_key(|i| ids[*i]).unwrap();
    let single = [a[anchor].clone()];
    let absolute = Problem {
        law,
        d,
        a: &single,
        shared_offsets: false,
        max_iters: settings.max_iters,
    };
    let abs = absolute
        .solve_multistart(settings.restarts, settings.seed)
        .ok_or(PredictError::FitDiverged)?;
    let offset = law.eval(&abs.params[0], 1.0) - law.eval(&sol.params[anchor], 1.0);

    let mut out = BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let params = sol.params[i].clone();
        let prediction = law.eval(&params, 1.0) + offset;
        if !prediction.is_finite() {
            return Err(PredictError::FitDiverged);
        }
        out.insert(
            id,
            LawFit {
                config: id,
                law,
                residual: joint.rms(&params, &a[i], &sol.offsets),
                params,
                offset,
                prediction,
            },
        );
    }
    Ok(out)
}

/// Evaluation-window example counts per slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceWeights {
    pub weights: BTreeMap<SliceId, u64>,
    pub total: u64,
}

impl SliceWeights {
    pub fn new(weights: BTreeMap<SliceId, u64>) -> Result<Self, PredictError> {
        let total = weights.values().sum();
        if total == 0 {
            return Err(PredictError::EmptyEvaluationWindow);
        }
        Ok(Self { weights, total })
    }
}

/// Counts the examples of `stream` inside `eval` per slice, where
/// `slices[t - 1]` is the slice of the example at step `t`.
pub fn slice_weights_from_stream(stream: &Stream, slices: &[SliceId], eval: &EvalWindow) -> Result<SliceWeights, PredictError> {
    let mut weights = BTreeMap::new();
    for e in stream.examples() {
        if eval.contains(e.step) {
            *weights.entry(slices[(e.step - 1) as usize]).or_insert(0) += 1;
        }
    }
    SliceWeights::new(weights)
}

/// Weighted mean of per-slice predictions. Slices with zero weight may be
/// missing from `predictions`.
pub fn stratified_predict(predictions: &BTreeMap<SliceId, f64>, weights: &SliceWeights) -> Result<f64, PredictError> {
    if weights.total == 0 {
        return Err(PredictError::EmptyEvaluationWindow);
    }
    let mut sum = 0.0;
    for (slice, w) in &weights.weights {
        if *w == 0 {
            continue;
        }
        let p = predictions.get(slice).ok_or_else(|| {
            PredictError::InsufficientHistory(format!("no prediction for slice {slice}"))
        })?;
        sum += *w as f64 * p;
    }
    Ok(sum / weights.total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PredictorSpec {
    Constant,
    Trajectory(TrajectorySettings),
    StratifiedConstant,
    StratifiedTrajectory(TrajectorySettings),
}

impl PredictorSpec {
    pub fn name(&self) -> String {
        match self {
            PredictorSpec::Constant => "constant".into(),
            PredictorSpec::Trajectory(s) => format!("trajectory:{}", s.law),
            PredictorSpec::StratifiedConstant => "stratified:constant".into(),
            PredictorSpec::StratifiedTrajectory(s) => format!("stratified:trajectory:{}", s.law),
        }
    }

    pub fn needs_slices(&self) -> bool {
        matches!(self, PredictorSpec::StratifiedConstant | PredictorSpec::StratifiedTrajectory(_))
    }
}

/// Predicts final-window performance of every trace (already truncated at
/// `t_stop`).
pub fn predict_all(
    spec: &PredictorSpec,
    traces: &[PerformanceTrace],
    t_stop: u64,
    eval_width: u64,
    weights: Option<&SliceWeights>,
) -> Result<BTreeMap<ConfigId, f64>, PredictError> {
    let aggregate = |inner: Option<&TrajectorySettings>| -> Result<BTreeMap<ConfigId, f64>, PredictError> {
        match inner {
            None => traces
                .iter()
                .map(|t| Ok((t.config(), constant_predict(t, t_stop, eval_width)?)))
                .collect(),
            Some(s) if traces.len() == 1 => {
                // A lone configuration has no pairs; its absolute fit is used.
                let t = &traces[0];
                let twin = [t.clone(), t.clone()];
                let fits = fit_trajectory_joint(&twin, t_stop, eval_width, s)?;
                Ok([(t.config(), fits[&t.config()].prediction)].into())
            }
            Some(s) => Ok(fit_trajectory_joint(traces, t_stop, eval_width, s)?
                .into_iter()
                .map(|(id, f)| (id, f.prediction))
                .collect()),
        }
    };
    let (inner, stratified) = match spec {
        PredictorSpec::Constant => (None, false),
        PredictorSpec::Trajectory(s) => (Some(s), false),
        PredictorSpec::StratifiedConstant => (None, true),
        PredictorSpec::StratifiedTrajectory(s) => (Some(s), true),
    };
    if !stratified {
        return aggregate(inner);
    }
    let weights = weights.ok_or_else(|| PredictError::InsufficientHistory("stratified prediction needs slice weights".into()))?;
    let mut fallback: Option<BTreeMap<ConfigId, f64>> = None;
    let mut per_slice: BTreeMap<ConfigId, BTreeMap<SliceId, f64>> = BTreeMap::new();
    for (slice, w) in &weights.weights {
        if *w == 0 {
            continue;
        }
        let sliced: Option<Vec<PerformanceTrace>> = traces.iter().map(|t| t.slice_trace(*slice)).collect();
        let preds = sliced.and_then(|sliced| match inner {
            None => sliced
                .iter()
                .map(|t| constant_predict(t, t_stop, eval_width).map(|p| (t.config(), p)))
                .collect::<Result<BTreeMap<_, _>, _>>()
                .ok(),
            Some(s) if sliced.len() >= 2 => fit_trajectory_joint(&sliced, t_stop, eval_width, s)
                .ok()
                .map(|fits| fits.into_iter().map(|(id, f)| (id, f.prediction)).collect()),
            Some(_) => None,
        });
        let preds = match preds {
            Some(p) => p,
            None => match &fallback {
                Some(f) => f.clone(),
                None => fallback.insert(aggregate(inner)?).clone(),
            },
        };
        for (id, p) in preds {
            per_slice.entry(id).or_default().insert(*slice, p);
        }
    }
    traces
        .iter()
        .map(|t| {
            let id = t.config();
            let slices = per_slice.remove(&id).unwrap_or_default();
            Ok((id, stratified_predict(&slices, weights)?))
        })
        .collect()
}
