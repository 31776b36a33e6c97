//! Configuration identifiers, time-indexed performance traces and windowed
//! aggregation.
//!
//! Steps are 1-indexed and metrics are loss-oriented (lower is better). A trace
//! may carry a per-slice decomposition whose steps are a subset of the
//! aggregate trace's steps.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a candidate configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigId(pub u32);

impl fmt::Display for ConfigId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identifier of a data slice (cluster or cluster group).
pub type SliceId = u32;

/// A recorded `(step, metric)` pair.
pub type Point = (u64, f64);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("no trace step lies in window [{start}, {end}]")]
    EmptyWindow { start: u64, end: u64 },
    #[error("trace ends at step {last} but the window starts at {needed}")]
    TraceIncomplete { last: u64, needed: u64 },
    #[error("step sets differ at step {step}")]
    StepMismatch { step: u64 },
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error("invalid evaluation window: end {end}, width {width}")]
    InvalidWindow { end: u64, width: u64 },
    #[error("trace file: {0}")]
    Format(String),
}

/// Evaluation window `[end - width, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalWindow {
    end: u64,
    width: u64,
}

impl EvalWindow {
    pub fn new(end: u64, width: u64) -> Result<Self, TraceError> {
        if end <= width {
            return Err(TraceError::InvalidWindow { end, width });
        }
        Ok(Self { end, width })
    }

    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn width(&self) -> u64 {
        self.width
    }

    pub fn start(&self) -> u64 {
        self.end - self.width
    }

    pub fn contains(&self, step: u64) -> bool {
        step >= self.start() && step <= self.end
    }
}

/// Time series of per-step metric values for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceTrace {
    config: ConfigId,
    horizon: u64,
    points: Vec<Point>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    slices: BTreeMap<SliceId, Vec<Point>>,
}

fn check_points(points: &[Point], horizon: u64) -> Result<(), TraceError> {
    let mut prev = 0u64;
    for &(step, value) in points {
        if step <= prev || step > horizon {
            return Err(TraceError::Invalid(format!(
                "step {step} out of order or outside [1, {horizon}]"
            )));
        }
        if value.is_nan() {
            return Err(TraceError::Invalid(format!("NaN metric at step {step}")));
        }
        prev = step;
    }
    Ok(())
}

fn points_in(points: &[Point], start: u64, end: u64) -> &[Point] {
    let lo = points.partition_point(|p| p.0 < start);
    let hi = points.partition_point(|p| p.0 <= end);
    &points[lo..hi.max(lo)]
}

fn mean_in(points: &[Point], start: u64, end: u64) -> Result<f64, TraceError> {
    let window = points_in(points, start, end);
    if window.is_empty() {
        return Err(TraceError::EmptyWindow { start, end });
    }
    Ok(window.iter().map(|p| p.1).sum::<f64>() / window.len() as f64)
}

fn subtract(a: &[Point], b: &[Point]) -> Result<Vec<Point>, TraceError> {
    let (Some(a_first), Some(b_first)) = (a.first(), b.first()) else {
        return Ok(Vec::new());
    };
    let lo = a_first.0.max(b_first.0);
    let hi = a.last().unwrap().0.min(b.last().unwrap().0);
    if lo > hi {
        return Ok(Vec::new());
    }
    let a = points_in(a, lo, hi);
    let b = points_in(b, lo, hi);
    if a.len() != b.len() {
        let step = a
            .iter()
            .zip(b)
            .find(|(x, y)| x.0 != y.0)
            .map(|(x, y)| x.0.min(y.0))
            .unwrap_or(hi);
        return Err(TraceError::StepMismatch { step });
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.0 != y.0 {
                Err(TraceError::StepMismatch { step: x.0.min(y.0) })
            } else {
                Ok((x.0, x.1 - y.1))
            }
        })
        .collect()
}

impl PerformanceTrace {
    pub fn new(config: ConfigId, horizon: u64, points: Vec<Point>) -> Result<Self, TraceError> {
        if horizon == 0 {
            return Err(TraceError::Invalid("horizon must be positive".into()));
        }
        check_points(&points, horizon)?;
        Ok(Self {
            config,
            horizon,
            points,
            slices: BTreeMap::new(),
        })
    }

    /// Attaches a per-slice decomposition. Every slice step must also be an
    /// aggregate step.
    pub fn with_slices(mut self, slices: BTreeMap<SliceId, Vec<Point>>) -> Result<Self, TraceError> {
        let steps: BTreeSet<u64> = self.points.iter().map(|p| p.0).collect();
        for (slice, pts) in &slices {
            check_points(pts, self.horizon)?;
            if let Some(p) = pts.iter().find(|p| !steps.contains(&p.0)) {
                return Err(TraceError::Invalid(format!(
                    "slice {slice} has step {} absent from the aggregate trace",
                    p.0
                )));
            }
        }
        self.slices = slices;
        Ok(self)
    }

    pub fn config(&self) -> ConfigId {
        self.config
    }

    pub fn horizon(&self) -> u64 {
        self.horizon
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn slices(&self) -> &BTreeMap<SliceId, Vec<Point>> {
        &self.slices
    }

    pub fn has_slices(&self) -> bool {
        !self.slices.is_empty()
    }

    /// Restriction of the trace to one slice, as a standalone trace.
    pub fn slice_trace(&self, slice: SliceId) -> Option<PerformanceTrace> {
        self.slices.get(&slice).map(|pts| PerformanceTrace {
            config: self.config,
            horizon: self.horizon,
            points: pts.clone(),
            slices: BTreeMap::new(),
        })
    }

    pub fn last_step(&self) -> Option<u64> {
        self.points.last().map(|p| p.0)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Prefix of the trace up to and including `t_stop` (slices included).
    pub fn truncate(&self, t_stop: u64) -> PerformanceTrace {
        let cut = |pts: &[Point]| pts[..pts.partition_point(|p| p.0 <= t_stop)].to_vec();
        PerformanceTrace {
            config: self.config,
            horizon: self.horizon,
            points: cut(&self.points),
            slices: self
                .slices
                .iter()
                .map(|(k, v)| (*k, cut(v)))
                .collect(),
        }
    }

    /// Number of recorded points in `[start, end]`.
    pub fn count_in(&self, start: u64, end: u64) -> usize {
        points_in(&self.points, start, end).len()
    }

    /// Mean metric over recorded steps in the closed interval `[start, end]`.
    pub fn window_mean(&self, start: u64, end: u64) -> Result<f64, TraceError> {
        mean_in(&self.points, start, end)
    }

    /// Mean over `[T - Δ, T]`, the ground-truth target for ranking.
    pub fn final_window_mean(&self, eval: &EvalWindow) -> Result<f64, TraceError> {
        let last = self.last_step().unwrap_or(0);
        if last < eval.start() {
            return Err(TraceError::TraceIncomplete {
                last,
                needed: eval.start(),
            });
        }
        self.window_mean(eval.start(), eval.end())
    }

    /// Pointwise difference `self - reference` over the overlapping step range.
    /// Slices present in both traces are differenced as well.
    pub fn relative_to(&self, reference: &PerformanceTrace) -> Result<PerformanceTrace, TraceError> {
        let points = subtract(&self.points, &reference.points)?;
        let mut slices = BTreeMap::new();
        for (id, pts) in &self.slices {
            if let Some(other) = reference.slices.get(id) {
                slices.insert(*id, subtract(pts, other)?);
            }
        }
        Ok(PerformanceTrace {
            config: self.config,
            horizon: self.horizon.max(reference.horizon),
            points,
            slices,
        })
    }

    /// Applies `f` to every recorded metric (aggregate and slices).
    pub fn map_values(&self, f: impl Fn(u64, f64) -> f64) -> PerformanceTrace {
        let map = |pts: &[Point]| pts.iter().map(|&(s, v)| (s, f(s, v))).collect::<Vec<_>>();
        PerformanceTrace {
            config: self.config,
            horizon: self.horizon,
            points: map(&self.points),
            slices: self.slices.iter().map(|(k, v)| (*k, map(v))).collect(),
        }
    }
}

/// Free-function form of [`PerformanceTrace::window_mean`].
pub fn window_mean(trace: &PerformanceTrace, start: u64, end: u64) -> Result<f64, TraceError> {
    trace.window_mean(start, end)
}

pub fn final_window_mean(trace: &PerformanceTrace, eval: &EvalWindow) -> Result<f64, TraceError> {
    trace.final_window_mean(eval)
}

pub fn relative_trace(
    trace: &PerformanceTrace,
    reference: &PerformanceTrace,
) -> Result<PerformanceTrace, TraceError> {
    trace.relative_to(reference)
}

/// An ordering of configurations, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ranking(Vec<ConfigId>);

impl Ranking {
    /// Builds a ranking; duplicate identifiers are rejected.
    pub fn new(order: Vec<ConfigId>) -> Result<Self, TraceError> {
        let mut seen = BTreeSet::new();
        for id in &order {
            if !seen.insert(*id) {
                return Err(TraceError::Invalid(format!("duplicate config {id} in ranking")));
            }
        }
        Ok(Self(order))
    }

    pub fn order(&self) -> &[ConfigId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<ConfigId> {
        self.0
    }

    /// True when `self` contains exactly the identifiers in `set`.
    pub fn is_permutation_of<'a>(&self, set: impl IntoIterator<Item = &'a ConfigId>) -> bool {
        let expected: BTreeSet<ConfigId> = set.into_iter().copied().collect();
        expected.len() == self.0.len() && self.0.iter().all(|id| expected.contains(id))
    }
}

/// Writes traces as `config_id,step,metric,slice_id` records; aggregate rows
/// leave `slice_id` empty.
pub fn write_traces<W: Write>(writer: W, traces: &[PerformanceTrace]) -> Result<(), TraceError> {
    let fmt_err = |e: csv::Error| TraceError::Format(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["config_id", "step", "metric", "slice_id"])
        .map_err(fmt_err)?;
    for trace in traces {
        let id = trace.config.0.to_string();
        for &(step, value) in &trace.points {
            w.write_record([id.as_str(), &step.to_string(), &value.to_string(), ""])
                .map_err(fmt_err)?;
        }
        for (slice, pts) in &trace.slices {
            let slice = slice.to_string();
            for &(step, value) in pts {
                w.write_record([id.as_str(), &step.to_string(), &value.to_string(), &slice])
                    .map_err(fmt_err)?;
            }
        }
    }
    w.flush().map_err(|e| TraceError::Format(e.to_string()))
}

/// Reads traces written by [`write_traces`]. Traces are returned ordered by
/// configuration id.
pub fn read_traces<R: Read>(reader: R, horizon: u64) -> Result<Vec<PerformanceTrace>, TraceError> {
    type Series = (Vec<Point>, BTreeMap<SliceId, Vec<Point>>);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| TraceError::Format(e.to_string()))?
        .clone();
    if headers.get(0) != Some("config_id") || headers.get(1) != Some("step") || headers.get(2) != Some("metric") {
        return Err(TraceError::Format("missing config_id,step,metric header".into()));
    }
    let mut by_config: BTreeMap<ConfigId, Series> = BTreeMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| TraceError::Format(e.to_string()))?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let bad = |what: &str| TraceError::Format(format!("record {}: bad {what}", line + 1));
        let id: u32 = field(0).parse().map_err(|_| bad("config_id"))?;
        let step: u64 = field(1).parse().map_err(|_| bad("step"))?;
        let metric: f64 = field(2).parse().map_err(|_| bad("metric"))?;
        let entry = by_config.entry(ConfigId(id)).or_default();
        match field(3) {
            "" => entry.0.push((step, metric)),
            s => {
                let slice: SliceId = s.parse().map_err(|_| bad("slice_id"))?;
                entry.1.entry(slice).or_default().push((step, metric));
            }
        }
    }
    by_config
        .into_iter()
        .map(|(id, (points, slices))| PerformanceTrace::new(id, horizon, points)?.with_slices(slices))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(points: &[(u64, f64)]) -> PerformanceTrace {
        PerformanceTrace::new(ConfigId(0), 10, points.to_vec()).unwrap()
    }

    #[test]
    fn window_mean_examples() {
        let t = trace(&[(1, 0.5), (2, 0.5), (3, 0.5)]);
        assert_eq!(t.window_mean(1, 3).unwrap(), 0.5);
        let t = trace(&[(1, 0.2), (2, 0.4)]);
        assert!((t.window_mean(1, 2).unwrap() - 0.3).abs() < 1e-15);
        let t = trace(&[(1, 0.2), (2, 0.4), (3, 0.9)]);
        assert!((t.window_mean(2, 3).unwrap() - 0.65).abs() < 1e-15);
    }

    #[test]
    fn window_mean_empty() {
        let t = trace(&[(1, 0.2), (5, 0.4)]);
        assert_eq!(
            t.window_mean(2, 4),
            Err(TraceError::EmptyWindow { start: 2, end: 4 })
        );
    }

    #[test]
    fn final_window_linear() {
        let t = PerformanceTrace::new(
            ConfigId(1),
            10,
            (1..=10).map(|s| (s, s as f64 / 10.0)).collect(),
        )
        .unwrap();
        let eval = EvalWindow::new(10, 2).unwrap();
        assert!((t.final_window_mean(&eval).unwrap() - 0.9).abs() < 1e-12);
        let c = t.map_values(|_, _| 0.42);
        assert_eq!(c.final_window_mean(&eval).unwrap(), 0.42);
    }

    #[test]
    fn final_window_incomplete() {
        // T = 10, Δ = 2: stopping at T - Δ - 1 = 7 leaves the window uncovered.
        let t = PerformanceTrace::new(ConfigId(1), 10, (1..=7).map(|s| (s, 0.1)).collect()).unwrap();
        let eval = EvalWindow::new(10, 2).unwrap();
        assert!(matches!(
            t.final_window_mean(&eval),
            Err(TraceError::TraceIncomplete { last: 7, needed: 8 })
        ));
    }

    #[test]
    fn eval_window_must_start_at_one() {
        assert!(EvalWindow::new(5, 5).is_err());
        assert_eq!(EvalWindow::new(5, 4).unwrap().start(), 1);
    }

    #[test]
    fn relative_examples() {
        let a = trace(&[(1, 0.5), (2, 0.7)]);
        let b = trace(&[(1, 0.4), (2, 0.4)]);
        let r = a.relative_to(&b).unwrap();
        assert_eq!(r.points().len(), 2);
        assert!((r.points()[0].1 - 0.1).abs() < 1e-15);
        assert!((r.points()[1].1 - 0.3).abs() < 1e-15);
        assert!(a.relative_to(&a).unwrap().points().iter().all(|p| p.1 == 0.0));

        let c = trace(&[(1, 0.4), (3, 0.4)]);
        assert!(matches!(a.relative_to(&c), Err(TraceError::StepMismatch { .. })));
    }

    #[test]
    fn rejects_unordered_steps() {
        assert!(PerformanceTrace::new(ConfigId(0), 10, vec![(2, 0.1), (2, 0.2)]).is_err());
        assert!(PerformanceTrace::new(ConfigId(0), 10, vec![(0, 0.1)]).is_err());
        assert!(PerformanceTrace::new(ConfigId(0), 10, vec![(11, 0.1)]).is_err());
    }

    #[test]
    fn slice_steps_must_be_aggregate_steps() {
        let t = trace(&[(1, 0.5), (2, 0.7)]);
        let mut s = BTreeMap::new();
        s.insert(0, vec![(3, 0.1)]);
        assert!(t.clone().with_slices(s).is_err());
        let mut s = BTreeMap::new();
        s.insert(0, vec![(2, 0.1)]);
        let t = t.with_slices(s).unwrap();
        assert_eq!(t.slice_trace(0).unwrap().points(), &[(2, 0.1)]);
        assert_eq!(t.truncate(1).slices()[&0].len(), 0);
    }

    #[test]
    fn csv_round_trip() {
        let mut slices = BTreeMap::new();
        slices.insert(3, vec![(2, 0.1 + 0.2)]);
        let a = PerformanceTrace::new(ConfigId(7), 5, vec![(1, 1.0 / 3.0), (2, 0.25)])
            .unwrap()
            .with_slices(slices)
            .unwrap();
        let b = PerformanceTrace::new(ConfigId(2), 5, vec![(5, -0.5)]).unwrap();
        let mut buf = Vec::new();
        write_traces(&mut buf, &[a.clone(), b.clone()]).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("config_id,step,metric,slice_id\n"));
        let back = read_traces(buf.as_slice(), 5).unwrap();
        assert_eq!(back, vec![b, a]);
    }

    #[test]
    fn ranking_rejects_duplicates() {
        assert!(Ranking::new(vec![ConfigId(1), ConfigId(1)]).is_err());
        let r = Ranking::new(vec![ConfigId(2), ConfigId(1)]).unwrap();
        assert!(r.is_permutation_of(&[ConfigId(1), ConfigId(2)]));
        assert!(!r.is_permutation_of(&[ConfigId(1), ConfigId(3)]));
    }

    fn arb_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-5.0f64..5.0, n)
    }

    fn from_values(id: u32, v: &[f64]) -> PerformanceTrace {
        PerformanceTrace::new(
            ConfigId(id),
            v.len() as u64,
            v.iter().enumerate().map(|(i, x)| (i as u64 + 1, *x)).collect(),
        )
        .unwrap()
    }

    proptest! {
        #[test]
        fn window_mean_shift_equivariant(v in arb_values(20), c in -3.0f64..3.0, a in 1u64..10, w in 0u64..10) {
            let t = from_values(0, &v);
            let shifted = t.map_values(|_, x| x + c);
            let b = a + w;
            let m = t.window_mean(a, b).unwrap();
            prop_assert!((shifted.window_mean(a, b).unwrap() - (m + c)).abs() < 1e-12);
        }

        #[test]
        fn relative_is_additive(v in arb_values(15), u in arb_values(15), w in arb_values(15)) {
            let (a, b, c) = (from_values(0, &v), from_values(1, &u), from_values(2, &w));
            let ab = a.relative_to(&b).unwrap();
            let bc = b.relative_to(&c).unwrap();
            let ac = a.relative_to(&c).unwrap();
            for ((x, y), z) in ab.points().iter().zip(bc.points()).zip(ac.points()) {
                prop_assert!((x.1 + y.1 - z.1).abs() < 1e-12);
            }
        }

        #[test]
        fn relative_commutes_with_final_mean(v in arb_values(12), u in arb_values(12), d in 0u64..11) {
            let (a, r) = (from_values(0, &v), from_values(1, &u));
            let eval = EvalWindow::new(12, d).unwrap();
            let lhs = a.relative_to(&r).unwrap().final_window_mean(&eval).unwrap();
            let rhs = a.final_window_mean(&eval).unwrap() - r.final_window_mean(&eval).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
