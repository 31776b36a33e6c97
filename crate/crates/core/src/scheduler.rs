//! Data-reduction strategies: one-shot early stopping, performance-based
//! stopping and late starting, with exact example-count cost accounting.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::online::{HyperConfig, LearnError, OnlineRun, TrainOptions};
use crate::predictors::{predict_all, PredictError, PredictorSpec, SliceWeights};
use crate::ranking::rank_by;
use crate::stream::{subsample_cost, Label, Stream, StreamError, SubsampleSpec};
use crate::trace::{ConfigId, EvalWindow, PerformanceTrace, Ranking, SliceId, TraceError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("window [{start}, {t_stop}] starts before step 1")]
    WindowUnderflow { t_stop: u64, start: i64 },
    #[error("invalid interval: start {start} must precede t_stop {t_stop} <= horizon")]
    InvalidInterval { start: u64, t_stop: u64 },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("search needs at least {needed} configurations, got {got}")]
    TooFewConfigs { needed: usize, got: usize },
    #[error("prediction failed at step {step}: {source}")]
    PredictorFailure { step: u64, source: PredictError },
    #[error("unknown configuration {0}")]
    UnknownConfig(ConfigId),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum StopMode {
    OneShot { t_stop: u64 },
    PerformanceBased { stops: Vec<u64>, rho: f64 },
    LateStart { start: u64, t_stop: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingPlan {
    #[serde(flatten)]
    pub mode: StopMode,
    pub predictor: PredictorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample: Option<SubsampleSpec>,
}

impl StoppingPlan {
    /// Steps skipped before training starts.
    pub fn start_step(&self) -> u64 {
        match self.mode {
            StopMode::LateStart { start, .. } => start,
            _ => 0,
        }
    }

    pub fn validate(&self, horizon: u64) -> Result<(), SearchError> {
        match &self.mode {
            StopMode::OneShot { t_stop } if *t_stop == 0 || *t_stop > horizon => Err(SearchError::InvalidPlan(format!(
                "t_stop {t_stop} outside [1, {horizon}]"
            ))),
            StopMode::LateStart { start, t_stop } if start >= t_stop || *t_stop > horizon => {
                Err(SearchError::InvalidInterval {
                    start: *start,
                    t_stop: *t_stop,
                })
            }
            StopMode::PerformanceBased { stops, rho } => {
                if !(*rho > 0.0 && *rho < 1.0) {
                    return Err(SearchError::InvalidPlan(format!("rho {rho} outside (0, 1)")));
                }
                if stops.windows(2).any(|w| w[0] >= w[1]) || stops.first() == Some(&0) || stops.last().is_some_and(|t| *t >= horizon) {
                    return Err(SearchError::InvalidPlan(format!(
                        "stops {stops:?} must increase strictly within [1, {horizon})"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }?;
        if let Some(s) = &self.subsample {
            s.validate()?;
        }
        Ok(())
    }
}

/// `t_i = round(i T / (count + 1))` for `i = 1..=count`.
pub fn equally_spaced_stops(horizon: u64, count: usize) -> Vec<u64> {
    let mut stops: Vec<u64> = (1..=count as u64)
        .map(|i| ((i as f64 * horizon as f64) / (count as f64 + 1.0)).round() as u64)
        .filter(|t| *t >= 1 && *t < horizon)
        .collect();
    stops.dedup();
    stops
}

/// Successive-halving rungs `T η^{-k}` for `k = rungs..1`.
pub fn geometric_stops(horizon: u64, eta: f64, rungs: usize) -> Vec<u64> {
    let mut stops: Vec<u64> = (1..=rungs as i32)
        .rev()
        .map(|k| (horizon as f64 * eta.powi(-k)).round() as u64)
        .filter(|t| *t >= 1 && *t < horizon)
        .collect();
    stops.dedup();
    stops
}

/// Analytic relative cost of a plan (continuous ρ, no rounding).
pub fn cost_of_plan(plan: &StoppingPlan, horizon: u64, counts: &BTreeMap<Label, u64>) -> Result<f64, SearchError> {
    let t = horizon as f64;
    let stopping = match &plan.mode {
        StopMode::OneShot { t_stop } => *t_stop as f64 / t,
        StopMode::LateStart { start, t_stop } => (*t_stop - *start) as f64 / t,
        StopMode::PerformanceBased { stops, rho } => {
            let mut prev = 0.0;
            let mut alive = 1.0;
            let mut sum = 0.0;
            for s in stops.iter().map(|s| *s as f64).chain([t]) {
                sum += alive * (s - prev);
                alive *= 1.0 - rho;
                prev = s;
            }
            sum / t
        }
    };
    let keep = match &plan.subsample {
        Some(s) => subsample_cost(counts, s)?,
        None => 1.0,
    };
    Ok(stopping * keep)
}

/// Trace of one configuration observed up to a stopping step.
#[derive(Debug, Clone, PartialEq)]
pub struct Observed {
    pub trace: PerformanceTrace,
    /// Step at which training diverged, if it did.
    pub diverged_at: Option<u64>,
}

/// Provider of training progress for a search.
pub trait TraceSource {
    fn configs(&self) -> Vec<ConfigId>;
    fn horizon(&self) -> u64;
    /// Examples with `step <= start_step` are skipped by every run.
    fn start_step(&self) -> u64;
    /// Trains `ids` through step `t` and returns their traces so far.
    fn advance(&mut self, ids: &[ConfigId], t: u64) -> Result<Vec<Observed>, SearchError>;
    fn examples_processed(&self) -> u64;
    /// Size of the unfiltered stream, the per-configuration cost unit.
    fn full_examples(&self) -> u64;
}

struct LiveRun {
    run: OnlineRun,
    diverged_at: Option<u64>,
}

/// Trains configurations for real, pausing at stopping steps and resuming
/// survivors from their in-memory state.
pub struct LiveRuns<'a> {
    stream: &'a Stream,
    slices: Option<&'a [SliceId]>,
    runs: BTreeMap<ConfigId, LiveRun>,
    start: u64,
    full_examples: u64,
}

impl<'a> LiveRuns<'a> {
    pub fn new(configs: &[HyperConfig], stream: &'a Stream, full_examples: u64, opts: &TrainOptions<'a>) -> Result<Self, SearchError> {
        let mut runs = BTreeMap::new();
        for c in configs {
            let run = OnlineRun::new(c, stream.dim(), stream.horizon(), opts)?;
            runs.insert(c.id, LiveRun { run, diverged_at: None });
        }
        Ok(Self {
            stream,
            slices: opts.slices,
            runs,
            start: opts.start_after,
            full_examples,
        })
    }
}

impl TraceSource for LiveRuns<'_> {
    fn configs(&self) -> Vec<ConfigId> {
        self.runs.keys().copied().collect()
    }

    fn horizon(&self) -> u64 {
        self.stream.horizon()
    }

    fn start_step(&self) -> u64 {
        self.start
    }

    fn advance(&mut self, ids: &[ConfigId], t: u64) -> Result<Vec<Observed>, SearchError> {
        let wanted: BTreeSet<ConfigId> = ids.iter().copied().collect();
        if let Some(id) = wanted.iter().find(|id| !self.runs.contains_key(id)) {
            return Err(SearchError::UnknownConfig(*id));
        }
        let (examples, slices) = (self.stream.examples(), self.slices);
        let mut selected: Vec<(&ConfigId, &mut LiveRun)> = self.runs.iter_mut().filter(|(id, _)| wanted.contains(id)).collect();
        selected.par_iter_mut().try_for_each(|(_, r)| {
            if r.diverged_at.is_some() {
                return Ok(());
            }
            match r.run.advance(examples, slices, t) {
                Ok(()) => Ok(()),
                Err(LearnError::Diverged { step, .. }) => {
                    r.diverged_at = Some(step);
                    Ok(())
                }
                Err(e) => Err(e),
            }
        })?;
        Ok(selected
            .iter()
            .map(|(_, r)| Observed {
                trace: r.run.trace(),
                diverged_at: r.diverged_at,
            })
            .collect())
    }

    fn examples_processed(&self) -> u64 {
        self.runs.values().map(|r| r.run.examples_processed()).sum()
    }

    fn full_examples(&self) -> u64 {
        self.full_examples
    }
}

/// Replays precomputed full-length traces, counting the examples a live run
/// would have consumed.
pub struct ArchivedRuns<'a> {
    stream: &'a Stream,
    traces: BTreeMap<ConfigId, &'a PerformanceTrace>,
    diverged: BTreeMap<ConfigId, u64>,
    position: BTreeMap<ConfigId, u64>,
    processed: u64,
    start: u64,
    full_examples: u64,
}

impl<'a> ArchivedRuns<'a> {
    /// `traces` must come from runs over `stream` skipping `start` steps;
    /// `diverged` gives the divergence step of configurations that diverged.
    pub fn new(
        traces: &'a [PerformanceTrace],
        diverged: BTreeMap<ConfigId, u64>,
        stream: &'a Stream,
        start: u64,
        full_examples: u64,
    ) -> Self {
        Self {
            stream,
            traces: traces.iter().map(|t| (t.config(), t)).collect(),
            position: traces.iter().map(|t| (t.config(), start)).collect(),
            diverged,
            processed: 0,
            start,
            full_examples,
        }
    }
}

impl TraceSource for ArchivedRuns<'_> {
    fn configs(&self) -> Vec<ConfigId> {
        self.traces.keys().copied().collect()
    }

    fn horizon(&self) -> u64 {
        self.stream.horizon()
    }

    fn start_step(&self) -> u64 {
        self.start
    }

    fn advance(&mut self, ids: &[ConfigId], t: u64) -> Result<Vec<Observed>, SearchError> {
        let mut out = Vec::with_capacity(ids.len());
        let mut sorted = ids.to_vec();
        sorted.sort();
        sorted.dedup();
        for id in sorted {
            let trace = self.traces.get(&id).ok_or(SearchError::UnknownConfig(id))?;
            let diverged = self.diverged.get(&id).copied();
            let end = diverged.map_or(t, |d| d.min(t));
            let pos = self.position.get_mut(&id).unwrap();
            if end > *pos {
                self.processed += self.stream.count_between(*pos + 1, end);
                *pos = end;
            }
            out.push(Observed {
                trace: trace.truncate(t),
                diverged_at: diverged.filter(|d| *d <= t),
            });
        }
        Ok(out)
    }

    fn examples_processed(&self) -> u64 {
        self.processed
    }

    fn full_examples(&self) -> u64 {
        self.full_examples
    }
}

/// Maps truncated traces to predicted final-window performance.
pub trait Predict {
    fn predict(&self, traces: &[PerformanceTrace], t_stop: u64) -> Result<BTreeMap<ConfigId, f64>, PredictError>;
}

/// A configured predictor from the `predictors` module.
pub struct SpecPredictor<'a> {
    pub spec: &'a PredictorSpec,
    pub eval_width: u64,
    pub weights: Option<&'a SliceWeights>,
}

impl Predict for SpecPredictor<'_> {
    fn predict(&self, traces: &[PerformanceTrace], t_stop: u64) -> Result<BTreeMap<ConfigId, f64>, PredictError> {
        predict_all(self.spec, traces, t_stop, self.eval_width, self.weights)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub step: u64,
    pub predictions: BTreeMap<ConfigId, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub ranking: Ranking,
    pub realized_cost: f64,
    pub examples_processed: u64,
    pub per_config_stop: BTreeMap<ConfigId, u64>,
    pub prediction_log: Vec<StopRecord>,
}

fn outcome(source: &dyn TraceSource, n: usize, ranking: Ranking, per_config_stop: BTreeMap<ConfigId, u64>, log: Vec<StopRecord>) -> SearchOutcome {
    let processed = source.examples_processed();
    SearchOutcome {
        ranking,
        realized_cost: processed as f64 / (n as f64 * source.full_examples() as f64),
        examples_processed: processed,
        per_config_stop,
        prediction_log: log,
    }
}

fn predict_alive(predictor: &dyn Predict, observed: Vec<Observed>, t: u64) -> Result<BTreeMap<ConfigId, f64>, SearchError> {
    let (healthy, diverged): (Vec<_>, Vec<_>) = observed.into_iter().partition(|o| o.diverged_at.is_none());
    let traces: Vec<PerformanceTrace> = healthy.into_iter().map(|o| o.trace).collect();
    let mut preds = if traces.is_empty() {
        BTreeMap::new()
    } else {
        predictor
            .predict(&traces, t)
            .map_err(|source| SearchError::PredictorFailure { step: t, source })?
    };
    for p in preds.values_mut() {
        if p.is_nan() {
            *p = f64::INFINITY;
        }
    }
    for o in diverged {
        preds.insert(o.trace.config(), f64::INFINITY);
    }
    Ok(preds)
}

/// Trains every configuration through `t_stop` and ranks by prediction.
pub fn one_shot_search(source: &mut dyn TraceSource, t_stop: u64, eval_width: u64, predictor: &dyn Predict) -> Result<SearchOutcome, SearchError> {
    let horizon = source.horizon();
    if t_stop <= eval_width {
        return Err(SearchError::WindowUnderflow {
            t_stop,
            start: t_stop as i64 - eval_width as i64,
        });
    }
    if t_stop > horizon || t_stop <= source.start_step() {
        return Err(SearchError::InvalidInterval {
            start: source.start_step(),
            t_stop,
        });
    }
    let ids = source.configs();
    let observed = source.advance(&ids, t_stop)?;
    // The final window is fully observed at the horizon.
    let measured = SpecPredictor {
        spec: &PredictorSpec::Constant,
        eval_width,
        weights: None,
    };
    let predictor = if t_stop == horizon { &measured } else { predictor };
    let preds = predict_alive(predictor, observed, t_stop)?;
    let ranking = rank_by(&preds);
    let stops = ids.iter().map(|id| (*id, t_stop)).collect();
    let log = vec![StopRecord {
        step: t_stop,
        predictions: preds,
    }];
    Ok(outcome(source, ids.len(), ranking, stops, log))
}

/// One-shot search on a source that skips the first `start` steps.
pub fn late_start_search(source: &mut dyn TraceSource, start: u64, t_stop: u64, eval_width: u64, predictor: &dyn Predict) -> Result<SearchOutcome, SearchError> {
    if start >= t_stop || t_stop > source.horizon() {
        return Err(SearchError::InvalidInterval { start, t_stop });
    }
    if source.start_step() != start {
        return Err(SearchError::InvalidPlan(format!(
            "source skips {} steps, plan asks for {start}",
            source.start_step()
        )));
    }
    one_shot_search(source, t_stop, eval_width, predictor)
}

/// Successively stops the `⌈ρ n⌉` least promising configurations at each
/// stopping step; survivors are ranked by their measured final-window
/// metric and placed ahead of the pruned groups, latest group first.
pub fn performance_based_search(
    source: &mut dyn TraceSource,
    stops: &[u64],
    rho: f64,
    eval_width: u64,
    predictor: &dyn Predict,
) -> Result<SearchOutcome, SearchError> {
    let horizon = source.horizon();
    let ids = source.configs();
    if ids.len() < 2 {
        return Err(SearchError::TooFewConfigs { needed: 2, got: ids.len() });
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(SearchError::InvalidPlan(format!("rho {rho} outside (0, 1)")));
    }
    if stops.windows(2).any(|w| w[0] >= w[1]) || stops.first().is_some_and(|t| *t <= source.start_step()) || stops.last().is_some_and(|t| *t >= horizon) {
        return Err(SearchError::InvalidPlan(format!(
            "stops {stops:?} must increase strictly within ({}, {horizon})",
            source.start_step()
        )));
    }
    let eval = EvalWindow::new(horizon, eval_width)?;
    let mut alive = ids.clone();
    let mut pruned: Vec<Vec<ConfigId>> = Vec::new();
    let mut per_config_stop = BTreeMap::new();
    let mut log = Vec::new();
    for &t in stops {
        if alive.len() <= 1 {
            break;
        }
        if t <= eval_width {
            return Err(SearchError::WindowUnderflow {
                t_stop: t,
                start: t as i64 - eval_width as i64,
            });
        }
        let observed = source.advance(&alive, t)?;
        let preds = predict_alive(predictor, observed, t)?;
        let order = rank_by(&preds).into_inner();
        let n_stop = ((rho * alive.len() as f64).ceil() as usize).min(alive.len() - 1);
        let stopped = order[order.len() - n_stop..].to_vec();
        for id in &stopped {
            per_config_stop.insert(*id, t);
        }
        let gone: BTreeSet<ConfigId> = stopped.iter().copied().collect();
        alive.retain(|id| !gone.contains(id));
        pruned.push(stopped);
        log.push(StopRecord { step: t, predictions: preds });
    }
    let observed = source.advance(&alive, horizon)?;
    let mut measured = BTreeMap::new();
    for o in observed {
        let m = match o.diverged_at {
            Some(_) => f64::INFINITY,
            None => o.trace.final_window_mean(&eval)?,
        };
        measured.insert(o.trace.config(), m);
        per_config_stop.insert(o.trace.config(), horizon);
    }
    let mut order = rank_by(&measured).into_inner();
    for group in pruned.into_iter().rev() {
        order.extend(group);
    }
    let ranking = Ranking::new(order)?;
    Ok(outcome(source, ids.len(), ranking, per_config_stop, log))
}

/// Runs `plan` against `source`, which must skip `plan.start_step()` steps.
pub fn run_plan(source: &mut dyn TraceSource, plan: &StoppingPlan, eval_width: u64, predictor: &dyn Predict) -> Result<SearchOutcome, SearchError> {
    plan.validate(source.horizon())?;
    match &plan.mode {
        StopMode::OneShot { t_stop } => one_shot_search(source, *t_stop, eval_width, predictor),
        StopMode::LateStart { start, t_stop } => late_start_search(source, *start, *t_stop, eval_width, predictor),
        StopMode::PerformanceBased { stops, rho } => performance_based_search(source, stops, *rho, eval_width, predictor),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::online::{train_online, ModelKind};
    use crate::ranking::{regret_at_k, GroundTruth};
    use crate::stream::generate;
    use crate::stream::tests::two_cluster_spec;
    use proptest::prelude::*;

    fn flat_traces(values: &[f64], horizon: u64) -> Vec<PerformanceTrace> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| PerformanceTrace::new(ConfigId(i as u32), horizon, (1..=horizon).map(|t| (t, *v)).collect()).unwrap())
            .collect()
    }

    fn full_stream(horizon: u64) -> Stream {
        generate(&two_cluster_spec(horizon, 1)).unwrap()
    }

    struct Oracle(BTreeMap<ConfigId, f64>);

    impl Predict for Oracle {
        fn predict(&self, traces: &[PerformanceTrace], _: u64) -> Result<BTreeMap<ConfigId, f64>, PredictError> {
            Ok(traces.iter().map(|t| (t.config(), self.0[&t.config()])).collect())
        }
    }

    fn constant(eval_width: u64) -> SpecPredictor<'static> {
        SpecPredictor {
            spec: &PredictorSpec::Constant,
            eval_width,
            weights: None,
        }
    }

    #[test]
    fn plan_costs() {
        let counts: BTreeMap<Label, u64> = [(0, 50), (1, 50)].into();
        let plan = |mode, subsample| StoppingPlan {
            mode,
            predictor: PredictorSpec::Constant,
            subsample,
        };
        let c = cost_of_plan(&plan(StopMode::OneShot { t_stop: 30 }, Some(SubsampleSpec::uniform(0.5))), 100, &counts).unwrap();
        assert!((c - 0.15).abs() < 1e-15);
        let c = cost_of_plan(&plan(StopMode::PerformanceBased { stops: vec![30, 60], rho: 0.5 }, None), 90, &counts).unwrap();
        assert!((c - 52.5 / 90.0).abs() < 1e-15);
        let c = cost_of_plan(&plan(StopMode::PerformanceBased { stops: vec![], rho: 0.5 }, Some(SubsampleSpec::uniform(1.0))), 90, &counts).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn eight_configs_one_stop() {
        let stream = full_stream(100);
        let traces = flat_traces(&[0.8, 0.1, 0.7, 0.2, 0.6, 0.3, 0.5, 0.4], 100);
        let mut src = ArchivedRuns::new(&traces, BTreeMap::new(), &stream, 0, 100);
        let out = performance_based_search(&mut src, &[50], 0.5, 5, &constant(5)).unwrap();
        assert_eq!(out.realized_cost, 0.75);
        let ids: Vec<u32> = out.ranking.order().iter().map(|c| c.0).collect();
        assert_eq!(ids, vec![1, 3, 5, 7, 6, 4, 2, 0]);
        assert_eq!(out.per_config_stop[&ConfigId(0)], 50);
        assert_eq!(out.per_config_stop[&ConfigId(1)], 100);
    }

    #[test]
    fn empty_stop_set_trains_fully() {
        let stream = full_stream(100);
        let traces = flat_traces(&[0.3, 0.1, 0.2], 100);
        let mut src = ArchivedRuns::new(&traces, BTreeMap::new(), &stream, 0, 100);
        let out = performance_based_search(&mut src, &[], 0.5, 5, &constant(5)).unwrap();
        assert_eq!(out.realized_cost, 1.0);
        assert_eq!(out.ranking.order(), &[ConfigId(1), ConfigId(2), ConfigId(0)]);
    }

    #[test]
    fn one_shot_examples() {
        let stream = full_stream(100);
        let traces = flat_traces(&[0.3, 0.1, 0.2], 100);
        let mut src = ArchivedRuns::new(&traces, BTreeMap::new(), &stream, 0, 100);
        let out = one_shot_search(&mut src, 50, 5, &constant(5)).unwrap();
        assert_eq!(out.realized_cost, 0.5);
        let mut src = ArchivedRuns::new(&traces, BTreeMap::new(), &stream, 0, 100);
        let out = one_shot_search(&mut src, 100, 5, &constant(5)).unwrap();
        assert_eq!(out.realized_cost, 1.0);
        assert_eq!(out.ranking.order(), &[ConfigId(1), ConfigId(2), ConfigId(0)]);
        let mut src = ArchivedRuns::new(&traces, BTreeMap::new(), &stream, 0, 100);
        assert!(matches!(one_shot_search(&mut src, 5, 5, &constant(5)), Err(SearchError::WindowUnderflow { .. })));
    }

    #[test]
    fn late_start_examples() {
        let stream = full_stream(100);
        let traces = flat_traces(&[0.3, 0.1], 100);
        let mut src = ArchivedRuns::new(&traces, BTreeMap::new(), &stream, 25, 100);
        let out = late_start_search(&mut src, 25, 50, 5, &constant(5)).unwrap();
        assert_eq!(out.realized_cost, 0.25);
        assert!(matches!(
            late_start_search(&mut src, 50, 50, 5, &constant(5)),
            Err(SearchError::InvalidInterval { start: 50, t_stop: 50 })
        ));
    }

    #[test]
    fn diverged_configs_rank_last() {
        let stream = full_stream(100);
        let traces = flat_traces(&[0.3, 0.1, 0.2], 100);
        let diverged: BTreeMap<ConfigId, u64> = [(ConfigId(1), 40)].into();
        let mut src = ArchivedRuns::new(&traces, diverged, &stream, 0, 100);
        let out = one_shot_search(&mut src, 60, 5, &constant(5)).unwrap();
        assert_eq!(out.ranking.order(), &[ConfigId(2), ConfigId(0), ConfigId(1)]);
        assert_eq!(out.examples_processed, 60 + 60 + 40);
    }

    proptest! {
        #[test]
        fn counted_cost_tracks_formula(
            values in prop::collection::vec(0.0f64..1.0, 2..20),
            cuts in prop::collection::btree_set(6u64..199, 0..5),
            rho in 0.05f64..0.95,
        ) {
            let stream = full_stream(200);
            let traces = flat_traces(&values, 200);
            let stops: Vec<u64> = cuts.into_iter().collect();
            let plan = StoppingPlan {
                mode: StopMode::PerformanceBased { stops: stops.clone(), rho },
                predictor: PredictorSpec::Constant,
                subsample: None,
            };
            let analytic = cost_of_plan(&plan, 200, &stream.class_counts()).unwrap();
            let mut src = ArchivedRuns::new(&traces, BTreeMap::new(), &stream, 0, 200);
            let out = run_plan(&mut src, &plan, 5, &constant(5)).unwrap();
            let slack = stops.len() as f64 / values.len() as f64;
            prop_assert!((out.realized_cost - analytic).abs() <= slack + 1e-12);
            prop_assert!(out.ranking.is_permutation_of(&src.configs()));

            let mut alive: BTreeSet<ConfigId> = src.configs().into_iter().collect();
            for record in &out.prediction_log {
                let seen: BTreeSet<ConfigId> = record.predictions.keys().copied().collect();
                prop_assert!(seen.is_subset(&alive));
                alive = seen.into_iter().filter(|id| out.per_config_stop[id] > record.step).collect();
            }
        }

        #[test]
        fn perfect_predictor_finds_top(values in prop::collection::vec(0.0f64..1.0, 2..24), n_stops in 0usize..4) {
            let stream = full_stream(200);
            let traces = flat_traces(&values, 200);
            let truth: BTreeMap<ConfigId, f64> = traces.iter().map(|t| (t.config(), t.points()[0].1)).collect();
            let gt = GroundTruth::from_metrics(truth.clone()).unwrap();
            let stops = equally_spaced_stops(200, n_stops);
            let mut src = ArchivedRuns::new(&traces, BTreeMap::new(), &stream, 0, 200);
            let out = performance_based_search(&mut src, &stops, 0.5, 5, &Oracle(truth)).unwrap();
            let top = ((0.5f64).powi(stops.len() as i32) * values.len() as f64).ceil() as usize;
            prop_assert_eq!(&out.ranking.order()[..top], &gt.ranking().order()[..top]);
            for k in 1..=top {
                prop_assert_eq!(regret_at_k(&out.ranking, &gt, k).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn live_and_archived_runs_agree() {
        let stream = full_stream(3000);
        let configs: Vec<HyperConfig> = [0.5, 0.05, 0.005, 0.2]
            .iter()
            .enumerate()
            .map(|(i, lr)| {
                let mut c = HyperConfig::new(ConfigId(i as u32), ModelKind::FmLite { embedding_dim: 2, buckets: None }, *lr);
                c.init_seed = i as u64;
                c
            })
            .collect();
        let opts = TrainOptions { stride: 10, ..Default::default() };
        let archive: Vec<PerformanceTrace> = configs.iter().map(|c| train_online(c, &stream, &opts).unwrap()).collect();
        let stops = [700, 1400, 2100];
        let mut live = LiveRuns::new(&configs, &stream, 3000, &opts).unwrap();
        let a = performance_based_search(&mut live, &stops, 0.5, 200, &constant(200)).unwrap();
        let mut replay = ArchivedRuns::new(&archive, BTreeMap::new(), &stream, 0, 3000);
        let b = performance_based_search(&mut replay, &stops, 0.5, 200, &constant(200)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stop_generators() {
        assert_eq!(equally_spaced_stops(100, 3), vec![25, 50, 75]);
        assert_eq!(geometric_stops(80, 2.0, 3), vec![10, 20, 40]);
        assert!(equally_spaced_stops(100, 0).is_empty());
    }
}
