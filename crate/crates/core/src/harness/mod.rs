//! Experiment orchestration: configuration grids, the full-data oracle,
//! strategy sweeps and result tables.

mod report;
pub mod stats;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::online::{HyperConfig, LearnError, LrSchedule, ModelKind, OnlineRun, TrainOptions};
use crate::predictors::{slice_weights_from_stream, PredictError, PredictorSpec, SliceWeights};
use crate::ranking::{normalize_regret, pairwise_error_rate, regret, regret_at_k, GroundTruth, RankingError};
use crate::scheduler::{cost_of_plan, run_plan, ArchivedRuns, SearchError, SpecPredictor, StopMode, StoppingPlan};
use crate::stream::{apply_subsample, generate, kmeans_slices, Stream, StreamError, StreamSpec, SubsampleSpec};
use crate::trace::{read_traces, write_traces, ConfigId, EvalWindow, PerformanceTrace, SliceId, TraceError};

pub use report::{aggregate, write_report, CurvePoint};

const CACHE_VERSION: &str = "driftrank-oracle-1";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("need at least 2 seeds, got {0}")]
    TooFewSeeds(usize),
    #[error("no oracle run for seed {0}")]
    MissingOracle(u64),
    #[error("reference configuration {0} has no usable final metric")]
    BadReference(ConfigId),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

/// Cartesian product of hyperparameter values. Ids follow the nesting order
/// model, learning rate, final-rate fraction, weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub models: Vec<ModelKind>,
    pub learning_rates: Vec<f64>,
    /// Final learning rate as a fraction of the initial one. Empty means a
    /// constant schedule.
    #[serde(default)]
    pub final_lr_fractions: Vec<f64>,
    #[serde(default)]
    pub weight_decays: Vec<f64>,
}

impl GridSpec {
    fn fractions(&self) -> Vec<Option<f64>> {
        if self.final_lr_fractions.is_empty() {
            vec![None]
        } else {
            self.final_lr_fractions.iter().map(|f| Some(*f)).collect()
        }
    }

    fn decays(&self) -> Vec<f64> {
        if self.weight_decays.is_empty() {
            vec![0.0]
        } else {
            self.weight_decays.clone()
        }
    }

    pub fn expand(&self) -> Vec<HyperConfig> {
        let mut out = Vec::new();
        for model in &self.models {
            for lr in &self.learning_rates {
                for frac in self.fractions() {
                    for wd in self.decays() {
                        let mut c = HyperConfig::new(ConfigId(out.len() as u32), *model, *lr);
                        c.weight_decay = wd;
                        if let Some(f) = frac {
                            c.schedule = LrSchedule::LinearDecay;
                            c.final_learning_rate = Some(lr * f);
                        }
                        out.push(c);
                    }
                }
            }
        }
        out
    }

    /// Id of the configuration at the middle of every axis.
    pub fn center(&self) -> ConfigId {
        let dims = [
            self.models.len(),
            self.learning_rates.len(),
            self.fractions().len(),
            self.decays().len(),
        ];
        let id = dims.iter().fold(0, |acc, n| acc * n + n / 2);
        ConfigId(id as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigSource {
    List(Vec<HyperConfig>),
    Grid(GridSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SliceSpec {
    None,
    /// The simulator's generating cluster of every example.
    #[default]
    Truth,
    Kmeans {
        count: usize,
        #[serde(default = "default_kmeans_iters")]
        max_iters: usize,
    },
}

fn default_kmeans_iters() -> usize {
    50
}

fn default_rho() -> f64 {
    0.5
}

/// A family of stopping plans traced out by varying one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepSpec {
    /// One-shot stops at every `t_stops` entry; a positive `start` turns them
    /// into late-start plans.
    OneShot {
        name: String,
        predictor: PredictorSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subsample: Option<SubsampleSpec>,
        #[serde(default)]
        start: u64,
        t_stops: Vec<u64>,
    },
    /// Performance-based stopping with explicit stop sets and equally spaced
    /// sets of `stop_counts` stops.
    PerformanceBased {
        name: String,
        predictor: PredictorSpec,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        subsample: Option<SubsampleSpec>,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default)]
        stop_sets: Vec<Vec<u64>>,
        #[serde(default)]
        stop_counts: Vec<usize>,
    },
    Plans {
        name: String,
        plans: Vec<StoppingPlan>,
    },
}

/// One executable point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanPoint {
    pub sweep: String,
    pub label: String,
    pub plan: StoppingPlan,
}

fn plan_label(plan: &StoppingPlan) -> String {
    match &plan.mode {
        StopMode::OneShot { t_stop } => format!("t_stop={t_stop}"),
        StopMode::LateStart { start, t_stop } => format!("start={start};t_stop={t_stop}"),
        StopMode::PerformanceBased { stops, rho } => {
            let s: Vec<String> = stops.iter().map(|t| t.to_string()).collect();
            format!("stops={};rho={rho}", s.join(" "))
        }
    }
}

impl SweepSpec {
    pub fn name(&self) -> &str {
        match self {
            SweepSpec::OneShot { name, .. } | SweepSpec::PerformanceBased { name, .. } | SweepSpec::Plans { name, .. } => name,
        }
    }

    pub fn points(&self, horizon: u64) -> Vec<PlanPoint> {
        let plans: Vec<StoppingPlan> = match self {
            SweepSpec::OneShot {
                predictor,
                subsample,
                start,
                t_stops,
                ..
            } => t_stops
                .iter()
                .map(|t| StoppingPlan {
                    mode: if *start == 0 {
                        StopMode::OneShot { t_stop: *t }
                    } else {
                        StopMode::LateStart { start: *start, t_stop: *t }
                    },
                    predictor: predictor.clone(),
                    subsample: subsample.clone(),
                })
                .collect(),
            SweepSpec::PerformanceBased {
                predictor,
                subsample,
                rho,
                stop_sets,
                stop_counts,
                ..
            } => stop_sets
                .iter()
                .cloned()
                .chain(stop_counts.iter().map(|n| crate::scheduler::equally_spaced_stops(horizon, *n)))
                .map(|stops| StoppingPlan {
                    mode: StopMode::PerformanceBased { stops, rho: *rho },
                    predictor: predictor.clone(),
                    subsample: subsample.clone(),
                })
                .collect(),
            SweepSpec::Plans { plans, .. } => plans.clone(),
        };
        plans
            .into_iter()
            .map(|plan| PlanPoint {
                sweep: self.name().to_string(),
                label: plan_label(&plan),
                plan,
            })
            .collect()
    }
}

fn default_stride() -> u64 {
    1
}

fn default_ks() -> Vec<usize> {
    vec![1, 3]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    pub stream: StreamSpec,
    pub configs: ConfigSource,
    pub eval_width: u64,
    #[serde(default = "default_stride")]
    pub stride: u64,
    #[serde(default)]
    pub slices: SliceSpec,
    /// Normalization reference; defaults to the grid center (or the middle
    /// entry of an explicit list).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_config: Option<ConfigId>,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sweeps: Vec<SweepSpec>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// Configurations in id order, before per-seed initialization seeds.
    pub fn configs(&self) -> Vec<HyperConfig> {
        let mut out = match &self.configs {
            ConfigSource::List(list) => list.clone(),
            ConfigSource::Grid(grid) => grid.expand(),
        };
        out.sort_by_key(|c| c.id);
        out
    }

    pub fn reference(&self) -> ConfigId {
        self.reference_config.unwrap_or_else(|| match &self.configs {
            ConfigSource::Grid(grid) => grid.center(),
            ConfigSource::List(_) => {
                let configs = self.configs();
                configs.get(configs.len() / 2).map_or(ConfigId(0), |c| c.id)
            }
        })
    }

    pub fn plan_points(&self) -> Vec<PlanPoint> {
        self.sweeps.iter().flat_map(|s| s.points(self.stream.horizon)).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidSpec(m));
        self.stream.validate()?;
        let horizon = self.stream.horizon;
        let configs = self.configs();
        if configs.is_empty() {
            return bad("no configurations".into());
        }
        let ids: BTreeSet<ConfigId> = configs.iter().map(|c| c.id).collect();
        if ids.len() != configs.len() {
            return bad("configuration ids must be unique".into());
        }
        for c in &configs {
            c.validate().map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
        }
        if !ids.contains(&self.reference()) {
            return bad(format!("reference configuration {} is not in the grid", self.reference()));
        }
        if self.eval_width == 0 || self.eval_width >= horizon {
            return bad(format!("eval_width must lie in [1, {})", horizon));
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if self.ks.is_empty() || self.ks.iter().any(|k| *k == 0 || *k > configs.len()) {
            return bad(format!("every k must lie in [1, {}]", configs.len()));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if let SliceSpec::Kmeans { count, .. } = self.slices {
            if count == 0 {
                return bad("k-means slice count must be positive".into());
            }
        }
        let mut names = BTreeSet::new();
        for sweep in &self.sweeps {
            if !names.insert(sweep.name()) {
                return bad(format!("duplicate sweep name {}", sweep.name()));
            }
        }
        for point in self.plan_points() {
            point
                .plan
                .validate(horizon)
                .map_err(|e| HarnessError::InvalidSpec(format!("{} {}: {e}", point.sweep, point.label)))?;
            if point.plan.predictor.needs_slices() && self.slices == SliceSpec::None {
                return bad(format!("sweep {} needs slices but slices are disabled", point.sweep));
            }
        }
        Ok(())
    }

    fn hash_for(&self, seed: u64) -> String {
        let key = serde_json::json!({
            "version": CACHE_VERSION,
            "stream": self.stream,
            "configs": self.configs(),
            "eval_width": self.eval_width,
            "stride": self.stride,
            "slices": self.slices,
            "seed": seed,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}

/// SplitMix64 finalizer over a pair of seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream, slices and seeded configurations of one experiment seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub seed: u64,
    pub stream: Stream,
    /// Slice of the example at step `t`, at index `t - 1`.
    pub slices: Option<Vec<SliceId>>,
    pub configs: Vec<HyperConfig>,
}

pub fn prepare_seed(spec: &ExperimentSpec, seed: u64) -> Result<SeedData, HarnessError> {
    let mut stream_spec = spec.stream.clone();
    stream_spec.seed = mix_seed(spec.stream.seed, seed);
    let stream = generate(&stream_spec)?;
    let slices = match &spec.slices {
        SliceSpec::None => None,
        SliceSpec::Truth => Some(stream.true_clusters()),
        SliceSpec::Kmeans { count, max_iters } => {
            Some(kmeans_slices(stream.examples(), *count, mix_seed(stream_spec.seed, 2), *max_iters)?.labels)
        }
    };
    let configs = spec
        .configs()
        .into_iter()
        .map(|mut c| {
            c.init_seed = mix_seed(mix_seed(seed, c.id.0 as u64), c.init_seed);
            c
        })
        .collect();
    Ok(SeedData {
        seed,
        stream,
        slices,
        configs,
    })
}

/// Full-length traces of every configuration on one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceArchive {
    pub traces: Vec<PerformanceTrace>,
    /// Divergence step of configurations that diverged.
    pub diverged: BTreeMap<ConfigId, u64>,
}

/// Trains every configuration over `stream`, skipping the first `start`
/// steps. Diverged runs keep the trace recorded before divergence.
pub fn train_archive(
    configs: &[HyperConfig],
    stream: &Stream,
    slices: Option<&[SliceId]>,
    stride: u64,
    start: u64,
) -> Result<TraceArchive, HarnessError> {
    let opts = TrainOptions {
        stride,
        slices,
        start_after: start,
    };
    let runs: Vec<Result<(PerformanceTrace, Option<u64>), LearnError>> = configs
        .par_iter()
        .map(|c| {
            let mut run = OnlineRun::new(c, stream.dim(), stream.horizon(), &opts)?;
            match run.advance(stream.examples(), slices, stream.horizon()) {
                Ok(()) => Ok((run.finish(), None)),
                Err(LearnError::Diverged { step, .. }) => Ok((run.trace(), Some(step))),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut archive = TraceArchive {
        traces: Vec::with_capacity(configs.len()),
        diverged: BTreeMap::new(),
    };
    for (c, r) in configs.iter().zip(runs) {
        let (trace, diverged) = r?;
        if let Some(step) = diverged {
            archive.diverged.insert(c.id, step);
        }
        archive.traces.push(trace);
    }
    Ok(archive)
}

/// Ground truth of one seed: full-data traces, final metrics and `r*`.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    pub seed: u64,
    pub spec_hash: String,
    pub archive: TraceArchive,
    pub truth: GroundTruth,
    pub reference: ConfigId,
    pub reference_mean: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    hash: String,
    horizon: u64,
    configs: Vec<ConfigId>,
    diverged: BTreeMap<ConfigId, u64>,
}

fn oracle_from_archive(spec: &ExperimentSpec, seed: u64, archive: TraceArchive) -> Result<OracleRun, HarnessError> {
    let eval = EvalWindow::new(spec.stream.horizon, spec.eval_width)?;
    let mut metrics = BTreeMap::new();
    for t in &archive.traces {
        let m = if archive.diverged.contains_key(&t.config()) {
            f64::INFINITY
        } else {
            t.final_window_mean(&eval)?
        };
        metrics.insert(t.config(), m);
    }
    let truth = GroundTruth::from_metrics(metrics)?;
    let reference = spec.reference();
    let reference_mean = truth
        .metric(reference)
        .filter(|m| m.is_finite() && *m > 0.0)
        .ok_or(HarnessError::BadReference(reference))?;
    Ok(OracleRun {
        seed,
        spec_hash: spec.hash_for(seed),
        archive,
        truth,
        reference,
        reference_mean,
    })
}

fn cache_paths(dir: &Path, seed: u64) -> (std::path::PathBuf, std::path::PathBuf) {
    (dir.join(format!("oracle-{seed}.json")), dir.join(format!("oracle-{seed}.csv")))
}

fn load_cached(spec: &ExperimentSpec, seed: u64, dir: &Path) -> Option<TraceArchive> {
    let (meta_path, trace_path) = cache_paths(dir, seed);
    let meta: CacheMeta = serde_json::from_str(&fs::read_to_string(meta_path).ok()?).ok()?;
    if meta.hash != spec.hash_for(seed) || meta.horizon != spec.stream.horizon {
        return None;
    }
    let mut loaded: BTreeMap<ConfigId, PerformanceTrace> = read_traces(fs::File::open(trace_path).ok()?, meta.horizon)
        .ok()?
        .into_iter()
        .map(|t| (t.config(), t))
        .collect();
    let mut traces = Vec::with_capacity(meta.configs.len());
    for id in &meta.configs {
        let t = match loaded.remove(id) {
            Some(t) => t,
            None => PerformanceTrace::new(*id, meta.horizon, Vec::new()).ok()?,
        };
        traces.push(t);
    }
    Some(TraceArchive {
        traces,
        diverged: meta.diverged,
    })
}

fn store_cached(spec: &ExperimentSpec, seed: u64, dir: &Path, archive: &TraceArchive) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let (meta_path, trace_path) = cache_paths(dir, seed);
    let file = fs::File::create(&trace_path)?;
    write_traces(std::io::BufWriter::new(file), &archive.traces)?;
    let meta = CacheMeta {
        hash: spec.hash_for(seed),
        horizon: spec.stream.horizon,
        configs: archive.traces.iter().map(|t| t.config()).collect(),
        diverged: archive.diverged.clone(),
    };
    fs::write(meta_path, serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    Ok(())
}

/// Trains every configuration on the full stream of `seed`. With a cache
/// directory, a stored run whose spec hash matches is reused and a fresh run
/// is stored.
pub fn run_oracle(spec: &ExperimentSpec, seed: u64, cache: Option<&Path>) -> Result<OracleRun, HarnessError> {
    if let Some(archive) = cache.and_then(|dir| load_cached(spec, seed, dir)) {
        return oracle_from_archive(spec, seed, archive);
    }
    let data = prepare_seed(spec, seed)?;
    oracle_for(spec, &data, cache)
}

fn oracle_for(spec: &ExperimentSpec, data: &SeedData, cache: Option<&Path>) -> Result<OracleRun, HarnessError> {
    let archive = train_archive(&data.configs, &data.stream, data.slices.as_deref(), spec.stride, 0)?;
    if let Some(dir) = cache {
        store_cached(spec, data.seed, dir, &archive)?;
    }
    oracle_from_archive(spec, data.seed, archive)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Failed,
}

/// Outcome of one plan point on one seed. Metrics of failed rows are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep: String,
    pub point: String,
    pub mode: String,
    pub predictor: String,
    pub seed: u64,
    pub status: RowStatus,
    pub cost: f64,
    pub analytic_cost: f64,
    pub per: f64,
    pub regret: f64,
    pub regret_at: Vec<f64>,
    pub normalized_regret_at: Vec<f64>,
    #[serde(default)]
    pub error: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == RowStatus::Ok
    }

    /// Normalized regret@k for a `k` listed in the table.
    pub fn nregret(&self, ks: &[usize], k: usize) -> Option<f64> {
        ks.iter().position(|x| *x == k).map(|i| self.normalized_regret_at[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub ks: Vec<usize>,
    pub rows: Vec<ResultRow>,
}

fn fmt_metric(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

fn parse_metric(s: &str) -> Result<f64, HarnessError> {
    if s.is_empty() {
        Ok(f64::NAN)
    } else {
        s.parse().map_err(|_| HarnessError::Io(format!("bad number {s:?}")))
    }
}

impl ResultTable {
    pub fn all_failed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| !r.is_ok())
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["sweep", "point", "mode", "predictor", "seed", "status", "cost", "analytic_cost", "per", "regret"]
            .map(String::from)
            .to_vec();
        h.extend(self.ks.iter().map(|k| format!("regret@{k}")));
        h.extend(self.ks.iter().map(|k| format!("nregret@{k}")));
        h.push("error".into());
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), HarnessError> {
        let err = |e: csv::Error| HarnessError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header()).map_err(err)?;
        for r in &self.rows {
            let mut rec = vec![
                r.sweep.clone(),
                r.point.clone(),
                r.mode.clone(),
                r.predictor.clone(),
                r.seed.to_string(),
                match r.status {
                    RowStatus::Ok => "ok".into(),
                    RowStatus::Failed => "failed".into(),
                },
                fmt_metric(r.cost),
                fmt_metric(r.analytic_cost),
                fmt_metric(r.per),
                fmt_metric(r.regret),
            ];
            rec.extend(r.regret_at.iter().map(|x| fmt_metric(*x)));
            rec.extend(r.normalized_regret_at.iter().map(|x| fmt_metric(*x)));
            rec.push(r.error.clone());
            w.write_record(rec).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, HarnessError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(|e| HarnessError::Io(e.to_string()))?.clone();
        let ks: Vec<usize> = headers
            .iter()
            .filter_map(|h| h.strip_prefix("regret@"))
            .map(|k| k.parse().map_err(|_| HarnessError::Io(format!("bad column regret@{k}"))))
            .collect::<Result<_, _>>()?;
        let table = Self { ks, rows: Vec::new() };
        if headers.iter().collect::<Vec<_>>() != table.header() {
            return Err(HarnessError::Io("unexpected result table header".into()));
        }
        let nk = table.ks.len();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| HarnessError::Io(e.to_string()))?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            let metrics = |from: usize| (from..from + nk).map(|i| parse_metric(f(i))).collect::<Result<Vec<_>, _>>();
            rows.push(ResultRow {
                sweep: f(0).into(),
                point: f(1).into(),
                mode: f(2).into(),
                predictor: f(3).into(),
                seed: f(4).parse().map_err(|_| HarnessError::Io(format!("bad seed {:?}", f(4))))?,
                status: if f(5) == "ok" { RowStatus::Ok } else { RowStatus::Failed },
                cost: parse_metric(f(6))?,
                analytic_cost: parse_metric(f(7))?,
                per: parse_metric(f(8))?,
                regret: parse_metric(f(9))?,
                regret_at: metrics(10)?,
                normalized_regret_at: metrics(10 + nk)?,
                error: f(10 + 2 * nk).into(),
            });
        }
        Ok(Self { rows, ..table })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

fn mode_name(mode: &StopMode) -> &'static str {
    match mode {
        StopMode::OneShot { .. } => "one_shot",
        StopMode::PerformanceBased { .. } => "performance_based",
        StopMode::LateStart { .. } => "late_start",
    }
}

struct Evaluated {
    cost: f64,
    per: f64,
    regret: f64,
    regret_at: Vec<f64>,
    normalized: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_point(
    spec: &ExperimentSpec,
    point: &PlanPoint,
    oracle: &OracleRun,
    archive: &TraceArchive,
    stream: &Stream,
    full_examples: u64,
    weights: Option<&SliceWeights>,
) -> Result<Evaluated, HarnessError> {
    let mut source = ArchivedRuns::new(&archive.traces, archive.diverged.clone(), stream, point.plan.start_step(), full_examples);
    let predictor = SpecPredictor {
        spec: &point.plan.predictor,
        eval_width: spec.eval_width,
        weights,
    };
    let outcome = run_plan(&mut source, &point.plan, spec.eval_width, &predictor)?;
    let truth = &oracle.truth;
    let regret_at: Vec<f64> = spec
        .ks
        .iter()
        .map(|k| regret_at_k(&outcome.ranking, truth, *k))
        .collect::<Result<_, _>>()?;
    let normalized = regret_at
        .iter()
        .map(|r| normalize_regret(*r, oracle.reference_mean))
        .collect::<Result<_, _>>()?;
    Ok(Evaluated {
        cost: outcome.realized_cost,
        per: if truth.len() >= 2 {
            pairwise_error_rate(&outcome.ranking, truth)?
        } else {
            0.0
        },
        regret: regret(&outcome.ranking, truth)?,
        regret_at,
        normalized,
    })
}

type ArchiveKey = (String, u64);

fn archive_key(plan: &StoppingPlan) -> ArchiveKey {
    let sub = plan
        .subsample
        .as_ref()
        .filter(|s| !s.is_identity())
        .map(|s| serde_json::to_string(s).expect("subsample serializes"))
        .unwrap_or_default();
    (sub, plan.start_step())
}

/// Runs every plan point of `spec` on `data` against its oracle. Strategy
/// failures are recorded in the row instead of aborting.
pub fn sweep_seed(spec: &ExperimentSpec, data: &SeedData, oracle: &OracleRun) -> Result<Vec<ResultRow>, HarnessError> {
    let points = spec.plan_points();
    let horizon = spec.stream.horizon;
    let full_examples = data.stream.len() as u64;
    let counts = data.stream.class_counts();
    let weights = match &data.slices {
        Some(labels) => Some(slice_weights_from_stream(&data.stream, labels, &EvalWindow::new(horizon, spec.eval_width)?)?),
        None => None,
    };

    let mut filtered: BTreeMap<String, Stream> = BTreeMap::new();
    let mut archives: BTreeMap<ArchiveKey, TraceArchive> = BTreeMap::new();
    for point in &points {
        let key = archive_key(&point.plan);
        if archives.contains_key(&key) {
            continue;
        }
        if !filtered.contains_key(&key.0) {
            let stream = match &point.plan.subsample {
                Some(sub) if !key.0.is_empty() => apply_subsample(&data.stream, sub, mix_seed(data.seed, 1))?,
                _ => data.stream.clone(),
            };
            filtered.insert(key.0.clone(), stream);
        }
        let archive = if key == (String::new(), 0) {
            oracle.archive.clone()
        } else {
            train_archive(&data.configs, &filtered[&key.0], data.slices.as_deref(), spec.stride, key.1)?
        };
        archives.insert(key, archive);
    }

    let rows = points
        .par_iter()
        .map(|point| {
            let key = archive_key(&point.plan);
            let analytic_cost = cost_of_plan(&point.plan, horizon, &counts).unwrap_or(f64::NAN);
            let result = evaluate_point(
                spec,
                point,
                oracle,
                &archives[&key],
                &filtered[&key.0],
                full_examples,
                weights.as_ref(),
            );
            let nk = spec.ks.len();
            let mut row = ResultRow {
                sweep: point.sweep.clone(),
                point: point.label.clone(),
                mode: mode_name(&point.plan.mode).into(),
                predictor: point.plan.predictor.name(),
                seed: data.seed,
                status: RowStatus::Ok,
                cost: f64::NAN,
                analytic_cost,
                per: f64::NAN,
                regret: f64::NAN,
                regret_at: vec![f64::NAN; nk],
                normalized_regret_at: vec![f64::NAN; nk],
                error: String::new(),
            };
            match result {
                Ok(e) => {
                    row.cost = e.cost;
                    row.per = e.per;
                    row.regret = e.regret;
                    row.regret_at = e.regret_at;
                    row.normalized_regret_at = e.normalized;
                }
                Err(e) => {
                    row.status = RowStatus::Failed;
                    row.error = e.to_string();
                }
            }
            row
        })
        .collect();
    Ok(rows)
}

/// Runs the oracle (cached when `cache` is given) and every sweep for each
/// seed of `spec`. Rows are ordered by seed, then by plan point.
pub fn run_sweep(spec: &ExperimentSpec, cache: Option<&Path>) -> Result<ResultTable, HarnessError> {
    spec.validate()?;
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let data = prepare_seed(spec, seed)?;
        let oracle = match cache.and_then(|dir| load_cached(spec, seed, dir)) {
            Some(archive) => oracle_from_archive(spec, seed, archive)?,
            None => oracle_for(spec, &data, cache)?,
        };
        rows.extend(sweep_seed(spec, &data, &oracle)?);
    }
    Ok(ResultTable {
        ks: spec.ks.clone(),
        rows,
    })
}

/// Mean absolute relative deviation (percent) of the reference
/// configuration's final metric across `n_seeds` initialization seeds, on
/// the full stream of the spec's first seed.
pub fn seed_variance_target(spec: &ExperimentSpec, n_seeds: usize) -> Result<f64, HarnessError> {
    if n_seeds < 2 {
        return Err(HarnessError::TooFewSeeds(n_seeds));
    }
    spec.validate()?;
    let data = prepare_seed(spec, spec.seeds[0])?;
    let reference = spec.reference();
    let base = data
        .configs
        .iter()
        .find(|c| c.id == reference)
        .ok_or(HarnessError::BadReference(reference))?;
    let variants: Vec<HyperConfig> = (0..n_seeds as u64)
        .map(|i| {
            let mut c = base.clone();
            c.init_seed = mix_seed(base.init_seed, i);
            c
        })
        .collect();
    let archive = train_archive(&variants, &data.stream, None, spec.stride, 0)?;
    if !archive.diverged.is_empty() {
        return Err(HarnessError::BadReference(reference));
    }
    let eval = EvalWindow::new(spec.stream.horizon, spec.eval_width)?;
    let metrics: Vec<f64> = archive
        .traces
        .iter()
        .map(|t| t.final_window_mean(&eval))
        .collect::<Result<_, _>>()?;
    if metrics.iter().all(|m| *m == metrics[0]) {
        return Ok(0.0);
    }
    let mean = stats::mean(&metrics);
    if !(mean > 0.0) {
        return Err(HarnessError::BadReference(reference));
    }
    let mad = metrics.iter().map(|m| (m - mean).abs()).sum::<f64>() / metrics.len() as f64;
    Ok(100.0 * mad / mean)
}
