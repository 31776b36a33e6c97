//! Desk-scale online learners evaluated by progressive validation: for each
//! example the loss under the current parameters is recorded first, then one
//! SGD step is taken on it.

mod model;
mod recorder;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{Example, Stream};
use crate::trace::{ConfigId, PerformanceTrace, SliceId};

pub use model::{log_loss, ModelState, DIVERGENCE_BOUND};
use recorder::Recorder;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("config {config} diverged at step {step}")]
    Diverged { config: ConfigId, step: u64 },
    #[error("state mismatch: {0}")]
    StateMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("stream is empty")]
    EmptyStream,
    #[error("model state blob: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Logistic,
    /// Second-order factorization machine. Feature `i` uses embedding row
    /// `i % buckets` (default: one row per feature).
    FmLite {
        embedding_dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        buckets: Option<usize>,
    },
}

impl ModelKind {
    pub fn name(&self) -> String {
        match self {
            ModelKind::Logistic => "logistic".into(),
            ModelKind::FmLite { embedding_dim, .. } => format!("fm{embedding_dim}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear interpolation from `learning_rate` at the first step of the run
    /// to `final_learning_rate` at the horizon.
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub id: ConfigId,
    pub model: ModelKind,
    pub learning_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_learning_rate: Option<f64>,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default)]
    pub init_seed: u64,
}

impl HyperConfig {
    pub fn new(id: ConfigId, model: ModelKind, learning_rate: f64) -> Self {
        Self {
            id,
            model,
            learning_rate,
            final_learning_rate: None,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            init_seed: 0,
        }
    }

    pub fn final_lr(&self) -> f64 {
        self.final_learning_rate.unwrap_or(self.learning_rate)
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |m: String| Err(LearnError::InvalidConfig(format!("config {}: {m}", self.id)));
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative".into());
        }
        if let ModelKind::FmLite { embedding_dim, buckets } = self.model {
            if embedding_dim == 0 || buckets == Some(0) {
                return bad("embedding_dim and buckets must be positive".into());
            }
        }
        if self.schedule == LrSchedule::LinearDecay {
            let f = self.final_lr();
            if !(f >= 0.0) || f > self.learning_rate {
                return bad("final_learning_rate must lie in [0, learning_rate]".into());
            }
        }
        Ok(())
    }

    /// Learning rate at `step` for a run spanning `[origin, horizon]`.
    pub fn lr_at(&self, step: u64, origin: u64, horizon: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::LinearDecay => {
                if horizon <= origin {
                    return self.learning_rate;
                }
                let frac = (step.saturating_sub(origin)) as f64 / (horizon - origin) as f64;
                self.learning_rate + (self.final_lr() - self.learning_rate) * frac.min(1.0)
            }
        }
    }
}

/// Recording options for a training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainOptions<'a> {
    /// Recording stride: one trace point per block of `stride` steps holding
    /// the block's mean loss.
    pub stride: u64,
    /// Slice of the example at step `t`, stored at index `t - 1`.
    pub slices: Option<&'a [SliceId]>,
    /// Examples with `step <= start_after` are skipped (late starting).
    pub start_after: u64,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            stride: 1,
            slices: None,
            start_after: 0,
        }
    }
}

/// A resumable training run that accumulates its trace.
#[derive(Debug, Clone)]
pub struct OnlineRun {
    config: HyperConfig,
    state: ModelState,
    recorder: Recorder,
    horizon: u64,
}

impl OnlineRun {
    pub fn new(config: &HyperConfig, dim: usize, horizon: u64, opts: &TrainOptions) -> Result<Self, LearnError> {
        config.validate()?;
        if opts.stride == 0 {
            return Err(LearnError::InvalidConfig("stride must be at least 1".into()));
        }
        let state = ModelState::init(config, dim, opts.start_after + 1);
        Ok(Self {
            config: config.clone(),
            state,
            recorder: Recorder::new(opts.stride, horizon),
            horizon,
        })
    }

    /// Continues from a saved state with a fresh recorder.
    pub fn from_state(config: &HyperConfig, state: ModelState, horizon: u64, opts: &TrainOptions) -> Result<Self, LearnError> {
        config.validate()?;
        state.check_compatible(config)?;
        Ok(Self {
            config: config.clone(),
            state,
            recorder: Recorder::new(opts.stride.max(1), horizon),
            horizon,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn config(&self) -> &HyperConfig {
        &self.config
    }

    /// Last step consumed.
    pub fn position(&self) -> u64 {
        self.state.step()
    }

    pub fn examples_processed(&self) -> u64 {
        self.state.consumed()
    }

    /// Trains on the examples of `examples` with `step <= until` that come
    /// after the current position. Blocks that are complete at `until` are
    /// flushed to the trace.
    pub fn advance(&mut self, examples: &[Example], slices: Option<&[SliceId]>, until: u64) -> Result<(), LearnError> {
        let start = examples.partition_point(|e| e.step <= self.state.step());
        for e in &examples[start..] {
            if e.step > until {
                break;
            }
            if e.step < self.state.origin() {
                continue;
            }
            let slice = slices.map(|s| s[(e.step - 1) as usize]);
            let loss = self.state.loss(&e.features, e.label);
            self.recorder.push(e.step, loss, slice);
            let lr = self.config.lr_at(e.step, self.state.origin(), self.horizon);
            self.state
                .sgd_step(&self.config, &e.features, e.label, lr, e.step)
                .map_err(|_| LearnError::Diverged {
                    config: self.config.id,
                    step: e.step,
                })?;
        }
        self.recorder.flush_through(until);
        Ok(())
    }

    /// Trace recorded so far.
    pub fn trace(&self) -> PerformanceTrace {
        self.recorder.trace(self.config.id)
    }

    /// Flushes the open block and returns the trace.
    pub fn finish(mut self) -> PerformanceTrace {
        self.recorder.flush_through(u64::MAX);
        self.recorder.trace(self.config.id)
    }
}

/// Single-pass progressive-validation training over the whole stream.
pub fn train_online(config: &HyperConfig, stream: &Stream, opts: &TrainOptions) -> Result<PerformanceTrace, LearnError> {
    if stream.is_empty() {
        return Err(LearnError::EmptyStream);
    }
    let mut run = OnlineRun::new(config, stream.dim(), stream.horizon(), opts)?;
    run.advance(stream.examples(), opts.slices, stream.horizon())?;
    Ok(run.finish())
}

/// Continues training from `state` over `suffix`. The returned trace covers
/// only the suffix; it equals the matching part of an uninterrupted run when
/// the checkpoint falls on a recording-block boundary.
pub fn resume(
    config: &HyperConfig,
    state: ModelState,
    suffix: &[Example],
    horizon: u64,
    opts: &TrainOptions,
) -> Result<PerformanceTrace, LearnError> {
    if let Some(first) = suffix.first() {
        if first.step <= state.step() {
            return Err(LearnError::StateMismatch(format!(
                "state is at step {} but the suffix starts at step {}",
                state.step(),
                first.step
            )));
        }
    }
    let mut run = OnlineRun::from_state(config, state, horizon, opts)?;
    run.advance(suffix, opts.slices, horizon)?;
    Ok(run.finish())
}
