use std::collections::BTreeMap;

use crate::trace::{ConfigId, PerformanceTrace, Point, SliceId};

/// Block-averaging trace recorder. Block `b` covers steps
/// `((b-1)s, bs]` and is recorded at `min(bs, T)`.
#[derive(Debug, Clone)]
pub(crate) struct Recorder {
    stride: u64,
    horizon: u64,
    block_end: u64,
    sum: f64,
    count: u64,
    slice_acc: BTreeMap<SliceId, (f64, u64)>,
    points: Vec<Point>,
    slices: BTreeMap<SliceId, Vec<Point>>,
}

impl Recorder {
    pub(crate) fn new(stride: u64, horizon: u64) -> Self {
        Self {
            stride,
            horizon,
            block_end: 0,
            sum: 0.0,
            count: 0,
            slice_acc: BTreeMap::new(),
            points: Vec::new(),
            slices: BTreeMap::new(),
        }
    }

    pub(crate) fn push(&mut self, step: u64, loss: f64, slice: Option<SliceId>) {
        if step > self.block_end {
            self.flush();
            self.block_end = (step.div_ceil(self.stride) * self.stride).min(self.horizon);
        }
        self.sum += loss;
        self.count += 1;
        if let Some(s) = slice {
            let acc = self.slice_acc.entry(s).or_insert((0.0, 0));
            acc.0 += loss;
            acc.1 += 1;
        }
    }

    /// Flushes the open block if it ends at or before `step`.
    pub(crate) fn flush_through(&mut self, step: u64) {
        if self.count > 0 && self.block_end <= step {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if self.count == 0 {
            return;
        }
        self.points.push((self.block_end, self.sum / self.count as f64));
        for (s, (sum, n)) in std::mem::take(&mut self.slice_acc) {
            self.slices
                .entry(s)
                .or_default()
                .push((self.block_end, sum / n as f64));
        }
        self.sum = 0.0;
        self.count = 0;
    }

    pub(crate) fn trace(&self, config: ConfigId) -> PerformanceTrace {
        PerformanceTrace::new(config, self.horizon, self.points.clone())
            .and_then(|t| t.with_slices(self.slices.clone()))
            .expect("recorder emits increasing in-range steps")
    }
}
