use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{HyperConfig, LearnError, ModelKind};
use crate::stream::{sigmoid, Label};

/// Parameters whose magnitude exceeds this bound count as diverged.
pub const DIVERGENCE_BOUND: f64 = 1e6;

const PROB_FLOOR: f64 = 1e-7;
const MAGIC: &[u8; 4] = b"DRMS";
const VERSION: u16 = 1;

/// Log-loss with the predicted probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn log_loss(p: f64, label: Label) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    kind: ModelKind,
    dim: usize,
    bias: f64,
    linear: Vec<f64>,
    /// Row-major `rows x embedding_dim` factor matrix.
    factors: Vec<f64>,
    step: u64,
    origin: u64,
    consumed: u64,
}

pub(crate) struct Diverged;

impl ModelState {
    /// Fresh parameters for a run whose first trained step is `origin`.
    pub fn init(config: &HyperConfig, dim: usize, origin: u64) -> Self {
        let factors = match config.model {
            ModelKind::Logistic => Vec::new(),
            ModelKind::FmLite { embedding_dim, buckets } => {
                let rows = buckets.unwrap_or(dim);
                let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
                (0..rows * embedding_dim)
                    .map(|_| rng.random_range(-0.01..0.01))
                    .collect()
            }
        };
        Self {
            kind: config.model,
            dim,
            bias: 0.0,
            linear: vec![0.0; dim],
            factors,
            step: origin.saturating_sub(1),
            origin,
            consumed: 0,
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Last step consumed.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// First step of the run, used by the learning-rate schedule.
    pub fn origin(&self) -> u64 {
        self.origin
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub(crate) fn check_compatible(&self, config: &HyperConfig) -> Result<(), LearnError> {
        if self.kind != config.model {
            return Err(LearnError::StateMismatch(format!(
                "state holds a {} model, config {} is {}",
                self.kind.name(),
                config.id,
                config.model.name()
            )));
        }
        Ok(())
    }

    fn row(&self, feature: usize) -> usize {
        match self.kind {
            ModelKind::FmLite { buckets: Some(b), .. } => feature % b,
            _ => feature,
        }
    }

    fn k(&self) -> usize {
        match self.kind {
            ModelKind::Logistic => 0,
            ModelKind::FmLite { embedding_dim, .. } => embedding_dim,
        }
    }

    /// Interaction sums `S_f = Σ_i v_{r(i),f} x_i` and the logit.
    fn forward(&self, x: &[f64], sums: &mut [f64]) -> f64 {
        let mut z = self.bias;
        for (w, xi) in self.linear.iter().zip(x) {
            z += w * xi;
        }
        let k = self.k();
        if k > 0 {
            let mut sq = 0.0;
            sums.iter_mut().for_each(|s| *s = 0.0);
            for (i, xi) in x.iter().enumerate() {
                let row = &self.factors[self.row(i) * k..][..k];
                for (s, v) in sums.iter_mut().zip(row) {
                    *s += v * xi;
                    sq += v * v * xi * xi;
                }
            }
            z += 0.5 * (sums.iter().map(|s| s * s).sum::<f64>() - sq);
        }
        z
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        let mut sums = vec![0.0; self.k()];
        self.forward(x, &mut sums)
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.logit(x))
    }

    pub fn loss(&self, x: &[f64], label: Label) -> f64 {
        log_loss(self.predict(x), label)
    }

    /// Gradient of the logit with respect to the flattened parameters
    /// (bias, linear weights, factors).
    pub fn logit_gradient(&self, x: &[f64]) -> Vec<f64> {
        let k = self.k();
        let mut sums = vec![0.0; k];
        self.forward(x, &mut sums);
        let mut g = vec![0.0; 1 + self.dim + self.factors.len()];
        g[0] = 1.0;
        g[1..=self.dim].copy_from_slice(x);
        for (i, xi) in x.iter().enumerate() {
            let r = self.row(i);
            for f in 0..k {
                let v = self.factors[r * k + f];
                g[1 + self.dim + r * k + f] += xi * (sums[f] - v * xi);
            }
        }
        g
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = vec![self.bias];
        p.extend(&self.linear);
        p.extend(&self.factors);
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), 1 + self.dim + self.factors.len());
        self.bias = p[0];
        self.linear.copy_from_slice(&p[1..=self.dim]);
        self.factors.copy_from_slice(&p[1 + self.dim..]);
    }

    pub(crate) fn sgd_step(&mut self, config: &HyperConfig, x: &[f64], label: Label, lr: f64, step: u64) -> Result<(), Diverged> {
        let k = self.k();
        let mut sums = vec![0.0; k];
        let z = self.forward(x, &mut sums);
        let gz = sigmoid(z) - label as f64;
        let wd = config.weight_decay;
        self.bias -= lr * gz;
        let mut ok = self.bias.is_finite() && self.bias.abs() <= DIVERGENCE_BOUND;
        for (w, xi) in self.linear.iter_mut().zip(x) {
            *w -= lr * (gz * xi + wd * *w);
            ok &= w.is_finite() && w.abs() <= DIVERGENCE_BOUND;
        }
        if k > 0 {
            // Factor gradients use the pre-update interaction sums.
            let mut grad = vec![0.0; self.factors.len()];
            for (i, xi) in x.iter().enumerate() {
                let r = self.row(i);
                for f in 0..k {
                    let v = self.factors[r * k + f];
                    grad[r * k + f] += xi * (sums[f] - v * xi);
                }
            }
            for (v, g) in self.factors.iter_mut().zip(grad) {
                *v -= lr * (gz * g + wd * *v);
                ok &= v.is_finite() && v.abs() <= DIVERGENCE_BOUND;
            }
        }
        self.step = step;
        self.consumed += 1;
        if ok {
            Ok(())
        } else {
            Err(Diverged)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 8 * (1 + self.dim + self.factors.len()));
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        let (tag, k, buckets) = match self.kind {
            ModelKind::Logistic => (0u8, 0u32, 0u32),
            ModelKind::FmLite { embedding_dim, buckets } => (1, embedding_dim as u32, buckets.unwrap_or(0) as u32),
        };
        out.push(tag);
        out.extend(k.to_le_bytes());
        out.extend(buckets.to_le_bytes());
        out.extend((self.dim as u32).to_le_bytes());
        for v in [self.step, self.origin, self.consumed] {
            out.extend(v.to_le_bytes());
        }
        for p in self.params() {
            out.extend(p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LearnError> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(LearnError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(LearnError::Format(format!("unsupported version {version}")));
        }
        let tag = r.take(1)?[0];
        let k = r.u32()? as usize;
        let buckets = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let kind = match tag {
            0 => ModelKind::Logistic,
            1 => ModelKind::FmLite {
                embedding_dim: k,
                buckets: (buckets > 0).then_some(buckets),
            },
            t => return Err(LearnError::Format(format!("unknown model tag {t}"))),
        };
        let (step, origin, consumed) = (r.u64()?, r.u64()?, r.u64()?);
        let rows = if tag == 1 { if buckets > 0 { buckets } else { dim } } else { 0 };
        let n = 1 + dim + rows * k;
        let params = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        if r.pos != bytes.len() {
            return Err(LearnError::Format("trailing bytes".into()));
        }
        Ok(Self {
            kind,
            dim,
            bias: params[0],
            linear: params[1..=dim].to_vec(),
            factors: params[1 + dim..].to_vec(),
            step,
            origin,
            consumed,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LearnError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| LearnError::Format("truncated state".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, LearnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, LearnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, LearnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
