//! Parametric learning-curve laws over normalized time `D = t / T`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawKind {
    /// `E + A / D^α`, parameters `[E, A, α]`.
    InversePowerLaw,
    /// `exp(A + B / D + Cv ln D)`, parameters `[A, B, Cv]`.
    VaporPressure,
    /// `A / (1 + (D / e^B)^α)`, parameters `[A, B, α]`.
    LogPower,
    /// `E - exp(-A D^α + B)`, parameters `[E, A, α, B]`.
    ExponentialLaw,
    /// Convex combination of the four laws above. Parameters are the
    /// component parameters in declaration order followed by four
    /// non-negative mixing variables `u` with weights `u / Σu`.
    WeightedCombination,
}

pub const ALL_LAWS: [LawKind; 5] = [
    LawKind::InversePowerLaw,
    LawKind::VaporPressure,
    LawKind::LogPower,
    LawKind::ExponentialLaw,
    LawKind::WeightedCombination,
];

const COMPONENTS: [LawKind; 4] = [
    LawKind::InversePowerLaw,
    LawKind::VaporPressure,
    LawKind::LogPower,
    LawKind::ExponentialLaw,
];

const EXP_CAP: f64 = 700.0;
const ALPHA: (f64, f64) = (0.01, 5.0);

impl LawKind {
    pub fn name(&self) -> &'static str {
        match self {
            LawKind::InversePowerLaw => "inverse_power_law",
            LawKind::VaporPressure => "vapor_pressure",
            LawKind::LogPower => "log_power",
            LawKind::ExponentialLaw => "exponential_law",
            LawKind::WeightedCombination => "weighted_combination",
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            LawKind::InversePowerLaw | LawKind::VaporPressure | LawKind::LogPower => 3,
            LawKind::ExponentialLaw => 4,
            LawKind::WeightedCombination => 17,
        }
    }

    /// Number of identifiable parameters (the mixing weights lose one degree
    /// of freedom to normalization).
    pub fn free_params(&self) -> usize {
        match self {
            LawKind::WeightedCombination => 16,
            k => k.n_params(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let base: &[&str] = match self {
            LawKind::InversePowerLaw => &["E", "A", "alpha"],
            LawKind::VaporPressure => &["A", "B", "Cv"],
            LawKind::LogPower => &["A", "B", "alpha"],
            LawKind::ExponentialLaw => &["E", "A", "alpha", "B"],
            LawKind::WeightedCombination => {
                let mut names = Vec::new();
                for c in COMPONENTS {
                    let prefix = c.name();
                    names.extend(c.param_names().into_iter().map(|n| format!("{prefix}.{n}")));
                }
                names.extend((0..4).map(|i| format!("u{i}")));
                return names;
            }
        };
        base.iter().map(|s| s.to_string()).collect()
    }

    /// Box constraints per parameter.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let free = (f64::NEG_INFINITY, f64::INFINITY);
        match self {
            LawKind::InversePowerLaw => vec![free, free, ALPHA],
            LawKind::VaporPressure => vec![(-50.0, 50.0); 3],
            LawKind::LogPower => vec![free, (-20.0, 20.0), ALPHA],
            LawKind::ExponentialLaw => vec![free, (-50.0, 50.0), ALPHA, (-50.0, 20.0)],
            LawKind::WeightedCombination => {
                let mut b: Vec<_> = COMPONENTS.iter().flat_map(|c| c.bounds()).collect();
                b.extend([(1e-9, f64::INFINITY); 4]);
                b
            }
        }
    }

    pub fn eval(&self, p: &[f64], d: f64) -> f64 {
        match self {
            LawKind::InversePowerLaw => p[0] + p[1] * d.powf(-p[2]),
            LawKind::VaporPressure => (p[0] + p[1] / d + p[2] * d.ln()).min(EXP_CAP).exp(),
            LawKind::LogPower => p[0] / (1.0 + (p[2] * (d.ln() - p[1])).min(EXP_CAP).exp()),
            LawKind::ExponentialLaw => p[0] - (-p[1] * d.powf(p[2]) + p[3]).min(EXP_CAP).exp(),
            LawKind::WeightedCombination => {
                let (parts, u) = p.split_at(13);
                let total: f64 = u.iter().sum();
                let mut off = 0;
                let mut f = 0.0;
                for (c, w) in COMPONENTS.iter().zip(u) {
                    let n = c.n_params();
                    f += w / total * c.eval(&parts[off..off + n], d);
                    off += n;
                }
                f
            }
        }
    }

    /// Writes `∂f/∂p` at `d` into `out` and returns `f`.
    pub fn eval_grad(&self, p: &[f64], d: f64, out: &mut [f64]) -> f64 {
        let ln_d = d.ln();
        match self {
            LawKind::InversePowerLaw => {
                let pw = d.powf(-p[2]);
                out[0] = 1.0;
                out[1] = pw;
                out[2] = -p[1] * pw * ln_d;
                p[0] + p[1] * pw
            }
            LawKind::VaporPressure => {
                let f = (p[0] + p[1] / d + p[2] * ln_d).min(EXP_CAP).exp();
                out[0] = f;
                out[1] = f / d;
                out[2] = f * ln_d;
                f
            }
            LawKind::LogPower => {
                let q = (p[2] * (ln_d - p[1])).min(EXP_CAP).exp();
                let inv = 1.0 / (1.0 + q);
                let dq = -p[0] * inv * inv;
                out[0] = inv;
                out[1] = dq * (-p[2] * q);
                out[2] = dq * q * (ln_d - p[1]);
                p[0] * inv
            }
            LawKind::ExponentialLaw => {
                let pw = d.powf(p[2]);
                let h = (-p[1] * pw + p[3]).min(EXP_CAP).exp();
                out[0] = 1.0;
                out[1] = h * pw;
                out[2] = h * p[1] * pw * ln_d;
                out[3] = -h;
                p[0] - h
            }
            LawKind::WeightedCombination => {
                let (parts, u) = p.split_at(13);
                let total: f64 = u.iter().sum();
                let mut values = [0.0; 4];
                let mut off = 0;
                for (i, c) in COMPONENTS.iter().enumerate() {
                    let n = c.n_params();
                    values[i] = c.eval_grad(&parts[off..off + n], d, &mut out[off..off + n]);
                    let w = u[i] / total;
                    out[off..off + n].iter_mut().for_each(|g| *g *= w);
                    off += n;
                }
                let f: f64 = values.iter().zip(u).map(|(v, w)| v * w / total).sum();
                for i in 0..4 {
                    out[13 + i] = (values[i] - f) / total;
                }
                f
            }
        }
    }

    pub fn project(&self, p: &mut [f64]) {
        for (v, (lo, hi)) in p.iter_mut().zip(self.bounds()) {
            *v = v.clamp(lo, hi);
        }
    }

    /// Starting point fitted to `(d, y)` by linear least squares for the
    /// linear parameters, with the nonlinear ones drawn from `rng` (or taken
    /// from a fixed grid when `rng` is `None`, keeping the best candidate).
    pub fn initial_guess<R: Rng>(&self, d: &[f64], y: &[f64], rng: Option<&mut R>) -> Vec<f64> {
        match rng {
            Some(rng) => {
                let shape = self.sample_shape(rng);
                self.complete(&shape, d, y)
            }
            None => {
                let mut best: Option<(f64, Vec<f64>)> = None;
                for shape in self.shape_grid() {
                    let p = self.complete(&shape, d, y);
                    let sse: f64 = d.iter().zip(y).map(|(di, yi)| (self.eval(&p, *di) - yi).powi(2)).sum();
                    if sse.is_finite() && best.as_ref().is_none_or(|b| sse < b.0) {
                        best = Some((sse, p));
                    }
                }
                best.map(|b| b.1).unwrap_or_else(|| self.complete(&self.shape_grid()[0], d, y))
            }
        }
    }

    fn sample_shape<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            LawKind::InversePowerLaw => vec![rng.random_range(0.05..3.0)],
            LawKind::VaporPressure => vec![],
            LawKind::LogPower => vec![rng.random_range(-3.0..1.0), rng.random_range(0.1..3.0)],
            LawKind::ExponentialLaw => vec![rng.random_range(0.05..3.0), rng.random_range(0.01..1.0)],
            LawKind::WeightedCombination => COMPONENTS
                .iter()
                .flat_map(|c| c.sample_shape(rng))
                .collect(),
        }
    }

    fn shape_grid(&self) -> Vec<Vec<f64>> {
        let alphas = [0.1, 0.3, 0.6, 1.0, 1.5, 2.5];
        match self {
            LawKind::InversePowerLaw => alphas.iter().map(|a| vec![*a]).collect(),
            LawKind::VaporPressure => vec![vec![]],
            LawKind::LogPower => [-2.0, -1.0, -0.5, 0.0, 0.5]
                .iter()
                .flat_map(|b| alphas.iter().map(move |a| vec![*b, *a]))
                .collect(),
            LawKind::ExponentialLaw => [0.01, 0.05, 0.2, 0.5]
                .iter()
                .flat_map(|gap| alphas.iter().map(move |a| vec![*a, *gap]))
                .collect(),
            LawKind::WeightedCombination => vec![COMPONENTS
                .iter()
                .flat_map(|c| c.shape_grid().swap_remove(0))
                .collect()],
        }
    }

    /// Solves for the remaining parameters given the shape parameters.
    fn complete(&self, shape: &[f64], d: &[f64], y: &[f64]) -> Vec<f64> {
        let mut p = match self {
            LawKind::InversePowerLaw => {
                let alpha = shape[0];
                let x: Vec<f64> = d.iter().map(|di| di.powf(-alpha)).collect();
                let (e, a) = line_fit(&x, y);
                vec![e, a, alpha]
            }
            LawKind::VaporPressure => {
                let floor = y.iter().cloned().fold(f64::INFINITY, f64::min);
                let shift = if floor > 0.0 { 0.0 } else { 1e-6 - floor };
                let ly: Vec<f64> = y.iter().map(|v| (v + shift).ln()).collect();
                let x1: Vec<f64> = d.iter().map(|di| 1.0 / di).collect();
                let x2: Vec<f64> = d.iter().map(|di| di.ln()).collect();
                plane_fit(&x1, &x2, &ly).unwrap_or_else(|| {
                    let (a, cv) = line_fit(&x2, &ly);
                    [a, 0.0, cv]
                })
                .to_vec()
            }
            LawKind::LogPower => {
                let (b, alpha) = (shape[0], shape[1]);
                let x: Vec<f64> = d.iter().map(|di| 1.0 / (1.0 + (alpha * (di.ln() - b)).exp())).collect();
                let sxx: f64 = x.iter().map(|v| v * v).sum();
                let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                vec![if sxx > 0.0 { sxy / sxx } else { 0.0 }, b, alpha]
            }
            LawKind::ExponentialLaw => {
                // E sits just above the data; ln(E - y) = B - A D^α is linear.
                let (alpha, gap) = (shape[0], shape[1]);
                let top = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let spread = y.iter().cloned().fold(f64::INFINITY, f64::min);
                let e = top + gap * (top - spread).abs().max(1e-3);
                let x: Vec<f64> = d.iter().map(|di| di.powf(alpha)).collect();
                let ly: Vec<f64> = y.iter().map(|v| (e - v).ln()).collect();
                let (b, slope) = line_fit(&x, &ly);
                vec![e, -slope, alpha, b]
            }
            LawKind::WeightedCombination => {
                let mut p = Vec::with_capacity(17);
                let mut off = 0;
                for c in COMPONENTS {
                    let n = c.shape_len();
                    p.extend(c.complete(&shape[off..off + n], d, y));
                    off += n;
                }
                p.extend([1.0; 4]);
                p
            }
        };
        for v in p.iter_mut() {
            if !v.is_finite() {
                *v = 0.0;
            }
        }
        self.project(&mut p);
        p
    }

    fn shape_len(&self) -> usize {
        match self {
            LawKind::InversePowerLaw => 1,
            LawKind::VaporPressure => 0,
            LawKind::LogPower | LawKind::ExponentialLaw => 2,
            LawKind::WeightedCombination => 5,
        }
    }
}

/// Least-squares `y ≈ c0 + c1 x`.
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 1e-300 { sxy / sxx } else { 0.0 };
    (my - slope * mx, slope)
}

/// Least-squares `y ≈ c0 + c1 x1 + c2 x2`.
fn plane_fit(x1: &[f64], x2: &[f64], y: &[f64]) -> Option<[f64; 3]> {
    let rows = x1.len();
    if rows < 3 {
        return None;
    }
    let a = nalgebra::DMatrix::from_fn(rows, 3, |i, j| match j {
        0 => 1.0,
        1 => x1[i],
        _ => x2[i],
    });
    let b = nalgebra::DVector::from_column_slice(y);
    let sol = a.svd(true, true).solve(&b, 1e-12).ok()?;
    sol.iter().all(|v| v.is_finite()).then(|| [sol[0], sol[1], sol[2]])
}

impl fmt::Display for LawKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LawKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ALL_LAWS
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown law `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plug_in_values() {
        assert!((LawKind::InversePowerLaw.eval(&[0.3, 0.2, 1.0], 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(LawKind::InversePowerLaw.eval(&[0.3, 0.0, 3.7], 1.0), 0.3);
        assert_eq!(LawKind::VaporPressure.eval(&[0.0, 0.0, 0.0], 1.0), 1.0);
        assert_eq!(LawKind::LogPower.eval(&[0.8, 0.0, 2.0], 1.0), 0.4);
        assert!((LawKind::ExponentialLaw.eval(&[0.5, 1.0, 1.0, -1.0], 1.0) - (0.5 - (-2.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn weighted_combination_is_convex() {
        let mut p = vec![0.3, 0.2, 1.0, 0.0, 0.0, 0.0, 0.8, 0.0, 2.0, 0.5, 1.0, 1.0, -1.0];
        p.extend([1.0, 0.0, 0.0, 0.0]);
        assert!((LawKind::WeightedCombination.eval(&p, 1.0) - 0.5).abs() < 1e-15);
        p[13..].copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        let parts = [0.5, 1.0, 0.4, 0.5 - (-2.0f64).exp()];
        let mean = parts.iter().sum::<f64>() / 4.0;
        assert!((LawKind::WeightedCombination.eval(&p, 1.0) - mean).abs() < 1e-15);
    }

    #[test]
    fn names_round_trip() {
        for k in ALL_LAWS {
            assert_eq!(k.name().parse::<LawKind>().unwrap(), k);
            assert_eq!(k.param_names().len(), k.n_params());
            assert_eq!(k.bounds().len(), k.n_params());
        }
    }

    /// Maps unit draws into the ranges used for synthetic curves.
    fn params_for(kind: LawKind, u: &[f64]) -> Vec<f64> {
        let ranges: &[(f64, f64)] = match kind {
            LawKind::InversePowerLaw => &[(0.2, 0.6), (0.01, 0.2), (0.2, 1.5)],
            LawKind::VaporPressure => &[(-1.5, -0.5), (0.0, 0.05), (-0.3, 0.0)],
            LawKind::LogPower => &[(0.3, 0.8), (-1.0, 0.0), (0.3, 1.5)],
            LawKind::ExponentialLaw => &[(0.3, 0.6), (1.0, 5.0), (0.3, 1.5), (-3.0, -1.0)],
            LawKind::WeightedCombination => unreachable!(),
        };
        ranges.iter().zip(u).map(|((lo, hi), x)| lo + (hi - lo) * x).collect()
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(
            k in 0usize..4,
            d in 0.05f64..1.0,
            u in prop::collection::vec(0.0f64..1.0, 17),
        ) {
            let kind = COMPONENTS[k];
            check_grad(kind, &params_for(kind, &u), d);
            let mut wc = Vec::new();
            let mut off = 0;
            for c in COMPONENTS {
                wc.extend(params_for(c, &u[off..]));
                off += c.n_params();
            }
            wc.extend(u[13..].iter().map(|s| s + 0.1));
            check_grad(LawKind::WeightedCombination, &wc, d);
        }
    }

    fn check_grad(kind: LawKind, p: &[f64], d: f64) {
        let mut g = vec![0.0; p.len()];
        let f = kind.eval_grad(p, d, &mut g);
        assert!((f - kind.eval(p, d)).abs() < 1e-12);
        for j in 0..p.len() {
            let h = 1e-6 * (1.0 + p[j].abs());
            let mut q = p.to_vec();
            q[j] += h;
            let up = kind.eval(&q, d);
            q[j] -= 2.0 * h;
            let down = kind.eval(&q, d);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5 * (1.0 + fd.abs()), "{kind} param {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn initial_guess_is_exact_for_linear_parts() {
        let d: Vec<f64> = (1..=8).map(|i| i as f64 / 16.0).collect();
        let y: Vec<f64> = d.iter().map(|x| 0.4 + 0.1 * x.powf(-0.6)).collect();
        let p = LawKind::InversePowerLaw.initial_guess::<rand_chacha::ChaCha8Rng>(&d, &y, None);
        assert!((p[0] - 0.4).abs() < 1e-10 && (p[1] - 0.1).abs() < 1e-10);
        let y: Vec<f64> = d.iter().map(|x| (-1.0 + 0.02 / x - 0.1 * x.ln()).exp()).collect();
        let p = LawKind::VaporPressure.initial_guess::<rand_chacha::ChaCha8Rng>(&d, &y, None);
        assert!((p[0] + 1.0).abs() < 1e-8 && (p[1] - 0.02).abs() < 1e-8 && (p[2] + 0.1).abs() < 1e-8);
    }
}
