//! Joint least-squares fitting of learning-curve laws on pairwise
//! differences between configurations.
//!
//! The pairwise objective `Σ_{ω,ω'} Σ_j ((f_ω − f_ω')(D_j) − (a_ωj − a_ω'j))²`
//! equals `n Σ_ω Σ_j (f_ω(D_j) − a_ωj − c_j)²` minimized over one shared
//! offset `c_j` per window, which keeps the normal equations block-sparse.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::laws::LawKind;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Solution {
    pub params: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub cost: f64,
}

/// Fitting problem over `n` configurations and `F` aggregates each.
pub(crate) struct Problem<'a> {
    pub law: LawKind,
    pub d: &'a [f64],
    pub a: &'a [Vec<f64>],
    /// Fit shared per-window offsets (pairwise mode) or none (absolute mode).
    pub shared_offsets: bool,
    pub max_iters: usize,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.a.len()
    }

    fn f(&self) -> usize {
        self.d.len()
    }

    fn best_offsets(&self, params: &[Vec<f64>]) -> Vec<f64> {
        let mut c = vec![0.0; self.f()];
        if !self.shared_offsets {
            return c;
        }
        for (p, a) in params.iter().zip(self.a) {
            for (j, cj) in c.iter_mut().enumerate() {
                *cj += self.law.eval(p, self.d[j]) - a[j];
            }
        }
        let n = self.n() as f64;
        c.iter_mut().for_each(|v| *v /= n);
        c
    }

    fn cost(&self, params: &[Vec<f64>], c: &[f64]) -> f64 {
        let mut s = 0.0;
        for (p, a) in params.iter().zip(self.a) {
            for j in 0..self.f() {
                s += (self.law.eval(p, self.d[j]) - a[j] - c[j]).powi(2);
            }
        }
        if s.is_finite() {
            s
        } else {
            f64::INFINITY
        }
    }

    /// Per-configuration RMS residual at a solution.
    pub fn rms(&self, params: &[f64], a: &[f64], c: &[f64]) -> f64 {
        let s: f64 = (0..self.f())
            .map(|j| (self.law.eval(params, self.d[j]) - a[j] - c[j]).powi(2))
            .sum();
        (s / self.f() as f64).sqrt()
    }

    /// Levenberg-Marquardt from `start`, eliminating the per-configuration
    /// blocks through the Schur complement on the offsets.
    pub fn solve(&self, start: Vec<Vec<f64>>) -> Solution {
        let (n, nf, p) = (self.n(), self.f(), self.law.n_params());
        let mut params = start;
        for q in params.iter_mut() {
            self.law.project(q);
        }
        let mut c = self.best_offsets(&params);
        let mut cost = self.cost(&params, &c);
        let mut mu = 1e-3;
        let mut jac = vec![DMatrix::<f64>::zeros(nf, p); n];
        let mut res = vec![DVector::<f64>::zeros(nf); n];
        let mut grad = vec![0.0; p];
        for _ in 0..self.max_iters {
            if !cost.is_finite() || cost < 1e-30 {
                break;
            }
            for w in 0..n {
                for j in 0..nf {
                    let v = self.law.eval_grad(&params[w], self.d[j], &mut grad);
                    for k in 0..p {
                        jac[w][(j, k)] = grad[k];
                    }
                    res[w][j] = v - self.a[w][j] - c[j];
                }
            }
            let normal: Vec<(DMatrix<f64>, DVector<f64>)> = jac
                .iter()
                .zip(&res)
                .map(|(j, r)| (j.tr_mul(j), j.tr_mul(r)))
                .collect();
            let mut accepted = false;
            while mu < 1e14 {
                match self.step(&params, &jac, &res, &normal, mu) {
                    Some(next) => {
                        let nc = self.best_offsets(&next);
                        let ncost = self.cost(&next, &nc);
                        if ncost < cost {
                            let gain = cost - ncost;
                            params = next;
                            c = nc;
                            cost = ncost;
                            mu = (mu / 3.0).max(1e-12);
                            accepted = gain > 1e-15 * cost;
                            break;
                        }
                        mu *= 4.0;
                    }
                    None => mu *= 4.0,
                }
            }
            if !accepted {
                break;
            }
        }
        Solution {
            params,
            offsets: c,
            cost,
        }
    }

    fn step(
        &self,
        params: &[Vec<f64>],
        jac: &[DMatrix<f64>],
        res: &[DVector<f64>],
        normal: &[(DMatrix<f64>, DVector<f64>)],
        mu: f64,
    ) -> Option<Vec<Vec<f64>>> {
        let (n, nf) = (self.n(), self.f());
        let mut factors = Vec::with_capacity(n);
        for (b, _) in normal {
            let mut bd = b.clone();
            let scale = b.diagonal().max().max(1e-300);
            for k in 0..bd.nrows() {
                bd[(k, k)] += mu * b[(k, k)].max(1e-9 * scale);
            }
            factors.push(bd.cholesky()?);
        }
        let dc = if self.shared_offsets {
            let mut s = DMatrix::<f64>::identity(nf, nf) * n as f64;
            let mut rhs = DVector::<f64>::zeros(nf);
            for w in 0..n {
                // E = -Jᵀ, so Eᵀ B⁻¹ E = J B⁻¹ Jᵀ.
                let binv_jt = factors[w].solve(&jac[w].transpose());
                s -= &jac[w] * &binv_jt;
                rhs += &res[w] - &jac[w] * factors[w].solve(&normal[w].1);
            }
            s.cholesky()?.solve(&rhs)
        } else {
            DVector::zeros(nf)
        };
        let mut next = Vec::with_capacity(n);
        for w in 0..n {
            let rhs = -&normal[w].1 + jac[w].tr_mul(&dc);
            let delta = factors[w].solve(&rhs);
            let mut q: Vec<f64> = params[w].iter().zip(delta.iter()).map(|(x, dx)| x + dx).collect();
            if q.iter().any(|v| !v.is_finite()) {
                return None;
            }
            self.law.project(&mut q);
            next.push(q);
        }
        Some(next)
    }

    /// Multi-start fit. In pairwise mode start 0 is the set of independent
    /// absolute fits of every configuration; in absolute mode it is the best
    /// grid initialization. Each further start draws one shared set of shape
    /// parameters from a seeded generator. The lowest cost wins, earlier
    /// starts on ties.
    pub fn solve_multistart(&self, restarts: usize, seed: u64) -> Option<Solution> {
        let first: Vec<Vec<f64>> = if self.shared_offsets {
            self.a
                .iter()
                .map(|a| {
                    let single = [a.clone()];
                    let alone = Problem {
                        a: &single,
                        shared_offsets: false,
                        ..*self
                    };
                    alone
                        .solve_multistart(restarts, seed)
                        .map(|s| s.params.into_iter().next().unwrap())
                        .unwrap_or_else(|| self.law.initial_guess::<ChaCha8Rng>(self.d, a, None))
                })
                .collect()
        } else {
            self.a
                .iter()
                .map(|a| self.law.initial_guess::<ChaCha8Rng>(self.d, a, None))
                .collect()
        };
        let mut starts = vec![first];
        for r in 1..restarts.max(1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let shape_seed = ChaCha8Rng::from_rng(&mut rng);
            starts.push(
                self.a
                    .iter()
                    .map(|a| {
                        let mut local = shape_seed.clone();
                        self.law.initial_guess(self.d, a, Some(&mut local))
                    })
                    .collect(),
            );
        }
        let solutions: Vec<Solution> = starts.into_par_iter().map(|s| self.solve(s)).collect();
        let mut best: Option<Solution> = None;
        for s in solutions {
            if s.cost.is_finite() && best.as_ref().is_none_or(|b| s.cost < b.cost) {
                best = Some(s);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(f: usize) -> Vec<f64> {
        (1..=f).map(|j| j as f64 / (2 * f) as f64).collect()
    }

    #[test]
    fn absolute_fit_recovers_power_law() {
        let d = grid(8);
        let truth = [0.4, 0.07, 0.8];
        let a = vec![d.iter().map(|x| LawKind::InversePowerLaw.eval(&truth, *x)).collect::<Vec<_>>()];
        let prob = Problem {
            law: LawKind::InversePowerLaw,
            d: &d,
            a: &a,
            shared_offsets: false,
            max_iters: 300,
        };
        let s = prob.solve_multistart(10, 1).unwrap();
        let pred = LawKind::InversePowerLaw.eval(&s.params[0], 1.0);
        assert!((pred - 0.47).abs() < 1e-8, "{pred}");
    }

    #[test]
    fn pairwise_fit_ignores_shared_offsets() {
        let d = grid(8);
        let law = LawKind::InversePowerLaw;
        let truths = [[0.4, 0.07, 0.8], [0.35, 0.15, 0.4], [0.5, 0.02, 1.3]];
        let drift = |x: f64| 0.3 * (7.0 * x).sin();
        let a: Vec<Vec<f64>> = truths
            .iter()
            .map(|t| d.iter().map(|x| law.eval(t, *x) + drift(*x)).collect())
            .collect();
        let prob = Problem {
            law,
            d: &d,
            a: &a,
            shared_offsets: true,
            max_iters: 300,
        };
        let s = prob.solve_multistart(10, 3).unwrap();
        assert!(s.cost < 1e-20, "{}", s.cost);
        let pred: Vec<f64> = s.params.iter().map(|p| law.eval(p, 1.0)).collect();
        let want: Vec<f64> = truths.iter().map(|t| law.eval(t, 1.0)).collect();
        for i in 1..3 {
            assert!(((pred[i] - pred[0]) - (want[i] - want[0])).abs() < 1e-6);
        }
    }
}
