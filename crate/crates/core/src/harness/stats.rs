//! Seed-level summary statistics for sweep results.

/// Arithmetic mean; NaN for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean from the sample standard deviation; NaN for
/// fewer than two values.
pub fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    /// Pairs with `a < b`.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

/// Paired sign test of the alternative "`a` tends to be smaller than `b`".
/// Ties are dropped.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (x, y) in a.iter().zip(b) {
        if x < y {
            wins += 1;
        } else if x > y {
            losses += 1;
        } else {
            ties += 1;
        }
    }
    SignTest {
        wins,
        losses,
        ties,
        p_value: binomial_upper_tail(wins + losses, wins),
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let mut coef = 1.0f64;
    let mut tail = 0.0;
    for i in 1..=n {
        coef = coef * (n + 1 - i) as f64 / i as f64;
        if i >= k {
            tail += coef;
        }
    }
    tail / 2f64.powi(n as i32)
}

/// Piecewise-linear value of `curve` at `x`. Points are sorted by their first
/// coordinate first; `None` outside the covered range.
pub fn interpolate(curve: &[(f64, f64)], x: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = curve.iter().copied().filter(|p| p.0.is_finite() && !p.1.is_nan()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let first = pts.first()?;
    let last = pts.last()?;
    if x < first.0 || x > last.0 {
        return None;
    }
    if let Some(p) = pts.iter().find(|p| p.0 == x) {
        return Some(p.1);
    }
    let i = pts.partition_point(|p| p.0 < x);
    let (a, b) = (pts[i - 1], pts[i]);
    Some(a.1 + (b.1 - a.1) * (x - a.0) / (b.0 - a.0))
}
