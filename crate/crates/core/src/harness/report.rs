//! Seed-averaged cost-vs-regret curves.

use std::io::Write;

use serde::Serialize;

use super::stats::{interpolate, mean, std_error};
use super::{HarnessError, ResultRow, ResultTable};

/// One plan point averaged over the seeds whose row succeeded.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub sweep: String,
    pub point: String,
    pub mode: String,
    pub predictor: String,
    pub seeds: usize,
    pub failed: usize,
    pub cost: f64,
    pub cost_se: f64,
    pub per: f64,
    pub per_se: f64,
    pub nregret: Vec<f64>,
    pub nregret_se: Vec<f64>,
}

/// Groups rows by sweep and plan point. Sweeps keep their first-appearance
/// order; points within a sweep are sorted by mean cost.
pub fn aggregate(table: &ResultTable) -> Vec<CurvePoint> {
    let mut groups: Vec<(String, String, Vec<&ResultRow>)> = Vec::new();
    for r in &table.rows {
        match groups.iter_mut().find(|g| g.0 == r.sweep && g.1 == r.point) {
            Some(g) => g.2.push(r),
            None => groups.push((r.sweep.clone(), r.point.clone(), vec![r])),
        }
    }
    let mut sweeps: Vec<&str> = Vec::new();
    for g in &groups {
        if !sweeps.contains(&g.0.as_str()) {
            sweeps.push(&g.0);
        }
    }
    let mut out = Vec::with_capacity(groups.len());
    for sweep in sweeps {
        let mut points: Vec<CurvePoint> = groups
            .iter()
            .filter(|g| g.0 == sweep)
            .map(|(sweep, point, rows)| {
                let ok: Vec<&&ResultRow> = rows.iter().filter(|r| r.is_ok()).collect();
                let col = |f: &dyn Fn(&ResultRow) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
                let costs = col(&|r| r.cost);
                let pers = col(&|r| r.per);
                let nk = table.ks.len();
                let nreg: Vec<Vec<f64>> = (0..nk).map(|i| col(&|r| r.normalized_regret_at[i])).collect();
                CurvePoint {
                    sweep: sweep.clone(),
                    point: point.clone(),
                    mode: rows[0].mode.clone(),
                    predictor: rows[0].predictor.clone(),
                    seeds: ok.len(),
                    failed: rows.len() - ok.len(),
                    cost: mean(&costs),
                    cost_se: std_error(&costs),
                    per: mean(&pers),
                    per_se: std_error(&pers),
                    nregret: nreg.iter().map(|v| mean(v)).collect(),
                    nregret_se: nreg.iter().map(|v| std_error(v)).collect(),
                }
            })
            .collect();
        points.sort_by(|a, b| a.cost.total_cmp(&b.cost));
        out.extend(points);
    }
    out
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

/// Writes aggregated curves as CSV or JSON.
pub fn write_report<W: Write>(writer: W, ks: &[usize], points: &[CurvePoint], json: bool) -> Result<(), HarnessError> {
    if json {
        let mut writer = writer;
        let text = serde_json::to_string_pretty(points).map_err(|e| HarnessError::Io(e.to_string()))?;
        writeln!(writer, "{text}")?;
        return Ok(());
    }
    let err = |e: csv::Error| HarnessError::Io(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["sweep", "point", "mode", "predictor", "seeds", "failed", "cost", "cost_se", "per", "per_se"]
        .map(String::from)
        .to_vec();
    for k in ks {
        header.push(format!("nregret@{k}"));
        header.push(format!("nregret@{k}_se"));
    }
    w.write_record(&header).map_err(err)?;
    for p in points {
        let mut rec = vec![
            p.sweep.clone(),
            p.point.clone(),
            p.mode.clone(),
            p.predictor.clone(),
            p.seeds.to_string(),
            p.failed.to_string(),
            fmt(p.cost),
            fmt(p.cost_se),
            fmt(p.per),
            fmt(p.per_se),
        ];
        for (m, se) in p.nregret.iter().zip(&p.nregret_se) {
            rec.push(fmt(*m));
            rec.push(fmt(*se));
        }
        w.write_record(rec).map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

impl ResultTable {
    /// `(cost, value)` of every successful row of `sweep` on `seed`.
    pub fn seed_curve(&self, sweep: &str, seed: u64, value: impl Fn(&ResultRow) -> f64) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.sweep == sweep && r.seed == seed && r.is_ok())
            .map(|r| (r.cost, value(r)))
            .collect()
    }

    /// Per-seed value of `sweep` interpolated at realized cost `cost`, in seed
    /// order; seeds whose curve does not cover `cost` are `None`.
    pub fn matched(&self, sweep: &str, cost: f64, value: impl Fn(&ResultRow) -> f64) -> Vec<Option<f64>> {
        self.seeds()
            .into_iter()
            .map(|s| interpolate(&self.seed_curve(sweep, s, &value), cost))
            .collect()
    }

    /// Distinct seeds in first-appearance order.
    pub fn seeds(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.seed) {
                out.push(r.seed);
            }
        }
        out
    }
}
