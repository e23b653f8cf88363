use std::io::{Read, Write};

use super::{ClusterDiagnostic, Method, TrialResult};
use crate::error::{Error, Result};
use crate::quantile::ExtendedReal;

pub const RESULT_COLUMNS: [&str; 10] = [
    "trial",
    "method",
    "alpha_target",
    "coverage",
    "avg_width_finite",
    "finite_fraction",
    "q_hat",
    "seed",
    "axis_name",
    "axis_value",
];

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub fn write_results_csv<W: Write>(rows: &[TrialResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.trial.to_string(),
            r.method.to_string(),
            r.alpha_target.to_string(),
            r.coverage.to_string(),
            opt_f64(r.avg_width_finite),
            r.finite_fraction.to_string(),
            r.q_hat.map(|q| q.to_string()).unwrap_or_default(),
            r.seed.to_string(),
            r.axis_name.clone().unwrap_or_default(),
            r.axis_value.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec.get(i).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::Csv(format!("bad {} value {raw:?}", RESULT_COLUMNS[i])))
}

pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<TrialResult>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(RESULT_COLUMNS) {
        return Err(Error::Csv(format!("unexpected results header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let width: f64 = field(&rec, 4)?;
        let q_hat = match rec.get(6).unwrap_or("") {
            "" => None,
            _ => Some(field::<ExtendedReal>(&rec, 6)?),
        };
        let axis_name = rec.get(8).filter(|s| !s.is_empty()).map(str::to_string);
        let axis_value = match rec.get(9).unwrap_or("") {
            "" => None,
            _ => Some(field(&rec, 9)?),
        };
        rows.push(TrialResult {
            trial: field(&rec, 0)?,
            method: field::<Method>(&rec, 1)?,
            alpha_target: field(&rec, 2)?,
            coverage: field(&rec, 3)?,
            avg_width_finite: (!width.is_nan()).then_some(width),
            finite_fraction: field(&rec, 5)?,
            q_hat,
            seed: field(&rec, 7)?,
            axis_name,
            axis_value,
        });
    }
    Ok(rows)
}

/// Across-trial statistics for one (axis value, method, level) group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub axis_name: Option<String>,
    pub axis_value: Option<f64>,
    pub method: Method,
    pub alpha_target: f64,
    pub trials: usize,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    /// Over trials that produced at least one finite interval.
    pub width_mean: Option<f64>,
    pub width_std: Option<f64>,
    pub finite_fraction_mean: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows in order of first appearance; standard deviations use `n - 1`.
pub fn summarize(rows: &[TrialResult]) -> Vec<SummaryRow> {
    type Key = (Option<String>, Option<u64>, Method, u64);
    let mut keys: Vec<Key> = Vec::new();
    let mut groups: Vec<Vec<&TrialResult>> = Vec::new();
    for r in rows {
        let key = (
            r.axis_name.clone(),
            r.axis_value.map(f64::to_bits),
            r.method,
            r.alpha_target.to_bits(),
        );
        match keys.iter().position(|k| *k == key) {
            Some(i) => groups[i].push(r),
            None => {
                keys.push(key);
                groups.push(vec![r]);
            }
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let cov: Vec<f64> = g.iter().map(|r| r.coverage).collect();
            let widths: Vec<f64> = g.iter().filter_map(|r| r.avg_width_finite).collect();
            let ff: Vec<f64> = g.iter().map(|r| r.finite_fraction).collect();
            let (coverage_mean, coverage_std) = mean_std(&cov);
            let (width_mean, width_std) = if widths.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&widths);
                (Some(m), Some(s))
            };
            SummaryRow {
                axis_name: g[0].axis_name.clone(),
                axis_value: g[0].axis_value,
                method: g[0].method,
                alpha_target: g[0].alpha_target,
                trials: g.len(),
                coverage_mean,
                coverage_std,
                width_mean,
                width_std,
                finite_fraction_mean: mean_std(&ff).0,
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "axis_name",
        "axis_value",
        "method",
        "alpha_target",
        "trials",
        "coverage_mean",
        "coverage_std",
        "width_mean",
        "width_std",
        "finite_fraction_mean",
    ])?;
    for r in rows {
        w.write_record([
            r.axis_name.clone().unwrap_or_default(),
            r.axis_value.map(|v| v.to_string()).unwrap_or_default(),
            r.method.to_string(),
            r.alpha_target.to_string(),
            r.trials.to_string(),
            format!("{:.4}", r.coverage_mean),
            format!("{:.4}", r.coverage_std),
            r.width_mean.map_or("nan".into(), |v| format!("{v:.4}")),
            r.width_std.map_or("nan".into(), |v| format!("{v:.4}")),
            format!("{:.4}", r.finite_fraction_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_diagnostics_csv<W: Write>(rows: &[ClusterDiagnostic], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "trial",
        "alpha_target",
        "f_cluster",
        "f_size",
        "g_cluster",
        "g_size",
        "q",
        "fallback",
    ])?;
    for d in rows {
        w.write_record([
            d.trial.to_string(),
            d.alpha_target.to_string(),
            d.f_cluster.to_string(),
            d.f_size.to_string(),
            d.g_cluster.to_string(),
            d.g_size.to_string(),
            d.q.to_string(),
            d.fallback.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
