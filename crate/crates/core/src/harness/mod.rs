//! Repeated-trial experiments comparing the calibrators on simulated cascades.

mod config;
mod report;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

pub use config::{ExperimentConfig, KClusters, Method};
pub use report::{
    read_results_csv, summarize, write_diagnostics_csv, write_results_csv, write_summary_csv,
    SummaryRow, RESULT_COLUMNS,
};

use crate::baselines::{aci_run, fit_density_ratio, WcpCalibrator};
use crate::cluster_level::ClusterPartition;
use crate::conformal::{absolute_residuals, evaluate, fit_split, CoverageReport, PredictionInterval};
use crate::error::{Error, Result};
use crate::models::{gen_system_with, Dataset, RandomForest, Regressor};
use crate::quantile::{ExtendedReal, ScoreSet};
use crate::seed::mix;
use crate::set_level::fit_set_level;

/// One (trial, method, level) outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub trial: usize,
    pub method: Method,
    pub alpha_target: f64,
    pub coverage: f64,
    pub avg_width_finite: Option<f64>,
    pub finite_fraction: f64,
    /// Calibrated threshold when the method has a single one.
    pub q_hat: Option<ExtendedReal>,
    pub seed: u64,
    pub axis_name: Option<String>,
    pub axis_value: Option<f64>,
}

/// Per-cluster state of the cluster-level calibrator for one trial and level.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDiagnostic {
    pub trial: usize,
    pub alpha_target: f64,
    pub f_cluster: usize,
    pub f_size: usize,
    pub g_cluster: usize,
    pub g_size: usize,
    pub q: ExtendedReal,
    pub fallback: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub results: Vec<TrialResult>,
    pub diagnostics: Vec<ClusterDiagnostic>,
}

/// Seed of trial `t`; every random draw inside the trial derives from it.
pub fn trial_seed(base: u64, trial: usize) -> u64 {
    mix(base, trial as u64)
}

/// The five disjoint datasets of one trial.
#[derive(Debug, Clone)]
pub struct TrialSplits {
    pub train: Dataset,
    pub end2end: Dataset,
    pub upstream: Dataset,
    pub downstream: Dataset,
    pub test: Dataset,
}

impl TrialSplits {
    pub fn named(&self) -> [(&'static str, &Dataset); 5] {
        [
            ("train", &self.train),
            ("cal_end2end", &self.end2end),
            ("cal_upstream", &self.upstream),
            ("cal_downstream", &self.downstream),
            ("test", &self.test),
        ]
    }
}

/// Regenerates the system and data splits that trial `trial` runs on.
pub fn trial_splits(cfg: &ExperimentConfig, trial: usize) -> Result<TrialSplits> {
    let seed = trial_seed(cfg.seed, trial);
    let system = gen_system_with(
        mix(seed, 0),
        cfg.input_dim,
        cfg.intermediate_dim,
        cfg.noise(),
        cfg.nonlinear,
        cfg.map_init,
    )?;
    Ok(TrialSplits {
        train: system.gen_dataset(cfg.n_train, mix(seed, 1)),
        end2end: system.gen_dataset(cfg.n_cal_end2end, mix(seed, 2)),
        upstream: system.gen_dataset(cfg.n_cal_upstream, mix(seed, 3)),
        downstream: system.gen_dataset(cfg.n_cal_downstream, mix(seed, 4)),
        test: system.gen_dataset(cfg.n_test, mix(seed, 5)),
    })
}

fn predict_all(g: &dyn Regressor, rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().map(|r| g.predict(r)).collect()
}

fn intervals(centers: &[f64], half: ExtendedReal) -> Vec<PredictionInterval> {
    centers.iter().map(|&c| PredictionInterval::new(c, half)).collect()
}

fn numerical(what: &str, e: Error) -> Error {
    match e {
        Error::Config(_) | Error::Io(_) => e,
        other => Error::Numerical(format!("{what}: {other}")),
    }
}

fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<ExperimentOutput> {
    let seed = trial_seed(cfg.seed, trial);
    let splits = trial_splits(cfg, trial)?;
    let g_hat = RandomForest::fit(&splits.train.downstream()?, &cfg.forest(), mix(seed, 6))
        .map_err(|e| numerical("downstream training", e))?;

    // The system prediction for every point only sees x through y_hat.
    let test_centers = predict_all(&g_hat, &splits.test.y_hat);
    let truths = &splits.test.z;
    let methods = cfg.ordered_methods();
    let needs_w = methods
        .iter()
        .any(|m| matches!(m, Method::Aci | Method::Wcp | Method::SetLevel | Method::ClusterLevel));
    let needs_u = methods
        .iter()
        .any(|m| matches!(m, Method::SetLevel | Method::ClusterLevel));

    let dg = &splits.downstream;
    let dg_pred = if needs_w { predict_all(&g_hat, &dg.y) } else { Vec::new() };
    let w_rows: Vec<f64> = dg_pred.iter().zip(&dg.z).map(|(p, z)| (p - z).abs()).collect();
    let u_rows: Vec<f64> = if needs_u {
        let df = &splits.upstream;
        predict_all(&g_hat, &df.y_hat)
            .iter()
            .zip(predict_all(&g_hat, &df.y))
            .map(|(a, b)| (a - b).abs())
            .collect()
    } else {
        Vec::new()
    };

    let mut out = ExperimentOutput::default();
    let mut push = |method: Method, alpha: f64, rep: CoverageReport, q_hat: Option<ExtendedReal>| {
        out.results.push(TrialResult {
            trial,
            method,
            alpha_target: alpha,
            coverage: rep.empirical_coverage,
            avg_width_finite: rep.avg_width_finite,
            finite_fraction: rep.finite_fraction,
            q_hat,
            seed: cfg.seed,
            axis_name: None,
            axis_value: None,
        });
    };
    let mut diagnostics = Vec::new();

    for method in methods {
        match method {
            Method::Wcp => {
                let ratio = fit_density_ratio(&splits.train.y, &splits.upstream.y_hat, mix(seed, 7))
                    .map_err(|e| numerical("density ratio", e))?;
                let cal = WcpCalibrator::new(&w_rows, &dg.y, ratio)?;
                for &alpha in &cfg.alphas {
                    let ivs = splits
                        .test
                        .y_hat
                        .iter()
                        .zip(&test_centers)
                        .map(|(y, &c)| cal.interval(y, c, alpha))
                        .collect::<Result<Vec<_>>>()?;
                    push(method, alpha, evaluate(&ivs, truths, alpha)?, None);
                }
            }
            Method::Aci => {
                let cal = ScoreSet::new(w_rows.clone())?;
                let stream: Vec<(f64, f64)> =
                    dg_pred.iter().copied().zip(dg.z.iter().copied()).collect();
                for &alpha in &cfg.alphas {
                    let (_, state) = aci_run(&stream, &cal, alpha, cfg.aci_gamma, 1.0 - alpha)?;
                    // The level reached at the end of the stream is frozen for the test set.
                    let half = state.half_width(&cal);
                    let ivs = intervals(&test_centers, half);
                    push(method, alpha, evaluate(&ivs, truths, alpha)?, Some(half));
                }
            }
            Method::End2end => {
                let e2e = &splits.end2end;
                let res = absolute_residuals(&predict_all(&g_hat, &e2e.y_hat), &e2e.z)?;
                for &alpha in &cfg.alphas {
                    let c = fit_split(&res, alpha)?;
                    let ivs = intervals(&test_centers, c.half_width);
                    push(method, alpha, evaluate(&ivs, truths, alpha)?, Some(c.half_width));
                }
            }
            Method::SetLevel => {
                let u = ScoreSet::new(u_rows.clone())?;
                let w = ScoreSet::new(w_rows.clone())?;
                for &alpha in &cfg.alphas {
                    let c = fit_set_level(&u, &w, alpha)?;
                    let ivs = intervals(&test_centers, c.q_hat);
                    push(method, alpha, evaluate(&ivs, truths, alpha)?, Some(c.q_hat));
                }
            }
            Method::ClusterLevel => {
                let partition = ClusterPartition::from_scores(
                    &splits.upstream.y,
                    &u_rows,
                    &dg.y,
                    &w_rows,
                    cfg.k_upstream(),
                    cfg.k_downstream(),
                    mix(seed, 8),
                )
                .map_err(|e| numerical("clustering", e))?;
                let f_sizes = partition.f_clusters.sizes();
                let g_sizes = partition.g_clusters.sizes();
                for &alpha in &cfg.alphas {
                    let c = partition.calibrate(alpha, cfg.quantile_mode)?;
                    let ivs = splits
                        .test
                        .y_hat
                        .iter()
                        .zip(&test_centers)
                        .map(|(y, &center)| c.predict_from_intermediate(y, center))
                        .collect::<Result<Vec<_>>>()?;
                    push(method, alpha, evaluate(&ivs, truths, alpha)?, None);
                    if cfg.diagnostics.is_some() {
                        for (i, &j) in c.mapping.iter().enumerate() {
                            diagnostics.push(ClusterDiagnostic {
                                trial,
                                alpha_target: alpha,
                                f_cluster: i,
                                f_size: f_sizes[i],
                                g_cluster: j,
                                g_size: g_sizes[j],
                                q: c.per_pair_q[i],
                                fallback: c.fallback_used[i],
                            });
                        }
                    }
                }
            }
        }
    }
    out.diagnostics = diagnostics;
    Ok(out)
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Runs every trial. Rows come back trial-major, then method, then level,
/// whatever the worker count.
pub fn run_experiment_detailed(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let per_trial = with_pool(cfg.workers, || {
        (0..cfg.trials)
            .into_par_iter()
            .map(|t| run_trial(cfg, t))
            .collect::<Result<Vec<_>>>()
    })??;
    let mut out = ExperimentOutput::default();
    for t in per_trial {
        out.results.extend(t.results);
        out.diagnostics.extend(t.diagnostics);
    }
    Ok(out)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<TrialResult>> {
    Ok(run_experiment_detailed(cfg)?.results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    NoiseStd,
    NoiseMean,
    /// Training and all calibration sizes at once.
    DataSize,
    KClusters,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::NoiseStd => "noise_std",
            SweepAxis::NoiseMean => "noise_mean",
            SweepAxis::DataSize => "data_size",
            SweepAxis::KClusters => "k_clusters",
        }
    }

    /// Copy of `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let count = || {
            if value.is_finite() && value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!(
                    "{} needs a positive integer, got {value}",
                    self.as_str()
                )))
            }
        };
        let mut cfg = base.clone();
        match self {
            SweepAxis::NoiseStd => cfg.noise_std = value,
            SweepAxis::NoiseMean => cfg.noise_mean = value,
            SweepAxis::DataSize => {
                let n = count()?;
                cfg.n_train = n;
                cfg.n_cal_end2end = n;
                cfg.n_cal_upstream = n;
                cfg.n_cal_downstream = n;
            }
            SweepAxis::KClusters => cfg.k_clusters = KClusters::Fixed(count()?),
        }
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::NoiseStd,
            SweepAxis::NoiseMean,
            SweepAxis::DataSize,
            SweepAxis::KClusters,
        ]
        .into_iter()
        .find(|a| a.as_str() == s.trim())
        .ok_or_else(|| Error::Config(format!("unknown sweep axis {s:?}")))
    }
}

/// Runs the base experiment once per axis value. All values are validated
/// before the first trial starts.
pub fn run_sweep_detailed(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<ExperimentOutput> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| {
            let c = axis.apply(base, v)?;
            c.validate()?;
            Ok((v, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = ExperimentOutput::default();
    for (v, c) in configs {
        let mut part = run_experiment_detailed(&c)?;
        for r in &mut part.results {
            r.axis_name = Some(axis.as_str().to_string());
            r.axis_value = Some(v);
        }
        out.results.extend(part.results);
        out.diagnostics.extend(part.diagnostics);
    }
    Ok(out)
}

pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<TrialResult>> {
    Ok(run_sweep_detailed(base, axis, values)?.results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            trials: 2,
            n_train: 60,
            n_cal_upstream: 40,
            n_cal_downstream: 40,
            n_cal_end2end: 40,
            n_test: 100,
            alphas: vec![0.5, 0.9],
            input_dim: 6,
            intermediate_dim: 3,
            n_trees: 10,
            workers: 1,
            ..Default::default()
        }
    }

    #[test]
    fn row_order_is_trial_method_alpha() {
        let cfg = ExperimentConfig {
            methods: vec![Method::SetLevel, Method::End2end],
            ..small()
        };
        let rows = run_experiment(&cfg).unwrap();
        let keys: Vec<(usize, Method, f64)> =
            rows.iter().map(|r| (r.trial, r.method, r.alpha_target)).collect();
        assert_eq!(
            keys,
            vec![
                (0, Method::End2end, 0.5),
                (0, Method::End2end, 0.9),
                (0, Method::SetLevel, 0.5),
                (0, Method::SetLevel, 0.9),
                (1, Method::End2end, 0.5),
                (1, Method::End2end, 0.9),
                (1, Method::SetLevel, 0.5),
                (1, Method::SetLevel, 0.9),
            ]
        );
    }

    #[test]
    fn workers_do_not_change_results() {
        let one = run_experiment(&small()).unwrap();
        let four = run_experiment(&ExperimentConfig { workers: 4, ..small() }).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn trials_are_independent_of_trial_count() {
        let two = run_experiment(&small()).unwrap();
        let three = run_experiment(&ExperimentConfig { trials: 3, ..small() }).unwrap();
        assert_eq!(two[..], three[..two.len()]);
    }

    #[test]
    fn sweep_tags_rows_and_prevalidates() {
        let cfg = ExperimentConfig {
            methods: vec![Method::End2end],
            trials: 1,
            ..small()
        };
        let rows = run_sweep(&cfg, SweepAxis::NoiseStd, &[0.5, 1.0]).unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[0].axis_name.as_deref(), Some("noise_std"));
        assert_eq!(rows[3].axis_value, Some(1.0));
        let err = run_sweep(&cfg, SweepAxis::NoiseStd, &[1.0, -1.0]).unwrap_err();
        assert!(err.is_config());
        assert!(run_sweep(&cfg, SweepAxis::DataSize, &[2.5]).unwrap_err().is_config());
    }

    #[test]
    fn diagnostics_cover_every_upstream_cluster() {
        let cfg = ExperimentConfig {
            methods: vec![Method::ClusterLevel],
            trials: 1,
            alphas: vec![0.8],
            k_clusters: KClusters::Fixed(4),
            diagnostics: Some("unused".into()),
            ..small()
        };
        let out = run_experiment_detailed(&cfg).unwrap();
        assert_eq!(out.diagnostics.len(), 4);
        assert_eq!(out.diagnostics.iter().map(|d| d.f_size).sum::<usize>(), 40);
    }
}
