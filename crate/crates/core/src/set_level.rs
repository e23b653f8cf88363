//! Set-level system calibration from module-level validation data.
//!
//! Two unpaired validation sets stand in for end-to-end data. The upstream
//! set gives propagated errors `U = |g_hat(f_hat(x)) - g_hat(y)|`, the
//! downstream set gives `W = |g_hat(y) - z|`. By the triangle inequality the
//! system error is at most `U + W` on any aligned sample, so the quantile-sum
//! bound over the two marginal score sets bounds the system error quantile.

use crate::conformal::PredictionInterval;
use crate::error::{Error, Result};
use crate::models::{Regressor, UpstreamModel};
use crate::quantile::{
    max_feasible_alpha, quantile_sum_bound_with, ExtendedReal, QuantileMode, ScoreSet,
};

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let dim = rows.first().ok_or(Error::EmptyScores)?.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    Ok(dim)
}

/// `(x, y)` pairs from the upstream module's ideal distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct UpstreamValidationSet {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

impl UpstreamValidationSet {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: y.len(),
            });
        }
        check_rows(&x)?;
        check_rows(&y)?;
        Ok(UpstreamValidationSet { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x[0].len()
    }

    pub fn intermediate_dim(&self) -> usize {
        self.y[0].len()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        UpstreamValidationSet {
            x: rows.iter().map(|&i| self.x[i].clone()).collect(),
            y: rows.iter().map(|&i| self.y[i].clone()).collect(),
        }
    }
}

/// `(y, z)` pairs from the downstream module's ideal distribution. No row
/// correspondence with an upstream set is assumed.
#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamValidationSet {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<f64>,
}

impl DownstreamValidationSet {
    pub fn new(y: Vec<Vec<f64>>, z: Vec<f64>) -> Result<Self> {
        if y.len() != z.len() {
            return Err(Error::LengthMismatch {
                left: y.len(),
                right: z.len(),
            });
        }
        check_rows(&y)?;
        Ok(DownstreamValidationSet { y, z })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.y[0].len()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        DownstreamValidationSet {
            y: rows.iter().map(|&i| self.y[i].clone()).collect(),
            z: rows.iter().map(|&i| self.z[i]).collect(),
        }
    }
}

pub fn upstream_propagated_errors(
    d: &UpstreamValidationSet,
    f_hat: &dyn UpstreamModel,
    g_hat: &dyn Regressor,
) -> Result<ScoreSet> {
    ScoreSet::new(upstream_error_rows(d, f_hat, g_hat)?)
}

/// `U` scores in row order.
pub fn upstream_error_rows(
    d: &UpstreamValidationSet,
    f_hat: &dyn UpstreamModel,
    g_hat: &dyn Regressor,
) -> Result<Vec<f64>> {
    if f_hat.input_dim() != d.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: f_hat.input_dim(),
            got: d.input_dim(),
        });
    }
    if f_hat.output_dim() != d.intermediate_dim() {
        return Err(Error::DimensionMismatch {
            expected: f_hat.output_dim(),
            got: d.intermediate_dim(),
        });
    }
    let predicted: Vec<Vec<f64>> = d.x.iter().map(|x| f_hat.predict(x)).collect();
    upstream_error_rows_from_predictions(&predicted, &d.y, g_hat)
}

/// `U` scores in row order from already-computed upstream predictions.
pub fn upstream_error_rows_from_predictions(
    y_hat: &[Vec<f64>],
    y: &[Vec<f64>],
    g_hat: &dyn Regressor,
) -> Result<Vec<f64>> {
    if y_hat.len() != y.len() {
        return Err(Error::LengthMismatch {
            left: y_hat.len(),
            right: y.len(),
        });
    }
    let dim = g_hat.input_dim();
    if let Some(bad) = y_hat.iter().chain(y).find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    Ok(y_hat
        .iter()
        .zip(y)
        .map(|(a, b)| (g_hat.predict(a) - g_hat.predict(b)).abs())
        .collect())
}

pub fn downstream_errors(d: &DownstreamValidationSet, g_hat: &dyn Regressor) -> Result<ScoreSet> {
    ScoreSet::new(downstream_error_rows(d, g_hat)?)
}

/// `W` scores in row order.
pub fn downstream_error_rows(d: &DownstreamValidationSet, g_hat: &dyn Regressor) -> Result<Vec<f64>> {
    if g_hat.input_dim() != d.dim() {
        return Err(Error::DimensionMismatch {
            expected: g_hat.input_dim(),
            got: d.dim(),
        });
    }
    Ok(d.y
        .iter()
        .zip(&d.z)
        .map(|(y, z)| (g_hat.predict(y) - z).abs())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetLevelCalibrator {
    pub q_hat: ExtendedReal,
    pub alpha: f64,
    pub beta_star: f64,
    pub mode: QuantileMode,
    /// When `q_hat` is infinite under strict mode: the largest level that
    /// would admit a finite bound with the same data, if any.
    pub feasible_alpha: Option<f64>,
}

pub fn fit_set_level(u: &ScoreSet, w: &ScoreSet, alpha: f64) -> Result<SetLevelCalibrator> {
    fit_set_level_with(u, w, alpha, QuantileMode::Strict)
}

pub fn fit_set_level_with(
    u: &ScoreSet,
    w: &ScoreSet,
    alpha: f64,
    mode: QuantileMode,
) -> Result<SetLevelCalibrator> {
    let bound = quantile_sum_bound_with(u, w, alpha, mode)?;
    let mut feasible_alpha = None;
    if !bound.value.is_finite() {
        feasible_alpha = max_feasible_alpha(u, w, alpha)?;
        match feasible_alpha {
            Some(a) => log::warn!(
                "set-level bound is infinite at level {alpha} with {} + {} samples; \
                 largest finite level is about {a:.6}",
                u.len(),
                w.len()
            ),
            None => log::warn!(
                "set-level bound is infinite at every level with {} + {} samples",
                u.len(),
                w.len()
            ),
        }
    }
    Ok(SetLevelCalibrator {
        q_hat: bound.value,
        alpha,
        beta_star: bound.beta,
        mode,
        feasible_alpha,
    })
}

impl SetLevelCalibrator {
    pub fn predict(&self, system_prediction: f64) -> PredictionInterval {
        PredictionInterval::new(system_prediction, self.q_hat)
    }
}

pub fn predict_set_level(c: &SetLevelCalibrator, system_prediction: f64) -> PredictionInterval {
    c.predict(system_prediction)
}
