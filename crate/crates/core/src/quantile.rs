//! Empirical quantiles over nonconformity scores.
//!
//! The empirical quantile at level `p` over `n` scores is the order
//! statistic `S_(k)` with `k = ceil((n + 1) p)`, or `+inf` when `k > n`.
//! [`quantile_sum_bound`] combines two such quantiles into an upper bound
//! on the quantile of a sum of two variables whose samples are unpaired.

use std::cmp::Ordering;
use std::fmt;
use std::ops::Add;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack on the probability scale when converting a level into an order
/// statistic index, so that `p = k / (n + 1)` computed in floating point
/// maps to index `k` rather than `k + 1`.
pub(crate) const PROB_EPS: f64 = 1e-12;

/// A nonnegative real or `+inf`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum ExtendedReal {
    Finite(f64),
    Infinite,
}

impl ExtendedReal {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }

    /// The value as an `f64`, with `+inf` mapped to `f64::INFINITY`.
    pub fn to_f64(self) -> f64 {
        match self {
            ExtendedReal::Finite(v) => v,
            ExtendedReal::Infinite => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtendedReal::Finite(v) => Some(v),
            ExtendedReal::Infinite => None,
        }
    }

    pub fn from_f64(v: f64) -> Result<Self> {
        if v == f64::INFINITY {
            Ok(ExtendedReal::Infinite)
        } else if v.is_finite() && v >= 0.0 {
            Ok(ExtendedReal::Finite(v))
        } else {
            Err(Error::InvalidScore(v))
        }
    }
}

impl Add for ExtendedReal {
    type Output = ExtendedReal;

    fn add(self, rhs: ExtendedReal) -> ExtendedReal {
        match (self, rhs) {
            (ExtendedReal::Finite(a), ExtendedReal::Finite(b)) => ExtendedReal::Finite(a + b),
            _ => ExtendedReal::Infinite,
        }
    }
}

impl fmt::Display for ExtendedReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedReal::Finite(v) => write!(f, "{v}"),
            ExtendedReal::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for ExtendedReal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "+inf" | "Infinity" => Ok(ExtendedReal::Infinite),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| Error::Csv(format!("not a number: {other:?}")))?;
                ExtendedReal::from_f64(v)
            }
        }
    }
}

/// What to return when the order statistic index overflows the sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantileMode {
    /// `+inf` on overflow.
    #[default]
    Strict,
    /// The largest observed score on overflow.
    Clamped,
}

impl FromStr for QuantileMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(QuantileMode::Strict),
            "clamped" => Ok(QuantileMode::Clamped),
            other => Err(Error::Config(format!(
                "unknown quantile mode {other:?} (expected strict|clamped)"
            ))),
        }
    }
}

impl fmt::Display for QuantileMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuantileMode::Strict => "strict",
            QuantileMode::Clamped => "clamped",
        })
    }
}

pub(crate) fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

/// 1-based index `ceil((n + 1) p)` of the order statistic at level `p`.
pub(crate) fn order_index(n: usize, p: f64) -> usize {
    let k = ((n as f64 + 1.0) * (p - PROB_EPS)).ceil();
    k.max(1.0) as usize
}

/// Nonconformity scores sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(mut scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::EmptyScores);
        }
        if let Some(&bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::InvalidScore(bad));
        }
        scores.sort_by(f64::total_cmp);
        Ok(ScoreSet { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scores
    }

    pub fn max(&self) -> f64 {
        self.scores[self.scores.len() - 1]
    }

    /// Empirical quantile with the `+inf` overflow branch.
    pub fn quantile(&self, p: f64) -> Result<ExtendedReal> {
        self.quantile_with(p, QuantileMode::Strict)
    }

    pub fn quantile_with(&self, p: f64, mode: QuantileMode) -> Result<ExtendedReal> {
        check_probability(p)?;
        Ok(self.quantile_unchecked(p, mode))
    }

    fn quantile_unchecked(&self, p: f64, mode: QuantileMode) -> ExtendedReal {
        let n = self.scores.len();
        let k = order_index(n, p);
        if k <= n {
            ExtendedReal::Finite(self.scores[k - 1])
        } else {
            match mode {
                QuantileMode::Strict => ExtendedReal::Infinite,
                QuantileMode::Clamped => ExtendedReal::Finite(self.max()),
            }
        }
    }
}

pub fn empirical_quantile(s: &ScoreSet, p: f64) -> Result<ExtendedReal> {
    s.quantile(p)
}

/// Scores with positive importance weights, plus the weight of a test
/// point whose score is taken to be `+inf`.
#[derive(Debug, Clone)]
pub struct WeightedScoreSet {
    /// (score, weight) sorted by score.
    entries: Vec<(f64, f64)>,
    /// Running weight sums aligned with `entries`.
    cumulative: Vec<f64>,
    test_weight: f64,
}

impl WeightedScoreSet {
    pub fn new(scores: Vec<f64>, weights: Vec<f64>, test_weight: f64) -> Result<Self> {
        if scores.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: scores.len(),
                right: weights.len(),
            });
        }
        if scores.is_empty() {
            return Err(Error::EmptyScores);
        }
        if let Some(&bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::InvalidScore(bad));
        }
        let positive = |w: f64| w.is_finite() && w > 0.0;
        if !weights.iter().all(|&w| positive(w)) || !positive(test_weight) {
            return Err(Error::InvalidWeights(
                "weights must be finite and strictly positive".into(),
            ));
        }
        let mut entries: Vec<(f64, f64)> = scores.into_iter().zip(weights).collect();
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        let cumulative = entries
            .iter()
            .scan(0.0, |acc, &(_, w)| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        Ok(WeightedScoreSet {
            entries,
            cumulative,
            test_weight,
        })
    }

    pub fn total_weight(&self) -> f64 {
        self.cumulative[self.cumulative.len() - 1] + self.test_weight
    }

    /// Normalized weights of the calibration scores followed by the test
    /// point, in score order.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let total = self.total_weight();
        self.entries
            .iter()
            .map(|&(_, w)| w / total)
            .chain(std::iter::once(self.test_weight / total))
            .collect()
    }

    pub fn quantile(&self, p: f64) -> Result<ExtendedReal> {
        self.quantile_with_test_weight(p, self.test_weight)
    }

    /// Quantile with the test-point weight replaced by `test_weight`,
    /// reusing the sorted calibration scores.
    pub fn quantile_with_test_weight(&self, p: f64, test_weight: f64) -> Result<ExtendedReal> {
        check_probability(p)?;
        if !(test_weight.is_finite() && test_weight > 0.0) {
            return Err(Error::InvalidWeights(format!(
                "test weight must be finite and positive, got {test_weight}"
            )));
        }
        let total = self.cumulative[self.cumulative.len() - 1] + test_weight;
        let need = (p - PROB_EPS) * total;
        let idx = self.cumulative.partition_point(|&c| c < need);
        Ok(match self.entries.get(idx) {
            Some(&(s, _)) => ExtendedReal::Finite(s),
            None => ExtendedReal::Infinite,
        })
    }
}

pub fn weighted_quantile(ws: &WeightedScoreSet, p: f64) -> Result<ExtendedReal> {
    ws.quantile(p)
}

/// Value and minimizing level of the quantile-sum bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SumBound {
    pub value: ExtendedReal,
    /// The smallest minimizing split level, in `[alpha, 1)`.
    pub beta: f64,
}

/// Candidate split levels: every point in `[alpha, 1)` where either term
/// changes value, `alpha` itself, and the midpoint of every gap between
/// consecutive candidates (including the gap up to 1). Both terms are
/// step functions of `beta`, so the minimum over this set is the minimum
/// over the whole interval.
pub(crate) fn beta_candidates(n_u: usize, n_w: usize, alpha: f64) -> Vec<f64> {
    let mut points = vec![alpha];
    let nu1 = n_u as f64 + 1.0;
    let nw1 = n_w as f64 + 1.0;
    points.extend(
        (1..=n_u)
            .map(|k| k as f64 / nu1)
            .filter(|&b| b >= alpha && b < 1.0),
    );
    points.extend(
        (1..=n_w + 1)
            .map(|j| 1.0 + alpha - j as f64 / nw1)
            .filter(|&b| b >= alpha && b < 1.0),
    );
    points.sort_by(f64::total_cmp);
    points.dedup();

    let mut out = Vec::with_capacity(points.len() * 2 + 1);
    for (i, &b) in points.iter().enumerate() {
        out.push(b);
        let next = points.get(i + 1).copied().unwrap_or(1.0);
        let mid = 0.5 * (b + next);
        if mid > b && mid < next {
            out.push(mid);
        }
    }
    out
}

/// `min over beta in [alpha, 1) of Q_beta(u) + Q_{1 - beta + alpha}(w)`.
pub fn quantile_sum_bound_with(
    u: &ScoreSet,
    w: &ScoreSet,
    alpha: f64,
    mode: QuantileMode,
) -> Result<SumBound> {
    check_probability(alpha)?;
    let mut best = SumBound {
        value: ExtendedReal::Infinite,
        beta: alpha,
    };
    let mut found = false;
    for beta in beta_candidates(u.len(), w.len(), alpha) {
        let second = 1.0 - beta + alpha;
        if second <= 0.0 || second >= 1.0 {
            continue;
        }
        let value = u.quantile_unchecked(beta, mode) + w.quantile_unchecked(second, mode);
        let better = !found || value.partial_cmp(&best.value) == Some(Ordering::Less);
        if better {
            best = SumBound { value, beta };
            found = true;
        }
    }
    Ok(best)
}

pub fn quantile_sum_bound(u: &ScoreSet, w: &ScoreSet, alpha: f64) -> Result<ExtendedReal> {
    quantile_sum_bound_with(u, w, alpha, QuantileMode::Strict).map(|b| b.value)
}

/// Largest level in `(0, alpha)` at which the strict bound is finite,
/// found by bisection. `None` when no level admits a finite bound.
pub fn max_feasible_alpha(u: &ScoreSet, w: &ScoreSet, alpha: f64) -> Result<Option<f64>> {
    check_probability(alpha)?;
    let finite = |a: f64| -> Result<bool> {
        Ok(quantile_sum_bound_with(u, w, a, QuantileMode::Strict)?
            .value
            .is_finite())
    };
    if finite(alpha)? {
        return Ok(Some(alpha));
    }
    let mut lo = 1e-9;
    if !finite(lo)? {
        return Ok(None);
    }
    let mut hi = alpha;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if finite(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}
