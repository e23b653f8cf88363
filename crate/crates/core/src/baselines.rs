//! Downstream-only calibration baselines.
//!
//! Both calibrate the downstream module on its own validation data and are
//! then applied to system predictions. Weighted conformal prediction
//! reweights downstream residuals by an estimated density ratio between
//! upstream predictions and clean intermediates; adaptive conformal
//! inference steers its miscoverage level online over a module-level
//! stream and is frozen before system-level testing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conformal::PredictionInterval;
use crate::error::{Error, Result};
use crate::quantile::{ExtendedReal, ScoreSet, WeightedScoreSet};

pub const WEIGHT_MIN: f64 = 1e-3;
pub const WEIGHT_MAX: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticParams {
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for LogisticParams {
    fn default() -> Self {
        LogisticParams {
            l2: 1e-3,
            learning_rate: 1.0,
            iterations: 500,
        }
    }
}

/// Estimated `dP_target / dP_source` from a logistic source-vs-target
/// discriminator.
#[derive(Debug, Clone)]
pub struct DensityRatioModel {
    mean: Vec<f64>,
    scale: Vec<f64>,
    coef: Vec<f64>,
    intercept: f64,
    pub n_source: usize,
    pub n_target: usize,
}

impl DensityRatioModel {
    fn logit(&self, y: &[f64]) -> f64 {
        self.intercept
            + y.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.coef)
                .map(|(((v, m), s), c)| c * (v - m) / s)
                .sum::<f64>()
    }

    /// Clipped odds ratio `p / (1 - p) * n_source / n_target`.
    pub fn weight(&self, y: &[f64]) -> f64 {
        // odds = exp(logit); keep it in log space until clipping.
        let log_w = self.logit(y) + (self.n_source as f64 / self.n_target as f64).ln();
        log_w.exp().clamp(WEIGHT_MIN, WEIGHT_MAX)
    }

    pub fn dim(&self) -> usize {
        self.coef.len()
    }
}

fn check_same_dim(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    let dim = a
        .first()
        .or(b.first())
        .ok_or_else(|| Error::InvalidArgument("empty sample".into()))?
        .len();
    if let Some(bad) = a.iter().chain(b).find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    Ok(dim)
}

pub fn fit_density_ratio(
    source_y: &[Vec<f64>],
    target_y: &[Vec<f64>],
    seed: u64,
) -> Result<DensityRatioModel> {
    fit_density_ratio_with(source_y, target_y, seed, &LogisticParams::default())
}

/// Full-batch gradient descent on the L2-regularized log-loss over
/// standardized features, starting from a small seeded random point.
pub fn fit_density_ratio_with(
    source_y: &[Vec<f64>],
    target_y: &[Vec<f64>],
    seed: u64,
    params: &LogisticParams,
) -> Result<DensityRatioModel> {
    if source_y.is_empty() || target_y.is_empty() {
        return Err(Error::InvalidArgument(
            "density ratio needs nonempty source and target samples".into(),
        ));
    }
    let dim = check_same_dim(source_y, target_y)?;
    let rows: Vec<(&[f64], f64)> = source_y
        .iter()
        .map(|r| (r.as_slice(), 0.0))
        .chain(target_y.iter().map(|r| (r.as_slice(), 1.0)))
        .collect();
    let n = rows.len() as f64;

    let mut mean = vec![0.0; dim];
    for (r, _) in &rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for (r, _) in &rows {
        for ((s, v), m) in scale.iter_mut().zip(*r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    let features: Vec<Vec<f64>> = rows
        .iter()
        .map(|(r, _)| {
            r.iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coef: Vec<f64> = (0..dim)
        .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut intercept = 0.0;
    let mut grad = vec![0.0; dim];
    for _ in 0..params.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (f, (_, label)) in features.iter().zip(&rows) {
            let z = intercept + f.iter().zip(&coef).map(|(a, b)| a * b).sum::<f64>();
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - label;
            grad_b += err;
            for (g, v) in grad.iter_mut().zip(f) {
                *g += err * v;
            }
        }
        intercept -= params.learning_rate * grad_b / n;
        for (c, g) in coef.iter_mut().zip(&grad) {
            *c -= params.learning_rate * (g / n + params.l2 * *c);
        }
    }
    if !intercept.is_finite() || coef.iter().any(|c| !c.is_finite()) {
        return Err(Error::Numerical("logistic discriminator diverged".into()));
    }
    Ok(DensityRatioModel {
        mean,
        scale,
        coef,
        intercept,
        n_source: source_y.len(),
        n_target: target_y.len(),
    })
}

/// Downstream residuals with their density-ratio weights, ready to answer
/// weighted quantile queries for any test point.
#[derive(Debug, Clone)]
pub struct WcpCalibrator {
    scores: WeightedScoreSet,
    ratio: DensityRatioModel,
}

impl WcpCalibrator {
    pub fn new(residuals: &[f64], features: &[Vec<f64>], ratio: DensityRatioModel) -> Result<Self> {
        if residuals.len() != features.len() {
            return Err(Error::LengthMismatch {
                left: residuals.len(),
                right: features.len(),
            });
        }
        if let Some(bad) = features.iter().find(|f| f.len() != ratio.dim()) {
            return Err(Error::DimensionMismatch {
                expected: ratio.dim(),
                got: bad.len(),
            });
        }
        let weights = features.iter().map(|f| ratio.weight(f)).collect();
        // The test weight is replaced per query.
        let scores = WeightedScoreSet::new(residuals.to_vec(), weights, 1.0)?;
        Ok(WcpCalibrator { scores, ratio })
    }

    pub fn half_width(&self, y_test: &[f64], alpha: f64) -> Result<ExtendedReal> {
        if y_test.len() != self.ratio.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ratio.dim(),
                got: y_test.len(),
            });
        }
        self.scores
            .quantile_with_test_weight(alpha, self.ratio.weight(y_test))
    }

    pub fn interval(&self, y_test: &[f64], g_prediction: f64, alpha: f64) -> Result<PredictionInterval> {
        Ok(PredictionInterval::new(
            g_prediction,
            self.half_width(y_test, alpha)?,
        ))
    }
}

pub fn wcp_interval(
    cal_residuals: &[f64],
    cal_features: &[Vec<f64>],
    ratio: &DensityRatioModel,
    y_test: &[f64],
    g_prediction: f64,
    alpha: f64,
) -> Result<PredictionInterval> {
    WcpCalibrator::new(cal_residuals, cal_features, ratio.clone())?.interval(y_test, g_prediction, alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AciState {
    /// Current miscoverage level, kept in `[0, 1]`.
    pub alpha_t: f64,
    pub gamma: f64,
    pub target_miscoverage: f64,
    /// Miss indicators, one per processed step.
    pub history: Vec<bool>,
}

impl AciState {
    pub fn new(alpha_target: f64, gamma: f64, initial_alpha: f64) -> Result<Self> {
        crate::quantile::check_probability(alpha_target)?;
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
        }
        if !(0.0..=1.0).contains(&initial_alpha) {
            return Err(Error::InvalidArgument(format!(
                "initial miscoverage {initial_alpha} outside [0, 1]"
            )));
        }
        Ok(AciState {
            alpha_t: initial_alpha,
            gamma,
            target_miscoverage: 1.0 - alpha_target,
            history: Vec::new(),
        })
    }

    /// Half-width at the current level: `Q_{1 - alpha_t}` of the calibration
    /// residuals, unbounded at `alpha_t = 0` and zero at `alpha_t = 1`.
    pub fn half_width(&self, cal: &ScoreSet) -> ExtendedReal {
        let p = 1.0 - self.alpha_t;
        if p >= 1.0 {
            ExtendedReal::Infinite
        } else if p <= 0.0 {
            ExtendedReal::Finite(0.0)
        } else {
            cal.quantile(p).expect("level checked to lie in (0, 1)")
        }
    }

    pub fn update(&mut self, miss: bool) {
        let err = if miss { 1.0 } else { 0.0 };
        self.alpha_t = (self.alpha_t + self.gamma * (self.target_miscoverage - err)).clamp(0.0, 1.0);
        self.history.push(miss);
    }

    pub fn miscoverage_rate(&self) -> f64 {
        if self.history.is_empty() {
            return 0.0;
        }
        self.history.iter().filter(|&&m| m).count() as f64 / self.history.len() as f64
    }
}

/// Runs the online update over `(prediction, truth)` pairs and returns the
/// interval issued at each step plus the terminal state.
pub fn aci_run(
    stream: &[(f64, f64)],
    cal_residuals: &ScoreSet,
    alpha_target: f64,
    gamma: f64,
    initial_alpha: f64,
) -> Result<(Vec<PredictionInterval>, AciState)> {
    if stream.is_empty() {
        return Err(Error::InvalidArgument("empty adaptation stream".into()));
    }
    let mut state = AciState::new(alpha_target, gamma, initial_alpha)?;
    let mut intervals = Vec::with_capacity(stream.len());
    for &(prediction, truth) in stream {
        let iv = PredictionInterval::new(prediction, state.half_width(cal_residuals));
        state.update(!iv.contains(truth));
        intervals.push(iv);
    }
    Ok((intervals, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| shift + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn same_distribution_weights_near_one() {
        let src = gaussian(1000, 8, 0.0, 1);
        let tgt = gaussian(1000, 8, 0.0, 2);
        let m = fit_density_ratio(&src, &tgt, 0).unwrap();
        let probe = gaussian(500, 8, 0.0, 3);
        let mean = probe.iter().map(|y| m.weight(y)).sum::<f64>() / 500.0;
        assert!((0.8..=1.25).contains(&mean), "{mean}");
    }

    #[test]
    fn far_shift_saturates() {
        let src = gaussian(300, 2, 0.0, 1);
        let tgt = gaussian(300, 2, 40.0, 2);
        let m = fit_density_ratio(&src, &tgt, 0).unwrap();
        assert!(m.weight(&[0.0, 0.0]) < 1e-2);
        assert!(m.weight(&[40.0, 40.0]) > 1e2);
        assert_eq!(m.weight(&[-80.0, -80.0]), WEIGHT_MIN);
        assert_eq!(m.weight(&[120.0, 120.0]), WEIGHT_MAX);
    }

    #[test]
    fn tracks_analytic_gaussian_ratio() {
        // N(1,1) / N(0,1) = exp(y - 1/2).
        let src = gaussian(5000, 1, 0.0, 4);
        let tgt = gaussian(5000, 1, 1.0, 5);
        let m = fit_density_ratio(&src, &tgt, 0).unwrap();
        for i in 0..=30 {
            let y = -1.0 + 0.1 * i as f64;
            let truth = (y - 0.5).exp();
            let r = m.weight(&[y]) / truth;
            assert!((0.5..=2.0).contains(&r), "y={y} ratio={r}");
        }
    }

    #[test]
    fn deterministic_and_dimension_checked() {
        let src = gaussian(50, 3, 0.0, 1);
        let tgt = gaussian(60, 3, 0.5, 2);
        let a = fit_density_ratio(&src, &tgt, 9).unwrap();
        let b = fit_density_ratio(&src, &tgt, 9).unwrap();
        assert_eq!(a.weight(&[0.1, 0.2, 0.3]), b.weight(&[0.1, 0.2, 0.3]));
        assert!(fit_density_ratio(&src, &gaussian(5, 2, 0.0, 1), 0).is_err());
        assert!(fit_density_ratio(&src, &[], 0).is_err());
    }

    fn unit_ratio(dim: usize) -> DensityRatioModel {
        DensityRatioModel {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            coef: vec![0.0; dim],
            intercept: 0.0,
            n_source: 10,
            n_target: 10,
        }
    }

    #[test]
    fn unit_weights_reduce_to_split_conformal() {
        let res: Vec<f64> = (1..=19).map(f64::from).collect();
        let feats = vec![vec![0.0]; 19];
        let ratio = unit_ratio(1);
        let cal = ScoreSet::new(res.clone()).unwrap();
        for k in 1..20 {
            let a = k as f64 / 20.0;
            let iv = wcp_interval(&res, &feats, &ratio, &[3.0], 1.0, a).unwrap();
            assert_eq!(iv.half_width, cal.quantile(a).unwrap());
            assert_eq!(iv.center, 1.0);
        }
    }

    #[test]
    fn dominant_calibration_point() {
        // One calibration point carries almost all mass: its residual is
        // returned as soon as the cumulative weight passes the level.
        let ratio = DensityRatioModel {
            mean: vec![0.0],
            scale: vec![1.0],
            coef: vec![20.0],
            intercept: 0.0,
            n_source: 1,
            n_target: 1,
        };
        let res = [0.5, 2.0, 3.0];
        let feats = vec![vec![5.0], vec![-5.0], vec![-5.0]];
        let iv = wcp_interval(&res, &feats, &ratio, &[-5.0], 0.0, 0.9).unwrap();
        assert_eq!(iv.half_width, ExtendedReal::Finite(0.5));
    }

    #[test]
    fn aci_gamma_zero_is_split_cp() {
        let cal = ScoreSet::new((1..=99).map(|i| i as f64 / 10.0).collect()).unwrap();
        let stream: Vec<(f64, f64)> = (0..50).map(|i| (0.0, (i % 13) as f64)).collect();
        let (ivs, st) = aci_run(&stream, &cal, 0.9, 0.0, 0.1).unwrap();
        assert_eq!(st.alpha_t, 0.1);
        let fixed = cal.quantile(0.9).unwrap();
        assert!(ivs.iter().all(|iv| iv.half_width == fixed));
    }

    #[test]
    fn aci_always_covered_drifts_up_until_clamp() {
        let cal = ScoreSet::new(vec![1.0, 2.0, 3.0]).unwrap();
        let stream = vec![(0.0, 0.0); 40];
        let gamma = 0.05;
        let (_, st) = aci_run(&stream, &cal, 0.9, gamma, 0.1).unwrap();
        // +0.005 per step from 0.1 reaches 0.3 after 40 steps.
        assert!((st.alpha_t - (0.1 + 40.0 * gamma * 0.1)).abs() < 1e-12);
        let stream = vec![(0.0, 0.0); 10_000];
        let (_, st) = aci_run(&stream, &cal, 0.9, gamma, 0.1).unwrap();
        assert_eq!(st.alpha_t, 1.0);
    }

    #[test]
    fn aci_errors() {
        let cal = ScoreSet::new(vec![1.0]).unwrap();
        assert!(aci_run(&[], &cal, 0.9, 0.01, 0.1).is_err());
        assert!(aci_run(&[(0.0, 0.0)], &cal, 0.9, -1.0, 0.1).is_err());
        assert!(ScoreSet::new(vec![]).is_err());
    }

    #[test]
    fn aci_long_run_miscoverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cal = ScoreSet::new(
            (0..500)
                .map(|_| rng.sample::<f64, _>(StandardNormal).abs())
                .collect(),
        )
        .unwrap();
        let stream: Vec<(f64, f64)> = (0..6000)
            .map(|_| (0.0, rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let (_, st) = aci_run(&stream, &cal, 0.9, 0.005, 0.1).unwrap();
        assert!((st.miscoverage_rate() - 0.1).abs() <= 0.02, "{}", st.miscoverage_rate());
    }
}
