//! Split conformal calibration and the interval/metric types shared by
//! every calibrator in the crate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quantile::{ExtendedReal, QuantileMode, ScoreSet};

/// Closed symmetric interval `[center - half_width, center + half_width]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionInterval {
    pub center: f64,
    pub half_width: ExtendedReal,
}

impl PredictionInterval {
    pub fn new(center: f64, half_width: ExtendedReal) -> Self {
        PredictionInterval { center, half_width }
    }

    pub fn lower(&self) -> f64 {
        self.center - self.half_width.to_f64()
    }

    pub fn upper(&self) -> f64 {
        self.center + self.half_width.to_f64()
    }

    /// Interval length `upper - lower`.
    pub fn width(&self) -> ExtendedReal {
        match self.half_width {
            ExtendedReal::Finite(h) => ExtendedReal::Finite(2.0 * h),
            ExtendedReal::Infinite => ExtendedReal::Infinite,
        }
    }

    pub fn contains(&self, z: f64) -> bool {
        match self.half_width {
            ExtendedReal::Finite(h) => (z - self.center).abs() <= h,
            ExtendedReal::Infinite => true,
        }
    }
}

/// Absolute residuals `|truth - prediction|`.
pub fn absolute_residuals(predictions: &[f64], truths: &[f64]) -> Result<ScoreSet> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: truths.len(),
        });
    }
    ScoreSet::new(
        predictions
            .iter()
            .zip(truths)
            .map(|(p, t)| (t - p).abs())
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCalibrator {
    pub half_width: ExtendedReal,
    pub alpha: f64,
    pub n_cal: usize,
}

pub fn fit_split(residuals: &ScoreSet, alpha: f64) -> Result<SplitCalibrator> {
    fit_split_with(residuals, alpha, QuantileMode::Strict)
}

pub fn fit_split_with(
    residuals: &ScoreSet,
    alpha: f64,
    mode: QuantileMode,
) -> Result<SplitCalibrator> {
    Ok(SplitCalibrator {
        half_width: residuals.quantile_with(alpha, mode)?,
        alpha,
        n_cal: residuals.len(),
    })
}

impl SplitCalibrator {
    pub fn predict_interval(&self, prediction: f64) -> PredictionInterval {
        PredictionInterval::new(prediction, self.half_width)
    }
}

pub fn predict_interval(c: &SplitCalibrator, prediction: f64) -> PredictionInterval {
    c.predict_interval(prediction)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageReport {
    pub target_alpha: f64,
    pub empirical_coverage: f64,
    /// Mean width over all intervals; `+inf` if any interval is unbounded.
    #[serde(serialize_with = "ser_extended")]
    pub avg_width: ExtendedReal,
    /// Mean width over the bounded intervals only; `None` if there are none.
    pub avg_width_finite: Option<f64>,
    pub finite_fraction: f64,
    pub n_test: usize,
}

fn ser_extended<S: serde::Serializer>(v: &ExtendedReal, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&v.to_string())
}

pub fn evaluate(
    intervals: &[PredictionInterval],
    truths: &[f64],
    alpha: f64,
) -> Result<CoverageReport> {
    if intervals.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: intervals.len(),
            right: truths.len(),
        });
    }
    if intervals.is_empty() {
        return Err(Error::InvalidArgument("no intervals to evaluate".into()));
    }
    let n = intervals.len();
    let covered = intervals
        .iter()
        .zip(truths)
        .filter(|(iv, &z)| iv.contains(z))
        .count();
    let finite: Vec<f64> = intervals.iter().filter_map(|iv| iv.width().finite()).collect();
    let avg_width_finite =
        (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64);
    let avg_width = match avg_width_finite {
        Some(w) if finite.len() == n => ExtendedReal::Finite(w),
        _ => ExtendedReal::Infinite,
    };
    Ok(CoverageReport {
        target_alpha: alpha,
        empirical_coverage: covered as f64 / n as f64,
        avg_width,
        avg_width_finite,
        finite_fraction: finite.len() as f64 / n as f64,
        n_test: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn fit_split_examples() {
        let r = ScoreSet::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(fit_split(&r, 0.5).unwrap().half_width, ExtendedReal::Finite(2.0));
        assert_eq!(fit_split(&r, 0.99).unwrap().half_width, ExtendedReal::Infinite);
        assert!(matches!(ScoreSet::new(vec![]), Err(Error::EmptyScores)));
    }

    #[test]
    fn normal_residual_quantile_near_population_value() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let res: Vec<f64> = (0..5000)
                .map(|_| rng.sample::<f64, _>(StandardNormal).abs())
                .collect();
            // |N(0,1)| at 0.9 is the two-sided normal point 1.645.
            let c = fit_split(&ScoreSet::new(res).unwrap(), 0.9).unwrap();
            let h = c.half_width.finite().unwrap();
            assert!((1.55..=1.75).contains(&h), "seed {seed}: {h}");
        }
    }

    #[test]
    fn intervals() {
        let c = SplitCalibrator {
            half_width: ExtendedReal::Finite(2.0),
            alpha: 0.9,
            n_cal: 3,
        };
        let iv = c.predict_interval(10.0);
        assert_eq!((iv.lower(), iv.upper()), (8.0, 12.0));
        assert!(iv.contains(12.0) && iv.contains(8.0) && !iv.contains(12.000001));

        let inf = PredictionInterval::new(0.0, ExtendedReal::Infinite);
        assert_eq!(inf.lower(), f64::NEG_INFINITY);
        assert!(inf.contains(1e300) && inf.contains(-1e300));
    }

    #[test]
    fn evaluate_examples() {
        let ivs = vec![PredictionInterval::new(0.0, ExtendedReal::Infinite); 4];
        let r = evaluate(&ivs, &[1.0, 2.0, 3.0, 4.0], 0.9).unwrap();
        assert_eq!(r.empirical_coverage, 1.0);
        assert_eq!(r.avg_width, ExtendedReal::Infinite);
        assert_eq!(r.avg_width_finite, None);
        assert_eq!(r.finite_fraction, 0.0);

        let t = [1.0, -2.0, 3.5];
        let ivs: Vec<_> = t
            .iter()
            .map(|&z| PredictionInterval::new(z, ExtendedReal::Finite(0.0)))
            .collect();
        let r = evaluate(&ivs, &t, 0.5).unwrap();
        assert_eq!(r.empirical_coverage, 1.0);
        assert_eq!(r.avg_width, ExtendedReal::Finite(0.0));

        assert!(matches!(
            evaluate(&ivs, &[1.0], 0.5),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn evaluate_mixed_widths() {
        let ivs = vec![
            PredictionInterval::new(0.0, ExtendedReal::Finite(1.0)),
            PredictionInterval::new(0.0, ExtendedReal::Finite(3.0)),
            PredictionInterval::new(0.0, ExtendedReal::Infinite),
            PredictionInterval::new(0.0, ExtendedReal::Finite(0.5)),
        ];
        let r = evaluate(&ivs, &[0.5, 5.0, 9.0, 0.6], 0.5).unwrap();
        assert_eq!(r.empirical_coverage, 0.5);
        assert_eq!(r.avg_width, ExtendedReal::Infinite);
        assert_eq!(r.avg_width_finite, Some((2.0 + 6.0 + 1.0) / 3.0));
        assert_eq!(r.finite_fraction, 0.75);
    }

    #[test]
    fn evaluate_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..200);
            let ivs: Vec<_> = (0..n)
                .map(|_| {
                    PredictionInterval::new(
                        rng.random_range(-3.0..3.0),
                        ExtendedReal::Finite(rng.random_range(0.0..2.0)),
                    )
                })
                .collect();
            let truths: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
            let mut hits = 0usize;
            for (iv, z) in ivs.iter().zip(&truths) {
                let h = iv.half_width.to_f64();
                if *z >= iv.center - h && *z <= iv.center + h {
                    hits += 1;
                }
            }
            let r = evaluate(&ivs, &truths, 0.9).unwrap();
            assert_eq!(r.empirical_coverage, hits as f64 / n as f64);
        }
    }
}
