//! Cluster-level system calibration.
//!
//! Both module validation sets are clustered with K-means on their
//! intermediate values. Each upstream cluster is matched to the downstream
//! cluster with the nearest centroid, and the quantile-sum bound is computed
//! per matched pair. A test input is routed by its upstream prediction to
//! the nearest upstream centroid and gets that pair's half-width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conformal::PredictionInterval;
use crate::error::{Error, Result};
use crate::models::{Regressor, UpstreamModel};
use crate::quantile::{quantile_sum_bound_with, ExtendedReal, QuantileMode, ScoreSet};
use crate::seed::mix;
use crate::set_level::{
    downstream_error_rows, fit_set_level_with, upstream_error_rows, DownstreamValidationSet,
    UpstreamValidationSet,
};

pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_MAX_ITER: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Row indices per cluster, in row order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut m = vec![Vec::new(); self.k()];
        for (i, &a) in self.assignments.iter().enumerate() {
            m[a].push(i);
        }
        m
    }
}

fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the target just above the final sum.
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], out: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (slot, p) in out.iter_mut().zip(points) {
        let (j, d) = nearest(p, centroids);
        *slot = j;
        inertia += d;
    }
    inertia
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken from a cluster that can spare it. Returns whether anything moved.
fn reseed_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignments: &mut [usize]) -> bool {
    let k = centroids.len();
    let mut moved = false;
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return moved;
        };
        let mut donor = None;
        let mut far = -1.0;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[a]);
            if d > far {
                far = d;
                donor = Some(i);
            }
        }
        let i = donor.expect("k <= n guarantees a cluster with two or more points");
        centroids[empty] = points[i].clone();
        assignments[i] = empty;
        moved = true;
    }
}

fn update_centroids(points: &[Vec<f64>], assignments: &[usize], centroids: &mut [Vec<f64>]) -> f64 {
    let k = centroids.len();
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut shift: f64 = 0.0;
    for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
        if n == 0 {
            continue;
        }
        let new: Vec<f64> = s.into_iter().map(|v| v / n as f64).collect();
        shift = shift.max(sq_dist(c, &new).sqrt());
        *c = new;
    }
    shift
}

fn validate_points(points: &[Vec<f64>], k: usize) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no points to cluster".into()));
    }
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            points.len()
        )));
    }
    let dim = points[0].len();
    for p in points {
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite point".into()));
        }
    }
    Ok(())
}

/// Lloyd's algorithm from k-means++ seeding. Also returns the inertia
/// after each assignment step.
pub fn kmeans_traced(points: &[Vec<f64>], k: usize, seed: u64) -> Result<(ClusterModel, Vec<f64>)> {
    validate_points(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let mut assignments = vec![0usize; points.len()];
    let mut trace = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        trace.push(assign(points, &centroids, &mut assignments));
        reseed_empty(points, &mut centroids, &mut assignments);
        let shift = update_centroids(points, &assignments, &mut centroids);
        if shift < KMEANS_TOL {
            break;
        }
    }
    let mut inertia = assign(points, &centroids, &mut assignments);
    if reseed_empty(points, &mut centroids, &mut assignments) {
        inertia = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
    }
    Ok((
        ClusterModel {
            centroids,
            assignments,
            inertia,
            seed,
        },
        trace,
    ))
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    kmeans_traced(points, k, seed).map(|(m, _)| m)
}

/// Maps each upstream centroid to its nearest downstream centroid.
pub fn match_clusters(cf: &[Vec<f64>], cg: &[Vec<f64>]) -> Result<Vec<usize>> {
    if cf.is_empty() || cg.is_empty() {
        return Err(Error::InvalidArgument("empty centroid list".into()));
    }
    let dim = cg[0].len();
    if let Some(bad) = cf.iter().chain(cg).find(|c| c.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    Ok(cf.iter().map(|c| nearest(c, cg).0).collect())
}

pub fn assign_cluster(y_hat: &[f64], cm: &ClusterModel) -> Result<usize> {
    if y_hat.len() != cm.dim() {
        return Err(Error::DimensionMismatch {
            expected: cm.dim(),
            got: y_hat.len(),
        });
    }
    Ok(nearest(y_hat, &cm.centroids).0)
}

/// Clusterings and per-cluster scores, independent of the target level.
#[derive(Debug, Clone)]
pub struct ClusterPartition {
    pub f_clusters: ClusterModel,
    pub g_clusters: ClusterModel,
    pub mapping: Vec<usize>,
    u_by_cluster: Vec<Vec<f64>>,
    w_by_cluster: Vec<Vec<f64>>,
    u_all: ScoreSet,
    w_all: ScoreSet,
}

fn scores_by_cluster(scores: &[f64], model: &ClusterModel) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); model.k()];
    for (&s, &a) in scores.iter().zip(&model.assignments) {
        out[a].push(s);
    }
    out
}

impl ClusterPartition {
    /// `u` and `w` are unsorted per-row scores aligned with `df` and `dg`.
    pub fn from_scores(
        df_y: &[Vec<f64>],
        u: &[f64],
        dg_y: &[Vec<f64>],
        w: &[f64],
        k_f: usize,
        k_g: usize,
        seed: u64,
    ) -> Result<Self> {
        if df_y.len() != u.len() || dg_y.len() != w.len() {
            return Err(Error::LengthMismatch {
                left: df_y.len() + dg_y.len(),
                right: u.len() + w.len(),
            });
        }
        let f_clusters = kmeans(df_y, k_f, mix(seed, 1))?;
        let g_clusters = kmeans(dg_y, k_g, mix(seed, 2))?;
        let mapping = match_clusters(&f_clusters.centroids, &g_clusters.centroids)?;
        Ok(ClusterPartition {
            u_by_cluster: scores_by_cluster(u, &f_clusters),
            w_by_cluster: scores_by_cluster(w, &g_clusters),
            u_all: ScoreSet::new(u.to_vec())?,
            w_all: ScoreSet::new(w.to_vec())?,
            f_clusters,
            g_clusters,
            mapping,
        })
    }

    pub fn new(
        df: &UpstreamValidationSet,
        dg: &DownstreamValidationSet,
        f_hat: &dyn UpstreamModel,
        g_hat: &dyn Regressor,
        k_f: usize,
        k_g: usize,
        seed: u64,
    ) -> Result<Self> {
        let u = upstream_error_rows(df, f_hat, g_hat)?;
        let w = downstream_error_rows(dg, g_hat)?;
        Self::from_scores(&df.y, &u, &dg.y, &w, k_f, k_g, seed)
    }

    /// Scores of upstream cluster `i`.
    pub fn u_scores(&self, i: usize) -> &[f64] {
        &self.u_by_cluster[i]
    }

    pub fn w_scores(&self, j: usize) -> &[f64] {
        &self.w_by_cluster[j]
    }

    pub fn calibrate(&self, alpha: f64, mode: QuantileMode) -> Result<ClusterCalibrator> {
        let fallback = fit_set_level_with(&self.u_all, &self.w_all, alpha, mode)?.q_hat;
        let mut per_pair_q = Vec::with_capacity(self.mapping.len());
        let mut fallback_used = Vec::with_capacity(self.mapping.len());
        let mut small = 0usize;
        for (i, &j) in self.mapping.iter().enumerate() {
            let (u, w) = (&self.u_by_cluster[i], &self.w_by_cluster[j]);
            if u.len() < 2 || w.len() < 2 {
                small += 1;
                per_pair_q.push(fallback);
                fallback_used.push(true);
                continue;
            }
            let q = quantile_sum_bound_with(
                &ScoreSet::new(u.clone())?,
                &ScoreSet::new(w.clone())?,
                alpha,
                mode,
            )?
            .value;
            if q.is_finite() || mode == QuantileMode::Clamped {
                per_pair_q.push(q);
                fallback_used.push(false);
            } else {
                per_pair_q.push(fallback);
                fallback_used.push(true);
            }
        }
        if small > 0 {
            log::warn!(
                "{small} of {} cluster pairs have fewer than 2 rows; using the set-level bound",
                self.mapping.len()
            );
        }
        Ok(ClusterCalibrator {
            f_clusters: self.f_clusters.clone(),
            g_clusters: self.g_clusters.clone(),
            mapping: self.mapping.clone(),
            per_pair_q,
            fallback_used,
            alpha,
            mode,
            fallback_q: fallback,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ClusterCalibrator {
    pub f_clusters: ClusterModel,
    pub g_clusters: ClusterModel,
    pub mapping: Vec<usize>,
    pub per_pair_q: Vec<ExtendedReal>,
    /// Which pairs took the set-level bound instead of their own.
    pub fallback_used: Vec<bool>,
    pub alpha: f64,
    pub mode: QuantileMode,
    pub fallback_q: ExtendedReal,
}

#[allow(clippy::too_many_arguments)]
pub fn fit_cluster_level(
    df: &UpstreamValidationSet,
    dg: &DownstreamValidationSet,
    f_hat: &dyn UpstreamModel,
    g_hat: &dyn Regressor,
    alpha: f64,
    k_f: usize,
    k_g: usize,
    seed: u64,
    mode: QuantileMode,
) -> Result<ClusterCalibrator> {
    ClusterPartition::new(df, dg, f_hat, g_hat, k_f, k_g, seed)?.calibrate(alpha, mode)
}

impl ClusterCalibrator {
    /// Interval for a test point given its upstream prediction and the
    /// system prediction `g_hat(y_hat)`.
    pub fn predict_from_intermediate(&self, y_hat: &[f64], system_prediction: f64) -> Result<PredictionInterval> {
        let i = assign_cluster(y_hat, &self.f_clusters)?;
        Ok(PredictionInterval::new(system_prediction, self.per_pair_q[i]))
    }

    pub fn predict(
        &self,
        x: &[f64],
        f_hat: &dyn UpstreamModel,
        g_hat: &dyn Regressor,
    ) -> Result<PredictionInterval> {
        let y_hat = f_hat.predict(x);
        self.predict_from_intermediate(&y_hat, g_hat.predict(&y_hat))
    }
}

pub fn predict_cluster_level(
    c: &ClusterCalibrator,
    x: &[f64],
    f_hat: &dyn UpstreamModel,
    g_hat: &dyn Regressor,
) -> Result<PredictionInterval> {
    c.predict(x, f_hat, g_hat)
}
