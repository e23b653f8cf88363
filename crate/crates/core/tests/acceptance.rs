//! Acceptance criteria for the calibration library and experiment harness.
//! Prints one line per criterion and exits nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cascade_cal::cluster_level::{kmeans, kmeans_traced, ClusterPartition};
use cascade_cal::harness::{
    run_experiment, run_sweep, summarize, write_results_csv, ExperimentConfig, KClusters, Method,
    SummaryRow, SweepAxis,
};
use cascade_cal::models::{fit_regressor, gen_system, NoiseSpec, Regressor};
use cascade_cal::quantile::{quantile_sum_bound_with, ExtendedReal, QuantileMode, ScoreSet};
use cascade_cal::set_level::{fit_set_level_with, upstream_error_rows_from_predictions};

const LEVELS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn row(s: &[SummaryRow], m: Method, alpha: f64) -> &SummaryRow {
    s.iter()
        .find(|r| r.method == m && r.alpha_target == alpha)
        .expect("summary row present")
}

fn width(r: &SummaryRow) -> f64 {
    r.width_mean.unwrap_or(f64::INFINITY)
}

// Sizes n with n + 1 dividing 1000 put every order-statistic breakpoint on
// the 1e-4 search grid.
const GRID_SIZES: [usize; 11] = [9, 19, 24, 39, 49, 99, 124, 199, 249, 499, 999];

fn criterion_1() -> Outcome {
    let n = 100;
    let reps = 5000;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut parts = Vec::new();
    let mut pass = true;
    for alpha in [0.5, 0.8, 0.9] {
        let mut hits = 0usize;
        for _ in 0..reps {
            let s = ScoreSet::new((0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
            let q = s.quantile(alpha).unwrap();
            if ExtendedReal::Finite(rng.random::<f64>()) <= q {
                hits += 1;
            }
        }
        let cov = hits as f64 / reps as f64;
        let slack = 3.0 * (alpha * (1.0 - alpha) / reps as f64).sqrt();
        let ok = cov >= alpha - slack && cov <= alpha + 1.0 / (n as f64 + 1.0) + slack;
        pass &= ok;
        parts.push(format!("{alpha}:{cov:.4}"));
    }
    outcome(pass, format!("coverage {}", parts.join(" ")))
}

fn criteria_2_to_5() -> [Outcome; 4] {
    let cfg = ExperimentConfig {
        seed: 2024,
        ..Default::default()
    };
    assert_eq!(cfg.trials, 50);
    assert_eq!(cfg.k_upstream(), 50);
    let s = summarize(&run_experiment(&cfg).expect("experiment runs"));

    let mut c2 = true;
    let mut c3 = true;
    let mut c4 = true;
    let mut c5 = true;
    let (mut d2, mut d4, mut d5) = (Vec::new(), Vec::new(), Vec::new());
    for a in LEVELS {
        let e2e = row(&s, Method::End2end, a);
        c2 &= (e2e.coverage_mean - a).abs() <= 0.02;
        d2.push(format!("{:.2}", 100.0 * e2e.coverage_mean));

        let set = row(&s, Method::SetLevel, a);
        c3 &= set.coverage_mean >= a;

        let cl = row(&s, Method::ClusterLevel, a);
        c4 &= cl.coverage_mean >= a - 0.01
            && cl.coverage_mean <= set.coverage_mean
            && width(cl) < width(set);
        d4.push(format!(
            "{:.2}%/{:.3}<{:.3}",
            100.0 * cl.coverage_mean,
            width(cl),
            width(set)
        ));

        let wcp = row(&s, Method::Wcp, a);
        let aci = row(&s, Method::Aci, a);
        c5 &= wcp.coverage_mean <= a - 0.05 && aci.coverage_mean <= a - 0.05;
        d5.push(format!(
            "{:.2}/{:.2}",
            100.0 * wcp.coverage_mean,
            100.0 * aci.coverage_mean
        ));
    }
    let set90 = row(&s, Method::SetLevel, 0.9);
    c3 &= set90.coverage_mean >= 0.95 && (1.4..=2.8).contains(&width(set90));
    let d3 = format!(
        "coverage {} at 90%: {:.2}% width {:.3}",
        LEVELS
            .iter()
            .map(|&a| format!("{:.2}", 100.0 * row(&s, Method::SetLevel, a).coverage_mean))
            .collect::<Vec<_>>()
            .join(" "),
        100.0 * set90.coverage_mean,
        width(set90)
    );
    [
        outcome(c2, format!("end-to-end coverage {}", d2.join(" "))),
        outcome(c3, d3),
        outcome(c4, format!("cluster coverage/width vs set width {}", d4.join(" "))),
        outcome(c5, format!("wcp/aci coverage {}", d5.join(" "))),
    ]
}

fn draw_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let scale = rng.random_range(0.2..3.0);
    (0..n)
        .map(|_| (scale * rng.sample::<f64, _>(StandardNormal)).abs())
        .collect()
}

fn fine_grid_minimum(u: &ScoreSet, w: &ScoreSet, alpha: f64) -> ExtendedReal {
    // beta = alpha puts the second level at 1, where the strict quantile is unbounded.
    let mut best = ExtendedReal::Infinite;
    let mut k = 1u32;
    loop {
        let beta = alpha + f64::from(k) * 1e-4;
        if beta >= 1.0 - 1e-12 {
            break;
        }
        let v = u.quantile(beta).unwrap() + w.quantile(1.0 - beta + alpha).unwrap();
        if v < best {
            best = v;
        }
        k += 1;
    }
    best
}

fn criterion_6() -> Outcome {
    let alphas: Vec<f64> = (1..=9).map(|i| f64::from(i) / 10.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut finite, mut dominated) = (0usize, 0usize);
    for _ in 0..1000 {
        let n = GRID_SIZES[rng.random_range(0..GRID_SIZES.len())];
        // Aligned rows: system error never exceeds the sum of its parts.
        let rho: f64 = rng.random_range(-1.0..1.0);
        let (mut u, mut w, mut e) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rho * a + rng.sample::<f64, _>(StandardNormal);
            u.push(a.abs());
            w.push(b.abs());
            e.push((a + b).abs());
        }
        let (u, w, e) = (
            ScoreSet::new(u).unwrap(),
            ScoreSet::new(w).unwrap(),
            ScoreSet::new(e).unwrap(),
        );
        for &alpha in &alphas {
            let bound = quantile_sum_bound_with(&u, &w, alpha, QuantileMode::Strict)
                .unwrap()
                .value;
            if bound.is_finite() {
                finite += 1;
                if bound >= e.quantile(alpha).unwrap() {
                    dominated += 1;
                }
            }
        }
    }
    let share = dominated as f64 / finite as f64;

    let mut exact = 0usize;
    let cases = 100;
    for _ in 0..cases {
        let nu = GRID_SIZES[rng.random_range(0..GRID_SIZES.len())];
        let nw = GRID_SIZES[rng.random_range(0..GRID_SIZES.len())];
        let u = ScoreSet::new(draw_scores(&mut rng, nu)).unwrap();
        let w = ScoreSet::new(draw_scores(&mut rng, nw)).unwrap();
        let alpha = alphas[rng.random_range(0..alphas.len())];
        let got = quantile_sum_bound_with(&u, &w, alpha, QuantileMode::Strict)
            .unwrap()
            .value;
        if got == fine_grid_minimum(&u, &w, alpha) {
            exact += 1;
        }
    }
    outcome(
        share >= 0.99 && exact == cases,
        format!(
            "dominance {dominated}/{finite} ({:.2}%), fine-grid matches {exact}/{cases}",
            100.0 * share
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let dim = 4;
    let mut points = Vec::new();
    for blob in 0..2 {
        let offset = 20.0 * f64::from(blob);
        for _ in 0..200 {
            points.push(
                (0..dim)
                    .map(|_| offset + rng.sample::<f64, _>(StandardNormal))
                    .collect::<Vec<f64>>(),
            );
        }
    }
    let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
        (0..rows[0].len())
            .map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / rows.len() as f64)
            .collect()
    };
    let truth = [mean(&points[..200]), mean(&points[200..])];
    let m = kmeans(&points, 2, 1).unwrap();
    let mut worst = 0.0f64;
    for t in &truth {
        let c = m
            .centroids
            .iter()
            .min_by(|a, b| dist(a, t).total_cmp(&dist(b, t)))
            .unwrap();
        let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        worst = worst.max(dist(c, t) / norm);
    }
    let blobs_ok = worst <= 1e-6;

    let mut monotone = 0;
    for i in 0..100u64 {
        let n = rng.random_range(20..200);
        let k = rng.random_range(1..=10);
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let (_, trace) = kmeans_traced(&pts, k, i).unwrap();
        if trace.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12)) {
            monotone += 1;
        }
    }

    let pts: Vec<Vec<f64>> = (0..30)
        .map(|i| vec![f64::from(i), f64::from(i * i % 7)])
        .collect();
    let one = kmeans(&pts, 1, 3).unwrap();
    let one_ok = one.centroids[0] == mean(&pts);
    let all = kmeans(&pts, 30, 3).unwrap();
    let all_ok = all.inertia == 0.0;

    outcome(
        blobs_ok && monotone == 100 && one_ok && all_ok,
        format!(
            "blob rel err {worst:.2e}, monotone {monotone}/100, k=1 mean {one_ok}, k=n zero inertia {all_ok}"
        ),
    )
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn criterion_8() -> Outcome {
    let mut identical = 0;
    let systems = 20;
    for s in 0..systems {
        let sys = gen_system(800 + s, 16, 8, NoiseSpec::default(), false).unwrap();
        let g = fit_regressor(&sys.gen_dataset(200, 1).downstream().unwrap(), 2).unwrap();
        let df = sys.gen_dataset(120, 3);
        let dg = sys.gen_dataset(130, 4);
        let test = sys.gen_dataset(200, 5);
        let u = upstream_error_rows_from_predictions(&df.y_hat, &df.y, &g).unwrap();
        let w: Vec<f64> = dg.y.iter().zip(&dg.z).map(|(y, z)| (g.predict(y) - z).abs()).collect();
        let part = ClusterPartition::from_scores(&df.y, &u, &dg.y, &w, 1, 1, 9).unwrap();
        let (us, ws) = (ScoreSet::new(u).unwrap(), ScoreSet::new(w).unwrap());
        let mut same = true;
        for mode in [QuantileMode::Strict, QuantileMode::Clamped] {
            for alpha in LEVELS {
                let set = fit_set_level_with(&us, &ws, alpha, mode).unwrap();
                let cl = part.calibrate(alpha, mode).unwrap();
                for y in &test.y_hat {
                    let c = g.predict(y);
                    let a = set.predict(c);
                    let b = cl.predict_from_intermediate(y, c).unwrap();
                    same &= a.half_width.to_f64().to_bits() == b.half_width.to_f64().to_bits();
                }
            }
        }
        identical += usize::from(same);
    }
    outcome(
        identical == systems as usize,
        format!("bitwise identical half-widths on {identical}/{systems} systems"),
    )
}

fn criterion_9() -> Outcome {
    let base = ExperimentConfig {
        seed: 909,
        trials: 20,
        alphas: vec![0.9],
        methods: vec![Method::SetLevel, Method::ClusterLevel],
        ..Default::default()
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for (axis, values) in [
        (SweepAxis::NoiseStd, vec![0.5, 1.0, 2.0]),
        (SweepAxis::DataSize, vec![500.0, 1000.0, 2000.0]),
    ] {
        let s = summarize(&run_sweep(&base, axis, &values).expect("sweep runs"));
        let mut cluster = Vec::new();
        for r in &s {
            pass &= r.coverage_mean >= 0.88;
            if r.method == Method::ClusterLevel {
                cluster.push(r.coverage_mean);
            }
        }
        let min_set = s
            .iter()
            .filter(|r| r.method == Method::SetLevel)
            .map(|r| r.coverage_mean)
            .fold(1.0, f64::min);
        let min_cl = cluster.iter().copied().fold(1.0, f64::min);
        let range = cluster.iter().copied().fold(0.0, f64::max) - min_cl;
        if axis == SweepAxis::DataSize {
            pass &= range <= 0.03;
        }
        parts.push(format!(
            "{axis}: min set {:.2}% min cluster {:.2}% cluster range {:.2} pts",
            100.0 * min_set,
            100.0 * min_cl,
            100.0 * range
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_10() -> Outcome {
    let cfg = ExperimentConfig {
        seed: 1010,
        trials: 4,
        n_test: 1000,
        k_clusters: KClusters::Auto,
        workers: 1,
        ..Default::default()
    };
    let csv = |c: &ExperimentConfig| {
        let mut buf = Vec::new();
        write_results_csv(&run_experiment(c).unwrap(), &mut buf).unwrap();
        buf
    };
    let first = csv(&cfg);
    let again = csv(&cfg);
    let four = csv(&ExperimentConfig { workers: 4, ..cfg.clone() });
    outcome(
        first == again && first == four,
        format!(
            "{} bytes; rerun identical {}, 4 workers identical {}",
            first.len(),
            first == again,
            first == four
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, o: Outcome, secs: f64| {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2}: {tag} ({secs:.1}s) {}", o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed().as_secs_f64())
    };

    let (o, t) = timed(&criterion_1);
    report(1, Outcome { pass: o.pass && t < 30.0, ..o }, t);

    let start = Instant::now();
    let [c2, c3, c4, c5] = criteria_2_to_5();
    let t = start.elapsed().as_secs_f64();
    report(2, Outcome { pass: c2.pass && t < 600.0, ..c2 }, t);
    report(3, c3, t);
    report(4, c4, t);
    report(5, c5, t);

    for (id, f) in [
        (6, &criterion_6 as &dyn Fn() -> Outcome),
        (7, &criterion_7),
        (8, &criterion_8),
        (9, &criterion_9),
        (10, &criterion_10),
    ] {
        let (o, t) = timed(f);
        report(id, o, t);
    }

    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
