//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criterion 7 (the λ trend experiment) needs tens of CPU hours and only runs when
//! `PIXGAN_ACCEPTANCE_TREND=1`; otherwise it is reported as NOT RUN. Its jobs live under
//! `$PIXGAN_TREND_DIR` (default `target/acceptance-trend`) and resume when re-invoked.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use pixgan::constraints::{constraint_penalty, ConstraintMap};
use pixgan::data::{split_dataset, OfficialData};
use pixgan::experiment::Environment;
use pixgan::metrics::{
    fid, matrix_sqrt_product, selection_score, train_feature_extractor, EvalMetrics,
    ExtractorTrainConfig, FeatureExtractor, GaussianStats, REQUIRED_ACCURACY,
};
use pixgan::model::penalty_objective;
use pixgan::sweep::{run_sweep, SweepOptions};
use pixgan::trainer::{
    aggregate_runs, lower_median, select_best_epoch, EpochRecord, Objective, RunHistory,
    TrainConfig, Trainer,
};
use pixgan::ImageGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
}

fn run(c: Criterion, f: impl FnOnce() -> Verdict) -> Verdict {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Verdict::Fail(format!("panicked: {msg}"))
    });
    let elapsed = start.elapsed();
    let verdict = match (verdict, c.budget) {
        (Verdict::Pass(d), Some(b)) if elapsed > b => Verdict::Fail(format!(
            "{d}; runtime {:.1} s exceeds {:.0} s",
            elapsed.as_secs_f64(),
            b.as_secs_f64()
        )),
        (v, _) => v,
    };
    let budget = c.budget.map_or("no fixed budget".to_string(), |b| {
        format!("budget {:.0} s", b.as_secs_f64())
    });
    let (tag, detail) = match &verdict {
        Verdict::Pass(d) => ("PASS", d),
        Verdict::Fail(d) => ("FAIL", d),
        Verdict::NotRun(d) => ("NOT RUN", d),
    };
    println!(
        "criterion {:>2} [{tag}] {}: {detail} ({:.1} s, {budget})",
        c.id,
        c.name,
        elapsed.as_secs_f64()
    );
    verdict
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn scalar_stats(mu: f64, sd: f64) -> GaussianStats {
    GaussianStats::new(
        DVector::from_element(1, mu),
        DMatrix::from_element(1, 1, sd * sd),
        2,
    )
    .unwrap()
}

fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    // rank-deficient about a third of the time
    let k = if rng.random_bool(0.3) {
        rng.random_range(1..=d)
    } else {
        d
    };
    let b = DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() / k as f64
}

fn full_rank_psd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose() / d as f64
}

fn random_stats(d: usize, rng: &mut ChaCha8Rng) -> GaussianStats {
    let mu = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
    GaussianStats::new(mu, random_psd(d, rng), 2).unwrap()
}

fn criterion_1() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_oracle = 0.0f64;
    for _ in 0..1000 {
        let (mr, sr) = (rng.random_range(-10.0..10.0), rng.random_range(0.0..5.0));
        let (mg, sg) = (rng.random_range(-10.0..10.0), rng.random_range(0.0..5.0));
        let want = (mr - mg) * (mr - mg) + (sr - sg) * (sr - sg);
        let got = fid(&scalar_stats(mr, sr), &scalar_stats(mg, sg)).unwrap();
        worst_oracle = worst_oracle.max((got - want).abs());
    }
    let (mut worst_self, mut worst_sym) = (0.0f64, 0.0f64);
    for i in 0..200 {
        let d = 1 + i % 16;
        let a = random_stats(d, &mut rng);
        let b = random_stats(d, &mut rng);
        worst_self = worst_self.max(fid(&a, &a).unwrap().abs());
        worst_sym = worst_sym.max((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs());
    }
    verdict(
        worst_oracle <= 1e-10 && worst_self <= 1e-8 && worst_sym <= 1e-8,
        format!(
            "1-D oracle max |Δ| {worst_oracle:.2e} (tol 1e-10, 1000 cases); fid(a,a) max {worst_self:.2e}, \
             symmetry max |Δ| {worst_sym:.2e} (tol 1e-8, 200 cases)"
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut largest = 0;
    for i in 0..100 {
        let d = if i % 10 == 0 {
            64
        } else {
            rng.random_range(1..=64)
        };
        largest = largest.max(d);
        // at most one side rank-deficient: with both singular Σr·Σg can lack a square root
        let (full, other) = (full_rank_psd(d, &mut rng), random_psd(d, &mut rng));
        let (sr, sg) = if rng.random_bool(0.5) {
            (full, other)
        } else {
            (other, full)
        };
        let s = matrix_sqrt_product(&sr, &sg).unwrap();
        let target = &sr * &sg;
        let rel = (&s * &s - &target).norm() / target.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    verdict(
        worst <= 1e-6,
        format!("max ‖S·S − Σr·Σg‖F / ‖Σr·Σg‖F = {worst:.2e} over 100 pairs up to {largest}×{largest} (tol 1e-6)"),
    )
}

fn brute_force_penalty(values: &[f32], mask: &[bool], generated: &[f32]) -> f64 {
    let mut total = 0.0f64;
    for i in 0..4 {
        for j in 0..4 {
            let k = i * 4 + j;
            let m = if mask[k] { 1.0 } else { 0.0 };
            let r = values[k] as f64 - m * generated[k] as f64;
            total += r * r;
        }
    }
    total
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut mismatches, mut locality_breaks) = (0, 0);
    for _ in 0..1000 {
        let mask: Vec<bool> = (0..16).map(|_| rng.random_bool(0.4)).collect();
        let values: Vec<f32> = mask
            .iter()
            .map(|&m| if m { rng.random_range(-1.0..=1.0) } else { 0.0 })
            .collect();
        let generated: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let c = ConstraintMap::new(4, values.clone(), mask.clone()).unwrap();
        let p = constraint_penalty(&c, &ImageGrid::new(4, generated.clone()).unwrap()).unwrap();
        if p != brute_force_penalty(&values, &mask, &generated) {
            mismatches += 1;
        }
        let perturbed: Vec<f32> = generated
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { rng.random_range(-1.0..=1.0) })
            .collect();
        if constraint_penalty(&c, &ImageGrid::new(4, perturbed).unwrap()).unwrap() != p {
            locality_breaks += 1;
        }
    }
    verdict(
        mismatches == 0 && locality_breaks == 0,
        format!("{mismatches} mismatches vs brute force, {locality_breaks} locality violations in 1000 cases (exact)"),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let side = 8;
    let p = side * side;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let lambda = 10f64.powf(rng.random_range(-2.0..3.0));
        let maps: Vec<ConstraintMap> = (0..n)
            .map(|_| {
                let mask: Vec<bool> = (0..p).map(|_| rng.random_bool(0.2)).collect();
                let values = mask
                    .iter()
                    .map(|&m| if m { rng.random_range(-1.0..=1.0) } else { 0.0 })
                    .collect();
                ConstraintMap::new(side, values, mask).unwrap()
            })
            .collect();
        let refs: Vec<&ConstraintMap> = maps.iter().collect();
        let x: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, analytic) = penalty_objective(&refs, &x, lambda).unwrap();
        let h = 1e-5;
        let numeric: Vec<f64> = (0..x.len())
            .map(|i| {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[i] += h;
                b[i] -= h;
                let fa = penalty_objective(&refs, &a, lambda).unwrap().0;
                let fb = penalty_objective(&refs, &b, lambda).unwrap().0;
                (fa - fb) / (2.0 * h)
            })
            .collect();
        let diff: f64 = numeric
            .iter()
            .zip(&analytic)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let rel = if norm == 0.0 { diff } else { diff / norm };
        worst = worst.max(rel);
    }
    verdict(
        worst < 1e-4,
        format!("max relative gradient error {worst:.2e} at 100 random points (tol 1e-4)"),
    )
}

fn criterion_5(data: &OfficialData) -> Verdict {
    let split = split_dataset(data, 0).unwrap();
    let base = TrainConfig {
        batch_size: 32,
        seed: 5,
        ..TrainConfig::default()
    };
    let reg = TrainConfig {
        objective: Objective::Regularized,
        lambda: 0.0,
        ..base.clone()
    };
    let cgan = TrainConfig {
        objective: Objective::Cgan,
        ..base
    };
    let mut a = Trainer::new(reg, &split.train, &split.constraint_sources.train).unwrap();
    let mut b = Trainer::new(cgan, &split.train, &split.constraint_sources.train).unwrap();
    for step in 1..=100 {
        let la = a.step(&mut ()).unwrap();
        let lb = b.step(&mut ()).unwrap();
        if a.state.generator != b.state.generator || a.state.discriminator != b.state.discriminator
        {
            return Verdict::Fail(format!("parameters diverge at step {step}"));
        }
        if la.discriminator != lb.discriminator || la.generator != lb.generator {
            return Verdict::Fail(format!("losses diverge at step {step}: {la:?} vs {lb:?}"));
        }
    }
    Verdict::Pass("λ=0 and CGAN-only parameters and losses bit-identical after each of 100 steps (MNIST, batch 32)".into())
}

fn criterion_6(data: &OfficialData) -> Verdict {
    let s = split_dataset(data, 0).unwrap();
    let cs = &s.constraint_sources;
    let before = (
        s.train.len() + cs.train.len(),
        s.validation.len() + cs.validation.len(),
    );
    let within = |got: usize, want: usize| got.abs_diff(want) <= 1;
    let counts_ok =
        before == (54000, 6000) && within(s.train.len(), 43200) && within(cs.train.len(), 10800);
    let mut official_train: Vec<usize> = [&s.train, &s.validation, &cs.train, &cs.validation]
        .iter()
        .flat_map(|p| p.indices.iter().copied())
        .collect();
    let mut official_test: Vec<usize> = [&s.test, &cs.test]
        .iter()
        .flat_map(|p| p.indices.iter().copied())
        .collect();
    official_train.sort_unstable();
    official_test.sort_unstable();
    let partition_of =
        |v: &[usize], n: usize| v.len() == n && v.iter().enumerate().all(|(i, &x)| i == x);
    let disjoint = partition_of(&official_train, data.train.len())
        && partition_of(&official_test, data.test.len());
    verdict(
        counts_ok && disjoint,
        format!(
            "{}/{} before removal, {} train after removing {} constraint sources; partitions disjoint and covering: {disjoint}",
            before.0,
            before.1,
            s.train.len(),
            cs.train.len()
        ),
    )
}

fn criterion_7(extractor: &FeatureExtractor, data: &OfficialData) -> Verdict {
    if std::env::var("PIXGAN_ACCEPTANCE_TREND").as_deref() != Ok("1") {
        return Verdict::NotRun(
            "set PIXGAN_ACCEPTANCE_TREND=1 to run (9 runs × 20 epochs × 675 steps, tens of hours on one core)".into(),
        );
    }
    let dir = std::env::var_os("PIXGAN_TREND_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-trend")
        });
    let config = TrainConfig {
        epochs: 20,
        batch_size: 64,
        runs: 3,
        seed: 0,
        split_seed: 0,
        ..TrainConfig::default()
    };
    let env = Environment::new(data, &config, extractor.clone(), Some(&dir.join("stats"))).unwrap();
    let result = run_sweep(
        &[0.0, 1.0, 100.0],
        &config,
        &env,
        &dir,
        SweepOptions::default(),
    )
    .unwrap();
    let rows = result.lambda_rows();
    let mse: Vec<Option<f64>> = rows.iter().map(|r| r.median_test_mse).collect();
    let fids: Vec<Option<f64>> = rows.iter().map(|r| r.median_test_fid).collect();
    let (Some(m0), Some(m1), Some(m100), Some(f0), Some(f100)) =
        (mse[0], mse[1], mse[2], fids[0], fids[2])
    else {
        return Verdict::Fail(format!(
            "missing medians (all runs of a λ failed): {rows:?}"
        ));
    };
    verdict(
        m0 > m1 && m1 > m100 && f100 <= 3.0 * f0,
        format!(
            "median test MSE λ=0: {m0:.4}, λ=1: {m1:.4}, λ=100: {m100:.4}; median FID λ=0: {f0:.3}, λ=100: {f100:.3} \
             (needs strictly decreasing MSE and FID(100) ≤ 3·FID(0) = {:.3})",
            3.0 * f0
        ),
    )
}

fn history(seed: u64, scores: &[(f64, f64)]) -> RunHistory {
    RunHistory {
        seed,
        records: scores
            .iter()
            .enumerate()
            .map(|(i, &(f, m))| EpochRecord::new(i + 1, f, m, None).unwrap())
            .collect(),
        test: None,
        collapsed: false,
    }
}

fn criterion_8() -> Verdict {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    // scores 5, 3, 4 via FID only
    let h = history(0, &[(5.0, 0.0), (3.0, 0.0), (4.0, 0.0)]);
    check(
        select_best_epoch(&h).unwrap().epoch == 2,
        "argmin of [5, 3, 4]",
    );
    check(
        selection_score(3.0, 16.0).unwrap() == 5.0,
        "FID 3, MSE 16 gives 5",
    );
    check(
        EpochRecord::new(1, 3.0, 16.0, None).unwrap().score == 5.0,
        "stored record score",
    );
    let tie = history(0, &[(2.0, 1.0), (1.0, 4.0), (2.0, 1.0)]);
    check(
        select_best_epoch(&tie).unwrap().epoch == 1,
        "ties go to the earliest epoch",
    );
    // same score through different (FID, MSE) mixes: √(4+5) = √(1+8) = 3
    let mixed = history(0, &[(4.0, 0.0), (2.0, 5.0), (1.0, 8.0)]);
    check(
        select_best_epoch(&mixed).unwrap().epoch == 2,
        "composite score argmin",
    );
    check(
        select_best_epoch(&history(0, &[])).is_err(),
        "empty history rejected",
    );
    check(
        lower_median(&[4.0, 2.0, 9.0]) == Some(4.0),
        "median of [4, 2, 9]",
    );
    check(
        lower_median(&[1.0, 2.0, 3.0, 10.0]) == Some(2.0),
        "lower median of [1, 2, 3, 10]",
    );

    let runs: Vec<RunHistory> = [(1u64, 4.0), (2, 2.0), (3, 9.0), (4, 1.0)]
        .iter()
        .map(|&(seed, fid)| history(seed, &[(fid + 1.0, 0.5), (fid, 0.25), (fid + 2.0, 0.0)]))
        .collect();
    let mut seen = Vec::new();
    let summary = aggregate_runs(&runs, |h, best| {
        seen.push((h.seed, best.epoch));
        let fid = best.fid_val * 10.0;
        let mse = h.seed as f64;
        Ok(EvalMetrics {
            fid,
            mse,
            score: selection_score(fid, mse)?,
        })
    })
    .unwrap();
    check(
        seen.iter().all(|&(_, e)| e == 2),
        "test metrics taken at each run's best epoch",
    );
    check(
        summary.median_test_fid == 20.0,
        "lower median of test FIDs [40, 20, 90, 10]",
    );
    check(
        summary.median_test_mse == 2.0,
        "lower median of test MSEs [1, 2, 3, 4]",
    );
    let single = aggregate_runs(&runs[..1], |_, _| {
        Ok(EvalMetrics {
            fid: 7.0,
            mse: 0.5,
            score: selection_score(7.0, 0.5)?,
        })
    })
    .unwrap();
    check(
        single.median_test_fid == 7.0 && single.median_test_mse == 0.5,
        "single run is the identity",
    );
    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "argmin, tie, composite score and median rules hold exactly on hand-built histories"
                .into()
        } else {
            format!("failed: {}", failures.join("; "))
        },
    )
}

fn criterion_9(data: &OfficialData) -> (Verdict, Option<FeatureExtractor>) {
    let mut out = None;
    let v = run(
        Criterion {
            id: 9,
            name: "feature extractor gate",
            budget: Some(Duration::from_secs(15 * 60)),
        },
        || {
            let train: Vec<&ImageGrid> = data.train.images.iter().collect();
            let test: Vec<&ImageGrid> = data.test.images.iter().collect();
            let config = ExtractorTrainConfig {
                // report the accuracy ourselves instead of failing inside training
                required_accuracy: 0.0,
                ..ExtractorTrainConfig::default()
            };
            let (f, acc) = train_feature_extractor(
                &train,
                data.train.labels.as_ref().unwrap(),
                &test,
                data.test.labels.as_ref().unwrap(),
                0,
                &config,
            )
            .unwrap();
            out = Some(f);
            verdict(
                acc >= REQUIRED_ACCURACY,
                format!("MNIST test accuracy {acc:.4} (required ≥ {REQUIRED_ACCURACY})"),
            )
        },
    );
    (v, out)
}

fn sweep_once(extractor: &Path, out: &Path, cache: &Path) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_pixgan"))
        .args([
            "sweep", "--grid", "1", "--runs", "1", "--epochs", "2", "--seed", "7",
        ])
        .args(["--max-train-images", "640", "--max-eval-images", "500"])
        .arg("--data-dir")
        .arg(common::mnist_dir())
        .arg("--extractor")
        .arg(extractor)
        .arg("--cache-dir")
        .arg(cache)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    if !status.success() {
        return Err(format!("sweep exited with {status}"));
    }
    std::fs::read(out.join("sweep.csv")).map_err(|e| e.to_string())
}

fn criterion_10(extractor: &FeatureExtractor) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let ex = dir.path().join("extractor.ckpt");
    extractor.save(&ex).unwrap();
    let a = sweep_once(&ex, &dir.path().join("a"), &dir.path().join("cache-a"));
    let b = sweep_once(&ex, &dir.path().join("b"), &dir.path().join("cache-b"));
    match (a, b) {
        (Ok(a), Ok(b)) => verdict(
            a == b && !a.is_empty(),
            format!(
                "two CLI sweeps (λ=1, 1 run, 2 epochs, 640 train / 500 eval images) wrote {} and {} byte CSVs, identical: {}",
                a.len(),
                b.len(),
                a == b
            ),
        ),
        (a, b) => Verdict::Fail(format!("sweep failed: {:?} / {:?}", a.err(), b.err())),
    }
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let mut verdicts = vec![
        run(
            Criterion {
                id: 1,
                name: "metric oracles",
                budget: secs(10),
            },
            criterion_1,
        ),
        run(
            Criterion {
                id: 2,
                name: "matrix square root",
                budget: secs(30),
            },
            criterion_2,
        ),
        run(
            Criterion {
                id: 3,
                name: "constraint math",
                budget: secs(5),
            },
            criterion_3,
        ),
        run(
            Criterion {
                id: 4,
                name: "penalty gradient check",
                budget: secs(60),
            },
            criterion_4,
        ),
    ];
    let data = common::load_mnist();
    verdicts.push(run(
        Criterion {
            id: 5,
            name: "λ=0 reduction",
            budget: secs(300),
        },
        || criterion_5(&data),
    ));
    verdicts.push(run(
        Criterion {
            id: 6,
            name: "data protocol",
            budget: secs(60),
        },
        || criterion_6(&data),
    ));
    verdicts.push(run(
        Criterion {
            id: 8,
            name: "selection and aggregation",
            budget: Some(Duration::from_secs(1)),
        },
        criterion_8,
    ));
    let (v9, extractor) = criterion_9(&data);
    verdicts.push(v9);
    let extractor = extractor.unwrap_or_else(|| FeatureExtractor::new(28, 10, 0).unwrap());
    verdicts.push(run(
        Criterion {
            id: 10,
            name: "end-to-end determinism",
            budget: secs(15 * 60),
        },
        || criterion_10(&extractor),
    ));
    verdicts.push(run(
        Criterion {
            id: 7,
            name: "λ trend reproduction",
            budget: None,
        },
        || criterion_7(&extractor, &data),
    ));
    let failed = verdicts
        .iter()
        .filter(|v| matches!(v, Verdict::Fail(_)))
        .count();
    let not_run = verdicts
        .iter()
        .filter(|v| matches!(v, Verdict::NotRun(_)))
        .count();
    println!(
        "acceptance: {} passed, {failed} failed, {not_run} not run",
        verdicts.len() - failed - not_run
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
