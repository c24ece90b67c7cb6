//! λ sweeps over the repeated-run protocol, with CGAN (λ = 0) and optional GAN baselines.
//!
//! Every (variant, run) job owns `out_dir/<variant>/run-<r>/`. A job whose directory already
//! holds a `job.json` matching its config and a finished `history.json` is reused, so an
//! interrupted sweep can be resumed by invoking it again with the same arguments.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::Environment;
use crate::trainer::{aggregate_stored, train_run, Objective, RunHistory, TrainConfig};

pub const DEFAULT_GRID: [f64; 7] = [0.0, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0];
pub const SWEEP_CSV: &str = "sweep.csv";
const JOB_FILE: &str = "job.json";
const HISTORY_FILE: &str = "history.json";

/// One aggregated line of a sweep. `lambda` is empty for the unconditional baseline, and
/// the medians are empty when every run of the row failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: String,
    pub lambda: Option<f64>,
    pub median_test_fid: Option<f64>,
    pub median_test_mse: Option<f64>,
    pub runs: usize,
    pub failures: usize,
    pub collapsed: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<SweepRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Rows with a λ, in increasing λ order.
    pub fn lambda_rows(&self) -> Vec<&SweepRow> {
        let mut v: Vec<&SweepRow> = self.rows.iter().filter(|r| r.lambda.is_some()).collect();
        v.sort_by(|a, b| a.lambda.unwrap().total_cmp(&b.lambda.unwrap()));
        v
    }

    pub fn baseline(&self, variant: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepOptions {
    /// Also run the unconditional GAN baseline.
    pub gan_baseline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub variant: String,
    pub run: usize,
    pub seed: u64,
    pub error: String,
}

/// Checks a λ grid and returns it sorted.
pub fn validate_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(Error::invalid("lambda grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(Error::invalid(format!(
            "lambda {bad} is not a finite value ≥ 0"
        )));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::invalid(format!(
            "lambda {} appears more than once",
            w[0]
        )));
    }
    Ok(sorted)
}

/// Parses a comma-separated grid such as `0,0.01,1e2`.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|e| Error::Parse {
                entry: format!("grid value {:?}", t.trim()),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Config of one row; λ = 0 runs the plain conditional objective.
fn variant_config(base: &TrainConfig, lambda: Option<f64>) -> TrainConfig {
    let mut c = base.clone();
    match lambda {
        None => {
            c.objective = Objective::Gan;
            c.lambda = 0.0;
        }
        Some(l) if l == 0.0 => {
            c.objective = Objective::Cgan;
            c.lambda = 0.0;
        }
        Some(l) => {
            c.objective = Objective::Regularized;
            c.lambda = l;
        }
    }
    c
}

fn variant_dir(c: &TrainConfig) -> String {
    match c.objective {
        Objective::Regularized => {
            // both forms are the shortest round-trip representation, so names stay distinct
            let plain = c.lambda.to_string();
            if plain.len() <= 12 {
                format!("lambda-{plain}")
            } else {
                format!("lambda-{:e}", c.lambda)
            }
        }
        Objective::Cgan => "cgan".into(),
        Objective::Gan => "gan".into(),
    }
}

/// Seed of run `r`; the same seeds are used for every λ.
pub fn run_seed(master: u64, run: usize) -> u64 {
    master.wrapping_add(run as u64)
}

fn finished_history(dir: &Path, config: &TrainConfig) -> Option<RunHistory> {
    let job: TrainConfig = serde_json::from_slice(&std::fs::read(dir.join(JOB_FILE)).ok()?).ok()?;
    if &job != config {
        return None;
    }
    let h: RunHistory =
        serde_json::from_slice(&std::fs::read(dir.join(HISTORY_FILE)).ok()?).ok()?;
    h.test.is_some().then_some(h)
}

fn run_job(config: &TrainConfig, env: &Environment, dir: &Path) -> Result<RunHistory> {
    if let Some(h) = finished_history(dir, config) {
        log::info!("reusing finished job {}", dir.display());
        return Ok(h);
    }
    std::fs::create_dir_all(dir)?;
    let _ = std::fs::remove_file(dir.join(HISTORY_FILE));
    serde_json::to_writer_pretty(File::create(dir.join(JOB_FILE))?, config)?;
    train_run(config, &env.split, &env.evaluator(), dir, &mut ())
}

/// Runs `base.runs` seeds per variant and aggregates per-metric medians of the best-epoch
/// test metrics. A failed run is counted and logged; it never aborts the sweep.
///
/// Writes `sweep.csv` and `failures.json` into `out_dir`.
pub fn run_sweep(
    grid: &[f64],
    base: &TrainConfig,
    env: &Environment,
    out_dir: &Path,
    options: SweepOptions,
) -> Result<SweepResult> {
    let grid = validate_grid(grid)?;
    base.validate()?;
    let mut variants: Vec<Option<f64>> = Vec::new();
    if options.gan_baseline {
        variants.push(None);
    }
    variants.extend(grid.iter().map(|&l| Some(l)));

    let mut result = SweepResult::default();
    let mut failures = Vec::new();
    for lambda in variants {
        let template = variant_config(base, lambda);
        let name = variant_dir(&template);
        let mut histories = Vec::new();
        let mut failed = 0;
        for run in 0..base.runs {
            let mut config = template.clone();
            config.seed = run_seed(base.seed, run);
            let dir = out_dir.join(&name).join(format!("run-{run}"));
            log::info!("{name} run {run} (seed {})", config.seed);
            match run_job(&config, env, &dir) {
                Ok(h) => histories.push(h),
                Err(e) => {
                    log::warn!("{name} run {run} failed: {e}");
                    failed += 1;
                    failures.push(JobFailure {
                        variant: name.clone(),
                        run,
                        seed: config.seed,
                        error: e.to_string(),
                    });
                }
            }
        }
        let summary = if histories.is_empty() {
            None
        } else {
            Some(aggregate_stored(&histories)?)
        };
        result.rows.push(SweepRow {
            variant: match template.objective {
                Objective::Regularized => "regularized".into(),
                _ => name.clone(),
            },
            lambda,
            median_test_fid: summary.map(|s| s.median_test_fid),
            median_test_mse: summary.map(|s| s.median_test_mse),
            runs: base.runs,
            failures: failed,
            collapsed: summary.map_or(0, |s| s.collapsed_runs),
        });
    }
    std::fs::create_dir_all(out_dir)?;
    result.write_csv(out_dir.join(SWEEP_CSV))?;
    serde_json::to_writer_pretty(File::create(out_dir.join("failures.json"))?, &failures)?;
    Ok(result)
}

pub fn sweep_csv_path(dir: &Path) -> PathBuf {
    dir.join(SWEEP_CSV)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_validation() {
        assert_eq!(
            validate_grid(&[1.0, 0.0, 0.1]).unwrap(),
            vec![0.0, 0.1, 1.0]
        );
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[0.0, 1.0, 0.0]).is_err());
        assert!(validate_grid(&[-1.0]).is_err());
        assert!(validate_grid(&[f64::NAN]).is_err());
        assert!(validate_grid(&[f64::INFINITY]).is_err());
        assert_eq!(validate_grid(&DEFAULT_GRID).unwrap().len(), 7);
    }

    #[test]
    fn grid_parsing_names_the_bad_value() {
        assert_eq!(parse_grid("0, 1e-2,100").unwrap(), vec![0.0, 0.01, 100.0]);
        match parse_grid("0,abc") {
            Err(Error::Parse { entry, .. }) => assert!(entry.contains("abc")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_lambda_is_the_cgan_baseline() {
        let base = TrainConfig::default();
        assert_eq!(variant_config(&base, Some(0.0)).objective, Objective::Cgan);
        assert_eq!(variant_config(&base, None).objective, Objective::Gan);
        let r = variant_config(&base, Some(10.0));
        assert_eq!((r.objective, r.lambda), (Objective::Regularized, 10.0));
        assert_eq!(variant_dir(&r), "lambda-10");
        assert_eq!(
            variant_dir(&variant_config(&base, Some(1e308))),
            "lambda-1e308"
        );
        assert_eq!(
            variant_dir(&variant_config(&base, Some(1e-12))),
            "lambda-1e-12"
        );
        assert_eq!(
            variant_dir(&variant_config(&base, Some(0.01))),
            "lambda-0.01"
        );
    }

    #[test]
    fn csv_round_trip_keeps_empty_fields() {
        let dir = tempfile::tempdir().unwrap();
        let result = SweepResult {
            rows: vec![
                SweepRow {
                    variant: "gan".into(),
                    lambda: None,
                    median_test_fid: Some(12.5),
                    median_test_mse: Some(0.4),
                    runs: 3,
                    failures: 0,
                    collapsed: 1,
                },
                SweepRow {
                    variant: "regularized".into(),
                    lambda: Some(0.1),
                    median_test_fid: None,
                    median_test_mse: None,
                    runs: 3,
                    failures: 3,
                    collapsed: 0,
                },
                SweepRow {
                    variant: "regularized".into(),
                    lambda: Some(1.0 / 3.0),
                    median_test_fid: Some(std::f64::consts::PI),
                    median_test_mse: Some(1e-17),
                    runs: 3,
                    failures: 1,
                    collapsed: 0,
                },
            ],
        };
        let path = dir.path().join("s.csv");
        result.write_csv(&path).unwrap();
        assert_eq!(SweepResult::read_csv(&path).unwrap(), result);
        assert_eq!(result.lambda_rows().len(), 2);
        assert_eq!(result.baseline("gan").unwrap().collapsed, 1);
    }
}
