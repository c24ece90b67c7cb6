use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pixgan::checkpoint::load_generator;
use pixgan::constraints::{read_constraint_file, DEFAULT_EPSILON};
use pixgan::data::{load_dataset_dir, split_dataset, write_manifest, OfficialData};
use pixgan::experiment::{load_or_train_extractor, resolve_data_dir, Environment, DATA_DIR_ENV};
use pixgan::generate::generate_images;
use pixgan::metrics::{ExtractorTrainConfig, FeatureExtractor};
use pixgan::plot::emit_plots;
use pixgan::sweep::{
    parse_grid, run_sweep, sweep_csv_path, SweepOptions, SweepResult, DEFAULT_GRID,
};
use pixgan::trainer::{
    evaluate_on, select_best_epoch, train_run, CheckpointPolicy, Objective, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "pixgan",
    version,
    about = "Pixel-wise conditioned GAN experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the seeded train/validation/test split manifest and print partition sizes.
    Split {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the FID feature extractor and save it.
    TrainExtractor {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
    },
    /// Train one run and report its best-epoch test metrics.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default `runs/<variant>-seed<S>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FID, constraint MSE and selection score of a generator checkpoint.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = EvalPartition::Test)]
        partition: EvalPartition,
        /// Seed of the evaluation latent vectors.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Repeated-run protocol for every λ of a grid; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated λ values.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        runs: Option<usize>,
        /// Master seed; run r uses seed + r.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gan_baseline: bool,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Sample images for a constraint file and report constraint satisfaction.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        constraints: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value = "generated")]
        out: PathBuf,
    },
    /// Plot a sweep result (a directory holding sweep.csv, or the CSV itself).
    Plot {
        #[arg(long)]
        results: PathBuf,
        /// Defaults to the results directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// IDX dataset directory (falls back to `data/mnist`).
    #[arg(long, env = DATA_DIR_ENV)]
    data_dir: Option<PathBuf>,
    /// Holds the feature extractor and cached reference statistics.
    #[arg(long, default_value = ".pixgan-cache")]
    cache_dir: PathBuf,
    /// Feature extractor checkpoint (default `<cache-dir>/extractor-seed<N>.ckpt`).
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<OfficialData> {
        let dir = resolve_data_dir(self.data_dir.as_deref());
        load_dataset_dir(&dir).with_context(|| format!("loading dataset from {}", dir.display()))
    }

    fn extractor_path(&self) -> PathBuf {
        self.extractor.clone().unwrap_or_else(|| {
            self.cache_dir
                .join(format!("extractor-seed{}.ckpt", self.extractor_seed))
        })
    }

    fn extractor(&self, data: &OfficialData) -> anyhow::Result<FeatureExtractor> {
        let path = self.extractor_path();
        load_or_train_extractor(
            data,
            &path,
            self.extractor_seed,
            ExtractorTrainConfig::default(),
        )
        .with_context(|| format!("feature extractor {}", path.display()))
    }

    fn environment(&self, config: &TrainConfig) -> anyhow::Result<Environment> {
        let data = self.load()?;
        let extractor = self.extractor(&data)?;
        Ok(Environment::new(
            &data,
            config,
            extractor,
            Some(&self.cache_dir),
        )?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Regularized,
    Cgan,
    Gan,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckpointArg {
    Every,
    BestAndLast,
    None,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalPartition {
    Validation,
    Test,
}

/// JSON config plus per-field overrides.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    max_train_images: Option<usize>,
    #[arg(long)]
    max_eval_images: Option<usize>,
    #[arg(long, value_enum)]
    checkpoints: Option<CheckpointArg>,
    #[arg(long)]
    non_saturating: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(o) = self.objective {
            c.objective = match o {
                ObjectiveArg::Regularized => Objective::Regularized,
                ObjectiveArg::Cgan => Objective::Cgan,
                ObjectiveArg::Gan => Objective::Gan,
            };
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.split_seed {
            c.split_seed = v;
        }
        if self.max_train_images.is_some() {
            c.max_train_images = self.max_train_images;
        }
        if self.max_eval_images.is_some() {
            c.max_eval_images = self.max_eval_images;
        }
        if let Some(p) = self.checkpoints {
            c.checkpoints = match p {
                CheckpointArg::Every => CheckpointPolicy::Every,
                CheckpointArg::BestAndLast => CheckpointPolicy::BestAndLast,
                CheckpointArg::None => CheckpointPolicy::None,
            };
        }
        if self.non_saturating {
            c.non_saturating = true;
        }
        Ok(c)
    }
}

fn print_json(v: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("json value serializes")
    );
}

fn objective_of_variant(variant: &str) -> Objective {
    match variant {
        "gan" => Objective::Gan,
        "cgan" => Objective::Cgan,
        _ => Objective::Regularized,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Split { data, seed, out } => {
            let official = data.load()?;
            let split = split_dataset(&official, seed)?;
            if let Some(path) = out {
                write_manifest(
                    &split.manifest(official.train.len(), official.test.len()),
                    &path,
                )?;
            }
            print_json(&json!({
                "seed": seed,
                "train": split.train.len(),
                "validation": split.validation.len(),
                "test": split.test.len(),
                "train_constraint_sources": split.constraint_sources.train.len(),
                "validation_constraint_sources": split.constraint_sources.validation.len(),
                "test_constraint_sources": split.constraint_sources.test.len(),
            }));
        }
        Command::TrainExtractor { data, epochs } => {
            let official = data.load()?;
            let path = data.extractor_path();
            if path.exists() {
                std::fs::remove_file(&path)?;
            }
            let config = ExtractorTrainConfig {
                epochs,
                ..ExtractorTrainConfig::default()
            };
            let f = load_or_train_extractor(&official, &path, data.extractor_seed, config)?;
            let test: Vec<_> = official.test.images.iter().collect();
            let accuracy =
                f.accuracy(&test, official.test.labels.as_deref().unwrap_or_default())?;
            print_json(&json!({ "path": path, "test_accuracy": accuracy, "digest": f.digest() }));
        }
        Command::Train {
            data,
            config,
            lambda,
            seed,
            out,
        } => {
            let mut c = config.resolve()?;
            if let Some(l) = lambda {
                c.lambda = l;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            c.validate()?;
            let out = out.unwrap_or_else(|| {
                PathBuf::from(format!("runs/{}-seed{}", c.variant_name(), c.seed))
            });
            let env = data.environment(&c)?;
            let history = train_run(&c, &env.split, &env.evaluator(), &out, &mut ())?;
            let best = select_best_epoch(&history)?;
            print_json(&json!({
                "out": out,
                "best_epoch": best.epoch,
                "test": history.test,
                "collapsed": history.collapsed,
            }));
        }
        Command::Evaluate {
            data,
            config,
            checkpoint,
            partition,
            seed,
        } => {
            let (g, meta) = load_generator(&checkpoint)?;
            let mut c = config.resolve()?;
            c.architecture = meta.architecture;
            let env = data.environment(&c)?;
            let set = match partition {
                EvalPartition::Validation => &env.validation,
                EvalPartition::Test => &env.test,
            };
            let m = evaluate_on(
                &g,
                objective_of_variant(&meta.variant),
                &env.extractor,
                set,
                seed,
            )?;
            print_json(&json!({
                "checkpoint": checkpoint,
                "variant": meta.variant,
                "epoch": meta.epoch,
                "fid": m.fid,
                "mse": m.mse,
                "score": m.score,
            }));
        }
        Command::Sweep {
            data,
            config,
            grid,
            runs,
            seed,
            gan_baseline,
            out,
        } => {
            let mut c = config.resolve()?;
            if let Some(r) = runs {
                c.runs = r;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            let grid = match grid {
                Some(g) => parse_grid(&g)?,
                None => DEFAULT_GRID.to_vec(),
            };
            pixgan::sweep::validate_grid(&grid)?;
            c.validate()?;
            let env = data.environment(&c)?;
            let result = run_sweep(&grid, &c, &env, &out, SweepOptions { gan_baseline })?;
            let failures: usize = result.rows.iter().map(|r| r.failures).sum();
            print_json(
                &json!({ "csv": sweep_csv_path(&out), "rows": result.rows.len(), "failures": failures }),
            );
        }
        Command::Generate {
            checkpoint,
            constraints,
            count,
            seed,
            epsilon,
            out,
        } => {
            let (g, _) = load_generator(&checkpoint)?;
            let map = read_constraint_file(&constraints)
                .with_context(|| format!("constraint file {}", constraints.display()))?;
            let report = generate_images(&g, &map, count, seed, epsilon, &out)?;
            for img in &report.images {
                println!(
                    "{}: constraint MSE {:.6}, satisfied {}/{}",
                    out.join(&img.file).display(),
                    img.constraint_mse,
                    img.satisfied,
                    img.satisfied + img.unsatisfied
                );
            }
        }
        Command::Plot { results, out } => {
            let csv = if results.is_dir() {
                sweep_csv_path(&results)
            } else {
                results.clone()
            };
            if !csv.is_file() {
                bail!("no sweep CSV at {}", csv.display());
            }
            let result = SweepResult::read_csv(&csv)?;
            let out = out.unwrap_or_else(|| csv.parent().unwrap_or(Path::new(".")).to_path_buf());
            for f in emit_plots(&result, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
