//! Adversarial optimization of the regularized objective, per-epoch validation,
//! best-epoch selection and aggregation over repeated runs.
//!
//! Each step draws a minibatch of real training images with constraint maps sampled
//! from those same images (the discriminator's real pairs), and a minibatch of maps
//! sampled from the training constraint-source images (the generator's conditioning).
//! The discriminator is updated once, then the generator once, reusing one generator
//! forward pass for both.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_gan, GanMeta};
use crate::constraints::{sample_constraints, ConstraintMap, DEFAULT_EPSILON, DEFAULT_RATE};
use crate::data::{DatasetSplit, Partition};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::metrics::{
    evaluate_generator, generate_for_maps, pooled_pixel_std, selection_score, EvalMetrics,
    FeatureExtractor, GaussianStats,
};
use crate::model::{
    discriminator_logit_grads, discriminator_loss, generator_logit_grads, penalty_objective,
    sample_latent, stack_images, Architecture, Discriminator, Generator,
};
use crate::nn::{sigmoid, Adam, AdamConfig, Tensor};

/// Samples in the batch used for collapse detection.
pub const COLLAPSE_BATCH: usize = 256;
/// Pooled pixel standard deviation below which generated samples count as collapsed.
pub const COLLAPSE_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Conditional adversarial loss plus `λ`-weighted constraint penalty.
    Regularized,
    /// Conditional adversarial loss only; no penalty code path at all.
    Cgan,
    /// Unconditional baseline: both networks see all-zero conditioning planes.
    Gan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    /// One generator checkpoint per epoch.
    Every,
    /// Only the current best and the latest epoch are kept on disk.
    BestAndLast,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub generator_optimizer: AdamConfig,
    pub discriminator_optimizer: AdamConfig,
    pub architecture: Architecture,
    pub constraint_rate: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub split_seed: u64,
    pub runs: usize,
    /// Generator loss `−log D(G)` instead of `log(1 − D(G))`.
    pub non_saturating: bool,
    /// Draw `z′, C′` for the penalty independently of the adversarial minibatch.
    pub independent_penalty_draw: bool,
    /// Resample training-time constraint maps from the source images at every epoch.
    pub resample_constraints_per_epoch: bool,
    pub max_train_images: Option<usize>,
    pub max_eval_images: Option<usize>,
    pub checkpoints: CheckpointPolicy,
    pub save_discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Regularized,
            lambda: 1.0,
            epochs: 50,
            batch_size: 64,
            generator_optimizer: AdamConfig::default(),
            discriminator_optimizer: AdamConfig::default(),
            architecture: Architecture::default(),
            constraint_rate: DEFAULT_RATE,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
            split_seed: 0,
            runs: 10,
            non_saturating: false,
            independent_penalty_draw: false,
            resample_constraints_per_epoch: true,
            max_train_images: None,
            max_eval_images: None,
            checkpoints: CheckpointPolicy::BestAndLast,
            save_discriminator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "lambda must be finite and ≥ 0, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.runs == 0 {
            return Err(Error::invalid("runs must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.constraint_rate) {
            return Err(Error::invalid(format!(
                "constraint rate {} outside [0, 1]",
                self.constraint_rate
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        self.architecture.validate()
    }

    /// Effective penalty weight.
    pub fn penalty_weight(&self) -> Option<f64> {
        match self.objective {
            Objective::Regularized => Some(self.lambda),
            Objective::Cgan | Objective::Gan => None,
        }
    }

    pub fn variant_name(&self) -> String {
        match self.objective {
            Objective::Regularized => format!("lambda={}", self.lambda),
            Objective::Cgan => "cgan".into(),
            Objective::Gan => "gan".into(),
        }
    }
}

/// Networks and optimizers of one run.
#[derive(Debug, Clone)]
pub struct GanState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub steps: u64,
}

impl GanState {
    pub fn new(config: &TrainConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Init);
        Ok(Self {
            generator: Generator::new(config.architecture, &mut rng)?,
            discriminator: Discriminator::new(config.architecture, &mut rng)?,
            opt_g: Adam::new(config.generator_optimizer),
            opt_d: Adam::new(config.discriminator_optimizer),
            steps: 0,
        })
    }
}

/// One minibatch. `gen_maps` condition the generator; `real_maps` are sampled from `real`.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub real: Vec<ImageGrid>,
    pub real_maps: Vec<ConstraintMap>,
    pub z: Tensor,
    pub gen_maps: Vec<ConstraintMap>,
    /// Independent `(z′, C′)` for the penalty term; `None` reuses `(z, C)`.
    pub penalty_draw: Option<(Tensor, Vec<ConstraintMap>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub discriminator: f64,
    pub generator: f64,
    /// Mean constraint penalty of the batch (without `λ`); 0 when no penalty is used.
    pub penalty: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    pub objective: Objective,
    pub lambda: f64,
    pub non_saturating: bool,
}

impl From<&TrainConfig> for StepOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            objective: c.objective,
            lambda: c.lambda,
            non_saturating: c.non_saturating,
        }
    }
}

fn blank_maps(n: usize, side: usize) -> Vec<ConstraintMap> {
    vec![ConstraintMap::empty(side); n]
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn clamped_ln(p: f64) -> f64 {
    p.clamp(crate::model::PROB_CLAMP, 1.0 - crate::model::PROB_CLAMP)
        .ln()
}

fn adversarial_g_value(fake_logits: &[f32], non_saturating: bool) -> f64 {
    let probs: Vec<f64> = fake_logits.iter().map(|&l| sigmoid(l) as f64).collect();
    if non_saturating {
        -mean(&probs.iter().map(|&p| clamped_ln(p)).collect::<Vec<_>>())
    } else {
        mean(
            &probs
                .iter()
                .map(|&p| clamped_ln(1.0 - p))
                .collect::<Vec<_>>(),
        )
    }
}

/// Updates the generator once against a discriminator whose parameters stay fixed.
///
/// Returns `(generator objective, mean penalty)` evaluated before the update.
pub fn generator_update(
    state: &mut GanState,
    z: &Tensor,
    gen_maps: &[ConstraintMap],
    penalty_draw: Option<&(Tensor, Vec<ConstraintMap>)>,
    opts: StepOptions,
) -> Result<(f64, f64)> {
    let side = state.generator.arch.side;
    let cond_store;
    let cond_maps: &[ConstraintMap] = if opts.objective == Objective::Gan {
        cond_store = blank_maps(gen_maps.len(), side);
        &cond_store
    } else {
        gen_maps
    };
    let cond: Vec<&ConstraintMap> = cond_maps.iter().collect();
    let (fake, g_tape) = state.generator.forward_train(z, &cond)?;
    let (value, penalty, grad) =
        generator_gradient(state, &fake, &cond, gen_maps, penalty_draw, opts)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.steps,
            d_loss: f64::NAN,
            g_loss: value,
        });
    }
    state.generator.zero_grad();
    state.generator.backward(g_tape, &grad.0);
    if let Some((tape, d)) = grad.1 {
        state.generator.backward(tape, &d);
    }
    state.opt_g.step(state.generator.params_mut());
    Ok((value, penalty))
}

type GenGrad = (Tensor, Option<(crate::model::GeneratorTape, Tensor)>);

fn generator_gradient(
    state: &mut GanState,
    fake: &Tensor,
    cond: &[&ConstraintMap],
    gen_maps: &[ConstraintMap],
    penalty_draw: Option<&(Tensor, Vec<ConstraintMap>)>,
    opts: StepOptions,
) -> Result<(f64, f64, GenGrad)> {
    let (logits, d_tape) = state.discriminator.forward_train(fake, cond)?;
    let mut value = adversarial_g_value(&logits, opts.non_saturating);
    let dl = generator_logit_grads(&logits, opts.non_saturating);
    let mut d_fake = state.discriminator.backward(d_tape, &dl, false);
    let mut penalty = 0.0;
    let mut extra = None;
    if opts.objective == Objective::Regularized {
        match penalty_draw {
            None => {
                let maps: Vec<&ConstraintMap> = gen_maps.iter().collect();
                let (v, grad) = penalty_objective(&maps, fake.data(), opts.lambda)?;
                let (unit, _) = penalty_objective(&maps, fake.data(), 1.0)?;
                value += v;
                penalty = unit;
                for (d, g) in d_fake.data_mut().iter_mut().zip(grad) {
                    *d += g as f32;
                }
            }
            Some((z2, maps2)) => {
                let refs: Vec<&ConstraintMap> = maps2.iter().collect();
                let (fake2, tape2) = state.generator.forward_train(z2, &refs)?;
                let (v, grad) = penalty_objective(&refs, fake2.data(), opts.lambda)?;
                let (unit, _) = penalty_objective(&refs, fake2.data(), 1.0)?;
                value += v;
                penalty = unit;
                let g2 = Tensor::new(
                    fake2.shape().to_vec(),
                    grad.into_iter().map(|g| g as f32).collect(),
                );
                extra = Some((tape2, g2));
            }
        }
    }
    Ok((value, penalty, (d_fake, extra)))
}

/// The generator objective on a batch without changing any parameter (batch statistics
/// are used, running estimates are not touched).
pub fn generator_objective(
    state: &GanState,
    z: &Tensor,
    gen_maps: &[ConstraintMap],
    opts: StepOptions,
) -> Result<f64> {
    let mut probe = state.clone();
    let side = probe.generator.arch.side;
    let cond_maps = if opts.objective == Objective::Gan {
        blank_maps(gen_maps.len(), side)
    } else {
        gen_maps.to_vec()
    };
    let cond: Vec<&ConstraintMap> = cond_maps.iter().collect();
    let (fake, _) = probe.generator.forward_train(z, &cond)?;
    let (logits, _) = probe.discriminator.forward_train(&fake, &cond)?;
    let mut value = adversarial_g_value(&logits, opts.non_saturating);
    if opts.objective == Objective::Regularized {
        let maps: Vec<&ConstraintMap> = gen_maps.iter().collect();
        value += penalty_objective(&maps, fake.data(), opts.lambda)?.0;
    }
    Ok(value)
}

/// One discriminator update followed by one generator update.
pub fn train_step(
    state: &mut GanState,
    batch: &StepBatch,
    opts: StepOptions,
) -> Result<StepLosses> {
    let n = batch.real.len();
    let m = batch.gen_maps.len();
    if n == 0 || m == 0 {
        return Err(Error::invalid(
            "train_step needs non-empty real and generator batches",
        ));
    }
    if batch.real_maps.len() != n || batch.z.batch() != m {
        return Err(Error::dim(format!(
            "batch has {n} real images, {} real maps, {m} generator maps, {} latents",
            batch.real_maps.len(),
            batch.z.batch()
        )));
    }
    let side = state.generator.arch.side;
    let gan = opts.objective == Objective::Gan;
    let (real_cond_store, gen_cond_store);
    let real_cond: Vec<&ConstraintMap> = if gan {
        real_cond_store = blank_maps(n, side);
        real_cond_store.iter().collect()
    } else {
        batch.real_maps.iter().collect()
    };
    let gen_cond: Vec<&ConstraintMap> = if gan {
        gen_cond_store = blank_maps(m, side);
        gen_cond_store.iter().collect()
    } else {
        batch.gen_maps.iter().collect()
    };
    let real_refs: Vec<&ImageGrid> = batch.real.iter().collect();
    let real = stack_images(&real_refs)?;

    let (fake, g_tape) = state.generator.forward_train(&batch.z, &gen_cond)?;

    // discriminator: minimize −mean log D(real) − mean log(1 − D(fake))
    state.discriminator.zero_grad();
    let (real_logits, real_tape) = state.discriminator.forward_train(&real, &real_cond)?;
    let (fake_logits, fake_tape) = state.discriminator.forward_train(&fake, &gen_cond)?;
    let to_probs = |ls: &[f32]| ls.iter().map(|&l| sigmoid(l) as f64).collect::<Vec<_>>();
    let d_loss = discriminator_loss(&to_probs(&real_logits), &to_probs(&fake_logits))?;
    if !d_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.steps,
            d_loss,
            g_loss: f64::NAN,
        });
    }
    let (d_real, d_fake) = discriminator_logit_grads(&real_logits, &fake_logits);
    state.discriminator.backward(real_tape, &d_real, true);
    state.discriminator.backward(fake_tape, &d_fake, true);
    state.opt_d.step(state.discriminator.params_mut());

    // generator, against the updated discriminator
    let (g_loss, penalty, grad) = generator_gradient(
        state,
        &fake,
        &gen_cond,
        &batch.gen_maps,
        batch.penalty_draw.as_ref(),
        opts,
    )?;
    if !g_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.steps,
            d_loss,
            g_loss,
        });
    }
    state.generator.zero_grad();
    state.generator.backward(g_tape, &grad.0);
    if let Some((tape, d)) = grad.1 {
        state.generator.backward(tape, &d);
    }
    state.opt_g.step(state.generator.params_mut());
    state.steps += 1;
    Ok(StepLosses {
        discriminator: d_loss,
        generator: g_loss,
        penalty,
    })
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 1,
    Shuffle = 2,
    Maps = 3,
    Latent = 4,
    Eval = 5,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Hook for inspecting which images feed each step (used for data-hygiene audits).
pub trait BatchObserver {
    /// Official indices of the real images and of the images the generator's maps came from.
    fn on_batch(&mut self, real: &[usize], map_sources: &[usize]);
}

impl BatchObserver for () {
    fn on_batch(&mut self, _: &[usize], _: &[usize]) {}
}

/// Step-by-step driver of one run's optimization timeline.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub state: GanState,
    train: &'a Partition,
    sources: &'a Partition,
    shuffle_rng: ChaCha8Rng,
    map_rng: ChaCha8Rng,
    latent_rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    /// `(source position, map)` pool the generator's conditioning is drawn from.
    pool: Vec<(usize, ConstraintMap)>,
    pool_cursor: usize,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    /// `train` supplies real images; `sources` the generator's constraint maps.
    pub fn new(config: TrainConfig, train: &'a Partition, sources: &'a Partition) -> Result<Self> {
        config.validate()?;
        if train.is_empty() || sources.is_empty() {
            return Err(Error::invalid(
                "training needs non-empty train and constraint-source partitions",
            ));
        }
        let seed = config.seed;
        let mut t = Self {
            state: GanState::new(&config, seed)?,
            config,
            train,
            sources,
            shuffle_rng: stream(seed, Stream::Shuffle),
            map_rng: stream(seed, Stream::Maps),
            latent_rng: stream(seed, Stream::Latent),
            order: Vec::new(),
            cursor: 0,
            pool: Vec::new(),
            pool_cursor: 0,
            epoch: 0,
        };
        t.refill_pool();
        t.start_epoch();
        Ok(t)
    }

    fn refill_pool(&mut self) {
        let rate = self.config.constraint_rate;
        self.pool = self
            .sources
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| (i, sample_constraints(img, rate, &mut self.map_rng)))
            .collect();
    }

    fn start_epoch(&mut self) {
        self.order = (0..self.train.len()).collect();
        self.order.shuffle(&mut self.shuffle_rng);
        self.cursor = 0;
        self.pool.shuffle(&mut self.map_rng);
        self.pool_cursor = 0;
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.train.len() / self.config.batch_size).max(1)
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn draw_maps(
        &mut self,
        n: usize,
        observer: &mut dyn BatchObserver,
    ) -> (Vec<ConstraintMap>, Vec<usize>) {
        let mut maps = Vec::with_capacity(n);
        let mut official = Vec::with_capacity(n);
        for _ in 0..n {
            if self.pool_cursor == self.pool.len() {
                self.pool.shuffle(&mut self.map_rng);
                self.pool_cursor = 0;
            }
            let (src, map) = &self.pool[self.pool_cursor];
            official.push(self.sources.indices[*src]);
            maps.push(map.clone());
            self.pool_cursor += 1;
        }
        observer.on_batch(&[], &official);
        (maps, official)
    }

    /// Assembles the next minibatch.
    pub fn next_batch(&mut self, observer: &mut dyn BatchObserver) -> Result<StepBatch> {
        let b = self.config.batch_size.min(self.train.len());
        let idx = &self.order[self.cursor..self.cursor + b];
        self.cursor += b;
        let real: Vec<ImageGrid> = idx.iter().map(|&i| self.train.images[i].clone()).collect();
        let official: Vec<usize> = idx.iter().map(|&i| self.train.indices[i]).collect();
        observer.on_batch(&official, &[]);
        let rate = self.config.constraint_rate;
        let real_maps = real
            .iter()
            .map(|img| sample_constraints(img, rate, &mut self.map_rng))
            .collect();
        let z = sample_latent(b, self.config.architecture.latent_dim, &mut self.latent_rng)?;
        let (gen_maps, _) = self.draw_maps(b, observer);
        let penalty_draw = if self.config.independent_penalty_draw {
            let z2 = sample_latent(b, self.config.architecture.latent_dim, &mut self.latent_rng)?;
            Some((z2, self.draw_maps(b, observer).0))
        } else {
            None
        };
        Ok(StepBatch {
            real,
            real_maps,
            z,
            gen_maps,
            penalty_draw,
        })
    }

    /// One optimization step.
    /// Crosses into the next epoch when the current one is exhausted.
    pub fn step(&mut self, observer: &mut dyn BatchObserver) -> Result<StepLosses> {
        if self.epoch_exhausted() {
            self.finish_epoch();
        }
        let batch = self.next_batch(observer)?;
        train_step(&mut self.state, &batch, StepOptions::from(&self.config))
    }

    /// Runs the remaining steps of the current epoch and advances to the next.
    pub fn run_epoch(&mut self, observer: &mut dyn BatchObserver) -> Result<EpochLosses> {
        let mut acc = EpochLosses::default();
        while !self.epoch_exhausted() {
            let l = self.step(observer)?;
            acc.discriminator += l.discriminator;
            acc.generator += l.generator;
            acc.penalty += l.penalty;
            acc.steps += 1;
        }
        if acc.steps > 0 {
            let k = acc.steps as f64;
            acc.discriminator /= k;
            acc.generator /= k;
            acc.penalty /= k;
        }
        self.finish_epoch();
        Ok(acc)
    }

    fn epoch_exhausted(&self) -> bool {
        self.cursor / self.config.batch_size.min(self.train.len()) >= self.steps_per_epoch()
    }

    fn finish_epoch(&mut self) {
        self.epoch += 1;
        if self.config.resample_constraints_per_epoch {
            self.refill_pool();
        }
        self.start_epoch();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub discriminator: f64,
    pub generator: f64,
    pub penalty: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub fid_val: f64,
    pub mse_val: f64,
    pub score: f64,
    pub checkpoint_path: Option<PathBuf>,
}

impl EpochRecord {
    pub fn new(
        epoch: usize,
        fid_val: f64,
        mse_val: f64,
        checkpoint_path: Option<PathBuf>,
    ) -> Result<Self> {
        Ok(Self {
            epoch,
            fid_val,
            mse_val,
            score: selection_score(fid_val, mse_val)?,
            checkpoint_path,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub seed: u64,
    pub records: Vec<EpochRecord>,
    /// Test metrics of the best epoch, once evaluated.
    pub test: Option<EvalMetrics>,
    /// Best-epoch samples had pooled pixel std below [`COLLAPSE_STD`].
    pub collapsed: bool,
}

/// Record with the smallest selection score; the earliest wins ties.
pub fn select_best_epoch(history: &RunHistory) -> Result<&EpochRecord> {
    history
        .records
        .iter()
        .fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.score <= r.score => Some(b),
            _ => Some(r),
        })
        .ok_or_else(|| Error::invalid("cannot select a best epoch from an empty history"))
}

/// Lower median: the smaller middle value for even counts.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    pub median_test_fid: f64,
    pub median_test_mse: f64,
    /// Median of per-run composite scores, logged alongside the per-metric medians.
    pub median_test_score: f64,
    pub collapsed_runs: usize,
}

/// Per-metric lower medians of each run's test metrics at its best epoch.
pub fn aggregate_runs(
    histories: &[RunHistory],
    mut evaluate: impl FnMut(&RunHistory, &EpochRecord) -> Result<EvalMetrics>,
) -> Result<RunSummary> {
    if histories.is_empty() {
        return Err(Error::invalid("no runs to aggregate"));
    }
    let mut metrics = Vec::with_capacity(histories.len());
    for h in histories {
        metrics.push(evaluate(h, select_best_epoch(h)?)?);
    }
    let pick = |f: fn(&EvalMetrics) -> f64| {
        lower_median(&metrics.iter().map(f).collect::<Vec<_>>()).expect("non-empty")
    };
    Ok(RunSummary {
        runs: histories.len(),
        median_test_fid: pick(|m| m.fid),
        median_test_mse: pick(|m| m.mse),
        median_test_score: pick(|m| m.score),
        collapsed_runs: histories.iter().filter(|h| h.collapsed).count(),
    })
}

/// Aggregates histories whose best-epoch test metrics were stored by [`train_run`].
pub fn aggregate_stored(histories: &[RunHistory]) -> Result<RunSummary> {
    aggregate_runs(histories, |h, _| {
        h.test
            .ok_or_else(|| Error::invalid(format!("run with seed {} has no test metrics", h.seed)))
    })
}

/// Reference statistics and fixed conditioning maps for one evaluation partition.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub reference: GaussianStats,
    pub maps: Vec<ConstraintMap>,
}

impl EvalSet {
    /// One map per constraint-source image, sampled with a seed that depends only on `seed`.
    pub fn new(
        reference: GaussianStats,
        sources: &Partition,
        rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::invalid("evaluation needs constraint-source images"));
        }
        let mut rng = stream(seed, Stream::Eval);
        let maps = sources
            .images
            .iter()
            .map(|img| sample_constraints(img, rate, &mut rng))
            .collect();
        Ok(Self { reference, maps })
    }
}

/// Everything evaluation needs besides the generator.
pub struct Evaluator<'a> {
    pub extractor: &'a FeatureExtractor,
    pub validation: &'a EvalSet,
    pub test: &'a EvalSet,
}

/// Seed of the latent vectors used to evaluate `epoch` of the run seeded `seed`.
pub fn eval_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(epoch as u64)
}

/// Evaluates a generator on an evaluation set. Unconditional generators see blank planes,
/// while MSE is still measured against the set's maps.
pub fn evaluate_on(
    g: &Generator,
    objective: Objective,
    extractor: &FeatureExtractor,
    set: &EvalSet,
    seed: u64,
) -> Result<EvalMetrics> {
    if objective == Objective::Gan {
        let blank = blank_maps(set.maps.len(), g.arch.side);
        let samples = generate_for_maps(g, &blank, set.reference.n, seed)?;
        let refs: Vec<&ImageGrid> = samples.iter().collect();
        let fid = crate::metrics::fid(
            &set.reference,
            &crate::metrics::image_stats(extractor, &refs)?,
        )?;
        let mse = crate::metrics::mean_constraint_mse(&set.maps, &samples)?;
        return Ok(EvalMetrics {
            fid,
            mse,
            score: selection_score(fid, mse)?,
        });
    }
    evaluate_generator(g, extractor, &set.reference, &set.maps, seed)
}

/// Collapse check on [`COLLAPSE_BATCH`] samples.
pub fn is_collapsed(
    g: &Generator,
    objective: Objective,
    maps: &[ConstraintMap],
    seed: u64,
) -> Result<bool> {
    let cond = if objective == Objective::Gan {
        blank_maps(maps.len(), g.arch.side)
    } else {
        maps.to_vec()
    };
    let samples = generate_for_maps(g, &cond, COLLAPSE_BATCH, seed)?;
    Ok(pooled_pixel_std(&samples) < COLLAPSE_STD)
}

fn csv_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.csv")
}

#[derive(Serialize)]
struct CsvRow<'a> {
    epoch: usize,
    fid_val: f64,
    mse_val: f64,
    score: f64,
    checkpoint_path: &'a str,
}

/// Full run: epochs of training, per-epoch validation, test metrics at the best epoch.
///
/// Writes `metrics.csv` (append per epoch), checkpoints per the policy, and
/// `history.json` into `out_dir`.
pub fn train_run(
    config: &TrainConfig,
    split: &DatasetSplit,
    evaluator: &Evaluator,
    out_dir: &Path,
    observer: &mut dyn BatchObserver,
) -> Result<RunHistory> {
    std::fs::create_dir_all(out_dir)?;
    let mut trainer = Trainer::new(
        config.clone(),
        &split.train,
        &split.constraint_sources.train,
    )?;
    let csv_file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(csv_path(out_dir))?;
    let mut log = csv::Writer::from_writer(csv_file);
    let mut history = RunHistory {
        seed: config.seed,
        records: Vec::new(),
        test: None,
        collapsed: false,
    };
    let mut best: Option<(f64, Generator)> = None;
    let meta = |epoch| GanMeta {
        architecture: config.architecture,
        seed: config.seed,
        lambda: config.penalty_weight().unwrap_or(0.0),
        epoch,
        variant: config.variant_name(),
    };
    for _ in 0..config.epochs {
        let losses = trainer.run_epoch(observer)?;
        let epoch = trainer.epoch();
        let g = &trainer.state.generator;
        let m = evaluate_on(
            g,
            config.objective,
            evaluator.extractor,
            evaluator.validation,
            eval_seed(config.seed, epoch),
        )?;
        log::info!(
            "seed {} epoch {epoch}: d {:.4} g {:.4} penalty {:.4} | val fid {:.4} mse {:.4} score {:.4}",
            config.seed,
            losses.discriminator,
            losses.generator,
            losses.penalty,
            m.fid,
            m.mse,
            m.score
        );
        let improved = best.as_ref().is_none_or(|(s, _)| m.score < *s);
        let ckpt = match config.checkpoints {
            CheckpointPolicy::None => None,
            CheckpointPolicy::Every => Some(out_dir.join(format!("epoch-{epoch:03}.ckpt"))),
            CheckpointPolicy::BestAndLast => {
                Some(out_dir.join(if improved { "best.ckpt" } else { "last.ckpt" }))
            }
        };
        if let Some(path) = &ckpt {
            let d = config
                .save_discriminator
                .then_some(&trainer.state.discriminator);
            save_gan(path, g, d, &meta(epoch))?;
            if config.checkpoints == CheckpointPolicy::BestAndLast && improved {
                // the previous "last" is superseded by this best epoch
                let _ = std::fs::remove_file(out_dir.join("last.ckpt"));
            }
        }
        let record = EpochRecord::new(epoch, m.fid, m.mse, ckpt.clone())?;
        log.serialize(CsvRow {
            epoch,
            fid_val: record.fid_val,
            mse_val: record.mse_val,
            score: record.score,
            checkpoint_path: &ckpt.map(|p| p.display().to_string()).unwrap_or_default(),
        })?;
        log.flush()?;
        history.records.push(record);
        if improved {
            best = Some((m.score, g.clone()));
        }
    }
    let (_, best_g) = best.expect("at least one epoch");
    let best_epoch = select_best_epoch(&history)?.epoch;
    let test = evaluate_on(
        &best_g,
        config.objective,
        evaluator.extractor,
        evaluator.test,
        eval_seed(config.seed, best_epoch) ^ 0x7e57,
    )?;
    history.test = Some(test);
    history.collapsed = is_collapsed(
        &best_g,
        config.objective,
        &evaluator.test.maps,
        eval_seed(config.seed, 0),
    )?;
    log::info!(
        "seed {} best epoch {best_epoch}: test fid {:.4} mse {:.4}{}",
        config.seed,
        test.fid,
        test.mse,
        if history.collapsed {
            " (collapsed)"
        } else {
            ""
        }
    );
    serde_json::to_writer_pretty(File::create(out_dir.join("history.json"))?, &history)?;
    Ok(history)
}
