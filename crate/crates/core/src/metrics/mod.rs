//! FID with a dataset-specific feature extractor, constraint MSE, and generator evaluation.

mod extractor;
mod fid;

pub use extractor::{
    train_feature_extractor, ExtractorTrainConfig, FeatureExtractor, FEATURE_DIM, REQUIRED_ACCURACY,
};
pub use fid::{
    fid, gaussian_stats, matrix_sqrt_product, selection_score, trace_sqrt_product, GaussianStats,
    NEGATIVE_FID_TOLERANCE, PSD_TOLERANCE,
};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{constraint_mse, ConstraintMap};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::model::{sample_latent, Generator};

const GENERATION_BATCH: usize = 256;

/// Feature statistics of a fixed image set.
pub fn image_stats(extractor: &FeatureExtractor, images: &[&ImageGrid]) -> Result<GaussianStats> {
    let feats = extractor.extract_features(images)?;
    gaussian_stats(&feats, extractor.feature_dim())
}

/// Loads reference statistics from `cache_dir`, computing and storing them on a miss.
///
/// The file name combines the extractor digest with `key`, which should identify the image
/// set (for example the partition name plus the split seed).
pub fn cached_image_stats(
    cache_dir: &Path,
    key: &str,
    extractor: &FeatureExtractor,
    images: &[&ImageGrid],
) -> Result<GaussianStats> {
    let path = stats_cache_path(cache_dir, key, extractor);
    if path.is_file() {
        let stats: GaussianStats = serde_json::from_slice(&std::fs::read(&path)?)?;
        if stats.n == images.len() && stats.dim() == extractor.feature_dim() {
            return Ok(stats);
        }
        log::warn!("ignoring stale feature statistics at {}", path.display());
    }
    let stats = image_stats(extractor, images)?;
    std::fs::create_dir_all(cache_dir)?;
    std::fs::write(&path, serde_json::to_vec(&stats)?)?;
    Ok(stats)
}

pub fn stats_cache_path(cache_dir: &Path, key: &str, extractor: &FeatureExtractor) -> PathBuf {
    cache_dir.join(format!("stats-{}-{key}.json", &extractor.digest()[..16]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub fid: f64,
    pub mse: f64,
    pub score: f64,
}

/// Generates `count` samples in inference mode, cycling through `maps` with fresh latent
/// vectors drawn from `seed`.
pub fn generate_for_maps(
    g: &Generator,
    maps: &[ConstraintMap],
    count: usize,
    seed: u64,
) -> Result<Vec<ImageGrid>> {
    if maps.is_empty() {
        return Err(Error::invalid("no constraint maps to condition on"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let n = GENERATION_BATCH.min(count - start);
        let z = sample_latent(n, g.arch.latent_dim, &mut rng)?;
        let cond: Vec<&ConstraintMap> = (start..start + n).map(|i| &maps[i % maps.len()]).collect();
        out.extend(g.generate(&z, &cond)?);
        start += n;
    }
    Ok(out)
}

/// Mean of the per-sample constraint MSE, sample `i` conditioned on `maps[i % maps.len()]`.
pub fn mean_constraint_mse(maps: &[ConstraintMap], samples: &[ImageGrid]) -> Result<f64> {
    if samples.is_empty() || maps.is_empty() {
        return Err(Error::UndefinedMetric("no samples to score".into()));
    }
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        total += constraint_mse(&maps[i % maps.len()], s)?;
    }
    Ok(total / samples.len() as f64)
}

/// FID against `reference` and constraint MSE of as many samples as the reference holds.
pub fn evaluate_generator(
    g: &Generator,
    extractor: &FeatureExtractor,
    reference: &GaussianStats,
    maps: &[ConstraintMap],
    seed: u64,
) -> Result<EvalMetrics> {
    let samples = generate_for_maps(g, maps, reference.n, seed)?;
    let refs: Vec<&ImageGrid> = samples.iter().collect();
    let fid = fid(reference, &image_stats(extractor, &refs)?)?;
    let mse = mean_constraint_mse(maps, &samples)?;
    Ok(EvalMetrics {
        fid,
        mse,
        score: selection_score(fid, mse)?,
    })
}

/// Standard deviation of all pixels pooled over a batch of images.
pub fn pooled_pixel_std(images: &[ImageGrid]) -> f64 {
    let n: usize = images.iter().map(|g| g.len()).sum();
    if n == 0 {
        return 0.0;
    }
    let mean = images
        .iter()
        .flat_map(|g| g.pixels())
        .map(|&v| v as f64)
        .sum::<f64>()
        / n as f64;
    let var = images
        .iter()
        .flat_map(|g| g.pixels())
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    var.sqrt()
}
