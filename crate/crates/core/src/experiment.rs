//! Setup shared by the commands that train or evaluate generators: locating the data,
//! obtaining the feature extractor, and building the evaluation sets of a split.

use std::path::{Path, PathBuf};

use crate::data::{split_dataset, DatasetSplit, OfficialData, Partition};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::metrics::{
    cached_image_stats, image_stats, train_feature_extractor, ExtractorTrainConfig,
    FeatureExtractor,
};
use crate::trainer::{EvalSet, Evaluator, TrainConfig};

/// Environment variable naming the IDX dataset directory.
pub const DATA_DIR_ENV: &str = "PIXGAN_DATA_DIR";
pub const DEFAULT_DATA_DIR: &str = "data/mnist";

/// `explicit`, else `$PIXGAN_DATA_DIR`, else `data/mnist`.
pub fn resolve_data_dir(explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_DATA_DIR),
    }
}

/// Loads the extractor at `path`, or trains one on the official training set, gates it on
/// the official test set, and saves it there.
pub fn load_or_train_extractor(
    data: &OfficialData,
    path: &Path,
    seed: u64,
    config: ExtractorTrainConfig,
) -> Result<FeatureExtractor> {
    if path.is_file() {
        log::info!("loading feature extractor {}", path.display());
        return FeatureExtractor::load(path);
    }
    let (train_labels, test_labels) = match (&data.train.labels, &data.test.labels) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::invalid(
                "training the feature extractor needs label files",
            ))
        }
    };
    log::info!("training feature extractor (seed {seed})");
    let train: Vec<&ImageGrid> = data.train.images.iter().collect();
    let test: Vec<&ImageGrid> = data.test.images.iter().collect();
    let (extractor, accuracy) =
        train_feature_extractor(&train, train_labels, &test, test_labels, seed, &config)?;
    log::info!("feature extractor test accuracy {accuracy:.4}");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    extractor.save(path)?;
    Ok(extractor)
}

/// A split with its extractor and fixed validation/test evaluation sets.
pub struct Environment {
    pub split: DatasetSplit,
    pub extractor: FeatureExtractor,
    pub validation: EvalSet,
    pub test: EvalSet,
}

impl Environment {
    /// Splits `data` with `config.split_seed`, applies the configured truncation, and
    /// computes reference statistics (cached under `stats_cache` when given).
    pub fn new(
        data: &OfficialData,
        config: &TrainConfig,
        extractor: FeatureExtractor,
        stats_cache: Option<&Path>,
    ) -> Result<Self> {
        config.validate()?;
        if extractor.side() != config.architecture.side {
            return Err(Error::dim(format!(
                "extractor expects {}x{} images, architecture uses {}",
                extractor.side(),
                extractor.side(),
                config.architecture.side
            )));
        }
        let mut split = split_dataset(data, config.split_seed)?;
        split.truncate(config.max_train_images, config.max_eval_images);
        let stats = |name: &str, p: &Partition| {
            let refs: Vec<&ImageGrid> = p.images.iter().collect();
            match stats_cache {
                Some(dir) => {
                    let key = format!("{name}-split{}-n{}", config.split_seed, p.len());
                    cached_image_stats(dir, &key, &extractor, &refs)
                }
                None => image_stats(&extractor, &refs),
            }
        };
        let rate = config.constraint_rate;
        let validation = EvalSet::new(
            stats("validation", &split.validation)?,
            &split.constraint_sources.validation,
            rate,
            config.split_seed,
        )?;
        let test = EvalSet::new(
            stats("test", &split.test)?,
            &split.constraint_sources.test,
            rate,
            config.split_seed.wrapping_add(1),
        )?;
        Ok(Self {
            split,
            extractor,
            validation,
            test,
        })
    }

    pub fn evaluator(&self) -> Evaluator<'_> {
        Evaluator {
            extractor: &self.extractor,
            validation: &self.validation,
            test: &self.test,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explicit_data_dir_wins() {
        assert_eq!(resolve_data_dir(Some(Path::new("/x"))), PathBuf::from("/x"));
    }
}
