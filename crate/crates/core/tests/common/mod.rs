#![allow(dead_code)]

use std::path::PathBuf;

use pixgan::data::{load_dataset_dir, LabeledImages, OfficialData};
use pixgan::model::Architecture;
use pixgan::trainer::TrainConfig;
use pixgan::ImageGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `$PIXGAN_DATA_DIR`, else the workspace `data/mnist`.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("PIXGAN_DATA_DIR") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

pub fn load_mnist() -> OfficialData {
    let dir = mnist_dir();
    load_dataset_dir(&dir)
        .unwrap_or_else(|e| panic!("MNIST IDX files needed in {}: {e}", dir.display()))
}

pub fn tiny_arch() -> Architecture {
    Architecture {
        side: 8,
        latent_dim: 4,
        g_dense_channels: 4,
        g_filters: [4, 3],
        d_filters: [3, 4],
        ..Architecture::default()
    }
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        architecture: tiny_arch(),
        batch_size: 4,
        constraint_rate: 0.1,
        epochs: 2,
        runs: 1,
        ..TrainConfig::default()
    }
}

/// Blurry blobs on an 8×8 grid with a binary label for the position of the blob.
pub fn synthetic_images(n: usize, seed: u64) -> LabeledImages {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..2u8);
        let (cr, cc) = (
            rng.random_range(1.0..3.0) + 3.0 * label as f32,
            rng.random_range(2.0..6.0),
        );
        let px = (0..64)
            .map(|i| {
                let (r, c) = ((i / 8) as f32, (i % 8) as f32);
                let d2 = (r - cr).powi(2) + (c - cc).powi(2);
                (2.0 * (-d2 / 3.0).exp() - 1.0 + rng.random_range(-0.05..0.05)).clamp(-1.0, 1.0)
            })
            .collect();
        images.push(ImageGrid::new(8, px).unwrap());
        labels.push(label);
    }
    LabeledImages {
        images,
        labels: Some(labels),
    }
}

pub fn synthetic_official(train: usize, test: usize) -> OfficialData {
    OfficialData {
        train: synthetic_images(train, 1),
        test: synthetic_images(test, 2),
    }
}
