//! Small convnet classifier whose hidden dense layer provides FID features.
//!
//! conv(1→32, k4 s2) → ReLU → conv(32→64, k4 s2) → ReLU → dense(→128) → ReLU → dense(→classes).
//! The 128-wide activation is the feature layer.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{read_container, restore, write_container};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::model::stack_images;
use crate::nn::{relu, relu_backward, Adam, AdamConfig, Conv2d, Linear, Param, Tensor};

pub const FEATURE_DIM: usize = 128;
pub const REQUIRED_ACCURACY: f64 = 0.97;
const EXTRACTOR_KIND: &str = "pixgan.feature_extractor";
const FEATURE_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Accuracy the held-out set must reach; `train_feature_extractor` fails below it.
    pub required_accuracy: f64,
}

impl Default for ExtractorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 64,
            lr: 1e-3,
            required_accuracy: REQUIRED_ACCURACY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct ExtractorMeta {
    side: usize,
    classes: usize,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    side: usize,
    classes: usize,
    seed: u64,
    conv1: Conv2d,
    conv2: Conv2d,
    hidden: Linear,
    head: Linear,
}

struct Activations {
    a1: Tensor,
    a2: Tensor,
    features: Tensor,
    logits: Tensor,
    caches: (
        crate::nn::Conv2dCache,
        crate::nn::Conv2dCache,
        crate::nn::LinearCache,
        crate::nn::LinearCache,
    ),
}

fn he(fan_in: usize) -> f32 {
    (2.0 / fan_in as f32).sqrt()
}

impl FeatureExtractor {
    pub fn new(side: usize, classes: usize, seed: u64) -> Result<Self> {
        if side == 0 || !side.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "feature extractor needs a side divisible by 4, got {side}"
            )));
        }
        if classes < 2 {
            return Err(Error::invalid("feature extractor needs at least 2 classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = 64 * (side / 4) * (side / 4);
        Ok(Self {
            side,
            classes,
            seed,
            conv1: Conv2d::new(1, 32, 4, 2, 1, true, he(16), &mut rng),
            conv2: Conv2d::new(32, 64, 4, 2, 1, true, he(32 * 16), &mut rng),
            hidden: Linear::new(flat, FEATURE_DIM, true, he(flat), &mut rng),
            head: Linear::new(FEATURE_DIM, classes, true, he(FEATURE_DIM), &mut rng),
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    fn forward(&self, x: &Tensor) -> Activations {
        let n = x.batch();
        let (mut a1, c1) = self.conv1.forward(x);
        relu(a1.data_mut());
        let (mut a2, c2) = self.conv2.forward(&a1);
        relu(a2.data_mut());
        let flat = a2.clone().reshape(vec![n, a2.len() / n]);
        let (mut features, c3) = self.hidden.forward(flat);
        relu(features.data_mut());
        let (logits, c4) = self.head.forward(features.clone());
        Activations {
            a1,
            a2,
            features,
            logits,
            caches: (c1, c2, c3, c4),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v.extend(self.hidden.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    fn check_images(&self, images: &[&ImageGrid]) -> Result<()> {
        if let Some(g) = images.iter().find(|g| g.side() != self.side) {
            return Err(Error::dim(format!(
                "image side {} but extractor expects {}",
                g.side(),
                self.side
            )));
        }
        Ok(())
    }

    /// Feature-layer activations, `n × 128` row-major. Rows do not depend on batching.
    pub fn extract_features(&self, images: &[&ImageGrid]) -> Result<Vec<f32>> {
        self.check_images(images)?;
        let mut out = Vec::with_capacity(images.len() * FEATURE_DIM);
        for chunk in images.chunks(FEATURE_BATCH) {
            let x = stack_images(chunk)?;
            out.extend_from_slice(self.forward(&x).features.data());
        }
        Ok(out)
    }

    pub fn predict(&self, images: &[&ImageGrid]) -> Result<Vec<u8>> {
        self.check_images(images)?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(FEATURE_BATCH) {
            let x = stack_images(chunk)?;
            let logits = self.forward(&x).logits;
            out.extend(logits.data().chunks_exact(self.classes).map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0 as u8
            }));
        }
        Ok(out)
    }

    pub fn accuracy(&self, images: &[&ImageGrid], labels: &[u8]) -> Result<f64> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::LengthMismatch {
                expected: images.len(),
                found: labels.len(),
            });
        }
        let pred = self.predict(images)?;
        Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }

    /// One softmax cross-entropy step; returns the mean batch loss.
    fn train_batch(
        &mut self,
        adam: &mut Adam,
        images: &[&ImageGrid],
        labels: &[u8],
    ) -> Result<f64> {
        let n = images.len();
        let x = stack_images(images)?;
        let act = self.forward(&x);
        let k = self.classes;
        let mut loss = 0.0f64;
        let mut dlogits = vec![0.0f32; n * k];
        for ((row, d), &y) in act
            .logits
            .data()
            .chunks_exact(k)
            .zip(dlogits.chunks_exact_mut(k))
            .zip(labels)
        {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            loss += sum.ln() - (row[y as usize] - max) as f64;
            for (j, (dj, &v)) in d.iter_mut().zip(row).enumerate() {
                let p = (((v - max) as f64).exp() / sum) as f32;
                *dj = (p - if j == y as usize { 1.0 } else { 0.0 }) / n as f32;
            }
        }
        let (c1, c2, c3, c4) = act.caches;
        let mut g = self
            .head
            .backward(c4, &Tensor::new(vec![n, k], dlogits), true, true)
            .expect("input grad");
        relu_backward(act.features.data(), g.data_mut());
        let g = self
            .hidden
            .backward(c3, &g, true, true)
            .expect("input grad");
        let mut g = g.reshape(act.a2.shape().to_vec());
        relu_backward(act.a2.data(), g.data_mut());
        let mut g = self.conv2.backward(c2, &g, true, true).expect("input grad");
        relu_backward(act.a1.data(), g.data_mut());
        self.conv1.backward(c1, &g, true, false);
        adam.step(self.params_mut());
        for p in self.params_mut() {
            p.zero_grad();
        }
        Ok(loss / n as f64)
    }

    /// Hex SHA-256 over architecture and weights; keys cached feature statistics.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{}:{}", self.side, self.classes).as_bytes());
        for (_, t) in self.named_tensors() {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn named_tensors(&self) -> Vec<(String, &Vec<f32>)> {
        let mut v = Vec::new();
        for (name, layer_w, layer_b) in [
            ("conv1", &self.conv1.weight, &self.conv1.bias),
            ("conv2", &self.conv2.weight, &self.conv2.bias),
            ("hidden", &self.hidden.weight, &self.hidden.bias),
            ("head", &self.head.weight, &self.head.bias),
        ] {
            v.push((format!("{name}.weight"), &layer_w.value));
            v.push((
                format!("{name}.bias"),
                &layer_b.as_ref().expect("bias").value,
            ));
        }
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut v = Vec::new();
        for (name, layer_w, layer_b) in [
            ("conv1", &mut self.conv1.weight, &mut self.conv1.bias),
            ("conv2", &mut self.conv2.weight, &mut self.conv2.bias),
            ("hidden", &mut self.hidden.weight, &mut self.hidden.bias),
            ("head", &mut self.head.weight, &mut self.head.bias),
        ] {
            v.push((format!("{name}.weight"), &mut layer_w.value));
            v.push((
                format!("{name}.bias"),
                &mut layer_b.as_mut().expect("bias").value,
            ));
        }
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = ExtractorMeta {
            side: self.side,
            classes: self.classes,
            seed: self.seed,
        };
        let tensors: Vec<(String, &[f32])> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.as_slice()))
            .collect();
        write_container(path, EXTRACTOR_KIND, serde_json::to_value(meta)?, &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let c = read_container(path)?;
        if c.header.kind != EXTRACTOR_KIND {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!(
                    "checkpoint kind {:?} is not a feature extractor",
                    c.header.kind
                ),
            });
        }
        let meta: ExtractorMeta =
            serde_json::from_value(c.header.metadata.clone()).map_err(|e| Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("bad metadata: {e}"),
            })?;
        let mut f = Self::new(meta.side, meta.classes, meta.seed)?;
        restore(path, &c, "", f.named_tensors_mut())?;
        Ok(f)
    }
}

/// Trains the classifier on `train` and gates it on the accuracy reached on `held_out`.
///
/// Returns the extractor and its held-out accuracy, or `TrainingFailed` below the gate.
pub fn train_feature_extractor(
    train: &[&ImageGrid],
    train_labels: &[u8],
    held_out: &[&ImageGrid],
    held_out_labels: &[u8],
    seed: u64,
    config: &ExtractorTrainConfig,
) -> Result<(FeatureExtractor, f64)> {
    if train.len() != train_labels.len() {
        return Err(Error::LengthMismatch {
            expected: train.len(),
            found: train_labels.len(),
        });
    }
    let side = train
        .first()
        .map(|g| g.side())
        .ok_or_else(|| Error::invalid("feature extractor training set is empty"))?;
    let classes = train_labels
        .iter()
        .copied()
        .max()
        .map_or(0, |m| m as usize + 1);
    let mut distinct = train_labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid(
            "feature extractor training needs at least 2 classes",
        ));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::invalid(
            "extractor epochs and batch size must be positive",
        ));
    }
    let mut f = FeatureExtractor::new(side, classes, seed)?;
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        beta1: 0.9,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(config.batch_size) {
            let imgs: Vec<&ImageGrid> = idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| train_labels[i]).collect();
            let loss = f.train_batch(&mut adam, &imgs, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "extractor loss became {loss} in epoch {epoch}"
                )));
            }
            total += loss;
            batches += 1;
        }
        log::info!(
            "feature extractor epoch {}: mean loss {:.4}",
            epoch + 1,
            total / batches as f64
        );
    }
    let accuracy = f.accuracy(held_out, held_out_labels)?;
    log::info!("feature extractor held-out accuracy {accuracy:.4}");
    if accuracy < config.required_accuracy {
        return Err(Error::TrainingFailed {
            accuracy,
            required: config.required_accuracy,
        });
    }
    Ok((f, accuracy))
}
