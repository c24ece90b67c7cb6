//! IDX loading, intensity normalization and the train/validation/test/constraint-source split.
//!
//! The official training set is shuffled with a seeded permutation and cut into
//! 90% training and 10% validation. From each of training, validation and the
//! official test set, one fifth (rounded up) is moved out into a constraint-source
//! partition: those images only ever provide constraint maps to the generator, and
//! are never shown to the discriminator as real samples.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const VALIDATION_FRACTION: f64 = 0.10;
pub const CONSTRAINT_SOURCE_DIVISOR: usize = 5;
/// Smallest official training set `split_dataset` accepts.
pub const MIN_SPLIT_IMAGES: usize = 10;

/// An 8-bit square image exactly as stored in an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub side: usize,
    pub bytes: Vec<u8>,
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes([
        buf[offset],
        buf[offset + 1],
        buf[offset + 2],
        buf[offset + 3],
    ])
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses an unsigned-byte rank-3 IDX file (raw or gzip-compressed).
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Vec<RawImage>> {
    let path = path.as_ref();
    let buf = read_maybe_gz(path)?;
    parse_idx_images(&buf).map_err(|e| match e {
        Error::Format { reason, .. } => format_err(path, reason),
        other => other,
    })
}

pub fn parse_idx_images(buf: &[u8]) -> Result<Vec<RawImage>> {
    if buf.len() < 16 {
        return Err(format_err(
            Path::new("<buffer>"),
            "header shorter than 16 bytes",
        ));
    }
    let magic = be_u32(buf, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            Path::new("<buffer>"),
            format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(buf, 4) as usize;
    let rows = be_u32(buf, 8) as usize;
    let cols = be_u32(buf, 12) as usize;
    if rows != cols || rows == 0 {
        return Err(format_err(
            Path::new("<buffer>"),
            format!("only square images are supported, got {rows}x{cols}"),
        ));
    }
    let expected = count * rows * cols;
    let payload = &buf[16..];
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    Ok(payload
        .chunks_exact(rows * cols)
        .map(|c| RawImage {
            side: rows,
            bytes: c.to_vec(),
        })
        .collect())
}

/// Parses an unsigned-byte rank-1 IDX label file.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let buf = read_maybe_gz(path)?;
    if buf.len() < 8 {
        return Err(format_err(path, "header shorter than 8 bytes"));
    }
    let magic = be_u32(&buf, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            path,
            format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let count = be_u32(&buf, 4) as usize;
    if buf.len() - 8 != count {
        return Err(Error::LengthMismatch {
            expected: count,
            found: buf.len() - 8,
        });
    }
    Ok(buf[8..].to_vec())
}

/// Maps a byte `v` to `v / 127.5 - 1`.
pub fn normalize(raw: &RawImage) -> ImageGrid {
    let pixels = raw.bytes.iter().map(|&v| normalize_byte(v)).collect();
    ImageGrid::from_raw(raw.side, pixels)
}

#[inline]
pub fn normalize_byte(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Inverse of [`normalize_byte`], rounding to the nearest byte.
#[inline]
pub fn denormalize_value(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn denormalize(grid: &ImageGrid) -> RawImage {
    RawImage {
        side: grid.side(),
        bytes: grid
            .pixels()
            .iter()
            .map(|&x| denormalize_value(x))
            .collect(),
    }
}

/// Images plus optional class labels (labels only feed the FID feature extractor).
#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub images: Vec<ImageGrid>,
    pub labels: Option<Vec<u8>>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// The official train and test sets of an IDX dataset directory.
#[derive(Debug, Clone)]
pub struct OfficialData {
    pub train: LabeledImages,
    pub test: LabeledImages,
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&candidate);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

fn load_labeled(dir: &Path, prefix: &str) -> Result<LabeledImages> {
    let images = load_idx_images(find_idx(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = match find_idx(dir, &format!("{prefix}-labels-idx1-ubyte")) {
        Ok(p) => Some(load_idx_labels(p)?),
        Err(_) => None,
    };
    if let Some(l) = &labels {
        if l.len() != images.len() {
            return Err(Error::LengthMismatch {
                expected: images.len(),
                found: l.len(),
            });
        }
    }
    Ok(LabeledImages {
        images: images.iter().map(normalize).collect(),
        labels,
    })
}

/// Loads `train-*` and `t10k-*` IDX files (MNIST/FashionMNIST naming) from `dir`.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<OfficialData> {
    let dir = dir.as_ref();
    Ok(OfficialData {
        train: load_labeled(dir, "train")?,
        test: load_labeled(dir, "t10k")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    OfficialTrain,
    OfficialTest,
}

/// A subset of one official set, identified by the official indices it holds.
#[derive(Debug, Clone)]
pub struct Partition {
    pub origin: Origin,
    pub indices: Vec<usize>,
    pub images: Vec<ImageGrid>,
    pub labels: Option<Vec<u8>>,
}

impl Partition {
    fn gather(origin: Origin, source: &LabeledImages, mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        let images = indices.iter().map(|&i| source.images[i].clone()).collect();
        let labels = source
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self {
            origin,
            indices,
            images,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps the first `n` images (smoke-scale runs).
    pub fn truncate(&mut self, n: usize) {
        self.indices.truncate(n);
        self.images.truncate(n);
        if let Some(l) = &mut self.labels {
            l.truncate(n);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConstraintSources {
    pub train: Partition,
    pub validation: Partition,
    pub test: Partition,
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Partition,
    pub validation: Partition,
    pub test: Partition,
    pub constraint_sources: ConstraintSources,
    pub split_seed: u64,
}

/// Number of validation images carved out of `n` official training images.
pub fn validation_count(n: usize) -> usize {
    (VALIDATION_FRACTION * n as f64).round() as usize
}

/// Number of constraint-source images taken from a set of `n` images.
pub fn constraint_source_count(n: usize) -> usize {
    n.div_ceil(CONSTRAINT_SOURCE_DIVISOR)
}

/// Splits `(kept, removed)` off the front of an already shuffled index list.
fn carve_sources(shuffled: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let k = constraint_source_count(shuffled.len());
    (shuffled[k..].to_vec(), shuffled[..k].to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub train_constraint_sources: Vec<usize>,
    pub validation_constraint_sources: Vec<usize>,
    pub test_constraint_sources: Vec<usize>,
}

/// Everything needed to rebuild a [`DatasetSplit`] from the official files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub version: u32,
    pub seed: u64,
    pub official_train_count: usize,
    pub official_test_count: usize,
    pub validation_fraction: f64,
    pub constraint_source_divisor: usize,
    /// Test constraint sources are removed from the test set used for FID reference statistics.
    pub test_constraint_sources_removed: bool,
    pub partitions: PartitionIndices,
}

fn partition_indices(n_train: usize, n_test: usize, seed: u64) -> PartitionIndices {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n_train).collect();
    perm.shuffle(&mut rng);
    let n_val = validation_count(n_train);
    let (validation, train) = perm.split_at(n_val);
    let (train, train_cs) = carve_sources(train);
    let (validation, validation_cs) = carve_sources(validation);

    let mut test_perm: Vec<usize> = (0..n_test).collect();
    test_perm.shuffle(&mut rng);
    let (test, test_cs) = carve_sources(&test_perm);

    let sorted = |mut v: Vec<usize>| {
        v.sort_unstable();
        v
    };
    PartitionIndices {
        train: sorted(train),
        validation: sorted(validation),
        test: sorted(test),
        train_constraint_sources: sorted(train_cs),
        validation_constraint_sources: sorted(validation_cs),
        test_constraint_sources: sorted(test_cs),
    }
}

/// Seeded shuffle-then-slice split of the official data (see module docs).
pub fn split_dataset(data: &OfficialData, seed: u64) -> Result<DatasetSplit> {
    if data.train.len() < MIN_SPLIT_IMAGES {
        return Err(Error::PartitionTooSmall {
            min: MIN_SPLIT_IMAGES,
            got: data.train.len(),
        });
    }
    let manifest = SplitManifest {
        version: 1,
        seed,
        official_train_count: data.train.len(),
        official_test_count: data.test.len(),
        validation_fraction: VALIDATION_FRACTION,
        constraint_source_divisor: CONSTRAINT_SOURCE_DIVISOR,
        test_constraint_sources_removed: true,
        partitions: partition_indices(data.train.len(), data.test.len(), seed),
    };
    apply_manifest(data, &manifest)
}

/// Rebuilds a split from a manifest, checking it against the official data sizes.
pub fn apply_manifest(data: &OfficialData, manifest: &SplitManifest) -> Result<DatasetSplit> {
    if manifest.official_train_count != data.train.len()
        || manifest.official_test_count != data.test.len()
    {
        return Err(Error::invalid(format!(
            "manifest expects {}/{} official images, data has {}/{}",
            manifest.official_train_count,
            manifest.official_test_count,
            data.train.len(),
            data.test.len()
        )));
    }
    let p = &manifest.partitions;
    let check = |idx: &[usize], n: usize, name: &str| -> Result<()> {
        match idx.iter().find(|&&i| i >= n) {
            Some(i) => Err(Error::invalid(format!("{name} index {i} out of range {n}"))),
            None => Ok(()),
        }
    };
    check(&p.train, data.train.len(), "train")?;
    check(&p.validation, data.train.len(), "validation")?;
    check(
        &p.train_constraint_sources,
        data.train.len(),
        "train_constraint_sources",
    )?;
    check(
        &p.validation_constraint_sources,
        data.train.len(),
        "validation_constraint_sources",
    )?;
    check(&p.test, data.test.len(), "test")?;
    check(
        &p.test_constraint_sources,
        data.test.len(),
        "test_constraint_sources",
    )?;

    use Origin::*;
    Ok(DatasetSplit {
        train: Partition::gather(OfficialTrain, &data.train, p.train.clone()),
        validation: Partition::gather(OfficialTrain, &data.train, p.validation.clone()),
        test: Partition::gather(OfficialTest, &data.test, p.test.clone()),
        constraint_sources: ConstraintSources {
            train: Partition::gather(
                OfficialTrain,
                &data.train,
                p.train_constraint_sources.clone(),
            ),
            validation: Partition::gather(
                OfficialTrain,
                &data.train,
                p.validation_constraint_sources.clone(),
            ),
            test: Partition::gather(OfficialTest, &data.test, p.test_constraint_sources.clone()),
        },
        split_seed: manifest.seed,
    })
}

impl DatasetSplit {
    pub fn manifest(
        &self,
        official_train_count: usize,
        official_test_count: usize,
    ) -> SplitManifest {
        SplitManifest {
            version: 1,
            seed: self.split_seed,
            official_train_count,
            official_test_count,
            validation_fraction: VALIDATION_FRACTION,
            constraint_source_divisor: CONSTRAINT_SOURCE_DIVISOR,
            test_constraint_sources_removed: true,
            partitions: PartitionIndices {
                train: self.train.indices.clone(),
                validation: self.validation.indices.clone(),
                test: self.test.indices.clone(),
                train_constraint_sources: self.constraint_sources.train.indices.clone(),
                validation_constraint_sources: self.constraint_sources.validation.indices.clone(),
                test_constraint_sources: self.constraint_sources.test.indices.clone(),
            },
        }
    }

    /// Caps every partition at the given sizes (used for smoke-scale experiments).
    pub fn truncate(&mut self, train: Option<usize>, eval: Option<usize>) {
        if let Some(n) = train {
            self.train.truncate(n);
            self.constraint_sources.train.truncate(n);
        }
        if let Some(n) = eval {
            self.validation.truncate(n);
            self.test.truncate(n);
            self.constraint_sources.validation.truncate(n);
            self.constraint_sources.test.truncate(n);
        }
    }
}

pub fn write_manifest(manifest: &SplitManifest, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SplitManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(count: u32, side: u32, payload: &[u8]) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        buf.extend_from_slice(&count.to_be_bytes());
        buf.extend_from_slice(&side.to_be_bytes());
        buf.extend_from_slice(&side.to_be_bytes());
        buf.extend_from_slice(payload);
        buf
    }

    #[test]
    fn parses_hand_built_idx() {
        let payload = [0, 255, 0, 255, 255, 0, 255, 0];
        let imgs = parse_idx_images(&idx_bytes(2, 2, &payload)).unwrap();
        assert_eq!(imgs.len(), 2);
        assert_eq!(imgs[0].bytes, vec![0, 255, 0, 255]);
        assert_eq!(imgs[1].bytes, vec![255, 0, 255, 0]);
        assert_eq!(imgs[0].side, 2);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut buf = idx_bytes(1, 2, &[0; 4]);
        buf[..4].copy_from_slice(&0u32.to_be_bytes());
        assert!(matches!(parse_idx_images(&buf), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_truncated_payload() {
        let buf = idx_bytes(3, 2, &[0; 8]);
        assert!(matches!(
            parse_idx_images(&buf),
            Err(Error::LengthMismatch {
                expected: 12,
                found: 8
            })
        ));
    }

    #[test]
    fn reads_gzip_files() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&idx_bytes(1, 2, &[1, 2, 3, 4])).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        let imgs = load_idx_images(&path).unwrap();
        assert_eq!(imgs[0].bytes, vec![1, 2, 3, 4]);
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize_byte(0), -1.0);
        assert_eq!(normalize_byte(255), 1.0);
        assert!((normalize_byte(51) - (-0.6)).abs() < 1e-6);
    }

    #[test]
    fn normalization_round_trips_every_byte() {
        for v in 0..=255u8 {
            let x = normalize_byte(v);
            assert!((-1.0..=1.0).contains(&x));
            assert_eq!(denormalize_value(x), v);
        }
    }

    fn toy_data(n_train: usize, n_test: usize) -> OfficialData {
        let mk = |n: usize| LabeledImages {
            images: (0..n)
                .map(|i| ImageGrid::filled(2, (i % 7) as f32 / 7.0).unwrap())
                .collect(),
            labels: Some((0..n).map(|i| (i % 10) as u8).collect()),
        };
        OfficialData {
            train: mk(n_train),
            test: mk(n_test),
        }
    }

    #[test]
    fn ten_images_split() {
        let split = split_dataset(&toy_data(10, 0), 3).unwrap();
        assert_eq!(
            split.validation.len() + split.constraint_sources.validation.len(),
            1
        );
        assert_eq!(split.constraint_sources.train.len(), 2);
        assert_eq!(split.train.len(), 7);
    }

    #[test]
    fn too_few_images() {
        assert!(matches!(
            split_dataset(&toy_data(9, 0), 0),
            Err(Error::PartitionTooSmall { got: 9, .. })
        ));
    }

    #[test]
    fn split_is_deterministic_and_manifest_reproduces_it() {
        let data = toy_data(137, 41);
        let a = split_dataset(&data, 11).unwrap();
        let b = split_dataset(&data, 11).unwrap();
        let ma = a.manifest(137, 41);
        assert_eq!(ma, b.manifest(137, 41));
        let c = split_dataset(&data, 12).unwrap();
        assert_ne!(ma.partitions, c.manifest(137, 41).partitions);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        write_manifest(&ma, &path).unwrap();
        let rebuilt = apply_manifest(&data, &read_manifest(&path).unwrap()).unwrap();
        assert_eq!(rebuilt.train.images, a.train.images);
        assert_eq!(rebuilt.test.labels, a.test.labels);
    }

    #[test]
    fn partitions_conserve_and_stay_disjoint() {
        let data = toy_data(1003, 257);
        let s = split_dataset(&data, 5).unwrap();
        let cs = &s.constraint_sources;
        let mut all: Vec<usize> = [
            &s.train.indices,
            &s.validation.indices,
            &cs.train.indices,
            &cs.validation.indices,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect();
        all.sort_unstable();
        assert_eq!(all, (0..1003).collect::<Vec<_>>());
        let mut test: Vec<usize> = s
            .test
            .indices
            .iter()
            .chain(&cs.test.indices)
            .copied()
            .collect();
        test.sort_unstable();
        assert_eq!(test, (0..257).collect::<Vec<_>>());
        assert_eq!(cs.test.len(), 52);
    }
}
