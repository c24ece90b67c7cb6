//! Conditioned generation from a user constraint map, with PNG output and a per-image
//! satisfaction report.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constraints::{constraint_mse, satisfaction_map, ConstraintMap};
use crate::data::{denormalize, normalize, RawImage};
use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::metrics::generate_for_maps;
use crate::model::Generator;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub file: String,
    /// Computed on the generator output before 8-bit quantization.
    pub constraint_mse: f64,
    pub satisfied: usize,
    pub unsatisfied: usize,
    /// `.` unconstrained, `+` squared error below ε, `x` otherwise.
    pub satisfaction: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub seed: u64,
    pub epsilon: f64,
    pub constraints: Vec<(usize, usize, f32)>,
    pub images: Vec<ImageReport>,
}

pub fn write_png(image: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let raw = denormalize(image);
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, raw.side as u32, raw.side as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer
        .write_image_data(&raw.bytes)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    writer
        .finish()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Reads an 8-bit grayscale square PNG back into `[-1, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| bad("image too large".into()))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| bad(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(bad(format!(
            "expected 8-bit grayscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    if info.width != info.height {
        return Err(bad(format!(
            "expected a square image, got {}x{}",
            info.width, info.height
        )));
    }
    buf.truncate(info.buffer_size());
    Ok(normalize(&RawImage {
        side: info.width as usize,
        bytes: buf,
    }))
}

/// Generates `count` samples for `map` with distinct latent vectors drawn from `seed`,
/// writing `sample-NNN.png`, `report.json` and `report.txt` into `out_dir`.
pub fn generate_images(
    g: &Generator,
    map: &ConstraintMap,
    count: usize,
    seed: u64,
    epsilon: f64,
    out_dir: &Path,
) -> Result<GenerationReport> {
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    if map.side() != g.arch.side {
        return Err(Error::dim(format!(
            "constraint map is {}x{}, generator produces {}x{}",
            map.side(),
            map.side(),
            g.arch.side,
            g.arch.side
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let samples = generate_for_maps(g, std::slice::from_ref(map), count, seed)?;
    let mut images = Vec::with_capacity(count);
    for (i, sample) in samples.iter().enumerate() {
        let file = format!("sample-{i:03}.png");
        write_png(sample, out_dir.join(&file))?;
        let sat = satisfaction_map(map, sample, epsilon)?;
        images.push(ImageReport {
            file,
            constraint_mse: if map.count() == 0 {
                0.0
            } else {
                constraint_mse(map, sample)?
            },
            satisfied: sat.satisfied(),
            unsatisfied: sat.unsatisfied(),
            satisfaction: sat.render(),
        });
    }
    let report = GenerationReport {
        seed,
        epsilon,
        constraints: map.triples(),
        images,
    };
    serde_json::to_writer_pretty(File::create(out_dir.join(REPORT_JSON))?, &report)?;
    std::fs::write(out_dir.join(REPORT_TEXT), render_report(&report))?;
    Ok(report)
}

fn render_report(r: &GenerationReport) -> String {
    let mut s = format!(
        "seed {}, {} constraints, epsilon {}\n",
        r.seed,
        r.constraints.len(),
        r.epsilon
    );
    for img in &r.images {
        s.push_str(&format!(
            "\n{}: constraint MSE {:.6}, satisfied {}/{}\n",
            img.file,
            img.constraint_mse,
            img.satisfied,
            img.satisfied + img.unsatisfied
        ));
        for line in &img.satisfaction {
            s.push_str(line);
            s.push('\n');
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn generator() -> Generator {
        let arch = Architecture {
            side: 8,
            latent_dim: 3,
            g_dense_channels: 4,
            g_filters: [4, 3],
            d_filters: [3, 4],
            ..Architecture::default()
        };
        Generator::new(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageGrid::new(4, (0..16).map(|i| i as f32 / 8.0 - 1.0).collect()).unwrap();
        let p = dir.path().join("x.png");
        write_png(&img, &p).unwrap();
        let back = read_png(&p).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn two_samples_differ_and_share_constraint_locations() {
        let dir = tempfile::tempdir().unwrap();
        let map = ConstraintMap::from_triples(8, &[(1, 1, 0.5), (6, 2, -1.0)]).unwrap();
        let r = generate_images(&generator(), &map, 2, 11, 0.1, dir.path()).unwrap();
        assert_eq!(r.images.len(), 2);
        let a = read_png(dir.path().join(&r.images[0].file)).unwrap();
        let b = read_png(dir.path().join(&r.images[1].file)).unwrap();
        assert_ne!(a, b);
        let marks = |img: &ImageReport| -> Vec<(usize, usize)> {
            img.satisfaction
                .iter()
                .enumerate()
                .flat_map(|(i, row)| {
                    row.chars()
                        .enumerate()
                        .filter(|c| c.1 != '.')
                        .map(move |(j, _)| (i, j))
                })
                .collect()
        };
        assert_eq!(marks(&r.images[0]), vec![(1, 1), (6, 2)]);
        assert_eq!(marks(&r.images[0]), marks(&r.images[1]));
        assert!(dir.path().join(REPORT_TEXT).is_file());
        let json: GenerationReport =
            serde_json::from_slice(&std::fs::read(dir.path().join(REPORT_JSON)).unwrap()).unwrap();
        assert_eq!(json, r);
    }

    #[test]
    fn mismatched_side_and_zero_count_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = generator();
        let small = ConstraintMap::from_triples(4, &[(0, 0, 0.0)]).unwrap();
        assert!(matches!(
            generate_images(&g, &small, 1, 0, 0.1, dir.path()),
            Err(Error::Dimension(_))
        ));
        let ok = ConstraintMap::from_triples(8, &[(0, 0, 0.0)]).unwrap();
        assert!(generate_images(&g, &ok, 0, 0, 0.1, dir.path()).is_err());
    }
}
