//! Versioned binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON header,
//! then every tensor as little-endian `f32` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Discriminator, Generator};

const MAGIC: &[u8; 8] = b"PIXGANCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub tensors: Vec<Vec<f32>>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| self.tensors[i].as_slice())
    }
}

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn write_container(
    path: impl AsRef<Path>,
    kind: &str,
    metadata: serde_json::Value,
    tensors: &[(String, &[f32])],
) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        kind: kind.to_string(),
        metadata,
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                len: t.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| ck_err(path, "file too short"))?;
    if &magic != MAGIC {
        return Err(ck_err(path, "not a checkpoint (bad magic)"));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)
        .map_err(|_| ck_err(path, "truncated version"))?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(ck_err(
            path,
            format!("unsupported format version {version}"),
        ));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| ck_err(path, "truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| ck_err(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| ck_err(path, format!("bad header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let mut bytes = vec![0u8; entry.len * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| ck_err(path, format!("truncated tensor {}", entry.name)))?;
        tensors.push(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        );
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(ck_err(path, "trailing bytes after last tensor"));
    }
    Ok(Container { header, tensors })
}

/// Copies tensors by name into `targets`, requiring an exact name and length match.
pub(crate) fn restore(
    path: &Path,
    c: &Container,
    prefix: &str,
    targets: Vec<(String, &mut Vec<f32>)>,
) -> Result<()> {
    for (name, dst) in targets {
        let full = format!("{prefix}{name}");
        let src = c
            .tensor(&full)
            .ok_or_else(|| ck_err(path, format!("missing tensor {full}")))?;
        if src.len() != dst.len() {
            return Err(ck_err(
                path,
                format!(
                    "tensor {full} has {} values, expected {}",
                    src.len(),
                    dst.len()
                ),
            ));
        }
        dst.copy_from_slice(src);
    }
    Ok(())
}

pub const GAN_KIND: &str = "pixgan.gan";

/// Metadata stored alongside GAN weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanMeta {
    pub architecture: Architecture,
    pub seed: u64,
    pub lambda: f64,
    pub epoch: usize,
    pub variant: String,
}

pub fn save_gan(
    path: impl AsRef<Path>,
    g: &Generator,
    d: Option<&Discriminator>,
    meta: &GanMeta,
) -> Result<()> {
    let mut tensors: Vec<(String, &[f32])> = g
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("generator.{n}"), t.as_slice()))
        .collect();
    if let Some(d) = d {
        tensors.extend(
            d.named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("discriminator.{n}"), t.as_slice())),
        );
    }
    write_container(path, GAN_KIND, serde_json::to_value(meta)?, &tensors)
}

fn open_gan(path: &Path) -> Result<(Container, GanMeta)> {
    let c = read_container(path)?;
    if c.header.kind != GAN_KIND {
        return Err(ck_err(
            path,
            format!("checkpoint kind {:?} is not a GAN", c.header.kind),
        ));
    }
    let meta: GanMeta = serde_json::from_value(c.header.metadata.clone())
        .map_err(|e| ck_err(path, format!("bad metadata: {e}")))?;
    Ok((c, meta))
}

pub fn load_generator(path: impl AsRef<Path>) -> Result<(Generator, GanMeta)> {
    let path = path.as_ref();
    let (c, meta) = open_gan(path)?;
    let mut g = Generator::new(meta.architecture, &mut ChaCha8Rng::seed_from_u64(0))?;
    restore(path, &c, "generator.", g.named_tensors_mut())?;
    Ok((g, meta))
}

pub fn load_discriminator(path: impl AsRef<Path>) -> Result<(Discriminator, GanMeta)> {
    let path = path.as_ref();
    let (c, meta) = open_gan(path)?;
    let mut d = Discriminator::new(meta.architecture, &mut ChaCha8Rng::seed_from_u64(0))?;
    restore(path, &c, "discriminator.", d.named_tensors_mut())?;
    Ok((d, meta))
}
