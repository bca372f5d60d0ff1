//! Checkpoint archive.
//!
//! ```text
//! reconglgan-ckpt-v1\n
//! <u64 LE header length><header JSON>
//! <tensor bytes, little endian, in header order>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeneratorConfig, GeneratorNet, Norm, SegNet};
use crate::error::{Error, Result};
use crate::nn::{Module, Scalar};

pub const CHECKPOINT_VERSION: &str = "reconglgan-ckpt-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: String,
    /// What the archive holds, e.g. `generator`, `discriminator`, `segnet`.
    pub kind: String,
    /// Architecture hyperparameters, free-form.
    pub arch: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar, M: Module<T>>(
    path: &Path,
    module: &M,
    kind: &str,
    arch: serde_json::Value,
    seed: u64,
    epoch: usize,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut body = Vec::new();
    module.visit("", &mut |name, p| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
        });
        for &v in p.value.iter() {
            v.write_le(&mut body);
        }
    });
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION.to_string(),
        kind: kind.to_string(),
        arch,
        seed,
        epoch,
        dtype: T::DTYPE.to_string(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut file = fs::File::create(path)?;
    file.write_all(CHECKPOINT_VERSION.as_bytes())?;
    file.write_all(b"\n")?;
    file.write_all(&(json.len() as u64).to_le_bytes())?;
    file.write_all(&json)?;
    file.write_all(&body)?;
    Ok(())
}

fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let magic = format!("{CHECKPOINT_VERSION}\n");
    let rest = bytes
        .strip_prefix(magic.as_bytes())
        .ok_or_else(|| Error::Checkpoint(format!("not a {CHECKPOINT_VERSION} archive")))?;
    if rest.len() < 8 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
    let rest = &rest[8..];
    if rest.len() < len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..len])?;
    Ok((header, &rest[len..]))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(split(&bytes)?.0)
}

/// Loads parameters into an already-constructed module of matching layout.
pub fn load_checkpoint<T: Scalar, M: Module<T>>(path: &Path, module: &mut M) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (header, body) = split(&bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("dtype {} does not match {}", header.dtype, T::DTYPE)));
    }
    let mut expected = Vec::new();
    module.visit("", &mut |name, p| expected.push((name.to_string(), p.value.shape().to_vec())));
    let stored: Vec<_> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if stored != expected {
        return Err(Error::Checkpoint("parameter layout does not match the network".into()));
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if body.len() != total * T::width() {
        return Err(Error::Checkpoint(format!("expected {} tensor bytes, found {}", total * T::width(), body.len())));
    }
    let mut chunks = body.chunks_exact(T::width());
    module.visit_mut("", &mut |_, p| {
        for v in p.value.iter_mut() {
            *v = T::read_le(chunks.next().expect("length checked"));
        }
    });
    Ok(header)
}

fn arch<A: serde::de::DeserializeOwned>(header: &CheckpointHeader, kind: &str) -> Result<A> {
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    Ok(serde_json::from_value(header.arch.clone())?)
}

/// Rebuilds a generator from the architecture recorded in its checkpoint.
pub fn load_generator(path: &Path) -> Result<(GeneratorNet<f32>, CheckpointHeader)> {
    let header = read_header(path)?;
    let config: GeneratorConfig = arch(&header, "generator")?;
    let mut net = GeneratorNet::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_checkpoint(path, &mut net)?;
    Ok((net, header))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegArch {
    pub depth: usize,
    pub base_channels: usize,
    #[serde(default)]
    pub norm: Norm,
}

pub fn save_segnet(path: &Path, net: &SegNet<f32>, seed: u64, epoch: usize) -> Result<()> {
    let arch = SegArch {
        depth: net.unet.depth,
        base_channels: net.unet.base_channels,
        norm: net.unet.norm,
    };
    save_checkpoint(path, net, "segnet", serde_json::to_value(arch)?, seed, epoch)
}

pub fn load_segnet(path: &Path) -> Result<(SegNet<f32>, CheckpointHeader)> {
    let header = read_header(path)?;
    let a: SegArch = arch(&header, "segnet")?;
    let mut net = SegNet::new(a.depth, a.base_channels, a.norm, &mut ChaCha8Rng::seed_from_u64(0))?;
    load_checkpoint(path, &mut net)?;
    Ok((net, header))
}
