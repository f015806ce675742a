//! Checkpoint directories: `manifest.json` plus one little-endian f32 file per
//! parameter array. The mean latent is kept in f64.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Embedder, Encoder, GeneratorBundle, LatentCode, MapKind, MappingNet};
use crate::error::{Error, Result};
use crate::layers::Sequential;
use crate::rng::substream;

pub const CHECKPOINT_VERSION: u32 = 2;
const MANIFEST: &str = "manifest.json";
const MEAN_LATENT: &str = "mean_latent";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: ArchConfig,
    pub seed: u64,
    pub mapping: MapKind,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, Vec<usize>>,
}

/// Everything a pretraining run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSet {
    pub generator: GeneratorBundle<f32>,
    pub encoder: Encoder<f32>,
    pub embedder: Embedder<f32>,
    pub mean_latent: Option<LatentCode>,
    pub seed: u64,
    /// Free-form record of how the nets were made (training config, history summary).
    pub meta: serde_json::Value,
}

fn prefixed<'a>(prefix: &str, net: &'a Sequential<f32>) -> Vec<(String, Vec<usize>, &'a [f32])> {
    net.named_params()
        .into_iter()
        .zip(net.param_shapes())
        .map(|((name, data), shape)| (format!("{prefix}.{name}"), shape, data))
        .collect()
}

fn prefixed_mut<'a>(prefix: &str, net: &'a mut Sequential<f32>) -> Vec<(String, Vec<usize>, &'a mut Vec<f32>)> {
    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| format!("{prefix}.{n}")).collect();
    let shapes = net.param_shapes();
    names
        .into_iter()
        .zip(shapes)
        .zip(net.params_mut())
        .map(|((n, s), p)| (n, s, p))
        .collect()
}

impl NetSet {
    fn arrays(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let g = &self.generator;
        let mut out = Vec::new();
        if let MappingNet::Mlp(net) = &g.mapping {
            out.extend(prefixed("map", net));
        }
        out.extend(prefixed("synth", &g.synthesis));
        out.extend(prefixed("render", &g.renderer));
        out.extend(prefixed("encoder", &self.encoder.net));
        out.extend(prefixed("embedder", &self.embedder.net));
        out
    }

    pub fn manifest(&self) -> CheckpointManifest {
        let mut arrays: BTreeMap<String, Vec<usize>> =
            self.arrays().into_iter().map(|(n, s, _)| (n, s)).collect();
        if let Some(m) = &self.mean_latent {
            arrays.insert(MEAN_LATENT.into(), vec![m.dim()]);
        }
        CheckpointManifest {
            version: CHECKPOINT_VERSION,
            config: self.generator.config.clone(),
            seed: self.seed,
            mapping: self.generator.mapping.kind(),
            meta: self.meta.clone(),
            arrays,
        }
    }
}

fn write_le<const N: usize>(path: &Path, data: impl ExactSizeIterator<Item = [u8; N]>) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * N);
    for v in data {
        bytes.extend_from_slice(&v);
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_le<const N: usize>(path: &Path, expected_len: usize) -> Result<Vec<[u8; N]>> {
    let bytes = fs::read(path).map_err(|e| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: format!("cannot read array file: {e}"),
    })?;
    if bytes.len() != expected_len * N {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("expected {} bytes, found {}", expected_len * N, bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(N).map(|c| c.try_into().expect("exact chunk")).collect())
}

fn read_f32(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    Ok(read_le::<4>(path, expected_len)?.into_iter().map(f32::from_le_bytes).collect())
}

fn array_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

pub fn save_checkpoint(nets: &NetSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, _, data) in nets.arrays() {
        write_le(&array_path(dir, &name), data.iter().map(|v| v.to_le_bytes()))?;
    }
    if let Some(m) = &nets.mean_latent {
        write_le(&array_path(dir, MEAN_LATENT), m.0.iter().map(|v| v.to_le_bytes()))?;
    }
    let json = serde_json::to_string_pretty(&nets.manifest()).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path,
            expected: CHECKPOINT_VERSION,
            found,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Manifest {
        path,
        reason: e.to_string(),
    })
}

/// Checks that every array file exists and holds exactly `4 * prod(shape)` bytes.
pub fn validate_checkpoint(dir: &Path) -> Result<CheckpointManifest> {
    let manifest = read_manifest(dir)?;
    for (name, shape) in &manifest.arrays {
        let path = array_path(dir, name);
        let len = fs::metadata(&path)
            .map_err(|e| Error::CorruptCheckpoint {
                path: path.clone(),
                reason: format!("missing array file: {e}"),
            })?
            .len();
        let want = 4 * shape.iter().product::<usize>() as u64;
        if len != want {
            return Err(Error::CorruptCheckpoint {
                path,
                reason: format!("expected {want} bytes, found {len}"),
            });
        }
    }
    Ok(manifest)
}

/// Loads nets using the architecture recorded in the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<NetSet> {
    let manifest = read_manifest(dir)?;
    let arch = manifest.config.clone();
    load_with(dir, manifest, arch)
}

/// Loads into networks built from `arch`; any array whose stored shape
/// disagrees is reported by name.
pub fn load_checkpoint_as(dir: &Path, arch: &ArchConfig) -> Result<NetSet> {
    let manifest = read_manifest(dir)?;
    load_with(dir, manifest, arch.clone())
}

fn load_with(dir: &Path, manifest: CheckpointManifest, arch: ArchConfig) -> Result<NetSet> {
    // weights are overwritten below, the init stream is irrelevant
    let mut rng = substream(0, "checkpoint-shell", 0);
    let mut generator = GeneratorBundle::<f32>::new(arch.clone(), manifest.mapping, &mut rng)?;
    let mut encoder = Encoder::<f32>::new(&arch, &mut rng);
    let mut embedder = Embedder::<f32>::new(&arch, &mut rng);
    {
        let mut slots = Vec::new();
        if let MappingNet::Mlp(net) = &mut generator.mapping {
            slots.extend(prefixed_mut("map", net));
        }
        slots.extend(prefixed_mut("synth", &mut generator.synthesis));
        slots.extend(prefixed_mut("render", &mut generator.renderer));
        slots.extend(prefixed_mut("encoder", &mut encoder.net));
        slots.extend(prefixed_mut("embedder", &mut embedder.net));
        for (name, shape, dst) in slots {
            let stored = manifest.arrays.get(&name).ok_or_else(|| Error::CorruptCheckpoint {
                path: dir.join(MANIFEST),
                reason: format!("array `{name}` missing from manifest"),
            })?;
            if *stored != shape {
                return Err(Error::ShapeMismatch {
                    array: name,
                    expected: shape,
                    found: stored.clone(),
                });
            }
            *dst = read_f32(&array_path(dir, &name), dst.len())?;
        }
    }
    let mean_latent = match manifest.arrays.get(MEAN_LATENT) {
        Some(shape) => {
            if *shape != vec![arch.w_dim] {
                return Err(Error::ShapeMismatch {
                    array: MEAN_LATENT.into(),
                    expected: vec![arch.w_dim],
                    found: shape.clone(),
                });
            }
            let data = read_le::<8>(&array_path(dir, MEAN_LATENT), arch.w_dim)?;
            Some(LatentCode(data.into_iter().map(f64::from_le_bytes).collect()))
        }
        None => None,
    };
    Ok(NetSet {
        generator,
        encoder,
        embedder,
        mean_latent,
        seed: manifest.seed,
        meta: manifest.meta,
    })
}
