//! Checkpoint file format.
//!
//! Layout: the magic `S4DCKPT\0`, a `u32` format version, a `u64` manifest
//! length, the manifest as compact JSON, then every tensor as little-endian
//! `f32` in manifest order. All integers are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use s4dec_core::model::Seq2Seq;
use s4dec_core::params::ParamStore;
use s4dec_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"S4DCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub step: u64,
    /// Validation metric at save time, if one was measured.
    pub metric: Option<f64>,
    pub config: RunConfig,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

impl Checkpoint {
    /// Snapshot of every parameter in store order.
    pub fn from_store(config: &RunConfig, step: u64, metric: Option<f64>, store: &ParamStore<f32>) -> Self {
        let (entries, tensors) = store
            .iter()
            .map(|(_, p)| {
                let entry = TensorEntry {
                    name: p.name.clone(),
                    shape: p.value().shape().to_vec(),
                    dtype: "f32".into(),
                };
                (entry, p.value().clone())
            })
            .unzip();
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                config_hash: config.hash(),
                step,
                metric: metric.filter(|m| m.is_finite()),
                config: config.clone(),
                tensors: entries,
            },
            tensors,
        }
    }

    /// Rebuilds the model from the stored config and loads every tensor by
    /// name. Names or shapes that disagree with the model are an error.
    pub fn restore(&self) -> Result<(Seq2Seq, ParamStore<f32>)> {
        let mut store = ParamStore::new();
        let model = Seq2Seq::new(&mut store, self.manifest.config.model_config(), 0)?;
        self.load_into(&mut store)?;
        Ok((model, store))
    }

    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.tensors.len() {
            return Err(HarnessError::Mismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (entry, t) in self.manifest.tensors.iter().zip(&self.tensors) {
            let id = store
                .find(&entry.name)
                .ok_or_else(|| HarnessError::Mismatch(format!("model has no tensor {}", entry.name)))?;
            if store.get(id).shape() != t.shape() {
                return Err(HarnessError::Mismatch(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    entry.name,
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest).expect("manifest serializes");
        let blob: usize = self.tensors.iter().map(|t| t.numel() * 4).sum();
        let mut out = Vec::with_capacity(20 + manifest.len() + blob);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| HarnessError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let mend = usize::try_from(mlen)
            .ok()
            .and_then(|m| m.checked_add(20))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("manifest length exceeds file"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..mend])?;
        if manifest.format_version != version {
            return Err(corrupt("manifest and header versions differ"));
        }
        if let Some(e) = manifest.tensors.iter().find(|e| e.dtype != "f32") {
            return Err(HarnessError::Checkpoint(format!(
                "{}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let expected: usize = manifest.tensors.iter().map(|e| e.numel() * 4).sum();
        let blob = &bytes[mend..];
        if blob.len() != expected {
            return Err(HarnessError::Checkpoint(format!(
                "blob has {} bytes, manifest describes {expected}",
                blob.len()
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut at = 0;
        for e in &manifest.tensors {
            let n = e.numel() * 4;
            let data = blob[at..at + n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(Tensor::new(&e.shape, data)?);
            at += n;
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Elementwise mean of every tensor. Manifests must list the same names
/// and shapes in the same order. The result keeps the first checkpoint's
/// config; step and metric are kept when all inputs agree, otherwise the
/// latest step and the mean metric are used.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| HarnessError::ManifestMismatch("no checkpoints to average".into()))?;
    for (i, c) in ckpts.iter().enumerate().skip(1) {
        if c.manifest.tensors != first.manifest.tensors {
            return Err(HarnessError::ManifestMismatch(format!(
                "checkpoint {i} lists different tensors than checkpoint 0"
            )));
        }
    }
    let k = ckpts.len() as f64;
    let tensors = first
        .tensors
        .iter()
        .enumerate()
        .map(|(ti, t)| {
            // f64 sums of f32 values are exact for any realistic k, so
            // identical inputs average to themselves bit for bit.
            let mut acc = vec![0f64; t.numel()];
            for c in ckpts {
                for (a, v) in acc.iter_mut().zip(c.tensors[ti].data()) {
                    *a += f64::from(*v);
                }
            }
            Tensor::new(t.shape(), acc.into_iter().map(|a| (a / k) as f32).collect())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let same_step = ckpts.iter().all(|c| c.manifest.step == first.manifest.step);
    let same_metric = ckpts.iter().all(|c| c.manifest.metric == first.manifest.metric);
    let metric = if same_metric {
        first.manifest.metric
    } else {
        let ms: Option<Vec<f64>> = ckpts.iter().map(|c| c.manifest.metric).collect();
        ms.map(|m| m.iter().sum::<f64>() / k)
    };
    Ok(Checkpoint {
        manifest: Manifest {
            step: if same_step {
                first.manifest.step
            } else {
                ckpts.iter().map(|c| c.manifest.step).max().unwrap_or(0)
            },
            metric,
            ..first.manifest.clone()
        },
        tensors,
    })
}

/// Loads and averages checkpoint files.
pub fn average_files<P: AsRef<Path>>(paths: &[P]) -> Result<Checkpoint> {
    let ckpts = paths
        .iter()
        .map(|p| Checkpoint::load(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    average_checkpoints(&ckpts)
}
