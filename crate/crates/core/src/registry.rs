//! Dynamically updatable adapter pool.
//!
//! Writers build a fresh map and swap it in under a short write lock; readers
//! clone an `Arc` to the current [`RegistrySnapshot`] and keep it as long as
//! they like. A snapshot never changes after creation.
//!
//! # On-disk layout
//!
//! A registry directory holds `manifest.json` plus one `adapter_NNNN.bin` per
//! adapter. The manifest fields appear in this order: `format`,
//! `format_version`, `version`, `d`, `num_layers`, `adapters`; each adapter
//! entry lists `id`, `task_tag`, `rank`, `alpha`, `representative_samples`,
//! `layers` (shapes) and `tensor_file`. A tensor file is the raw little-endian
//! `f64` concatenation of every layer in order, `a` (`r×d`, row-major) before
//! `b` (`d×r`, row-major).

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::{Arc, RwLock};

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_NAME: &str = "loraserve-registry";
const FORMAT_VERSION: u32 = 1;

/// One layer's low-rank factors: `a` is `r×d`, `b` is `d×r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    pub a: DenseTensor,
    pub b: DenseTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub id: String,
    pub task_tag: String,
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LoraLayer>,
    pub representative_samples: Vec<String>,
}

impl LoraAdapter {
    /// Adapter with Gaussian `A` and `B` factors, for tests and benchmarks.
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        id: impl Into<String>,
        task_tag: impl Into<String>,
        d: usize,
        num_layers: usize,
        rank: usize,
        alpha: f64,
        std: f64,
        samples: Vec<String>,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|_| LoraLayer {
                a: DenseTensor::random_normal(&[rank, d], std, rng),
                b: DenseTensor::random_normal(&[d, rank], std, rng),
            })
            .collect();
        Self {
            id: id.into(),
            task_tag: task_tag.into(),
            rank,
            alpha,
            layers,
            representative_samples: samples,
        }
    }

    /// Effective multiplier `alpha / rank` applied to `B·A`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self, d: usize, num_layers: usize) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("adapter id must be non-empty".into()));
        }
        if self.rank == 0 {
            return Err(Error::Validation(format!("adapter `{}` has rank 0", self.id)));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Validation(format!(
                "adapter `{}` alpha must be positive, got {}",
                self.id, self.alpha
            )));
        }
        if self.representative_samples.is_empty() {
            return Err(Error::Validation(format!(
                "adapter `{}` carries no representative samples",
                self.id
            )));
        }
        if self.layers.len() != num_layers {
            return Err(Error::Validation(format!(
                "adapter `{}` has {} layers, backbone has {num_layers}",
                self.id,
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.a.shape() != [self.rank, d] || layer.b.shape() != [d, self.rank] {
                return Err(Error::Validation(format!(
                    "adapter `{}` layer {i}: expected A {:?} and B {:?}, got {:?} and {:?}",
                    self.id,
                    [self.rank, d],
                    [d, self.rank],
                    layer.a.shape(),
                    layer.b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Hash over metadata and the exact bit patterns of every factor.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.id.hash(&mut h);
        self.task_tag.hash(&mut h);
        self.rank.hash(&mut h);
        self.alpha.to_bits().hash(&mut h);
        self.representative_samples.hash(&mut h);
        for layer in &self.layers {
            for v in layer.a.data().iter().chain(layer.b.data()) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Immutable view of the pool at one version.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrySnapshot {
    version: u64,
    d: usize,
    num_layers: usize,
    adapters: IndexMap<String, Arc<LoraAdapter>>,
}

impl RegistrySnapshot {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&Arc<LoraAdapter>> {
        self.adapters
            .get(id)
            .ok_or_else(|| Error::NotFound(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.adapters.contains_key(id)
    }

    /// Ids in registration order.
    pub fn ids(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &Arc<LoraAdapter>> {
        self.adapters.values()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.version.hash(&mut h);
        for a in self.adapters.values() {
            a.checksum().hash(&mut h);
        }
        h.finish()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.adapters.len());
        for (i, adapter) in self.adapters.values().enumerate() {
            let file = format!("adapter_{i:04}.bin");
            let mut bytes = Vec::new();
            for layer in &adapter.layers {
                for v in layer.a.data().iter().chain(layer.b.data()) {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
            }
            let path = dir.join(&file);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
            entries.push(ManifestAdapter {
                id: adapter.id.clone(),
                task_tag: adapter.task_tag.clone(),
                rank: adapter.rank,
                alpha: adapter.alpha,
                representative_samples: adapter.representative_samples.clone(),
                layers: adapter
                    .layers
                    .iter()
                    .map(|l| LayerShape {
                        a: l.a.shape().to_vec(),
                        b: l.b.shape().to_vec(),
                    })
                    .collect(),
                tensor_file: file,
            });
        }
        let manifest = Manifest {
            format: FORMAT_NAME.into(),
            format_version: FORMAT_VERSION,
            version: self.version,
            d: self.d,
            num_layers: self.num_layers,
            adapters: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a registry directory. Nothing is returned unless every file parses.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = parse_json(&manifest_path, &text)?;
        if manifest.format != FORMAT_NAME || manifest.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                path: manifest_path,
                offset: 0,
                message: format!(
                    "unsupported format {} v{}",
                    manifest.format, manifest.format_version
                ),
            });
        }
        let mut adapters = IndexMap::with_capacity(manifest.adapters.len());
        for entry in manifest.adapters {
            let path = dir.join(&entry.tensor_file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let adapter = decode_adapter(entry, &path, &bytes)?;
            adapter.validate(manifest.d, manifest.num_layers)?;
            if adapters.contains_key(&adapter.id) {
                return Err(Error::Conflict(adapter.id));
            }
            adapters.insert(adapter.id.clone(), Arc::new(adapter));
        }
        Ok(Self {
            version: manifest.version,
            d: manifest.d,
            num_layers: manifest.num_layers,
            adapters,
        })
    }
}

fn decode_adapter(entry: ManifestAdapter, path: &Path, bytes: &[u8]) -> Result<LoraAdapter> {
    let parse_err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let expected: usize = entry
        .layers
        .iter()
        .map(|l| l.a.iter().product::<usize>() + l.b.iter().product::<usize>())
        .sum::<usize>()
        * 8;
    if bytes.len() != expected {
        return Err(parse_err(
            bytes.len().min(expected),
            format!(
                "tensor payload is {} bytes, manifest requires {expected}",
                bytes.len()
            ),
        ));
    }
    let mut floats = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut take = |shape: &[usize]| -> Result<DenseTensor> {
        let n = shape.iter().product();
        DenseTensor::new(shape.to_vec(), floats.by_ref().take(n).collect())
    };
    let mut layers = Vec::with_capacity(entry.layers.len());
    for shape in &entry.layers {
        let a = take(&shape.a)?;
        let b = take(&shape.b)?;
        layers.push(LoraLayer { a, b });
    }
    Ok(LoraAdapter {
        id: entry.id,
        task_tag: entry.task_tag,
        rank: entry.rank,
        alpha: entry.alpha,
        layers,
        representative_samples: entry.representative_samples,
    })
}

/// Deserializes JSON, reporting failures as a byte offset into `text`.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    format_version: u32,
    version: u64,
    d: usize,
    num_layers: usize,
    adapters: Vec<ManifestAdapter>,
}

#[derive(Serialize, Deserialize)]
struct ManifestAdapter {
    id: String,
    task_tag: String,
    rank: usize,
    alpha: f64,
    representative_samples: Vec<String>,
    layers: Vec<LayerShape>,
    tensor_file: String,
}

#[derive(Serialize, Deserialize)]
struct LayerShape {
    a: Vec<usize>,
    b: Vec<usize>,
}

/// Thread-safe adapter pool handing out copy-on-write snapshots.
#[derive(Debug)]
pub struct Registry {
    current: RwLock<Arc<RegistrySnapshot>>,
}

impl Registry {
    /// Empty pool for a backbone of width `d` with `num_layers` attach points.
    pub fn new(d: usize, num_layers: usize) -> Self {
        Self::from_snapshot(RegistrySnapshot {
            version: 0,
            d,
            num_layers,
            adapters: IndexMap::new(),
        })
    }

    pub fn from_snapshot(snapshot: RegistrySnapshot) -> Self {
        Self {
            current: RwLock::new(Arc::new(snapshot)),
        }
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        RegistrySnapshot::load(dir).map(Self::from_snapshot)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.snapshot().save(dir)
    }

    pub fn snapshot(&self) -> Arc<RegistrySnapshot> {
        Arc::clone(&self.current.read().expect("registry lock poisoned"))
    }

    pub fn version(&self) -> u64 {
        self.snapshot().version
    }

    pub fn len(&self) -> usize {
        self.snapshot().len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshot().is_empty()
    }

    pub fn list(&self) -> Vec<String> {
        self.snapshot().ids()
    }

    pub fn get(&self, id: &str) -> Result<Arc<LoraAdapter>> {
        self.snapshot().get(id).cloned()
    }

    pub fn register(&self, adapter: LoraAdapter) -> Result<u64> {
        self.mutate(|next| {
            if next.adapters.contains_key(&adapter.id) {
                return Err(Error::Conflict(adapter.id.clone()));
            }
            adapter.validate(next.d, next.num_layers)?;
            next.adapters.insert(adapter.id.clone(), Arc::new(adapter));
            Ok(())
        })
    }

    pub fn remove(&self, id: &str) -> Result<u64> {
        self.mutate(|next| {
            next.adapters
                .shift_remove(id)
                .map(|_| ())
                .ok_or_else(|| Error::NotFound(id.to_string()))
        })
    }

    fn mutate(&self, f: impl FnOnce(&mut RegistrySnapshot) -> Result<()>) -> Result<u64> {
        let mut guard = self.current.write().expect("registry lock poisoned");
        let mut next = RegistrySnapshot::clone(&guard);
        f(&mut next)?;
        next.version = guard.version + 1;
        let version = next.version;
        *guard = Arc::new(next);
        Ok(version)
    }
}
