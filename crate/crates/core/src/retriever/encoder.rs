//! Instructed text encoder: token table, mean pooling, linear projection, L2 norm.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::parse_json;
use crate::tensor::DenseTensor;

pub const UNK_TOKEN: &str = "<unk>";
const CHECKPOINT_MANIFEST: &str = "encoder.json";
const CHECKPOINT_PAYLOAD: &str = "encoder.bin";
const FORMAT_NAME: &str = "loraserve-encoder";

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Unit-norm dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Scales `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Validation(format!(
                "cannot normalize a vector of norm {norm}"
            )));
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub ids: Vec<usize>,
    pub pooled: Vec<f64>,
    pub norm: f64,
    pub unit: Vec<f64>,
}

/// Gradient buffers matching [`Encoder`] parameters. Token rows are sparse.
#[derive(Debug, Clone, Default)]
pub struct EncoderGrads {
    pub token_rows: BTreeMap<usize, Vec<f64>>,
    pub projection: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    vocab: IndexMap<String, usize>,
    token_table: DenseTensor,
    projection: DenseTensor,
    seed: u64,
}

impl Encoder {
    /// Builds a closed vocabulary from `corpus` (plus the UNK row at index 0) and
    /// initialises token rows and projection with seeded Gaussians.
    pub fn new<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        hidden: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Self {
        let mut vocab = IndexMap::new();
        vocab.insert(UNK_TOKEN.to_string(), 0);
        for text in corpus {
            for tok in tokenize(text) {
                let next = vocab.len();
                vocab.entry(tok).or_insert(next);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let token_table = DenseTensor::random_normal(&[vocab.len(), hidden], 1.0, &mut rng);
        let projection = DenseTensor::random_normal(
            &[hidden, embed_dim],
            1.0 / (hidden as f64).sqrt(),
            &mut rng,
        );
        Self {
            vocab,
            token_table,
            projection,
            seed,
        }
    }

    /// Encoder with explicit parameters; `vocab` lists tokens by row index and
    /// must start with [`UNK_TOKEN`].
    pub fn from_parts(
        vocab: Vec<String>,
        token_table: DenseTensor,
        projection: DenseTensor,
        seed: u64,
    ) -> Result<Self> {
        if vocab.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::Validation(format!(
                "vocabulary must start with {UNK_TOKEN}"
            )));
        }
        let (v, h) = token_table.dims2()?;
        let (h2, _) = projection.dims2()?;
        if v != vocab.len() || h != h2 {
            return Err(Error::Dimension(format!(
                "token table {:?} / projection {:?} do not match vocabulary of {}",
                token_table.shape(),
                projection.shape(),
                vocab.len()
            )));
        }
        let mut map = IndexMap::with_capacity(vocab.len());
        for (i, tok) in vocab.into_iter().enumerate() {
            if map.insert(tok.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token `{tok}`")));
            }
        }
        Ok(Self {
            vocab: map,
            token_table,
            projection,
            seed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn hidden(&self) -> usize {
        self.token_table.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.shape()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_table(&self) -> &DenseTensor {
        &self.token_table
    }

    pub fn projection(&self) -> &DenseTensor {
        &self.projection
    }

    pub fn token_table_mut(&mut self) -> &mut DenseTensor {
        &mut self.token_table
    }

    pub fn projection_mut(&mut self) -> &mut DenseTensor {
        &mut self.projection
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.vocab.get(token).copied().unwrap_or(0)
    }

    /// Token ids of `instruction ⊕ text`. Fails when `text` has no tokens.
    pub fn token_ids(&self, instruction: &str, text: &str) -> Result<Vec<usize>> {
        let body = tokenize(text);
        if body.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(tokenize(instruction)
            .iter()
            .chain(&body)
            .map(|t| self.token_id(t))
            .collect())
    }

    pub fn embed_text(&self, instruction: &str, text: &str) -> Result<EmbeddingVector> {
        let ids = self.token_ids(instruction, text)?;
        Ok(EmbeddingVector(self.forward(&ids)?.unit))
    }

    pub(crate) fn forward(&self, ids: &[usize]) -> Result<Trace> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        let h = self.hidden();
        let e = self.embed_dim();
        let mut pooled = vec![0.0; h];
        let table = self.token_table.data();
        for &id in ids {
            for (p, v) in pooled.iter_mut().zip(&table[id * h..(id + 1) * h]) {
                *p += v;
            }
        }
        let n = ids.len() as f64;
        for p in &mut pooled {
            *p /= n;
        }
        let proj = self.projection.data();
        let mut z = vec![0.0; e];
        for (i, &u) in pooled.iter().enumerate() {
            for (zj, w) in z.iter_mut().zip(&proj[i * e..(i + 1) * e]) {
                *zj += u * w;
            }
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Validation("encoder produced a zero embedding".into()));
        }
        let unit = z.iter().map(|v| v / norm).collect();
        Ok(Trace {
            ids: ids.to_vec(),
            pooled,
            norm,
            unit,
        })
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/dv` for the unit output `v`.
    pub(crate) fn backward(&self, trace: &Trace, grad_unit: &[f64], grads: &mut EncoderGrads) {
        let h = self.hidden();
        let e = self.embed_dim();
        if grads.projection.len() != h * e {
            grads.projection = vec![0.0; h * e];
        }
        // v = z/|z|  =>  dz = (g - (g·v) v) / |z|
        let gv: f64 = grad_unit.iter().zip(&trace.unit).map(|(g, v)| g * v).sum();
        let grad_z: Vec<f64> = grad_unit
            .iter()
            .zip(&trace.unit)
            .map(|(g, v)| (g - gv * v) / trace.norm)
            .collect();
        let proj = self.projection.data();
        let mut grad_pooled = vec![0.0; h];
        for i in 0..h {
            let row = &proj[i * e..(i + 1) * e];
            let gp = &mut grads.projection[i * e..(i + 1) * e];
            let u = trace.pooled[i];
            let mut acc = 0.0;
            for j in 0..e {
                gp[j] += u * grad_z[j];
                acc += row[j] * grad_z[j];
            }
            grad_pooled[i] = acc;
        }
        let n = trace.ids.len() as f64;
        for &id in &trace.ids {
            let row = grads.token_rows.entry(id).or_insert_with(|| vec![0.0; h]);
            for (r, g) in row.iter_mut().zip(&grad_pooled) {
                *r += g / n;
            }
        }
    }

    /// `θ ← θ - lr · grad`.
    pub fn apply_gradient(&mut self, grads: &EncoderGrads, lr: f64) {
        let h = self.hidden();
        let table = self.token_table.data_mut();
        for (&id, g) in &grads.token_rows {
            for (w, gv) in table[id * h..(id + 1) * h].iter_mut().zip(g) {
                *w -= lr * gv;
            }
        }
        for (w, g) in self.projection.data_mut().iter_mut().zip(&grads.projection) {
            *w -= lr * g;
        }
    }

    /// Writes `encoder.json` (vocabulary and dimensions) and `encoder.bin`
    /// (token table then projection, little-endian `f64`) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = CheckpointManifest {
            format: FORMAT_NAME.into(),
            format_version: 1,
            hidden: self.hidden(),
            embed_dim: self.embed_dim(),
            seed: self.seed,
            vocab: self.vocab.keys().cloned().collect(),
            payload: CHECKPOINT_PAYLOAD.into(),
        };
        let mut bytes = Vec::with_capacity(8 * (self.token_table.len() + self.projection.len()));
        for v in self.token_table.data().iter().chain(self.projection.data()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let path = dir.join(CHECKPOINT_PAYLOAD);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = parse_json(&path, &text)?;
        if m.format != FORMAT_NAME {
            return Err(Error::Parse {
                path,
                offset: 0,
                message: format!("unsupported format {}", m.format),
            });
        }
        let payload = dir.join(&m.payload);
        let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
        let table_len = m.vocab.len() * m.hidden;
        let expected = 8 * (table_len + m.hidden * m.embed_dim);
        if bytes.len() != expected {
            return Err(Error::Parse {
                path: payload,
                offset: bytes.len().min(expected),
                message: format!("payload is {} bytes, expected {expected}", bytes.len()),
            });
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let token_table = DenseTensor::new(vec![m.vocab.len(), m.hidden], floats[..table_len].to_vec())?;
        let projection = DenseTensor::new(vec![m.hidden, m.embed_dim], floats[table_len..].to_vec())?;
        Self::from_parts(m.vocab, token_table, projection, m.seed)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    format_version: u32,
    hidden: usize,
    embed_dim: usize,
    seed: u64,
    vocab: Vec<String>,
    payload: String,
}
