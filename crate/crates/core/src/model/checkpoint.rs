//! Checkpoint container: a JSON manifest followed by a blob of little-endian
//! `f64` values in manifest order.
//!
//! File layout: 8-byte magic, manifest length as little-endian `u64`, the
//! manifest, then the blob. Offsets in the manifest count values, not bytes.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ModelState;
use super::ModelConfig;
use crate::error::{LabError, Result};

const MAGIC: &[u8; 8] = b"PUELABCK";
pub const FORMAT: &str = "puelab-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub entries: Vec<TensorEntry>,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            entries: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape does not match data");
        self.entries.push(TensorEntry {
            name: name.into(),
            shape,
            offset: self.values.len(),
        });
        self.values.extend_from_slice(data);
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.offset..e.offset + e.len()])
    }

    /// Concatenation of every tensor whose name starts with `prefix`, in order.
    pub fn gather(&self, prefix: &str) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .flat_map(|e| self.values[e.offset..e.offset + e.len()].iter().copied())
            .collect()
    }

    pub fn add_model(&mut self, state: &ModelState) {
        for spec in &state.layout.specs {
            self.push(format!("param/{}", spec.name), spec.shape.clone(), &state.data[spec.range()]);
        }
    }

    pub fn model(&self, config: ModelConfig) -> Result<ModelState> {
        ModelState::from_data(config, self.gather("param/"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format: FORMAT.into(),
            meta: self.meta.clone(),
            tensors: self.entries.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + self.values.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| LabError::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("missing magic header".into()));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let blob_start = 16usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt("manifest length exceeds file".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..blob_start])
            .map_err(|e| corrupt(format!("manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(corrupt(format!("unsupported format `{}`", manifest.format)));
        }
        let blob = &bytes[blob_start..];
        if blob.len() % 8 != 0 {
            return Err(corrupt("blob is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut expected = 0;
        for entry in &manifest.tensors {
            if entry.offset != expected {
                return Err(corrupt(format!("tensor {} has offset {} (expected {expected})", entry.name, entry.offset)));
            }
            expected += entry.len();
        }
        if expected != values.len() {
            return Err(corrupt(format!("manifest lists {expected} values, blob holds {}", values.len())));
        }
        Ok(Checkpoint {
            meta: manifest.meta,
            entries: manifest.tensors,
            values,
        })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut file = std::fs::File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| LabError::io(&tmp, e))?;
        file.sync_all().map_err(|e| LabError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let config = ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, context_len: 16, ..ModelConfig::default() };
        let state = ModelState::init(config, 5).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({"epoch": 3}));
        ck.add_model(&state);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.meta["epoch"], 3);
        let restored = back.model(config).unwrap();
        assert!(restored.data.iter().zip(&state.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.entries[0].name, "param/tok_emb");
    }

    #[test]
    fn corruption_is_detected() {
        let mut ck = Checkpoint::new(serde_json::Value::Null);
        ck.push("x", vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let bytes = ck.to_bytes();
        let p = Path::new("x.ckpt");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], p).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(LabError::CorruptCheckpoint { .. })));
        assert!(Checkpoint::from_bytes(&[], p).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(values in proptest::collection::vec(any::<f64>(), 0..64)) {
            let mut ck = Checkpoint::new(serde_json::Value::Null);
            ck.push("t", vec![values.len()], &values);
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("p")).unwrap();
            prop_assert!(back.values.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.values.len(), values.len());
        }
    }
}
