use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use super::manifest::{Manifest, TensorEntry, MANIFEST_FILE};
use super::meta::{Labels, Roles, LABELS_FILE, ROLES_FILE, VOCAB_FILE};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const DATA_FILE: &str = "tensors.bin";

/// In-memory bundle contents; [`write`](Self::write) is the inverse of
/// [`Bundle::open`](super::Bundle::open) + `load_tensor`.
#[derive(Debug, Clone, Default)]
pub struct BundleSpec {
    pub model_id: String,
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub vocab: Option<Vec<String>>,
    pub roles: Option<Roles>,
    pub labels: Option<Labels>,
}

impl BundleSpec {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            ..Default::default()
        }
    }

    pub fn add_tensor(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<&mut Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != data.len() {
            return Err(Error::DimMismatch {
                expected: numel,
                got: data.len(),
            });
        }
        let name = name.into();
        self.tensors.retain(|(n, _, _)| *n != name);
        self.tensors.push((name, shape, data));
        Ok(self)
    }

    pub fn add_matrix(&mut self, name: impl Into<String>, m: &Matrix) -> Result<&mut Self> {
        self.add_tensor(name, vec![m.rows(), m.cols()], m.data().to_vec())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    /// Writes every tensor into one little-endian data file plus the JSON sidecars.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let data_path = dir.join(DATA_FILE);
        let file = File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let mut out = BufWriter::new(file);
        let mut manifest = Manifest::new(self.model_id.clone());
        manifest.meta = self.meta.clone();
        let mut offset = 0u64;
        for (name, shape, data) in &self.tensors {
            for v in data {
                out.write_all(&v.to_le_bytes())
                    .map_err(|e| Error::io(&data_path, e))?;
            }
            manifest.tensors.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                file: DATA_FILE.to_string(),
                byte_offset: offset,
            });
            offset += data.len() as u64 * 4;
        }
        out.flush().map_err(|e| Error::io(&data_path, e))?;

        write_json(dir, MANIFEST_FILE, &manifest)?;
        if let Some(v) = &self.vocab {
            write_json(dir, VOCAB_FILE, v)?;
        }
        if let Some(r) = &self.roles {
            write_json(dir, ROLES_FILE, r)?;
        }
        if let Some(l) = &self.labels {
            write_json(dir, LABELS_FILE, l)?;
        }
        Ok(())
    }
}

fn write_json<T: serde::Serialize>(dir: &Path, file: &str, value: &T) -> Result<()> {
    let path = dir.join(file);
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
