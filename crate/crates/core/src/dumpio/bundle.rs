use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;

use super::manifest::{Manifest, TensorEntry, MANIFEST_FILE};
use super::meta::{ImageRoles, Labels, ObjectLabel, Roles, LABELS_FILE, ROLES_FILE, VOCAB_FILE};
use super::names;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// An opened activation-dump bundle. Tensor bytes are read on demand.
#[derive(Debug)]
pub struct Bundle {
    root: PathBuf,
    manifest: Manifest,
    vocab: Option<Vec<String>>,
    roles: Option<Roles>,
    labels: Option<Labels>,
    cache_dir: Option<PathBuf>,
    loaded: Mutex<HashMap<String, Arc<Matrix>>>,
}

impl Bundle {
    /// Parses `manifest.json` and the optional sidecars. No tensor data is read.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let root = path.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::MissingManifest(root));
        }
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest = Manifest::parse(&text)?;
        let vocab = read_sidecar::<Vec<String>>(&root, VOCAB_FILE)?;
        let roles = read_sidecar::<Roles>(&root, ROLES_FILE)?;
        let labels = read_sidecar::<Labels>(&root, LABELS_FILE)?;
        Ok(Self {
            root,
            manifest,
            vocab,
            roles,
            labels,
            cache_dir: None,
            loaded: Mutex::new(HashMap::new()),
        })
    }

    /// Stages tensor byte ranges as standalone files under `dir` on first read and
    /// serves later reads (including from other processes) from there.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn vocab(&self) -> Option<&[String]> {
        self.vocab.as_deref()
    }

    pub fn roles(&self) -> Option<&Roles> {
        self.roles.as_ref()
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.manifest.entry(name).is_some()
    }

    pub fn entry(&self, name: &str) -> Result<&TensorEntry> {
        self.manifest
            .entry(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))
    }

    /// Reads a tensor as a row-major matrix, bypassing the in-memory cache.
    pub fn load_tensor(&self, name: &str) -> Result<Matrix> {
        let entry = self.entry(name)?;
        let bytes = match &self.cache_dir {
            Some(dir) => self.read_via_cache(entry, dir)?,
            None => self.read_range(entry)?,
        };
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let (rows, cols) = entry.matrix_shape();
        Matrix::new(rows, cols, data)
    }

    /// Like [`load_tensor`](Self::load_tensor) but memoized for the bundle's lifetime.
    pub fn tensor(&self, name: &str) -> Result<Arc<Matrix>> {
        if let Some(m) = self.loaded.lock().expect("tensor cache poisoned").get(name) {
            return Ok(Arc::clone(m));
        }
        let m = Arc::new(self.load_tensor(name)?);
        self.loaded
            .lock()
            .expect("tensor cache poisoned")
            .insert(name.to_string(), Arc::clone(&m));
        Ok(m)
    }

    /// Like [`tensor`](Self::tensor) but reports absence as `MissingTensor`.
    pub fn require(&self, name: &str) -> Result<Arc<Matrix>> {
        if !self.has_tensor(name) {
            return Err(Error::MissingTensor(name.to_string()));
        }
        self.tensor(name)
    }

    fn read_range(&self, entry: &TensorEntry) -> Result<Vec<u8>> {
        let path = self.root.join(&entry.file);
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let available = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let need = entry.byte_offset + entry.byte_len();
        if need > available {
            return Err(Error::SizeMismatch {
                name: entry.name.clone(),
                expected: entry.byte_len(),
                available: available.saturating_sub(entry.byte_offset),
            });
        }
        file.seek(SeekFrom::Start(entry.byte_offset))
            .map_err(|e| Error::io(&path, e))?;
        let mut buf = vec![0u8; entry.byte_len() as usize];
        file.read_exact(&mut buf).map_err(|e| Error::io(&path, e))?;
        Ok(buf)
    }

    fn read_via_cache(&self, entry: &TensorEntry, dir: &Path) -> Result<Vec<u8>> {
        let mut h = DefaultHasher::new();
        self.root.hash(&mut h);
        self.manifest.model_id.hash(&mut h);
        entry.hash(&mut h);
        // a rewritten data file must not be served from a stale copy
        if let Ok(modified) = fs::metadata(self.root.join(&entry.file)).and_then(|m| m.modified()) {
            modified.hash(&mut h);
        }
        let staged = dir.join(format!("{:016x}.f32", h.finish()));
        if let Ok(bytes) = fs::read(&staged) {
            if bytes.len() as u64 == entry.byte_len() {
                return Ok(bytes);
            }
        }
        let bytes = self.read_range(entry)?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        // write-then-rename keeps concurrent readers from seeing a partial file
        let tmp = staged.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &staged).map_err(|e| Error::io(&staged, e))?;
        Ok(bytes)
    }

    /// Image ids found in `roles.json` or in `img/<id>/...` tensor names, sorted.
    pub fn image_ids(&self) -> Vec<String> {
        let mut ids: BTreeSet<String> = self
            .manifest
            .tensors
            .iter()
            .filter_map(|t| names::split_image_name(&t.name).map(|(id, _)| id.to_string()))
            .collect();
        if let Some(roles) = &self.roles {
            ids.extend(roles.keys().cloned());
        }
        ids.into_iter().collect()
    }

    pub fn image_roles(&self, image: &str) -> Result<&ImageRoles> {
        self.roles
            .as_ref()
            .and_then(|r| r.get(image))
            .ok_or_else(|| Error::metadata("roles.json", format!("no roles for image `{image}`")))
    }

    pub fn image_labels(&self, image: &str) -> Result<&[ObjectLabel]> {
        self.labels
            .as_ref()
            .and_then(|l| l.get(image))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingLabels(image.to_string()))
    }

    pub fn vocab_or_err(&self) -> Result<&[String]> {
        self.vocab()
            .ok_or_else(|| Error::metadata("vocab.json", "bundle has no vocab.json"))
    }

    /// Number of LLM layers: `meta.num_layers` when present, otherwise the highest
    /// hidden-state layer found in the manifest.
    pub fn num_layers(&self) -> Option<usize> {
        if let Some(n) = self
            .manifest
            .meta
            .get("num_layers")
            .and_then(|v| v.parse().ok())
        {
            return Some(n);
        }
        self.max_layer("llm.hidden.")
    }

    /// Highest ViT hidden-state layer present.
    pub fn vit_last_layer(&self) -> Option<usize> {
        self.max_layer("vit.hidden.")
    }

    fn max_layer(&self, prefix: &str) -> Option<usize> {
        self.manifest
            .tensors
            .iter()
            .filter_map(|t| names::split_image_name(&t.name))
            .filter_map(|(_, suffix)| names::layer_of(suffix, prefix))
            .max()
    }

    /// Entry layer of a late-entry export (`meta.entry_layer`, default 0).
    pub fn entry_layer(&self) -> usize {
        self.manifest
            .meta
            .get("entry_layer")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0)
    }

    /// LLM hidden states of an image restricted to its visual positions.
    /// Layer 0 prefers the projected visual embeddings.
    pub fn visual_states(&self, image: &str, layer: usize) -> Result<Matrix> {
        if layer == 0 {
            let proj = names::visual_proj(image);
            if self.has_tensor(&proj) {
                return Ok((*self.tensor(&proj)?).clone());
            }
        }
        let name = names::hidden(image, layer);
        if !self.has_tensor(&name) {
            return Err(Error::MissingLayer(layer));
        }
        let roles = self.image_roles(image)?;
        let h = self.tensor(&name)?;
        h.slice_rows(roles.visual.start, roles.visual.end)
    }
}

fn read_sidecar<T: DeserializeOwned>(root: &Path, file: &str) -> Result<Option<T>> {
    let path = root.join(file);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::metadata(file, e.to_string()))
}
