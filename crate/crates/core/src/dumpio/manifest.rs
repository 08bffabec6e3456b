use std::collections::{BTreeMap, HashSet};
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Bundle manifest (`manifest.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub model_id: String,
    pub dtype: String,
    pub endianness: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    pub fn byte_len(&self) -> u64 {
        self.numel() * 4
    }

    /// Shape viewed as a matrix: leading dims fold into rows, a 1-D tensor is one row.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [lead @ .., last] => (lead.iter().product(), *last),
        }
    }
}

impl Manifest {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            version: FORMAT_VERSION,
            model_id: model_id.into(),
            dtype: "f32".into(),
            endianness: "little".into(),
            tensors: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    /// Parses and checks the manifest invariants.
    pub fn parse(text: &str) -> Result<Self> {
        // Version is checked before the full parse so a future format with
        // different fields reports the version rather than a field error.
        if let Ok(raw) = serde_json::from_str::<serde_json::Value>(text) {
            if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
                if v != u64::from(FORMAT_VERSION) {
                    return Err(Error::UnsupportedVersion(v as u32));
                }
            }
        }
        let manifest: Manifest = serde_json::from_str(text).map_err(|e| {
            Error::MalformedManifest(format!("{e} (line {}, column {})", e.line(), e.column()))
        })?;
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        if self.dtype != "f32" {
            return Err(Error::MalformedManifest(format!(
                "dtype: expected \"f32\", got {:?}",
                self.dtype
            )));
        }
        if self.endianness != "little" {
            return Err(Error::MalformedManifest(format!(
                "endianness: expected \"little\", got {:?}",
                self.endianness
            )));
        }
        let mut seen = HashSet::new();
        for (i, t) in self.tensors.iter().enumerate() {
            if t.name.is_empty() {
                return Err(Error::MalformedManifest(format!(
                    "tensors[{i}].name: empty"
                )));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(Error::MalformedManifest(format!(
                    "tensors[{i}].name: duplicate `{}`",
                    t.name
                )));
            }
            if t.shape.is_empty() {
                return Err(Error::MalformedManifest(format!(
                    "tensors[{i}].shape: empty shape for `{}`",
                    t.name
                )));
            }
            if t.shape.contains(&0) {
                return Err(Error::MalformedManifest(format!(
                    "tensors[{i}].shape: zero dimension in {:?} for `{}`",
                    t.shape, t.name
                )));
            }
            if !is_plain_relative(&t.file) {
                return Err(Error::MalformedManifest(format!(
                    "tensors[{i}].file: `{}` must be a relative path inside the bundle",
                    t.file
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

fn is_plain_relative(file: &str) -> bool {
    let p = Path::new(file);
    !file.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{"version":1,"model_id":"m","dtype":"f32","endianness":"little",
            "tensors":[{"name":"a","shape":[2,3],"file":"t.bin","byte_offset":0}]}"#
            .to_string()
    }

    #[test]
    fn parses_minimal() {
        let m = Manifest::parse(&minimal()).unwrap();
        assert_eq!(m.tensors.len(), 1);
        assert_eq!(m.tensors[0].byte_len(), 24);
        assert!(m.meta.is_empty());
    }

    #[test]
    fn rejects_version() {
        let text = minimal().replace("\"version\":1", "\"version\":2");
        assert!(matches!(
            Manifest::parse(&text),
            Err(Error::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn rejects_bad_literals_and_shapes() {
        let bad_dtype = minimal().replace("\"f32\"", "\"f16\"");
        assert!(
            matches!(Manifest::parse(&bad_dtype), Err(Error::MalformedManifest(m)) if m.contains("dtype"))
        );
        let big = minimal().replace("little", "big");
        assert!(
            matches!(Manifest::parse(&big), Err(Error::MalformedManifest(m)) if m.contains("endianness"))
        );
        let zero = minimal().replace("[2,3]", "[2,0]");
        assert!(
            matches!(Manifest::parse(&zero), Err(Error::MalformedManifest(m)) if m.contains("zero dimension"))
        );
        let escape = minimal().replace("t.bin", "../t.bin");
        assert!(Manifest::parse(&escape).is_err());
    }

    #[test]
    fn missing_field_names_the_field() {
        let text = minimal().replace("\"model_id\":\"m\",", "");
        match Manifest::parse(&text) {
            Err(Error::MalformedManifest(m)) => assert!(m.contains("model_id"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matrix_shape_folds_leading_dims() {
        let mut e = TensorEntry {
            name: "x".into(),
            shape: vec![2, 3, 4],
            file: "f".into(),
            byte_offset: 0,
        };
        assert_eq!(e.matrix_shape(), (6, 4));
        e.shape = vec![5];
        assert_eq!(e.matrix_shape(), (1, 5));
    }
}
