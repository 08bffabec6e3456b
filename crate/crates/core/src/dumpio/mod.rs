//! Activation-dump bundles.
//!
//! A bundle is a directory holding `manifest.json`, one or more flat `.bin` files of
//! little-endian row-major f32 data addressed by byte offset, and the JSON sidecars
//! `vocab.json`, `roles.json` and `labels.json`. See [`names`] for the canonical
//! tensor names.

mod bundle;
mod manifest;
mod meta;
pub mod names;
mod validate;
mod writer;

pub use bundle::Bundle;
pub use manifest::{Manifest, TensorEntry, FORMAT_VERSION, MANIFEST_FILE};
pub use meta::{ImageRoles, Labels, ObjectLabel, Roles, Span, LABELS_FILE, ROLES_FILE, VOCAB_FILE};
pub use validate::{validate_bundle, Issue, IssueKind, Profile, ValidationReport};
pub use writer::BundleSpec;

use std::path::Path;

use crate::error::Result;
use crate::linalg::Matrix;

pub fn open_bundle(path: impl AsRef<Path>) -> Result<Bundle> {
    Bundle::open(path)
}

pub fn load_tensor(bundle: &Bundle, name: &str) -> Result<Matrix> {
    bundle.load_tensor(name)
}

pub fn write_bundle(spec: &BundleSpec, path: impl AsRef<Path>) -> Result<()> {
    spec.write(path)
}
