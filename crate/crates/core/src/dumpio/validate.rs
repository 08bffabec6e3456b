use std::fmt;
use std::fs;
use std::str::FromStr;

use serde::Serialize;

use super::bundle::Bundle;
use super::names;
use crate::error::Error;

/// Which tensors a bundle must carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Input vocabulary embedding and projected visual tokens.
    Probe,
    /// Probe plus per-layer hidden states, sublayer outputs, attention maps and
    /// the output vocabulary.
    Full,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "probe" => Ok(Profile::Probe),
            "full" => Ok(Profile::Full),
            other => Err(Error::InvalidConfig(format!(
                "unknown profile `{other}` (expected probe or full)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    MissingTensor,
    SizeMismatch,
    ShapeMismatch,
    UnreadableFile,
    MissingMetadata,
    InvalidRoles,
    InvalidLabels,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub kind: IssueKind,
    pub item: String,
    pub message: String,
}

/// Validation findings; empty means the bundle supports the profile.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, kind: IssueKind, item: &str) -> bool {
        self.issues.iter().any(|i| i.kind == kind && i.item == item)
    }

    fn push(&mut self, kind: IssueKind, item: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue {
            kind,
            item: item.into(),
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return writeln!(f, "ok");
        }
        for i in &self.issues {
            writeln!(f, "{:?}\t{}\t{}", i.kind, i.item, i.message)?;
        }
        Ok(())
    }
}

/// Checks byte ranges, metadata invariants, and the tensors the profile requires.
pub fn validate_bundle(bundle: &Bundle, profile: Profile) -> ValidationReport {
    let mut report = ValidationReport::default();
    check_byte_ranges(bundle, &mut report);

    let shape_of = |name: &str| bundle.manifest().entry(name).map(|e| e.matrix_shape());

    // Probe requirements.
    let vocab_shape = shape_of(names::INPUT_VOCAB);
    if vocab_shape.is_none() {
        report.push(
            IssueKind::MissingTensor,
            names::INPUT_VOCAB,
            "input vocabulary embedding is required",
        );
    }
    match bundle.vocab() {
        None => report.push(
            IssueKind::MissingMetadata,
            "vocab.json",
            "vocabulary strings are required",
        ),
        Some(v) => {
            if let Some((t, _)) = vocab_shape {
                if v.len() != t {
                    report.push(
                        IssueKind::ShapeMismatch,
                        "vocab.json",
                        format!("{} strings for {t} embedding rows", v.len()),
                    );
                }
            }
        }
    }
    let d = vocab_shape.map(|(_, d)| d);

    let images = bundle.image_ids();
    if images.is_empty() {
        report.push(
            IssueKind::MissingTensor,
            "img/<id>/visual.proj",
            "bundle contains no images",
        );
    }
    for image in &images {
        let roles = bundle.roles().and_then(|r| r.get(image));
        if let Some(r) = roles {
            for p in r.problems() {
                report.push(IssueKind::InvalidRoles, image.clone(), p);
            }
        }
        let proj = names::visual_proj(image);
        match shape_of(&proj) {
            None => report.push(
                IssueKind::MissingTensor,
                proj,
                "projected visual tokens are required",
            ),
            Some((n_v, cols)) => {
                if let Some(d) = d {
                    if cols != d {
                        report.push(
                            IssueKind::ShapeMismatch,
                            &proj,
                            format!("width {cols} != embedding width {d}"),
                        );
                    }
                }
                if let Some(r) = roles {
                    if n_v != r.num_visual() {
                        report.push(
                            IssueKind::ShapeMismatch,
                            &proj,
                            format!("{n_v} rows != visual range length {}", r.num_visual()),
                        );
                    }
                }
            }
        }
        if let Some(objs) = bundle.labels().and_then(|l| l.get(image)) {
            let n_v = roles
                .map(|r| r.num_visual())
                .or_else(|| shape_of(&names::visual_proj(image)).map(|s| s.0));
            for obj in objs {
                if let Some(n_v) = n_v {
                    if let Some(bad) = obj.patch_indices.iter().find(|&&i| i >= n_v) {
                        report.push(
                            IssueKind::InvalidLabels,
                            image.clone(),
                            format!(
                                "label `{}` patch index {bad} outside visual range of {n_v}",
                                obj.label
                            ),
                        );
                    }
                }
            }
        }
    }

    if profile == Profile::Probe {
        return report;
    }

    match (shape_of(names::OUTPUT_VOCAB), vocab_shape) {
        (None, _) => report.push(
            IssueKind::MissingTensor,
            names::OUTPUT_VOCAB,
            "output vocabulary is required",
        ),
        (Some((t_out, d_out)), Some((t, d))) if (t_out, d_out) != (t, d) => report.push(
            IssueKind::ShapeMismatch,
            names::OUTPUT_VOCAB,
            format!("[{t_out}, {d_out}] != input vocabulary [{t}, {d}]"),
        ),
        _ => {}
    }
    if bundle.roles().is_none() {
        report.push(
            IssueKind::MissingMetadata,
            "roles.json",
            "token roles are required",
        );
    }
    let Some(num_layers) = bundle.num_layers() else {
        report.push(
            IssueKind::MissingMetadata,
            "meta.num_layers",
            "layer count unknown: no num_layers entry and no hidden states",
        );
        return report;
    };
    for image in &images {
        let seq_len = bundle
            .roles()
            .and_then(|r| r.get(image))
            .map(|r| r.seq_len());
        let mut expect = |name: String, want_cols: Option<usize>| match shape_of(&name) {
            None => report.push(
                IssueKind::MissingTensor,
                name,
                "required by the full profile",
            ),
            Some((rows, cols)) => {
                if let Some(n) = seq_len {
                    if rows != n {
                        report.push(
                            IssueKind::ShapeMismatch,
                            &name,
                            format!("{rows} rows != sequence length {n}"),
                        );
                    }
                }
                if let Some(c) = want_cols {
                    if cols != c {
                        report.push(
                            IssueKind::ShapeMismatch,
                            &name,
                            format!("width {cols} != {c}"),
                        );
                    }
                }
            }
        };
        for layer in 0..=num_layers {
            expect(names::hidden(image, layer), d);
        }
        for layer in 1..=num_layers {
            expect(names::sub_att(image, layer), d);
            expect(names::sub_mlp(image, layer), d);
            expect(names::attn(image, layer), seq_len);
        }
    }
    report
}

fn check_byte_ranges(bundle: &Bundle, report: &mut ValidationReport) {
    let mut sizes = std::collections::HashMap::new();
    for entry in &bundle.manifest().tensors {
        let size = sizes.entry(entry.file.clone()).or_insert_with(|| {
            fs::metadata(bundle.root().join(&entry.file))
                .map(|m| m.len())
                .ok()
        });
        match size {
            None => report.push(
                IssueKind::UnreadableFile,
                &entry.name,
                format!("cannot stat `{}`", entry.file),
            ),
            Some(len) => {
                let need = entry.byte_offset + entry.byte_len();
                if need > *len {
                    report.push(
                        IssueKind::SizeMismatch,
                        &entry.name,
                        format!(
                            "shape {:?} needs bytes [{}, {need}) but `{}` has {len}",
                            entry.shape, entry.byte_offset, entry.file
                        ),
                    );
                }
            }
        }
    }
}
