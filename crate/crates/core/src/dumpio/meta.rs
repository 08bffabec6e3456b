//! Sidecar metadata: `vocab.json`, `roles.json`, `labels.json`.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub const VOCAB_FILE: &str = "vocab.json";
pub const ROLES_FILE: &str = "roles.json";
pub const LABELS_FILE: &str = "labels.json";

/// Half-open `[start, end)` position range, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    fn overlaps(&self, other: &Span) -> bool {
        !self.is_empty() && !other.is_empty() && self.start < other.end && other.start < self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from(v: [usize; 2]) -> Self {
        Span::new(v[0], v[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// Token-role layout of one image's LLM input sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRoles {
    #[serde(default)]
    pub system: Span,
    pub bos: Span,
    pub text: Span,
    pub visual: Span,
    /// Visual grid as `[rows, cols]`.
    pub grid: [usize; 2],
}

impl ImageRoles {
    /// Sequence length implied by the ranges.
    pub fn seq_len(&self) -> usize {
        [self.system, self.bos, self.text, self.visual]
            .iter()
            .map(|s| s.end)
            .max()
            .unwrap_or(0)
    }

    pub fn num_visual(&self) -> usize {
        self.visual.len()
    }

    /// Absolute sequence position of the `i`-th visual token.
    pub fn visual_pos(&self, i: usize) -> usize {
        self.visual.start + i
    }

    /// Returns every violated invariant as a message.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let named = [
            ("system", self.system),
            ("bos", self.bos),
            ("text", self.text),
            ("visual", self.visual),
        ];
        for (name, s) in &named {
            if s.start > s.end {
                out.push(format!("{name} range [{}, {}) is reversed", s.start, s.end));
            }
        }
        for (i, (na, a)) in named.iter().enumerate() {
            for (nb, b) in &named[i + 1..] {
                if a.overlaps(b) {
                    out.push(format!("{na} and {nb} ranges overlap"));
                }
            }
        }
        if self.bos.len() != 1 {
            out.push(format!(
                "bos range has length {} (expected 1)",
                self.bos.len()
            ));
        }
        let cells = self.grid[0] * self.grid[1];
        if self.visual.len() != cells {
            out.push(format!(
                "visual range length {} != grid {}x{} = {cells}",
                self.visual.len(),
                self.grid[0],
                self.grid[1]
            ));
        }
        out
    }
}

pub type Roles = BTreeMap<String, ImageRoles>;

/// One annotated object: its label and the visual-token indices (0-based within the
/// visual range) covered by its bounding box.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectLabel {
    pub label: String,
    pub patch_indices: Vec<usize>,
}

pub type Labels = BTreeMap<String, Vec<ObjectLabel>>;
