use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token_id: usize,
    pub token_str: String,
    pub score: f64,
}

/// Top-k retrieval result: scores non-increasing, ties by ascending token id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedTokens {
    pub entries: Vec<RankedToken>,
    /// Vocabulary rows left out of the ranking because their norm is zero.
    pub skipped_zero_rows: usize,
}

impl RankedTokens {
    pub fn ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.token_id).collect()
    }

    pub fn top1(&self) -> Option<&RankedToken> {
        self.entries.first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LensKind {
    /// Cosine against the input embedding matrix.
    Embed,
    /// Raw dot product against the unembedding matrix.
    Logit,
}

/// Vocabulary retrieval over a fixed embedding matrix.
///
/// Row norms are computed once so repeated queries only pay for the dot products.
#[derive(Debug, Clone)]
pub struct Lens<'a> {
    kind: LensKind,
    table: &'a Matrix,
    strings: Option<&'a [String]>,
    row_norms: Vec<f64>,
    zero_rows: usize,
}

impl<'a> Lens<'a> {
    pub fn embed(vocab_embed: &'a Matrix, strings: Option<&'a [String]>) -> Self {
        let row_norms: Vec<f64> = vocab_embed.iter_rows().map(l2_norm).collect();
        let zero_rows = row_norms.iter().filter(|&&n| n == 0.0).count();
        Self {
            kind: LensKind::Embed,
            table: vocab_embed,
            strings,
            row_norms,
            zero_rows,
        }
    }

    pub fn logit(unembed: &'a Matrix, strings: Option<&'a [String]>) -> Self {
        Self {
            kind: LensKind::Logit,
            table: unembed,
            strings,
            row_norms: Vec::new(),
            zero_rows: 0,
        }
    }

    pub fn kind(&self) -> LensKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn token_str(&self, id: usize) -> &str {
        self.strings
            .and_then(|s| s.get(id))
            .map(String::as_str)
            .unwrap_or("")
    }

    /// Scores of every ranked row, `None` for skipped rows.
    fn scores(&self, h: &[f32]) -> Result<Vec<Option<f64>>> {
        if h.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: h.len(),
            });
        }
        let h_norm = l2_norm(h);
        if !(h_norm > 0.0 && h_norm.is_finite()) {
            return Err(Error::ZeroVector);
        }
        Ok(match self.kind {
            LensKind::Embed => self
                .table
                .iter_rows()
                .zip(&self.row_norms)
                .map(|(e, &n)| (n > 0.0).then(|| dot(h, e) / (h_norm * n)))
                .collect(),
            LensKind::Logit => self.table.iter_rows().map(|e| Some(dot(h, e))).collect(),
        })
    }

    pub fn topk(&self, h: &[f32], k: usize) -> Result<RankedTokens> {
        let mut scored: Vec<(f64, usize)> = self
            .scores(h)?
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (s, i)))
            .collect();
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(RankedTokens {
                entries: Vec::new(),
                skipped_zero_rows: self.zero_rows,
            });
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank_order);
        Ok(RankedTokens {
            entries: scored
                .into_iter()
                .map(|(score, token_id)| RankedToken {
                    token_id,
                    token_str: self.token_str(token_id).to_string(),
                    score,
                })
                .collect(),
            skipped_zero_rows: self.zero_rows,
        })
    }

    /// Retrieves for every row of `queries` in parallel; output order follows input order.
    pub fn topk_rows(&self, queries: &Matrix, k: usize) -> Result<Vec<RankedTokens>> {
        (0..queries.rows())
            .into_par_iter()
            .map(|i| self.topk(queries.row(i), k))
            .collect()
    }
}

/// Descending score, then ascending id.
fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Top-k vocabulary tokens by cosine similarity to `h`.
pub fn embedlens_topk(h: &[f32], vocab_embed: &Matrix, k: usize) -> Result<RankedTokens> {
    Lens::embed(vocab_embed, None).topk(h, k)
}

/// Top-k vocabulary tokens by logit `unembed · h`.
pub fn logit_lens_topk(h: &[f32], unembed: &Matrix, k: usize) -> Result<RankedTokens> {
    Lens::logit(unembed, None).topk(h, k)
}

/// Reference token(s) of a cluster centroid.
pub fn cluster_reference_token(
    centroid: &[f32],
    vocab_embed: &Matrix,
    k: usize,
) -> Result<RankedTokens> {
    embedlens_topk(centroid, vocab_embed, k)
}
