use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::lens::{Lens, RankedTokens};
use crate::dumpio::{names, Bundle, ObjectLabel};
use crate::error::{Error, Result};

/// How a retrieved token string is compared with an object label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MatchRule {
    /// Normalized equality, or the normalized token is a substring of the label
    /// and at least `min_substring_len` characters long.
    Subword { min_substring_len: usize },
    /// Normalized equality only.
    Exact,
}

impl Default for MatchRule {
    fn default() -> Self {
        MatchRule::Subword {
            min_substring_len: 3,
        }
    }
}

/// Strips SentencePiece / byte-BPE space markers and surrounding whitespace, lowercases.
pub fn normalize_token(s: &str) -> String {
    s.chars()
        .filter(|&c| c != '\u{0120}' && c != '\u{2581}')
        .collect::<String>()
        .trim()
        .to_lowercase()
}

impl MatchRule {
    pub fn matches(&self, token: &str, label: &str) -> bool {
        let token = normalize_token(token);
        let label = normalize_token(label);
        if token.is_empty() {
            return false;
        }
        if token == label {
            return true;
        }
        match *self {
            MatchRule::Exact => false,
            MatchRule::Subword { min_substring_len } => {
                token.chars().count() >= min_substring_len && label.contains(&token)
            }
        }
    }

    fn hits(&self, ranked: &RankedTokens, label: &str) -> bool {
        ranked
            .entries
            .iter()
            .any(|e| self.matches(&e.token_str, label))
    }
}

/// Which token representations count toward matching a labeled object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchScope {
    /// Only the tokens inside the object's own box.
    Object,
    /// Any visual token of the image.
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub layer: usize,
    pub k: usize,
    pub scope: MatchScope,
    pub instances: usize,
    pub matched: usize,
    pub accuracy: f64,
}

fn labeled_images(bundle: &Bundle) -> Result<Vec<(String, &[ObjectLabel])>> {
    let labels = bundle
        .labels()
        .ok_or_else(|| Error::MissingLabels("<bundle>".into()))?;
    let out: Vec<_> = labels
        .iter()
        .filter(|(_, objs)| !objs.is_empty())
        .map(|(id, objs)| (id.clone(), objs.as_slice()))
        .collect();
    if out.is_empty() {
        return Err(Error::MissingLabels("<bundle>".into()));
    }
    Ok(out)
}

/// Fraction of labeled object instances whose label appears in the top-k
/// retrieval of at least one in-scope token representation at `layer`.
pub fn matching_accuracy(
    bundle: &Bundle,
    layer: usize,
    k: usize,
    matcher: MatchRule,
    scope: MatchScope,
) -> Result<AccuracyReport> {
    let vocab = bundle.require(names::INPUT_VOCAB)?;
    let lens = Lens::embed(&vocab, Some(bundle.vocab_or_err()?));
    let mut instances = 0;
    let mut matched = 0;
    for (image, objects) in labeled_images(bundle)? {
        let states = bundle.visual_states(&image, layer)?;
        let n_v = states.rows();
        let needed: BTreeSet<usize> = match scope {
            MatchScope::Image => (0..n_v).collect(),
            MatchScope::Object => objects
                .iter()
                .flat_map(|o| o.patch_indices.iter().copied())
                .collect(),
        };
        let mut ranked: Vec<Option<RankedTokens>> = vec![None; n_v];
        for &i in &needed {
            if i >= n_v {
                return Err(Error::IndexOutOfRange { index: i, len: n_v });
            }
            ranked[i] = retrieve(&lens, states.row(i), k)?;
        }
        for obj in objects {
            instances += 1;
            let hit = |i: usize| {
                ranked[i]
                    .as_ref()
                    .is_some_and(|r| matcher.hits(r, &obj.label))
            };
            let found = match scope {
                MatchScope::Image => (0..n_v).any(hit),
                MatchScope::Object => obj.patch_indices.iter().copied().any(hit),
            };
            if found {
                matched += 1;
            }
        }
    }
    Ok(AccuracyReport {
        layer,
        k,
        scope,
        instances,
        matched,
        accuracy: matched as f64 / instances as f64,
    })
}

/// Zero-norm states (e.g. padding) cannot be ranked and never match.
fn retrieve(lens: &Lens<'_>, h: &[f32], k: usize) -> Result<Option<RankedTokens>> {
    match lens.topk(h, k) {
        Ok(r) => Ok(Some(r)),
        Err(Error::ZeroVector) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityPoint {
    pub layer: usize,
    /// Fraction of object tokens whose top-k contains one of their own labels.
    pub object_token_fraction: f64,
    /// Fraction of all visual tokens whose top-k contains any label of the image.
    pub all_token_fraction: f64,
    pub object_tokens: usize,
    pub matched_object_tokens: usize,
    pub visual_tokens: usize,
    pub matched_visual_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityCurve {
    pub k: usize,
    pub points: Vec<SparsityPoint>,
}

/// Sparsity curve over layers `0..=num_layers` (layer 0 = projected embeddings).
pub fn sparsity_curve(bundle: &Bundle, k: usize, matcher: MatchRule) -> Result<SparsityCurve> {
    let last = bundle.num_layers().unwrap_or(0);
    sparsity_curve_layers(bundle, 0..=last, k, matcher)
}

pub fn sparsity_curve_layers(
    bundle: &Bundle,
    layers: impl IntoIterator<Item = usize>,
    k: usize,
    matcher: MatchRule,
) -> Result<SparsityCurve> {
    let vocab = bundle.require(names::INPUT_VOCAB)?;
    let lens = Lens::embed(&vocab, Some(bundle.vocab_or_err()?));
    let images = labeled_images(bundle)?;
    let mut points = Vec::new();
    for layer in layers {
        let mut p = SparsityPoint {
            layer,
            object_token_fraction: 0.0,
            all_token_fraction: 0.0,
            object_tokens: 0,
            matched_object_tokens: 0,
            visual_tokens: 0,
            matched_visual_tokens: 0,
        };
        for (image, objects) in &images {
            let states = bundle.visual_states(image, layer)?;
            let n_v = states.rows();
            let ranked: Vec<RankedTokens> = (0..n_v)
                .into_par_iter()
                .map(|i| retrieve(&lens, states.row(i), k).map(Option::unwrap_or_default))
                .collect::<Result<_>>()?;
            let mut own_labels: Vec<Vec<&str>> = vec![Vec::new(); n_v];
            for obj in *objects {
                for &i in &obj.patch_indices {
                    if i >= n_v {
                        return Err(Error::IndexOutOfRange { index: i, len: n_v });
                    }
                    own_labels[i].push(&obj.label);
                }
            }
            for (i, r) in ranked.iter().enumerate() {
                p.visual_tokens += 1;
                if objects.iter().any(|o| matcher.hits(r, &o.label)) {
                    p.matched_visual_tokens += 1;
                }
                if !own_labels[i].is_empty() {
                    p.object_tokens += 1;
                    if own_labels[i].iter().any(|l| matcher.hits(r, l)) {
                        p.matched_object_tokens += 1;
                    }
                }
            }
        }
        p.object_token_fraction = ratio(p.matched_object_tokens, p.object_tokens);
        p.all_token_fraction = ratio(p.matched_visual_tokens, p.visual_tokens);
        points.push(p);
    }
    Ok(SparsityCurve { k, points })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}
