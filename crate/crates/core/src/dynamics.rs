//! Layer-wise metrics for groups of visual tokens.
//!
//! Hidden states are read one layer at a time with [`Bundle::load_tensor`] so a
//! trajectory over many layers never holds more than one layer in memory.

use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dumpio::{names, Bundle};
use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, l1_norm, l2_norm, Matrix};
use crate::partition::TokenPartition;
use crate::probe::{sparsity_curve, MatchRule, SparsityCurve};
use crate::sinks::drop_cls;

/// Which tower a trajectory reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Vit,
    Llm,
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Source::Vit),
            "llm" => Ok(Source::Llm),
            other => Err(Error::InvalidConfig(format!(
                "unknown source `{other}` (expected vit or llm)"
            ))),
        }
    }
}

/// Which positions a group's indices refer to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// 0-based offsets into the visual range.
    Visual,
    /// Absolute sequence positions (LLM only), e.g. the text tokens.
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGroup {
    pub label: String,
    pub indices: Vec<usize>,
    pub region: Region,
}

impl TokenGroup {
    pub fn visual(label: impl Into<String>, indices: Vec<usize>) -> Self {
        Self {
            label: label.into(),
            indices,
            region: Region::Visual,
        }
    }

    /// The text span of an image's prompt.
    pub fn text(bundle: &Bundle, image: &str) -> Result<Self> {
        let roles = bundle.image_roles(image)?;
        Ok(Self {
            label: "text".into(),
            indices: (roles.text.start..roles.text.end).collect(),
            region: Region::Sequence,
        })
    }
}

/// Groups of a partition: `sink`, `dead`, `alive`.
pub fn partition_groups(p: &TokenPartition) -> Vec<TokenGroup> {
    p.resolved_groups()
        .into_iter()
        .map(|(label, indices)| TokenGroup::visual(label, indices))
        .collect()
}

/// One scalar per layer for one group. `None` where the value is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTrace {
    pub group: String,
    pub layers: Vec<usize>,
    pub values: Vec<Option<f64>>,
}

/// Writes traces as long-format CSV with header `layer,group,value`.
/// Undefined values are left empty.
pub fn write_long_csv<W: Write>(traces: &[GroupTrace], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "group", "value"])
        .map_err(csv_err)?;
    for t in traces {
        for (layer, value) in t.layers.iter().zip(&t.values) {
            let value = value.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([layer.to_string(), t.group.clone(), value])
                .map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidConfig(format!("csv: {e}"))
}

/// LLM layers available for an image, ascending.
pub fn llm_layers(bundle: &Bundle, image: &str) -> Vec<usize> {
    let last = bundle.num_layers().unwrap_or(0);
    (0..=last)
        .filter(|&l| {
            bundle.has_tensor(&names::hidden(image, l))
                || (l == 0 && bundle.has_tensor(&names::visual_proj(image)))
        })
        .collect()
}

pub fn vit_layers(bundle: &Bundle, image: &str) -> Vec<usize> {
    match bundle.vit_last_layer() {
        Some(last) => (0..=last)
            .filter(|&l| bundle.has_tensor(&names::vit_hidden(image, l)))
            .collect(),
        None => Vec::new(),
    }
}

fn layers_of(bundle: &Bundle, image: &str, source: Source) -> Result<Vec<usize>> {
    let layers = match source {
        Source::Llm => llm_layers(bundle, image),
        Source::Vit => vit_layers(bundle, image),
    };
    if layers.is_empty() {
        let name = match source {
            Source::Llm => names::hidden(image, 0),
            Source::Vit => names::vit_hidden(image, 0),
        };
        return Err(Error::MissingTensor(name));
    }
    Ok(layers)
}

/// Rows of `group` at one layer.
fn group_rows(
    bundle: &Bundle,
    image: &str,
    source: Source,
    layer: usize,
    group: &TokenGroup,
) -> Result<Matrix> {
    let roles = bundle.image_roles(image)?;
    match (source, group.region) {
        (Source::Vit, Region::Sequence) => Err(Error::InvalidConfig(format!(
            "group `{}` uses sequence positions, which have no ViT states",
            group.label
        ))),
        (Source::Vit, Region::Visual) => {
            let vit = bundle.load_tensor(&names::vit_hidden(image, layer))?;
            drop_cls(vit, roles.num_visual())?.select_rows(&group.indices)
        }
        (Source::Llm, region) => {
            let hidden = names::hidden(image, layer);
            if !bundle.has_tensor(&hidden) {
                if layer == 0 && region == Region::Visual {
                    return bundle
                        .load_tensor(&names::visual_proj(image))?
                        .select_rows(&group.indices);
                }
                return Err(Error::MissingLayer(layer));
            }
            let h = bundle.load_tensor(&hidden)?;
            match region {
                Region::Sequence => h.select_rows(&group.indices),
                Region::Visual => {
                    let n_v = roles.num_visual();
                    let positions = group
                        .indices
                        .iter()
                        .map(|&i| {
                            if i < n_v {
                                Ok(roles.visual.start + i)
                            } else {
                                Err(Error::IndexOutOfRange { index: i, len: n_v })
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    h.select_rows(&positions)
                }
            }
        }
    }
}

/// Mean cosine over unordered pairs of rows; pairs involving a zero row are skipped.
pub fn mean_pairwise_cosine(rows: &Matrix) -> Option<f64> {
    let n = rows.rows();
    let norms: Vec<f64> = rows.iter_rows().map(l2_norm).collect();
    // per-row partials are combined in index order so the sum does not depend on the thread count
    let partials: Vec<(f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut s = 0.0;
            let mut c = 0usize;
            for j in i + 1..n {
                if norms[i] > 0.0 && norms[j] > 0.0 {
                    s += dot(rows.row(i), rows.row(j)) / (norms[i] * norms[j]);
                    c += 1;
                }
            }
            (s, c)
        })
        .collect();
    let (sum, count) = partials
        .iter()
        .fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    (count > 0).then(|| sum / count as f64)
}

/// Per-layer mean pairwise cosine of the members' LLM states.
pub fn in_cluster_consistency(
    bundle: &Bundle,
    image: &str,
    members: &[usize],
) -> Result<GroupTrace> {
    if members.len() < 2 {
        return Err(Error::TooFewMembers(members.len()));
    }
    let group = TokenGroup::visual("members", members.to_vec());
    let layers = layers_of(bundle, image, Source::Llm)?;
    let values = layers
        .iter()
        .map(|&l| {
            group_rows(bundle, image, Source::Llm, l, &group).map(|m| mean_pairwise_cosine(&m))
        })
        .collect::<Result<_>>()?;
    Ok(GroupTrace {
        group: group.label,
        layers,
        values,
    })
}

/// Denominator of the attention-flow fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowNorm {
    /// Mass into all visual keys; group fractions sum to one.
    #[default]
    WithinVisual,
    /// Mass into all keys from the text queries.
    Absolute,
}

impl FromStr for FlowNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within_visual" | "within-visual" => Ok(FlowNorm::WithinVisual),
            "absolute" => Ok(FlowNorm::Absolute),
            other => Err(Error::InvalidConfig(format!(
                "unknown attention normalization `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFlow {
    pub image_id: String,
    pub norm: FlowNorm,
    pub layers: Vec<usize>,
    /// Share of text→visual attention received by each group.
    pub mass_fraction: Vec<GroupTrace>,
    /// `mass_fraction / |group|`; undefined for empty groups.
    pub token_mean: Vec<GroupTrace>,
    /// Labels of empty groups.
    pub empty_groups: Vec<String>,
}

/// Text→visual attention split over the partition's sink, dead and alive groups.
pub fn attention_flow(
    bundle: &Bundle,
    image: &str,
    partition: &TokenPartition,
    norm: FlowNorm,
) -> Result<AttentionFlow> {
    partition.check()?;
    attention_flow_groups(bundle, image, &partition_groups(partition), norm)
}

/// Like [`attention_flow`] for arbitrary visual groups.
pub fn attention_flow_groups(
    bundle: &Bundle,
    image: &str,
    groups: &[TokenGroup],
    norm: FlowNorm,
) -> Result<AttentionFlow> {
    let roles = bundle.image_roles(image)?;
    let last = bundle.num_layers().unwrap_or(0);
    let layers: Vec<usize> = (1..=last.max(1))
        .filter(|&l| bundle.has_tensor(&names::attn(image, l)))
        .collect();
    if layers.is_empty() {
        return Err(Error::MissingAttention(image.to_string()));
    }
    let n_v = roles.num_visual();
    for g in groups {
        if g.region != Region::Visual {
            return Err(Error::InvalidConfig(format!(
                "attention groups must be visual, `{}` is not",
                g.label
            )));
        }
        if let Some(&i) = g.indices.iter().find(|&&i| i >= n_v) {
            return Err(Error::IndexOutOfRange { index: i, len: n_v });
        }
    }

    let per_layer: Vec<Vec<f64>> = layers
        .par_iter()
        .map(|&l| {
            let attn = bundle.load_tensor(&names::attn(image, l))?;
            let n = roles.seq_len();
            if attn.rows() != n || attn.cols() != n {
                return Err(Error::DimMismatch {
                    expected: n,
                    got: attn.cols(),
                });
            }
            // key-wise mass summed over text queries
            let mut into_key = vec![0.0f64; n];
            for q in roles.text.start..roles.text.end {
                for (acc, &a) in into_key.iter_mut().zip(attn.row(q)) {
                    *acc += a as f64;
                }
            }
            let visual_mass: f64 = into_key[roles.visual.start..roles.visual.end].iter().sum();
            let denom = match norm {
                FlowNorm::WithinVisual => visual_mass,
                FlowNorm::Absolute => into_key.iter().sum(),
            };
            Ok(groups
                .iter()
                .map(|g| {
                    let mass: f64 = g
                        .indices
                        .iter()
                        .map(|&i| into_key[roles.visual.start + i])
                        .sum();
                    if denom > 0.0 {
                        mass / denom
                    } else {
                        0.0
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut flow = AttentionFlow {
        image_id: image.to_string(),
        norm,
        layers: layers.clone(),
        mass_fraction: Vec::new(),
        token_mean: Vec::new(),
        empty_groups: Vec::new(),
    };
    for (gi, g) in groups.iter().enumerate() {
        let fractions: Vec<f64> = per_layer.iter().map(|row| row[gi]).collect();
        if g.indices.is_empty() {
            flow.empty_groups.push(g.label.clone());
        }
        flow.token_mean.push(GroupTrace {
            group: g.label.clone(),
            layers: layers.clone(),
            values: fractions
                .iter()
                .map(|&f| (!g.indices.is_empty()).then(|| f / g.indices.len() as f64))
                .collect(),
        });
        flow.mass_fraction.push(GroupTrace {
            group: g.label.clone(),
            layers: layers.clone(),
            values: fractions.into_iter().map(Some).collect(),
        });
    }
    Ok(flow)
}

/// Which vector norm a trajectory reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    L1,
    L2,
}

impl NormKind {
    pub fn from_p(p: u32) -> Result<Self> {
        match p {
            1 => Ok(NormKind::L1),
            2 => Ok(NormKind::L2),
            other => Err(Error::InvalidConfig(format!(
                "unsupported norm order {other} (expected 1 or 2)"
            ))),
        }
    }

    pub fn apply(&self, v: &[f32]) -> f64 {
        match self {
            NormKind::L1 => l1_norm(v),
            NormKind::L2 => l2_norm(v),
        }
    }
}

/// Per-layer mean p-norm of each group's tokens.
pub fn norm_trajectory(
    bundle: &Bundle,
    image: &str,
    groups: &[TokenGroup],
    p: NormKind,
    source: Source,
) -> Result<Vec<GroupTrace>> {
    let layers = layers_of(bundle, image, source)?;
    groups
        .iter()
        .map(|g| {
            let values = layers
                .iter()
                .map(|&l| {
                    let rows = group_rows(bundle, image, source, l, g)?;
                    let n = rows.rows();
                    Ok((n > 0)
                        .then(|| rows.iter_rows().map(|r| p.apply(r)).sum::<f64>() / n as f64))
                })
                .collect::<Result<_>>()?;
            Ok(GroupTrace {
                group: g.label.clone(),
                layers: layers.clone(),
                values,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub layers: Vec<usize>,
    /// `values[a][b]` is the mean over members of cos(h_{layers[a]}, h_{layers[b]}).
    pub values: Vec<Vec<f64>>,
}

/// Mean per-token cosine between every pair of layers.
pub fn layer_similarity_map(
    bundle: &Bundle,
    image: &str,
    members: &[usize],
    source: Source,
) -> Result<SimilarityMap> {
    if members.is_empty() {
        return Err(Error::TooFewMembers(0));
    }
    let layers = layers_of(bundle, image, source)?;
    let group = TokenGroup::visual("members", members.to_vec());
    let states: Vec<Matrix> = layers
        .iter()
        .map(|&l| group_rows(bundle, image, source, l, &group))
        .collect::<Result<_>>()?;
    Ok(SimilarityMap {
        values: similarity_matrix(&states),
        layers,
    })
}

/// Symmetric layer × layer map over per-layer member states of equal shape.
pub fn similarity_matrix(states: &[Matrix]) -> Vec<Vec<f64>> {
    let n = states.len();
    let mut out = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a..n {
            let sims: Vec<f64> = (0..states[a].rows())
                .filter_map(|i| cosine(states[a].row(i), states[b].row(i)))
                .collect();
            let v = if a == b {
                1.0
            } else if sims.is_empty() {
                0.0
            } else {
                sims.iter().sum::<f64>() / sims.len() as f64
            };
            out[a][b] = v;
            out[b][a] = v;
        }
    }
    out
}

/// Shannon entropy (nats) of `softmax(logits)`, computed with log-sum-exp.
pub fn softmax_entropy(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let h: f64 = logits
        .iter()
        .map(|&z| {
            let log_p = z - lse;
            -log_p.exp() * log_p
        })
        .sum();
    h.clamp(0.0, (logits.len() as f64).ln())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub group: String,
    pub layer: usize,
    pub indices: Vec<usize>,
    pub entropy: Vec<f64>,
    pub mean: Option<f64>,
}

/// Entropy of the output distribution of each member's final-layer state.
pub fn output_entropy(bundle: &Bundle, image: &str, members: &[usize]) -> Result<EntropyReport> {
    group_entropy(
        bundle,
        image,
        &TokenGroup::visual("members", members.to_vec()),
    )
}

pub fn group_entropy(bundle: &Bundle, image: &str, group: &TokenGroup) -> Result<EntropyReport> {
    let unembed = bundle.require(names::OUTPUT_VOCAB)?;
    let layer = *layers_of(bundle, image, Source::Llm)?
        .last()
        .expect("non-empty layers");
    let rows = group_rows(bundle, image, Source::Llm, layer, group)?;
    if rows.cols() != unembed.cols() {
        return Err(Error::DimMismatch {
            expected: unembed.cols(),
            got: rows.cols(),
        });
    }
    let entropy: Vec<f64> = (0..rows.rows())
        .into_par_iter()
        .map(|i| {
            let logits: Vec<f64> = unembed.iter_rows().map(|u| dot(u, rows.row(i))).collect();
            softmax_entropy(&logits)
        })
        .collect();
    let mean = (!entropy.is_empty()).then(|| entropy.iter().sum::<f64>() / entropy.len() as f64);
    Ok(EntropyReport {
        group: group.label.clone(),
        layer,
        indices: group.indices.clone(),
        entropy,
        mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateEntryCurve {
    pub entry_layer: usize,
    /// Points carry absolute LLM layers: stored layer index plus `entry_layer`.
    pub curve: SparsityCurve,
}

/// Sparsity curves of late-entry exports, re-indexed to absolute layers.
///
/// A late-entry bundle numbers its hidden states from the injection point, so its
/// layer 0 is the projected tokens entering at `meta.entry_layer`.
pub fn late_entry_grounding(
    bundles: &[&Bundle],
    k: usize,
    matcher: MatchRule,
) -> Result<Vec<LateEntryCurve>> {
    bundles
        .iter()
        .map(|b| {
            let entry_layer = b.entry_layer();
            let mut curve = sparsity_curve(b, k, matcher)?;
            for p in &mut curve.points {
                p.layer += entry_layer;
            }
            Ok(LateEntryCurve { entry_layer, curve })
        })
        .collect()
}
