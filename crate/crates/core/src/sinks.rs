//! Visual attention-sink detection and bos-alignment tracing.
//!
//! ViT sinks are tokens whose final-layer vision-encoder state has an L2 norm above
//! a threshold. LLM sinks are tokens whose designated sink channels dominate the
//! hidden state's RMS:
//!
//! ```text
//! phi(x) = max_{c in D_sink} |x[c]| / sqrt(mean_d x[d]^2)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{homogeneity_stats, HomogeneityStats};
use crate::dumpio::{names, Bundle, ImageRoles};
use crate::error::{Error, Result};
use crate::linalg::{cosine, l2_norm, mean_of_rows, normalize_mean, Matrix};

/// Detection thresholds. The channel defaults are those of LLaMA-2-7B backbones
/// and must be overridden for other model families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkConfig {
    pub vit_norm_threshold: f64,
    pub sink_channels: Vec<usize>,
    pub phi_threshold: f64,
    /// LLM layer whose visual states are scanned for sink channels (0 = embeddings).
    pub llm_layer: usize,
}

impl Default for SinkConfig {
    fn default() -> Self {
        Self {
            vit_norm_threshold: 75.0,
            sink_channels: vec![1415, 2533],
            phi_threshold: 20.0,
            llm_layer: 0,
        }
    }
}

impl SinkConfig {
    pub fn check(&self, dim: usize) -> Result<()> {
        if !(self.vit_norm_threshold > 0.0) || !(self.phi_threshold > 0.0) {
            return Err(Error::InvalidConfig("sink thresholds must be > 0".into()));
        }
        if self.sink_channels.is_empty() {
            return Err(Error::InvalidConfig("sink_channels is empty".into()));
        }
        if let Some(&c) = self.sink_channels.iter().find(|&&c| c >= dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                got: c,
            });
        }
        Ok(())
    }
}

/// Rows whose L2 norm exceeds the threshold.
pub fn detect_vit_sinks(vit_last_hidden: &Matrix, cfg: &SinkConfig) -> Vec<usize> {
    vit_last_hidden
        .iter_rows()
        .enumerate()
        .filter(|(_, r)| l2_norm(r) > cfg.vit_norm_threshold)
        .map(|(i, _)| i)
        .collect()
}

pub fn sink_channel_ratio(x: &[f32], sink_channels: &[usize]) -> Result<f64> {
    let rms = (x.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
    if !(rms > 0.0) {
        return Err(Error::ZeroVector);
    }
    sink_channels
        .iter()
        .map(|&c| {
            x.get(c)
                .map(|&v| f64::from(v).abs() / rms)
                .ok_or(Error::DimMismatch {
                    expected: x.len(),
                    got: c,
                })
        })
        .try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmSinkScan {
    pub indices: Vec<usize>,
    /// `phi` per token; `None` where the token is the zero vector.
    pub phi: Vec<Option<f64>>,
    pub zero_rows: Vec<usize>,
}

/// Tokens with `phi > cfg.phi_threshold`. Zero tokens are reported, not fatal.
pub fn detect_llm_sinks(visual_embed: &Matrix, cfg: &SinkConfig) -> Result<LlmSinkScan> {
    cfg.check(visual_embed.cols())?;
    let mut scan = LlmSinkScan {
        indices: Vec::new(),
        phi: Vec::with_capacity(visual_embed.rows()),
        zero_rows: Vec::new(),
    };
    for (i, row) in visual_embed.iter_rows().enumerate() {
        match sink_channel_ratio(row, &cfg.sink_channels) {
            Ok(phi) => {
                if phi > cfg.phi_threshold {
                    scan.indices.push(i);
                }
                scan.phi.push(Some(phi));
            }
            Err(Error::ZeroVector) => {
                scan.zero_rows.push(i);
                scan.phi.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(scan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkReport {
    pub image_id: String,
    /// Visual-token indices (0-based within the visual range).
    pub vit_sink_indices: Vec<usize>,
    pub llm_sink_indices: Vec<usize>,
    pub phi: Vec<Option<f64>>,
    /// Final-layer ViT norm per visual token; empty when the bundle has no ViT states.
    pub vit_norms: Vec<f64>,
    pub vit_available: bool,
    pub zero_rows: Vec<usize>,
}

impl SinkReport {
    /// Union of both sink sets, sorted.
    pub fn all_sinks(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self
            .vit_sink_indices
            .iter()
            .chain(&self.llm_sink_indices)
            .copied()
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

/// Final ViT layer rows aligned to visual tokens: a leading class token is dropped.
fn aligned_vit(bundle: &Bundle, image: &str, n_visual: usize) -> Result<Option<Matrix>> {
    let Some(last) = bundle.vit_last_layer() else {
        return Ok(None);
    };
    let name = names::vit_hidden(image, last);
    if !bundle.has_tensor(&name) {
        return Ok(None);
    }
    drop_cls(bundle.load_tensor(&name)?, n_visual).map(Some)
}

/// Aligns ViT rows with the visual tokens, dropping a leading CLS row if present.
pub(crate) fn drop_cls(vit: Matrix, n_visual: usize) -> Result<Matrix> {
    match vit.rows() {
        r if r == n_visual => Ok(vit),
        r if r == n_visual + 1 => vit.slice_rows(1, r),
        r => Err(Error::DimMismatch {
            expected: n_visual,
            got: r,
        }),
    }
}

pub fn sink_report(bundle: &Bundle, image: &str, cfg: &SinkConfig) -> Result<SinkReport> {
    let states = bundle.visual_states(image, cfg.llm_layer)?;
    let scan = detect_llm_sinks(&states, cfg)?;
    let vit = aligned_vit(bundle, image, states.rows())?;
    let (vit_sink_indices, vit_norms) = match &vit {
        Some(v) => (
            detect_vit_sinks(v, cfg),
            v.iter_rows().map(l2_norm).collect(),
        ),
        None => (Vec::new(), Vec::new()),
    };
    Ok(SinkReport {
        image_id: image.to_string(),
        vit_sink_indices,
        llm_sink_indices: scan.indices,
        phi: scan.phi,
        vit_norms,
        vit_available: vit.is_some(),
        zero_rows: scan.zero_rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GallerySinkReport {
    pub config: SinkConfig,
    pub images: Vec<SinkReport>,
    /// Cross-image homogeneity of per-image ViT-sink centroids (ViT space).
    pub vit_centroid_homogeneity: Option<HomogeneityStats>,
    /// Cross-image homogeneity of per-image LLM-sink centroids.
    pub llm_centroid_homogeneity: Option<HomogeneityStats>,
}

pub fn detect_sinks(
    bundle: &Bundle,
    images: &[String],
    cfg: &SinkConfig,
) -> Result<GallerySinkReport> {
    let mut reports = Vec::with_capacity(images.len());
    let mut vit_centroids = Vec::new();
    let mut llm_centroids = Vec::new();
    for image in images {
        let report = sink_report(bundle, image, cfg)?;
        let states = bundle.visual_states(image, cfg.llm_layer)?;
        if let Some(c) = group_centroid(&states, &report.llm_sink_indices) {
            llm_centroids.push(c);
        }
        if !report.vit_sink_indices.is_empty() {
            if let Some(vit) = aligned_vit(bundle, image, states.rows())? {
                if let Some(c) = group_centroid(&vit, &report.vit_sink_indices) {
                    vit_centroids.push(c);
                }
            }
        }
        reports.push(report);
    }
    Ok(GallerySinkReport {
        config: cfg.clone(),
        images: reports,
        vit_centroid_homogeneity: homogeneity_stats(&vit_centroids).ok(),
        llm_centroid_homogeneity: homogeneity_stats(&llm_centroids).ok(),
    })
}

fn group_centroid(m: &Matrix, rows: &[usize]) -> Option<Vec<f32>> {
    if rows.is_empty() {
        return None;
    }
    let (mean, _) = mean_of_rows(rows.iter().map(|&i| m.row(i)), m.cols());
    normalize_mean(&mean, 1e-30).ok()
}

/// A point in the residual stream: the embedding input or just after a sublayer's
/// contribution was added in a (1-based) layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Embed,
    Att(usize),
    Mlp(usize),
}

impl Stage {
    /// All stages of an `num_layers`-layer model in stream order.
    pub fn sequence(num_layers: usize) -> Vec<Stage> {
        std::iter::once(Stage::Embed)
            .chain((1..=num_layers).flat_map(|l| [Stage::Att(l), Stage::Mlp(l)]))
            .collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Embed => write!(f, "L0"),
            Stage::Att(l) => write!(f, "att{l}"),
            Stage::Mlp(l) => write!(f, "mlp{l}"),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("bad stage `{s}` (expected L0, attN or mlpN)"));
        if s == "L0" {
            return Ok(Stage::Embed);
        }
        let (ctor, rest): (fn(usize) -> Stage, &str) = if let Some(r) = s.strip_prefix("att") {
            (Stage::Att, r)
        } else if let Some(r) = s.strip_prefix("mlp") {
            (Stage::Mlp, r)
        } else {
            return Err(bad());
        };
        match rest.parse::<usize>() {
            Ok(l) if l >= 1 => Ok(ctor(l)),
            _ => Err(bad()),
        }
    }
}

/// Residual states of the selected sequence positions at every stage.
///
/// The attention stage of layer l is `hidden[l-1] + att[l]`; the MLP stage adds
/// `mlp[l]` on top. Tensors are read one at a time and only the requested rows kept.
pub fn stage_states(
    bundle: &Bundle,
    image: &str,
    positions: &[usize],
) -> Result<Vec<(Stage, Matrix)>> {
    let num_layers = bundle
        .num_layers()
        .ok_or_else(|| Error::MissingTensor(names::hidden(image, 0)))?;
    let load = |name: String| -> Result<Matrix> {
        if !bundle.has_tensor(&name) {
            return Err(Error::MissingTensor(name));
        }
        bundle.load_tensor(&name)?.select_rows(positions)
    };
    let mut out = Vec::with_capacity(1 + 2 * num_layers);
    out.push((Stage::Embed, load(names::hidden(image, 0))?));
    for layer in 1..=num_layers {
        let mut state = load(names::hidden(image, layer - 1))?;
        add_assign(&mut state, &load(names::sub_att(image, layer))?);
        out.push((Stage::Att(layer), state.clone()));
        add_assign(&mut state, &load(names::sub_mlp(image, layer))?);
        out.push((Stage::Mlp(layer), state));
    }
    Ok(out)
}

fn add_assign(acc: &mut Matrix, delta: &Matrix) {
    for i in 0..acc.rows() {
        for (a, &d) in acc.row_mut(i).iter_mut().zip(delta.row(i)) {
            *a += d;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub stage: String,
    pub mean_cosine: f64,
}

/// Mean cosine between the sink tokens and the bos token at every stage.
pub fn bos_alignment_trace(
    bundle: &Bundle,
    image: &str,
    sink_indices: &[usize],
) -> Result<Vec<TracePoint>> {
    if sink_indices.is_empty() {
        return Err(Error::EmptySelection);
    }
    let roles = bundle.image_roles(image)?;
    let mut positions = vec![roles.bos.start];
    positions.extend(visual_positions(roles, sink_indices)?);
    let stages = stage_states(bundle, image, &positions)?;
    Ok(stages
        .into_iter()
        .map(|(stage, m)| {
            let bos = m.row(0);
            let sum: f64 = (1..m.rows())
                .map(|r| cosine(m.row(r), bos).unwrap_or(0.0))
                .sum();
            TracePoint {
                stage: stage.to_string(),
                mean_cosine: sum / (m.rows() - 1) as f64,
            }
        })
        .collect())
}

fn visual_positions(roles: &ImageRoles, indices: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            if i >= roles.num_visual() {
                Err(Error::IndexOutOfRange {
                    index: i,
                    len: roles.num_visual(),
                })
            } else {
                Ok(roles.visual_pos(i))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTrace {
    pub probe_stage: String,
    /// Visual-token indices of the tracked tokens, most bos-similar first.
    pub tracked: Vec<usize>,
    /// For each stage from the probe stage on: rank (1 = most similar) of each tracked token.
    pub ranks: Vec<(String, Vec<usize>)>,
}

/// Picks the `top_n` visual tokens most similar to bos at `probe_stage` and reports
/// their bos-similarity ranks among all visual tokens at each later stage.
pub fn bos_rank_trace(
    bundle: &Bundle,
    image: &str,
    probe_stage: Stage,
    top_n: usize,
) -> Result<RankTrace> {
    let roles = bundle.image_roles(image)?;
    let n_v = roles.num_visual();
    if top_n == 0 || top_n > n_v {
        return Err(Error::InvalidConfig(format!(
            "top_n {top_n} outside 1..={n_v}"
        )));
    }
    let mut positions = vec![roles.bos.start];
    positions.extend(roles.visual.range());
    let stages = stage_states(bundle, image, &positions)?;
    let start = stages
        .iter()
        .position(|(s, _)| *s == probe_stage)
        .ok_or_else(|| Error::InvalidLayer(format!("stage {probe_stage} not in bundle")))?;

    let order_at = |m: &Matrix| -> Vec<usize> {
        let bos = m.row(0);
        let sims: Vec<f64> = (1..m.rows())
            .map(|r| cosine(m.row(r), bos).unwrap_or(f64::NEG_INFINITY))
            .collect();
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        order
    };
    let tracked: Vec<usize> = order_at(&stages[start].1)[..top_n].to_vec();
    let ranks = stages[start..]
        .iter()
        .map(|(stage, m)| {
            let order = order_at(m);
            let mut rank_of = vec![0usize; order.len()];
            for (rank, &tok) in order.iter().enumerate() {
                rank_of[tok] = rank + 1;
            }
            (
                stage.to_string(),
                tracked.iter().map(|&t| rank_of[t]).collect(),
            )
        })
        .collect();
    Ok(RankTrace {
        probe_stage: probe_stage.to_string(),
        tracked,
        ranks,
    })
}
