//! Dead-token detection and the sink / dead / alive split of visual tokens.
//!
//! The dead cluster is operationalized by [`DeadCriteria`]: an image's largest
//! cluster is dead when its centroid is stable across a gallery of images, is not
//! dominated by sink tokens, and lies farther from the text centroid than most of
//! the image's other clusters.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::{anchor_cluster, ClusterSet};
use crate::dumpio::{names, Bundle};
use crate::error::{Error, Result};
use crate::linalg::{cosine, dot, l2_norm, mean_of_rows, normalize_mean, Matrix};
use crate::sinks::{sink_report, SinkConfig, SinkReport};

/// Unit mean of the nonzero vocabulary rows.
pub fn text_centroid(vocab_embed: &Matrix) -> Result<Vec<f32>> {
    let rows = vocab_embed.iter_rows().filter(|r| l2_norm(r) > 0.0);
    let (mean, count) = mean_of_rows(rows, vocab_embed.cols());
    if count == 0 {
        return Err(Error::DegenerateCentroid);
    }
    let scale = vocab_embed.iter_rows().map(l2_norm).sum::<f64>() / count as f64;
    normalize_mean(&mean, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextProximity {
    /// `1 - cosine(token, text_center)` in `[0, 2]`; `None` for zero tokens.
    pub distance: Vec<Option<f64>>,
    pub zero_rows: Vec<usize>,
}

pub fn text_proximity(visual_embed: &Matrix, text_center: &[f32]) -> Result<TextProximity> {
    if visual_embed.cols() != text_center.len() {
        return Err(Error::DimMismatch {
            expected: text_center.len(),
            got: visual_embed.cols(),
        });
    }
    let mut out = TextProximity {
        distance: Vec::with_capacity(visual_embed.rows()),
        zero_rows: Vec::new(),
    };
    for (i, row) in visual_embed.iter_rows().enumerate() {
        match cosine(row, text_center) {
            Some(c) => out.distance.push(Some((1.0 - c).clamp(0.0, 2.0))),
            None => {
                out.zero_rows.push(i);
                out.distance.push(None);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeadCriteria {
    /// Minimum mean cosine between the candidate centroid and the matched
    /// centroids of the reference images.
    pub min_cross_image_sim: f64,
    /// Number of other gallery images used as references.
    pub gallery_size: usize,
    /// Only the largest cluster may be dead. When false, clusters are tried in
    /// size order and matched to each reference image's best cluster.
    pub require_rank0: bool,
    /// The candidate's text distance must exceed this quantile of the image's
    /// cluster-centroid text distances.
    pub text_distance_quantile: f64,
    /// Largest fraction of sink tokens a cluster may contain and still be dead.
    /// Zero demands full disjointness from the sinks.
    pub max_sink_fraction: f64,
}

impl Default for DeadCriteria {
    fn default() -> Self {
        Self {
            min_cross_image_sim: 0.95,
            gallery_size: 32,
            require_rank0: true,
            text_distance_quantile: 0.5,
            max_sink_fraction: 0.5,
        }
    }
}

impl DeadCriteria {
    pub fn check(&self) -> Result<()> {
        let ok = (-1.0..=1.0).contains(&self.min_cross_image_sim)
            && self.gallery_size >= 1
            && (0.0..=1.0).contains(&self.text_distance_quantile)
            && (0.0..=1.0).contains(&self.max_sink_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "dead criteria out of range: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadDecision {
    pub image_id: String,
    pub dead: Vec<usize>,
    /// Size rank of the cluster declared dead.
    pub cluster_rank: Option<usize>,
    /// Stability, sink fraction and text distance of the last candidate examined.
    pub cross_image_sim: Option<f64>,
    pub sink_fraction: Option<f64>,
    pub text_distance: Option<f64>,
    pub text_distance_cutoff: Option<f64>,
    /// Why no cluster qualified.
    pub diagnostic: Option<String>,
}

/// Linear-interpolation quantile of unsorted values.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Decides each image's dead set. `sinks[i]` lists the sink tokens of `cluster_sets[i]`'s image.
pub fn detect_dead(
    cluster_sets: &[ClusterSet],
    crit: &DeadCriteria,
    sinks: &[Vec<usize>],
    text_center: &[f32],
) -> Result<Vec<DeadDecision>> {
    crit.check()?;
    if cluster_sets.len() < 2 {
        return Err(Error::InsufficientGallery(cluster_sets.len()));
    }
    if sinks.len() != cluster_sets.len() {
        return Err(Error::DimMismatch {
            expected: cluster_sets.len(),
            got: sinks.len(),
        });
    }
    let tau = cluster_sets[0].tau;
    if cluster_sets.iter().any(|cs| cs.tau != tau) {
        return Err(Error::InvalidConfig(
            "gallery clustered at different tau values".into(),
        ));
    }

    let mut out = Vec::with_capacity(cluster_sets.len());
    for (i, cs) in cluster_sets.iter().enumerate() {
        let references: Vec<&ClusterSet> = cluster_sets
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, c)| c)
            .take(crit.gallery_size)
            .collect();
        let sink_set: BTreeSet<usize> = sinks[i].iter().copied().collect();
        let distances: Vec<f64> = cs
            .clusters
            .iter()
            .filter_map(|c| cosine(&c.centroid, text_center).map(|s| 1.0 - s))
            .collect();
        let cutoff =
            (!distances.is_empty()).then(|| quantile(&distances, crit.text_distance_quantile));

        let mut decision = DeadDecision {
            image_id: cs.image_id.clone(),
            dead: Vec::new(),
            cluster_rank: None,
            cross_image_sim: None,
            sink_fraction: None,
            text_distance: None,
            text_distance_cutoff: cutoff,
            diagnostic: None,
        };
        let candidates = if crit.require_rank0 {
            1
        } else {
            cs.ranking.len()
        };
        let mut reasons = Vec::new();
        for rank in 0..candidates {
            let Some(cluster) = cs.ranked(rank) else {
                break;
            };
            let stability = references
                .iter()
                .map(|r| {
                    if crit.require_rank0 {
                        r.largest()
                            .map(|c| dot(&cluster.centroid, &c.centroid))
                            .unwrap_or(-1.0)
                    } else {
                        r.clusters
                            .iter()
                            .map(|c| dot(&cluster.centroid, &c.centroid))
                            .fold(-1.0, f64::max)
                    }
                })
                .sum::<f64>()
                / references.len() as f64;
            let sink_fraction = cluster
                .member_indices
                .iter()
                .filter(|m| sink_set.contains(m))
                .count() as f64
                / cluster.len() as f64;
            let distance = cosine(&cluster.centroid, text_center).map(|s| 1.0 - s);
            decision.cross_image_sim = Some(stability);
            decision.sink_fraction = Some(sink_fraction);
            decision.text_distance = distance;

            let mut failed = Vec::new();
            if stability < crit.min_cross_image_sim {
                failed.push(format!(
                    "cross-image similarity {stability:.4} < {}",
                    crit.min_cross_image_sim
                ));
            }
            if sink_fraction > crit.max_sink_fraction {
                failed.push(format!(
                    "sink fraction {sink_fraction:.3} > {}",
                    crit.max_sink_fraction
                ));
            }
            match (distance, cutoff) {
                (Some(d), Some(c)) if d > c => {}
                (Some(d), Some(c)) => failed.push(format!(
                    "text distance {d:.4} does not exceed cutoff {c:.4}"
                )),
                _ => failed.push("zero centroid".into()),
            }
            if failed.is_empty() {
                decision.dead = cluster.member_indices.clone();
                decision.dead.sort_unstable();
                decision.cluster_rank = Some(rank);
                break;
            }
            reasons.push(format!("rank {rank}: {}", failed.join("; ")));
        }
        if decision.cluster_rank.is_none() {
            decision.diagnostic = Some(reasons.join(" | "));
        }
        out.push(decision);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    SinkVit,
    SinkLlm,
    Dead,
    Alive,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::SinkVit, Group::SinkLlm, Group::Dead, Group::Alive];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::SinkVit => "sink_vit",
            Group::SinkLlm => "sink_llm",
            Group::Dead => "dead",
            Group::Alive => "alive",
        }
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown group `{s}`")))
    }
}

/// Per-image assignment of visual tokens (0-based within the visual range).
///
/// The two sink sets may overlap; after merging them into one sink group the
/// sink, dead and alive groups are disjoint and cover the visual range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPartition {
    pub image_id: String,
    pub num_visual: usize,
    pub sink_vit: Vec<usize>,
    pub sink_llm: Vec<usize>,
    pub dead: Vec<usize>,
    pub alive: Vec<usize>,
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

impl TokenPartition {
    pub fn group(&self, g: Group) -> &[usize] {
        match g {
            Group::SinkVit => &self.sink_vit,
            Group::SinkLlm => &self.sink_llm,
            Group::Dead => &self.dead,
            Group::Alive => &self.alive,
        }
    }

    pub fn sinks(&self) -> Vec<usize> {
        let s: BTreeSet<usize> = self
            .sink_vit
            .iter()
            .chain(&self.sink_llm)
            .copied()
            .collect();
        s.into_iter().collect()
    }

    /// Disjoint groups used by group-level metrics: `sink`, `dead`, `alive`.
    pub fn resolved_groups(&self) -> Vec<(String, Vec<usize>)> {
        vec![
            ("sink".into(), self.sinks()),
            ("dead".into(), self.dead.clone()),
            ("alive".into(), self.alive.clone()),
        ]
    }

    /// Verifies the disjoint-cover invariant.
    pub fn check(&self) -> Result<()> {
        let mut seen = vec![false; self.num_visual];
        for (_, members) in self.resolved_groups() {
            for i in members {
                if i >= self.num_visual {
                    return Err(Error::IndexOutOfRange {
                        index: i,
                        len: self.num_visual,
                    });
                }
                if seen[i] {
                    return Err(Error::InvalidSpec(format!(
                        "token {i} of `{}` appears in two groups",
                        self.image_id
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidSpec(format!(
                "token {i} of `{}` is unassigned",
                self.image_id
            )));
        }
        Ok(())
    }
}

/// Builds the partition; tokens flagged both sink and dead stay sinks.
pub fn tri_partition(
    image_id: &str,
    num_visual: usize,
    sink_vit: &[usize],
    sink_llm: &[usize],
    dead: &[usize],
) -> Result<TokenPartition> {
    let to_set = |v: &[usize]| -> Result<BTreeSet<usize>> {
        v.iter()
            .map(|&i| {
                if i < num_visual {
                    Ok(i)
                } else {
                    Err(Error::IndexOutOfRange {
                        index: i,
                        len: num_visual,
                    })
                }
            })
            .collect()
    };
    let vit = to_set(sink_vit)?;
    let llm = to_set(sink_llm)?;
    let sinks: BTreeSet<usize> = vit.union(&llm).copied().collect();
    let dead: BTreeSet<usize> = to_set(dead)?.difference(&sinks).copied().collect();
    let alive = (0..num_visual)
        .filter(|i| !sinks.contains(i) && !dead.contains(i))
        .collect();
    Ok(TokenPartition {
        image_id: image_id.to_string(),
        num_visual,
        sink_vit: vit.into_iter().collect(),
        sink_llm: llm.into_iter().collect(),
        dead: dead.into_iter().collect(),
        alive,
        provenance: BTreeMap::new(),
    })
}

/// Partitions of several images, keyed by image id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PartitionFile {
    pub images: BTreeMap<String, TokenPartition>,
}

impl PartitionFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: PartitionFile = serde_json::from_str(text)?;
        for p in file.images.values() {
            p.check()?;
        }
        Ok(file)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Everything produced by [`run_partition`].
#[derive(Debug, Clone)]
pub struct PartitionRun {
    pub partitions: PartitionFile,
    pub clusters: Vec<ClusterSet>,
    pub sinks: Vec<SinkReport>,
    pub decisions: Vec<DeadDecision>,
}

/// Clusters projected visual tokens at `tau`, detects sinks and dead tokens over
/// the gallery, and partitions every gallery image.
pub fn run_partition(
    bundle: &Bundle,
    gallery: &[String],
    tau: f64,
    sink_cfg: &SinkConfig,
    crit: &DeadCriteria,
) -> Result<PartitionRun> {
    if gallery.len() < 2 {
        return Err(Error::InsufficientGallery(gallery.len()));
    }
    let vocab = bundle.require(names::INPUT_VOCAB)?;
    let center = text_centroid(&vocab)?;
    let mut clusters = Vec::with_capacity(gallery.len());
    let mut sinks = Vec::with_capacity(gallery.len());
    for image in gallery {
        let proj = bundle.visual_states(image, 0)?;
        clusters.push(anchor_cluster(image, &proj, tau)?);
        sinks.push(sink_report(bundle, image, sink_cfg)?);
    }
    let sink_sets: Vec<Vec<usize>> = sinks.iter().map(SinkReport::all_sinks).collect();
    let decisions = detect_dead(&clusters, crit, &sink_sets, &center)?;

    let mut partitions = PartitionFile::default();
    for ((cs, report), decision) in clusters.iter().zip(&sinks).zip(&decisions) {
        let mut p = tri_partition(
            &cs.image_id,
            cs.num_tokens(),
            &report.vit_sink_indices,
            &report.llm_sink_indices,
            &decision.dead,
        )?;
        p.provenance = BTreeMap::from([
            ("tau".to_string(), tau.to_string()),
            ("sink_config".to_string(), serde_json::to_string(sink_cfg)?),
            ("dead_criteria".to_string(), serde_json::to_string(crit)?),
            (
                "vit_available".to_string(),
                report.vit_available.to_string(),
            ),
        ]);
        partitions.images.insert(cs.image_id.clone(), p);
    }
    Ok(PartitionRun {
        partitions,
        clusters,
        sinks,
        decisions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_centroid_cases() {
        let anti = Matrix::from_rows(&[[1.0f32, 2.0], [-1.0, -2.0]]).unwrap();
        assert!(matches!(
            text_centroid(&anti),
            Err(Error::DegenerateCentroid)
        ));
        let one = Matrix::from_rows(&[[3.0f32, 4.0]]).unwrap();
        assert_eq!(text_centroid(&one).unwrap(), vec![0.6, 0.8]);
        // zero rows are ignored
        let padded = Matrix::from_rows(&[[0.0f32, 0.0], [3.0, 4.0]]).unwrap();
        assert_eq!(text_centroid(&padded).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn proximity_extremes() {
        let c = [0.6f32, 0.8];
        let m = Matrix::from_rows(&[[0.6f32, 0.8], [-0.6, -0.8], [0.0, 0.0]]).unwrap();
        let p = text_proximity(&m, &c).unwrap();
        assert!(p.distance[0].unwrap().abs() < 1e-7);
        assert!((p.distance[1].unwrap() - 2.0).abs() < 1e-7);
        assert_eq!(p.zero_rows, vec![2]);
    }

    #[test]
    fn tri_partition_empty_inputs() {
        let p = tri_partition("x", 5, &[], &[], &[]).unwrap();
        assert_eq!(p.alive, vec![0, 1, 2, 3, 4]);
        p.check().unwrap();
    }

    #[test]
    fn sink_wins_over_dead() {
        let p = tri_partition("x", 6, &[0, 1], &[1, 2], &[2, 3]).unwrap();
        assert_eq!(p.sinks(), vec![0, 1, 2]);
        assert_eq!(p.dead, vec![3]);
        assert_eq!(p.alive, vec![4, 5]);
        p.check().unwrap();
        assert!(matches!(
            tri_partition("x", 3, &[3], &[], &[]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
        assert_eq!(quantile(&[1.0, 2.0, 4.0], 1.0), 4.0);
    }

    #[test]
    fn group_names() {
        for g in Group::ALL {
            assert_eq!(g.as_str().parse::<Group>().unwrap(), g);
            assert_eq!(
                serde_json::to_string(&g).unwrap(),
                format!("\"{}\"", g.as_str())
            );
        }
    }

    #[test]
    fn criteria_json_defaults() {
        let c: DeadCriteria = serde_json::from_str("{\"min_cross_image_sim\": 0.9}").unwrap();
        assert_eq!(c.gallery_size, 32);
        assert!(c.require_rank0);
        assert!(DeadCriteria {
            text_distance_quantile: 1.5,
            ..c
        }
        .check()
        .is_err());
    }
}
