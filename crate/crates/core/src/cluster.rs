//! Greedy anchor clustering of projected visual tokens and cross-image statistics.
//!
//! Tokens are scanned in ascending index order. The first unassigned token becomes
//! an anchor and every unassigned token whose cosine with it is at least `tau`
//! joins its cluster, so clusters are disjoint and cover all tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, l2_norm, mean_of_rows, normalize_mean, normalized, Matrix};
use crate::probe::Lens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub anchor_index: usize,
    pub member_indices: Vec<usize>,
    /// Unit-norm centroid; all zeros for a singleton built from a zero-norm token.
    pub centroid: Vec<f32>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub image_id: String,
    pub tau: f64,
    /// Clusters in anchor order.
    pub clusters: Vec<Cluster>,
    /// Cluster positions sorted by descending size; ties keep anchor order.
    pub ranking: Vec<usize>,
    /// Zero-norm tokens, each left as its own singleton.
    #[serde(default)]
    pub zero_rows: Vec<usize>,
}

impl ClusterSet {
    /// Cluster at size rank `rank` (0 = largest).
    pub fn ranked(&self, rank: usize) -> Option<&Cluster> {
        self.ranking.get(rank).map(|&i| &self.clusters[i])
    }

    pub fn largest(&self) -> Option<&Cluster> {
        self.ranked(0)
    }

    pub fn num_tokens(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    pub fn dim(&self) -> usize {
        self.clusters.first().map(|c| c.centroid.len()).unwrap_or(0)
    }

    /// Cluster position of every token.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.num_tokens()];
        for (c, cluster) in self.clusters.iter().enumerate() {
            for &m in &cluster.member_indices {
                out[m] = c;
            }
        }
        out
    }
}

/// Clusters the rows of `visual_embed` at cosine threshold `tau`.
pub fn anchor_cluster(image_id: &str, visual_embed: &Matrix, tau: f64) -> Result<ClusterSet> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidConfig(format!("tau {tau} outside (0, 1]")));
    }
    let n = visual_embed.rows();
    if n == 0 {
        return Err(Error::DimMismatch {
            expected: 1,
            got: 0,
        });
    }
    let d = visual_embed.cols();
    let norms: Vec<f64> = visual_embed.iter_rows().map(l2_norm).collect();
    let unit: Vec<Vec<f32>> = visual_embed
        .iter_rows()
        .map(|r| normalized(r).unwrap_or_else(|| vec![0.0; d]))
        .collect();

    let mut assigned = vec![false; n];
    let mut clusters = Vec::new();
    let mut zero_rows = Vec::new();
    for anchor in 0..n {
        if assigned[anchor] {
            continue;
        }
        assigned[anchor] = true;
        if norms[anchor] == 0.0 {
            zero_rows.push(anchor);
            clusters.push(Cluster {
                anchor_index: anchor,
                member_indices: vec![anchor],
                centroid: vec![0.0; d],
            });
            continue;
        }
        let a = visual_embed.row(anchor);
        let mut members = vec![anchor];
        for j in anchor + 1..n {
            if assigned[j] || norms[j] == 0.0 {
                continue;
            }
            let cos = dot(a, visual_embed.row(j)) / (norms[anchor] * norms[j]);
            if cos >= tau {
                assigned[j] = true;
                members.push(j);
            }
        }
        let (mean, _) = mean_of_rows(members.iter().map(|&m| unit[m].as_slice()), d);
        let centroid = normalize_mean(&mean, 1.0)?;
        clusters.push(Cluster {
            anchor_index: anchor,
            member_indices: members,
            centroid,
        });
    }

    let mut ranking: Vec<usize> = (0..clusters.len()).collect();
    ranking.sort_by(|&a, &b| clusters[b].len().cmp(&clusters[a].len()));
    Ok(ClusterSet {
        image_id: image_id.to_string(),
        tau,
        clusters,
        ranking,
        zero_rows,
    })
}

/// L2-normalized arithmetic mean of the selected rows.
pub fn centroid(members: &[usize], visual_embed: &Matrix) -> Result<Vec<f32>> {
    if members.is_empty() {
        return Err(Error::TooFewMembers(0));
    }
    let rows = visual_embed.select_rows(members)?;
    let (mean, _) = mean_of_rows(rows.iter_rows(), rows.cols());
    let scale = rows.iter_rows().map(l2_norm).sum::<f64>() / rows.rows() as f64;
    normalize_mean(&mean, scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossImageStats {
    /// `sim[i][j]` = centroid i of the first set · centroid j of the second.
    pub sim: Vec<Vec<f64>>,
    /// Row maxima of `sim`.
    pub best: Vec<f64>,
    /// Column attaining each row maximum (lowest index on ties).
    pub best_match: Vec<usize>,
}

pub fn cross_image_similarity(a: &ClusterSet, b: &ClusterSet) -> Result<CrossImageStats> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let sim: Vec<Vec<f64>> = a
        .clusters
        .iter()
        .map(|ci| {
            b.clusters
                .iter()
                .map(|cj| dot(&ci.centroid, &cj.centroid).clamp(-1.0, 1.0))
                .collect()
        })
        .collect();
    let mut best = Vec::with_capacity(sim.len());
    let mut best_match = Vec::with_capacity(sim.len());
    for row in &sim {
        let (j, v) = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
            );
        best.push(v);
        best_match.push(j);
    }
    Ok(CrossImageStats {
        sim,
        best,
        best_match,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomogeneityStats {
    pub mean: f64,
    pub variance: f64,
    pub pairs: usize,
}

/// Mean and population variance of cosine over all unordered centroid pairs.
pub fn homogeneity_stats<C: AsRef<[f32]>>(centroids: &[C]) -> Result<HomogeneityStats> {
    if centroids.len() < 2 {
        return Err(Error::TooFewCentroids(centroids.len()));
    }
    let mut sims = Vec::with_capacity(centroids.len() * (centroids.len() - 1) / 2);
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let (a, b) = (centroids[i].as_ref(), centroids[j].as_ref());
            if a.len() != b.len() {
                return Err(Error::DimMismatch {
                    expected: a.len(),
                    got: b.len(),
                });
            }
            sims.push(crate::linalg::cosine(a, b).ok_or(Error::ZeroVector)?);
        }
    }
    let pairs = sims.len();
    let mean = sims.iter().sum::<f64>() / pairs as f64;
    let variance = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / pairs as f64;
    Ok(HomogeneityStats {
        mean,
        variance,
        pairs,
    })
}

/// Top-1 reference token of every cluster centroid (`None` for zero centroids).
pub fn reference_tokens(cs: &ClusterSet, lens: &Lens<'_>) -> Result<Vec<Option<usize>>> {
    cs.clusters
        .iter()
        .map(|c| match lens.topk(&c.centroid, 1) {
            Ok(r) => Ok(r.top1().map(|t| t.token_id)),
            Err(Error::ZeroVector) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// Pairs `(i, j)` of clusters in `a` and `b` sharing the same top-1 reference token.
pub fn track_by_reference(
    a: &ClusterSet,
    b: &ClusterSet,
    lens: &Lens<'_>,
) -> Result<Vec<(usize, usize)>> {
    let ra = reference_tokens(a, lens)?;
    let rb = reference_tokens(b, lens)?;
    let mut out = Vec::new();
    for (i, ta) in ra.iter().enumerate() {
        if let Some(ta) = ta {
            if let Some(j) = rb.iter().position(|tb| tb.as_ref() == Some(ta)) {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}
