//! Brute-force reference implementations and fixture helpers shared by the
//! integration tests. Oracles are written for clarity, not speed, and do not
//! call into the library's numeric code.

#![allow(dead_code)]

pub mod specs;

use rand::Rng;
use tempfile::TempDir;
use vistoken_core::dumpio::{open_bundle, write_bundle, Bundle};
use vistoken_core::synth::{self, synthetic_bundle, SynthConfig, SynthTruth};
use vistoken_core::Matrix;

pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

pub fn norm64(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}

pub fn cos64(a: &[f32], b: &[f32]) -> f64 {
    dot64(a, b) / (norm64(a) * norm64(b))
}

/// Full sort of every scorable row: score descending, id ascending.
fn rank_all(scores: Vec<(usize, f64)>, k: usize) -> Vec<usize> {
    let mut s = scores;
    s.sort_by(|a, b| {
        if a.1 > b.1 {
            std::cmp::Ordering::Less
        } else if a.1 < b.1 {
            std::cmp::Ordering::Greater
        } else {
            a.0.cmp(&b.0)
        }
    });
    s.into_iter().take(k).map(|(i, _)| i).collect()
}

pub fn oracle_embed_topk(h: &[f32], vocab: &Matrix, k: usize) -> Vec<usize> {
    let scores = (0..vocab.rows())
        .filter(|&i| norm64(vocab.row(i)) > 0.0)
        .map(|i| (i, cos64(h, vocab.row(i))))
        .collect();
    rank_all(scores, k)
}

pub fn oracle_logit_topk(h: &[f32], unembed: &Matrix, k: usize) -> Vec<usize> {
    let scores = (0..unembed.rows())
        .map(|i| (i, dot64(h, unembed.row(i))))
        .collect();
    rank_all(scores, k)
}

/// Mean cosine over all unordered pairs.
pub fn oracle_pairwise_mean(rows: &[&[f32]]) -> f64 {
    let mut s = 0.0;
    let mut c = 0;
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            if i < j {
                s += cos64(rows[i], rows[j]);
                c += 1;
            }
        }
    }
    s / c as f64
}

pub fn oracle_entropy(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut h = 0.0;
    for e in exps {
        let p = e / z;
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// A synthetic bundle written to a temporary directory.
pub struct Fixture {
    pub dir: TempDir,
    pub bundle: Bundle,
    pub truth: SynthTruth,
}

pub fn synthetic(cfg: &SynthConfig) -> Fixture {
    let (spec, truth) = synthetic_bundle(cfg).expect("synthetic bundle");
    let dir = tempfile::tempdir().expect("tempdir");
    write_bundle(&spec, dir.path()).expect("write bundle");
    let bundle = open_bundle(dir.path()).expect("open bundle");
    Fixture { dir, bundle, truth }
}

pub fn image_ids(f: &Fixture) -> Vec<String> {
    f.truth.images.iter().map(|i| i.id.clone()).collect()
}

/// Greedy anchor clustering written out directly: every unassigned token in index
/// order becomes an anchor and absorbs the later unassigned tokens within `tau`.
pub fn oracle_anchor_clusters(m: &Matrix, tau: f64) -> Vec<Vec<usize>> {
    let n = m.rows();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for a in 0..n {
        if owner[a].is_some() {
            continue;
        }
        owner[a] = Some(clusters.len());
        let mut members = vec![a];
        if norm64(m.row(a)) > 0.0 {
            for j in a + 1..n {
                if owner[j].is_none() && norm64(m.row(j)) > 0.0 && cos64(m.row(a), m.row(j)) >= tau
                {
                    owner[j] = Some(clusters.len());
                    members.push(j);
                }
            }
        }
        clusters.push(members);
    }
    clusters
}

/// Per-image token matrices sharing one planted direction. In every image the
/// first `shared` rows lie near that direction; the rest are random.
pub fn shared_direction_gallery(
    seed: u64,
    images: usize,
    shared: usize,
    others: usize,
    d: usize,
) -> Vec<Matrix> {
    let mut rng = synth::rng(seed);
    let u = synth::unit(&mut rng, d);
    (0..images)
        .map(|_| {
            let mut rows: Vec<Vec<f32>> = (0..shared)
                .map(|_| {
                    let g = synth::gaussian(&mut rng, d);
                    let s: f32 = rng.random_range(0.5..2.0);
                    u.iter()
                        .zip(&g)
                        .map(|(a, b)| s * (a + 0.02 * b / (d as f32).sqrt()))
                        .collect()
                })
                .collect();
            rows.extend((0..others).map(|_| synth::gaussian(&mut rng, d)));
            Matrix::from_rows(&rows).unwrap()
        })
        .collect()
}

/// A random instance. Every third one draws entries from {-2..2} and duplicates
/// rows so that ties are common.
pub fn random_instance(rng: &mut impl Rng, i: usize) -> (Matrix, Vec<f32>, usize) {
    let t = rng.random_range(1..=5000);
    let d = rng.random_range(1..=128);
    let k = rng.random_range(1..=t.min(50));
    let coarse = i % 3 == 0;
    let draw = |rng: &mut dyn rand::RngCore| -> f32 {
        if coarse {
            (rng.next_u32() % 5) as f32 - 2.0
        } else {
            let u = (rng.next_u32() as f64 / u32::MAX as f64) * 2.0 - 1.0;
            u as f32
        }
    };
    let mut data: Vec<f32> = (0..t * d).map(|_| draw(rng)).collect();
    if coarse && t > 4 {
        for _ in 0..t / 4 {
            let (a, b) = (rng.random_range(0..t), rng.random_range(0..t));
            let row: Vec<f32> = data[a * d..(a + 1) * d].to_vec();
            data[b * d..(b + 1) * d].copy_from_slice(&row);
        }
        // a zero row the embed lens must skip
        let z = rng.random_range(0..t);
        data[z * d..(z + 1) * d].fill(0.0);
    }
    let mut h: Vec<f32> = (0..d).map(|_| draw(rng)).collect();
    if h.iter().all(|&x| x == 0.0) {
        h[0] = 1.0;
    }
    (Matrix::new(t, d, data).unwrap(), h, k)
}

/// A random row whose every sink channel sits at exactly `phi` times the row's RMS.
pub fn with_phi(rng: &mut impl Rng, d: usize, channels: &[usize], phi: f64) -> Vec<f32> {
    let mut x = synth::gaussian(rng, d);
    for &c in channels {
        x[c] = 0.0;
    }
    let rest: f64 = dot64(&x, &x);
    let k = channels.len() as f64;
    let v = (phi * phi * rest / (d as f64 - k * phi * phi)).sqrt();
    for &c in channels {
        x[c] = if rng.random::<bool>() {
            v as f32
        } else {
            -v as f32
        };
    }
    let s: f32 = rng.random_range(0.1..10.0);
    x.iter().map(|v| v * s).collect()
}
