//! Seeded synthetic data with planted structure, for tests and demos.
//!
//! [`synthetic_bundle`] writes a complete bundle whose visual tokens contain
//! ViT sinks, LLM sinks, a cross-image dead cluster and labeled alive tokens in
//! known positions, so every analysis can be checked against the ground truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dumpio::{names, BundleSpec, ImageRoles, Labels, ObjectLabel, Roles, Span};
use crate::error::Result;
use crate::linalg::{l2_norm, Matrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    (0..d)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

pub fn unit(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    loop {
        let v = gaussian(rng, d);
        let n = l2_norm(&v);
        if n > 1e-6 {
            return v.iter().map(|x| (*x as f64 / n) as f32).collect();
        }
    }
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.sample(StandardNormal))
            .collect(),
    )
    .expect("shape matches data")
}

/// `k` orthonormal directions (Gram–Schmidt over Gaussian draws), `k <= d`.
pub fn orthonormal(rng: &mut impl Rng, k: usize, d: usize) -> Vec<Vec<f32>> {
    assert!(
        k <= d,
        "cannot draw {k} orthonormal vectors in {d} dimensions"
    );
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = gaussian(rng, d).into_iter().map(f64::from).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x as f32).collect())
        .collect()
}

fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn scaled(a: f32, x: &[f32]) -> Vec<f32> {
    x.iter().map(|v| a * v).collect()
}

/// Rows drawn around orthonormal directions, one group per entry of `sizes`.
#[derive(Debug, Clone)]
pub struct PlantedClusters {
    pub matrix: Matrix,
    /// Row indices of each group, ascending.
    pub groups: Vec<Vec<usize>>,
}

/// Each row is `direction + noise · g / sqrt(d)` for Gaussian `g`, scaled by a random
/// factor in `[0.5, 2)`, with rows of all groups shuffled together.
pub fn planted_clusters(
    rng: &mut impl Rng,
    sizes: &[usize],
    d: usize,
    noise: f32,
) -> PlantedClusters {
    let dirs = orthonormal(rng, sizes.len(), d);
    let mut labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| std::iter::repeat_n(g, n))
        .collect();
    labels.shuffle(rng);
    let mut groups = vec![Vec::new(); sizes.len()];
    let mut data = Vec::with_capacity(labels.len() * d);
    let inv = 1.0 / (d as f32).sqrt();
    for (i, &g) in labels.iter().enumerate() {
        groups[g].push(i);
        let mut row = dirs[g].clone();
        axpy(noise * inv, &gaussian(rng, d), &mut row);
        let s: f32 = rng.random_range(0.5..2.0);
        data.extend(row.iter().map(|x| x * s));
    }
    PlantedClusters {
        matrix: Matrix::new(labels.len(), d, data).expect("shape matches data"),
        groups,
    }
}

/// Shape and composition of a [`synthetic_bundle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub images: usize,
    pub grid: [usize; 2],
    pub dim: usize,
    pub vocab: usize,
    pub layers: usize,
    pub vit_layers: usize,
    pub vit_sinks: usize,
    pub llm_sinks: usize,
    pub dead: usize,
    pub objects_per_image: usize,
    pub patches_per_object: usize,
    pub sink_channels: Vec<usize>,
    pub text_tokens: usize,
    /// Include attention maps, sublayer outputs, hidden states and the output vocabulary.
    pub full: bool,
    pub vit: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            images: 4,
            grid: [10, 10],
            dim: 1024,
            vocab: 160,
            layers: 4,
            vit_layers: 4,
            vit_sinks: 5,
            llm_sinks: 5,
            dead: 30,
            objects_per_image: 3,
            patches_per_object: 4,
            sink_channels: vec![3, 17],
            text_tokens: 6,
            full: true,
            vit: true,
        }
    }
}

/// Planted ground truth of one synthetic image (visual-relative indices, ascending).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthImage {
    pub id: String,
    pub sink_vit: Vec<usize>,
    pub sink_llm: Vec<usize>,
    pub dead: Vec<usize>,
    pub alive: Vec<usize>,
    pub objects: Vec<ObjectLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub images: Vec<SynthImage>,
    pub text_direction: Vec<f32>,
    pub dead_direction: Vec<f32>,
}

/// Words used as object labels; the rest of the vocabulary is filler.
pub const OBJECT_WORDS: &[&str] = &[
    "dog", "cat", "bus", "tree", "car", "bird", "horse", "boat", "chair", "table", "apple", "clock",
];

fn vocab_strings(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match OBJECT_WORDS.get(i) {
            Some(w) if i % 2 == 0 => format!("\u{2581}{w}"),
            Some(w) => format!("\u{0120}{w}"),
            None if i + 1 == n => "<pad>".to_string(),
            None => format!("tok{i}"),
        })
        .collect()
}

/// Builds a synthetic bundle and its planted ground truth.
///
/// Per image the visual tokens are: ViT sinks (high final ViT norm), LLM sinks
/// (one dominant sink channel), dead tokens (a shared direction pointing away
/// from the text centroid), and alive tokens (near vocabulary rows; labeled
/// objects near their label's row). The last vocabulary row is all zeros.
pub fn synthetic_bundle(cfg: &SynthConfig) -> Result<(BundleSpec, SynthTruth)> {
    let mut rng = rng(cfg.seed);
    let d = cfg.dim;
    let n_v = cfg.grid[0] * cfg.grid[1];
    let planted = cfg.vit_sinks + cfg.llm_sinks + cfg.dead;
    assert!(planted <= n_v, "planted tokens exceed the visual range");
    assert!(cfg.objects_per_image <= OBJECT_WORDS.len() && cfg.vocab > OBJECT_WORDS.len() + 1);

    let [text_dir, dead_perp, vit_sink_dir] =
        <[Vec<f32>; 3]>::try_from(orthonormal(&mut rng, 3, d)).expect("three");
    let mut dead_dir = scaled(0.92, &dead_perp);
    axpy(-0.4, &text_dir, &mut dead_dir);

    let strings = vocab_strings(cfg.vocab);
    let mut vocab = Matrix::zeros(cfg.vocab, d);
    for i in 0..cfg.vocab - 1 {
        let mut row = scaled(0.6, &text_dir);
        axpy(0.8, &unit(&mut rng, d), &mut row);
        vocab.row_mut(i).copy_from_slice(&row);
    }

    let mut spec = BundleSpec::new("synthetic");
    spec.set_meta("num_layers", cfg.layers)
        .set_meta("seed", cfg.seed)
        .set_meta(
            "sink_channels",
            cfg.sink_channels
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
    spec.add_matrix(names::INPUT_VOCAB, &vocab)?;
    if cfg.full {
        let mut unembed = vocab.clone();
        for i in 0..cfg.vocab {
            let noise = gaussian(&mut rng, d);
            axpy(0.01, &noise, unembed.row_mut(i));
        }
        spec.add_matrix(names::OUTPUT_VOCAB, &unembed)?;
    }

    let mut roles = Roles::new();
    let mut labels = Labels::new();
    let mut truth = SynthTruth {
        images: Vec::new(),
        text_direction: text_dir.clone(),
        dead_direction: dead_dir.clone(),
    };
    let filler = OBJECT_WORDS.len()..cfg.vocab - 1;
    // One dominant channel: phi is about 30 at d = 1024.
    let channel_value = 8.0f32;

    for img in 0..cfg.images {
        let id = format!("img{img:02}");
        let mut order: Vec<usize> = (0..n_v).collect();
        order.shuffle(&mut rng);
        let take = |n: usize, from: &mut Vec<usize>| {
            let mut v: Vec<usize> = from.drain(..n).collect();
            v.sort_unstable();
            v
        };
        let sink_vit = take(cfg.vit_sinks, &mut order);
        let sink_llm = take(cfg.llm_sinks, &mut order);
        let dead = take(cfg.dead, &mut order);
        let mut alive = order.clone();
        alive.sort_unstable();

        let mut words: Vec<usize> = (0..OBJECT_WORDS.len()).collect();
        words.shuffle(&mut rng);
        let mut pool = order.clone();
        let mut objects = Vec::new();
        let mut object_of = vec![None; n_v];
        for &w in words.iter().take(cfg.objects_per_image) {
            let k = cfg.patches_per_object.min(pool.len());
            let patches = take(k, &mut pool);
            for &p in &patches {
                object_of[p] = Some(w);
            }
            objects.push(ObjectLabel {
                label: OBJECT_WORDS[w].to_string(),
                patch_indices: patches,
            });
        }

        // Projected visual tokens.
        let mut proj = Matrix::zeros(n_v, d);
        for i in 0..n_v {
            let row = proj.row_mut(i);
            if sink_vit.binary_search(&i).is_ok() {
                row.copy_from_slice(&vit_sink_dir);
                axpy(0.05, &unit(&mut rng, d), row);
            } else if sink_llm.binary_search(&i).is_ok() {
                let base = gaussian(&mut rng, d);
                axpy(0.1, &base, row);
                if let Some(&c) = cfg.sink_channels.first() {
                    row[c] = channel_value;
                }
            } else if dead.binary_search(&i).is_ok() {
                row.copy_from_slice(&dead_dir);
                axpy(0.05, &unit(&mut rng, d), row);
            } else {
                let (word, noise) = match object_of[i] {
                    // Half of the object tokens are grounded from the start.
                    Some(w) if rng.random_bool(0.5) => (w, 0.3),
                    Some(_) => (rng.random_range(filler.clone()), 1.0),
                    None => (rng.random_range(filler.clone()), 1.0),
                };
                row.copy_from_slice(vocab.row(word));
                axpy(noise, &unit(&mut rng, d), row);
            }
        }
        spec.add_matrix(names::visual_proj(&id), &proj)?;

        let bos = Span::new(0, 1);
        let system = Span::new(1, 4);
        let visual = Span::new(4, 4 + n_v);
        let text = Span::new(visual.end, visual.end + cfg.text_tokens);
        let seq = text.end;
        let image_roles = ImageRoles {
            system,
            bos,
            text,
            visual,
            grid: cfg.grid,
        };

        if cfg.vit {
            let cls = unit(&mut rng, d);
            for l in 0..cfg.vit_layers {
                let last = l + 1 == cfg.vit_layers;
                let mut m = Matrix::zeros(n_v + 1, d);
                m.row_mut(0).copy_from_slice(&scaled(10.0, &cls));
                for i in 0..n_v {
                    let norm = if last && sink_vit.binary_search(&i).is_ok() {
                        100.0
                    } else if last && dead.binary_search(&i).is_ok() {
                        40.0
                    } else if last {
                        20.0
                    } else {
                        10.0
                    };
                    let dir = if last && sink_vit.binary_search(&i).is_ok() {
                        let mut v = vit_sink_dir.clone();
                        axpy(0.1, &unit(&mut rng, d), &mut v);
                        v
                    } else if dead.binary_search(&i).is_ok() && l + 2 >= cfg.vit_layers {
                        let mut v = dead_perp.clone();
                        axpy(0.1, &unit(&mut rng, d), &mut v);
                        v
                    } else {
                        unit(&mut rng, d)
                    };
                    let n = l2_norm(&dir) as f32;
                    m.row_mut(i + 1).copy_from_slice(&scaled(norm / n, &dir));
                }
                spec.add_matrix(names::vit_hidden(&id, l), &m)?;
            }
        }

        if cfg.full {
            let mut hidden = Matrix::zeros(seq, d);
            let bos_row = hidden.row_mut(0);
            axpy(0.1, &gaussian(&mut rng, d), bos_row);
            if let Some(&c) = cfg.sink_channels.first() {
                bos_row[c] = channel_value;
            }
            for p in (system.start..system.end).chain(text.start..text.end) {
                let t = rng.random_range(filler.clone());
                hidden.row_mut(p).copy_from_slice(vocab.row(t));
            }
            for i in 0..n_v {
                hidden
                    .row_mut(visual.start + i)
                    .copy_from_slice(proj.row(i));
            }
            spec.add_matrix(names::hidden(&id, 0), &hidden)?;

            for l in 1..=cfg.layers {
                let mut att = Matrix::zeros(seq, d);
                let mut mlp = Matrix::zeros(seq, d);
                for p in 0..seq {
                    let vi = visual.contains(p).then(|| p - visual.start);
                    let is_dead = vi.is_some_and(|i| dead.binary_search(&i).is_ok());
                    let jitter = if is_dead { 0.002 } else { 0.02 };
                    axpy(jitter, &gaussian(&mut rng, d), att.row_mut(p));
                    axpy(jitter, &gaussian(&mut rng, d), mlp.row_mut(p));
                    if let Some(w) = vi.and_then(|i| object_of[i]) {
                        // Grounding strengthens over the first layers.
                        if l <= 2 {
                            axpy(1.5, vocab.row(w), mlp.row_mut(p));
                        }
                    }
                    let is_sink = p == 0 || vi.is_some_and(|i| sink_llm.binary_search(&i).is_ok());
                    if is_sink && l == 2 {
                        for &c in &cfg.sink_channels {
                            mlp.row_mut(p)[c] += 1.0;
                        }
                    }
                }
                let mut next = hidden.clone();
                for p in 0..seq {
                    axpy(1.0, att.row(p), next.row_mut(p));
                    axpy(1.0, mlp.row(p), next.row_mut(p));
                }
                spec.add_matrix(names::sub_att(&id, l), &att)?;
                spec.add_matrix(names::sub_mlp(&id, l), &mlp)?;
                spec.add_matrix(names::hidden(&id, l), &next)?;
                hidden = next;

                let mut attn = Matrix::zeros(seq, seq);
                for q in 0..seq {
                    let logits: Vec<f64> = (0..=q)
                        .map(|k| {
                            let vi = visual.contains(k).then(|| k - visual.start);
                            let bonus = if k == 0 {
                                4.0
                            } else if let Some(i) = vi {
                                if sink_llm.binary_search(&i).is_ok() {
                                    3.0
                                } else if dead.binary_search(&i).is_ok() {
                                    -1.5
                                } else {
                                    1.0
                                }
                            } else {
                                0.0
                            };
                            bonus + 0.3 * rng.sample::<f64, _>(StandardNormal)
                        })
                        .collect();
                    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|x| (x - max).exp()).sum();
                    for (k, x) in logits.iter().enumerate() {
                        attn.row_mut(q)[k] = ((x - max).exp() / z) as f32;
                    }
                }
                spec.add_matrix(names::attn(&id, l), &attn)?;
            }
        }

        roles.insert(id.clone(), image_roles);
        labels.insert(id.clone(), objects.clone());
        truth.images.push(SynthImage {
            id,
            sink_vit,
            sink_llm,
            dead,
            alive,
            objects,
        });
    }
    spec.vocab = Some(strings);
    spec.roles = Some(roles);
    spec.labels = Some(labels);
    Ok((spec, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cosine;

    #[test]
    fn orthonormal_basis() {
        let mut r = rng(1);
        let b = orthonormal(&mut r, 5, 16);
        for i in 0..5 {
            assert!((l2_norm(&b[i]) - 1.0).abs() < 1e-5);
            for j in i + 1..5 {
                assert!(cosine(&b[i], &b[j]).unwrap().abs() < 1e-5);
            }
        }
    }

    #[test]
    fn planted_groups_partition_rows() {
        let mut r = rng(2);
        let p = planted_clusters(&mut r, &[4, 3, 2], 32, 0.1);
        let mut all: Vec<usize> = p.groups.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(p.groups.iter().map(Vec::len).collect::<Vec<_>>(), [4, 3, 2]);
    }

    #[test]
    fn same_seed_same_bundle() {
        let cfg = SynthConfig {
            images: 2,
            dim: 64,
            full: false,
            ..Default::default()
        };
        let (a, ta) = synthetic_bundle(&cfg).unwrap();
        let (b, tb) = synthetic_bundle(&cfg).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(
            a.tensor_names().collect::<Vec<_>>(),
            b.tensor_names().collect::<Vec<_>>()
        );
    }
}
