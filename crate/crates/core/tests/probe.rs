mod common;

use std::time::{Duration, Instant};

use vistoken_core::dumpio::names;
use vistoken_core::probe::{
    embedlens_topk, logit_lens_topk, matching_accuracy, sparsity_curve, Lens, MatchRule, MatchScope,
};
use vistoken_core::synth::{self, SynthConfig};
use vistoken_core::{Error, Matrix};

use common::*;

#[test]
fn retrieval_matches_exhaustive_oracles() {
    let mut rng = synth::rng(2024);
    let mut spent = Duration::ZERO;
    for i in 0..200 {
        let (m, h, k) = random_instance(&mut rng, i);
        let start = Instant::now();
        let e = embedlens_topk(&h, &m, k).unwrap();
        let l = logit_lens_topk(&h, &m, k).unwrap();
        spent += start.elapsed();
        let zero = (0..m.rows())
            .filter(|&r| m.row(r).iter().all(|&x| x == 0.0))
            .count();
        assert_eq!(e.ids(), oracle_embed_topk(&h, &m, k), "embed instance {i}");
        assert_eq!(e.skipped_zero_rows, zero);
        assert_eq!(l.ids(), oracle_logit_topk(&h, &m, k), "logit instance {i}");
        for w in e.entries.windows(2) {
            assert!(
                w[0].score > w[1].score
                    || (w[0].score == w[1].score && w[0].token_id < w[1].token_id)
            );
        }
    }
    assert!(spent < Duration::from_secs(5), "{spent:?}");
}

#[test]
fn every_row_retrieves_itself() {
    let m = synth::gaussian_matrix(&mut synth::rng(5), 1000, 64);
    let lens = Lens::embed(&m, None);
    let ranked = lens.topk_rows(&m, 1).unwrap();
    for (i, r) in ranked.iter().enumerate() {
        let top = r.top1().unwrap();
        assert_eq!(top.token_id, i);
        assert!((top.score - 1.0).abs() <= 1e-6);
    }
}

#[test]
fn embed_is_scale_invariant_and_logit_is_not() {
    let vocab = Matrix::from_rows(&[[1.0f32, 0.0], [10.0, 1.0]]).unwrap();
    let h = [1.0f32, 0.0];
    assert_eq!(embedlens_topk(&h, &vocab, 1).unwrap().ids(), [0]);
    assert_eq!(logit_lens_topk(&h, &vocab, 1).unwrap().ids(), [1]);
}

#[test]
fn degenerate_queries() {
    let vocab = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
    assert!(matches!(
        embedlens_topk(&[0.0, 0.0], &vocab, 1),
        Err(Error::ZeroVector)
    ));
    assert!(matches!(
        embedlens_topk(&[1.0], &vocab, 1),
        Err(Error::DimMismatch { .. })
    ));
    // k beyond the vocabulary returns everything
    assert_eq!(
        embedlens_topk(&[1.0, 1.0], &vocab, 10).unwrap().ids(),
        [0, 1]
    );
    assert!(embedlens_topk(&[1.0, 1.0], &vocab, 0)
        .unwrap()
        .entries
        .is_empty());
}

fn strip(s: &str) -> String {
    s.replace(['\u{2581}', '\u{0120}'], "")
        .trim()
        .to_lowercase()
}

fn oracle_match(token: &str, label: &str) -> bool {
    let (t, l) = (strip(token), strip(label));
    !t.is_empty() && (t == l || (t.chars().count() >= 3 && l.contains(&t)))
}

#[test]
fn object_accuracy_matches_brute_force() {
    let f = synthetic(&SynthConfig::default());
    let vocab = f.bundle.load_tensor(names::INPUT_VOCAB).unwrap();
    let strings = f.bundle.vocab().unwrap();
    let labels = f.bundle.labels().unwrap();
    for layer in 0..=f.bundle.num_layers().unwrap() {
        for k in [1, 5] {
            let (mut n, mut hit) = (0, 0);
            for (image, objs) in labels {
                let states = f.bundle.visual_states(image, layer).unwrap();
                for o in objs {
                    n += 1;
                    let found = o.patch_indices.iter().any(|&i| {
                        oracle_embed_topk(states.row(i), &vocab, k)
                            .iter()
                            .any(|&t| oracle_match(&strings[t], &o.label))
                    });
                    if found {
                        hit += 1;
                    }
                }
            }
            let r = matching_accuracy(
                &f.bundle,
                layer,
                k,
                MatchRule::default(),
                MatchScope::Object,
            )
            .unwrap();
            assert_eq!((r.instances, r.matched), (n, hit), "layer {layer} k {k}");
        }
    }
}

#[test]
fn sparsity_curve_matches_brute_force() {
    let f = synthetic(&SynthConfig::default());
    let vocab = f.bundle.load_tensor(names::INPUT_VOCAB).unwrap();
    let strings = f.bundle.vocab().unwrap();
    let labels = f.bundle.labels().unwrap();
    let k = 3;
    let curve = sparsity_curve(&f.bundle, k, MatchRule::default()).unwrap();
    assert_eq!(curve.points.len(), f.bundle.num_layers().unwrap() + 1);
    for p in &curve.points {
        let (mut obj, mut obj_hit, mut all, mut all_hit) = (0, 0, 0, 0);
        for (image, objs) in labels {
            let states = f.bundle.visual_states(image, p.layer).unwrap();
            for i in 0..states.rows() {
                let top = oracle_embed_topk(states.row(i), &vocab, k);
                let hits = |label: &str| top.iter().any(|&t| oracle_match(&strings[t], label));
                all += 1;
                if objs.iter().any(|o| hits(&o.label)) {
                    all_hit += 1;
                }
                let own: Vec<&str> = objs
                    .iter()
                    .filter(|o| o.patch_indices.contains(&i))
                    .map(|o| o.label.as_str())
                    .collect();
                if !own.is_empty() {
                    obj += 1;
                    if own.iter().any(|l| hits(l)) {
                        obj_hit += 1;
                    }
                }
            }
        }
        assert_eq!(
            (
                p.object_tokens,
                p.matched_object_tokens,
                p.visual_tokens,
                p.matched_visual_tokens
            ),
            (obj, obj_hit, all, all_hit),
            "layer {}",
            p.layer
        );
    }
    // grounding is sparse: most visual tokens never match a label
    assert!(curve.points.iter().all(|p| p.all_token_fraction < 0.5));
}

#[test]
fn random_tokens_rarely_match_orthogonal_labels() {
    let mut rng = synth::rng(9);
    let vocab = synth::gaussian_matrix(&mut rng, 10_000, 32);
    let lens = Lens::embed(&vocab, None);
    let queries = synth::gaussian_matrix(&mut rng, 200, 32);
    let label_ids = [17usize, 4242, 9001];
    let hits = lens
        .topk_rows(&queries, 1)
        .unwrap()
        .iter()
        .filter(|r| label_ids.contains(&r.top1().unwrap().token_id))
        .count();
    assert!(hits <= 2, "{hits}");
}
