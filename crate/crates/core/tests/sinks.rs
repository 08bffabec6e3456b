mod common;

use rand::Rng;
use vistoken_core::dumpio::names;
use vistoken_core::sinks::{
    bos_alignment_trace, bos_rank_trace, detect_llm_sinks, detect_sinks, detect_vit_sinks,
    sink_channel_ratio, sink_report, SinkConfig, Stage,
};
use vistoken_core::synth::{self, SynthConfig};
use vistoken_core::{Error, Matrix};

use common::*;

fn oracle_phi(x: &[f32], channels: &[usize]) -> f64 {
    let rms = (dot64(x, x) / x.len() as f64).sqrt();
    channels
        .iter()
        .map(|&c| (x[c] as f64).abs() / rms)
        .fold(0.0, f64::max)
}

#[test]
fn planted_high_norm_rows_are_detected_exactly() {
    let mut rng = synth::rng(31);
    let d = 64;
    let mut planted = Vec::new();
    let rows: Vec<Vec<f32>> = (0..200)
        .map(|i| {
            let norm = if rng.random_bool(0.1) {
                planted.push(i);
                100.0
            } else {
                20.0
            };
            let u = synth::unit(&mut rng, d);
            u.iter().map(|x| x * norm).collect()
        })
        .collect();
    let m = Matrix::from_rows(&rows).unwrap();
    let got = detect_vit_sinks(&m, &SinkConfig::default());
    assert_eq!(got, planted);
    let oracle: Vec<usize> = (0..m.rows()).filter(|&i| norm64(m.row(i)) > 75.0).collect();
    assert_eq!(got, oracle);
}

#[test]
fn random_norms_match_oracle() {
    let mut rng = synth::rng(32);
    let rows: Vec<Vec<f32>> = (0..500)
        .map(|_| {
            let s: f32 = rng.random_range(0.0..30.0);
            synth::gaussian(&mut rng, 16)
                .iter()
                .map(|x| x * s)
                .collect()
        })
        .collect();
    let m = Matrix::from_rows(&rows).unwrap();
    let oracle: Vec<usize> = (0..m.rows()).filter(|&i| norm64(m.row(i)) > 75.0).collect();
    assert!(!oracle.is_empty() && oracle.len() < 500);
    assert_eq!(detect_vit_sinks(&m, &SinkConfig::default()), oracle);
}

#[test]
fn planted_sink_channel_tokens_are_detected_exactly() {
    let mut rng = synth::rng(33);
    let d = 4096;
    let cfg = SinkConfig {
        sink_channels: vec![1415, 2533],
        ..SinkConfig::default()
    };
    let mut planted = Vec::new();
    let rows: Vec<Vec<f32>> = (0..300)
        .map(|i| {
            if rng.random_bool(0.1) {
                planted.push(i);
                with_phi(&mut rng, d, &cfg.sink_channels, 30.0)
            } else {
                with_phi(&mut rng, d, &cfg.sink_channels, 0.5)
            }
        })
        .collect();
    let m = Matrix::from_rows(&rows).unwrap();
    let scan = detect_llm_sinks(&m, &cfg).unwrap();
    assert_eq!(scan.indices, planted);
    for (i, phi) in scan.phi.iter().enumerate() {
        let want = if planted.contains(&i) { 30.0 } else { 0.5 };
        assert!((phi.unwrap() - want).abs() < 1e-3, "{i}: {phi:?}");
    }
}

#[test]
fn phi_matches_formula_and_is_scale_invariant() {
    let mut rng = synth::rng(34);
    let channels = [3usize, 40];
    for _ in 0..1000 {
        let d = rng.random_range(41..200);
        let x = synth::gaussian(&mut rng, d);
        let phi = sink_channel_ratio(&x, &channels).unwrap();
        assert!((phi - oracle_phi(&x, &channels)).abs() < 1e-6);
        let a: f32 = rng.random_range(1e-3..1e3);
        let scaled: Vec<f32> = x.iter().map(|v| v * a).collect();
        assert!((sink_channel_ratio(&scaled, &channels).unwrap() - phi).abs() < 1e-6);
    }
}

#[test]
fn zero_rows_and_bad_channels() {
    let m = Matrix::from_rows(&[[0.0f32; 4], [1.0, 0.0, 0.0, 0.0]]).unwrap();
    let cfg = SinkConfig {
        sink_channels: vec![0],
        phi_threshold: 1.5,
        ..SinkConfig::default()
    };
    let scan = detect_llm_sinks(&m, &cfg).unwrap();
    assert_eq!(scan.zero_rows, [0]);
    assert_eq!(scan.phi[0], None);
    // a one-hot row in d=4 has phi = 2
    assert_eq!(scan.indices, [1]);
    let bad = SinkConfig {
        sink_channels: vec![9],
        ..cfg
    };
    assert!(matches!(
        detect_llm_sinks(&m, &bad),
        Err(Error::DimMismatch { .. })
    ));
}

#[test]
fn synthetic_bundle_sinks_match_truth() {
    let f = synthetic(&SynthConfig::default());
    let cfg = SinkConfig {
        sink_channels: vec![3, 17],
        ..SinkConfig::default()
    };
    let ids = image_ids(&f);
    let g = detect_sinks(&f.bundle, &ids, &cfg).unwrap();
    for (r, t) in g.images.iter().zip(&f.truth.images) {
        let mut vit = t.sink_vit.clone();
        vit.sort_unstable();
        let mut llm = t.sink_llm.clone();
        llm.sort_unstable();
        assert_eq!(r.vit_sink_indices, vit);
        assert_eq!(r.llm_sink_indices, llm);
        assert!(r.vit_available);
        assert_eq!(r.vit_norms.len(), 100);
    }
    // planted sinks share one direction across the gallery
    let h = g.vit_centroid_homogeneity.unwrap();
    assert!(h.mean > 0.95, "{h:?}");
    assert!(g.llm_centroid_homogeneity.unwrap().mean > 0.95);
}

#[test]
fn bundle_without_vit_reports_llm_sinks_only() {
    let f = synthetic(&SynthConfig {
        vit: false,
        images: 2,
        ..SynthConfig::default()
    });
    let cfg = SinkConfig {
        sink_channels: vec![3, 17],
        ..SinkConfig::default()
    };
    let r = sink_report(&f.bundle, &image_ids(&f)[0], &cfg).unwrap();
    assert!(!r.vit_available);
    assert!(r.vit_sink_indices.is_empty());
    assert_eq!(r.llm_sink_indices.len(), 5);
}

/// Residual states at every stage, rebuilt from the raw tensors.
fn oracle_stages(f: &Fixture, image: &str) -> Vec<(String, Matrix)> {
    let b = &f.bundle;
    let mut out = vec![(
        "L0".to_string(),
        b.load_tensor(&names::hidden(image, 0)).unwrap(),
    )];
    for l in 1..=b.num_layers().unwrap() {
        let prev = b.load_tensor(&names::hidden(image, l - 1)).unwrap();
        let att = b.load_tensor(&names::sub_att(image, l)).unwrap();
        let mlp = b.load_tensor(&names::sub_mlp(image, l)).unwrap();
        let a: Vec<f32> = prev
            .data()
            .iter()
            .zip(att.data())
            .map(|(x, y)| x + y)
            .collect();
        let m: Vec<f32> = a.iter().zip(mlp.data()).map(|(x, y)| x + y).collect();
        out.push((
            format!("att{l}"),
            Matrix::new(prev.rows(), prev.cols(), a).unwrap(),
        ));
        out.push((
            format!("mlp{l}"),
            Matrix::new(prev.rows(), prev.cols(), m).unwrap(),
        ));
    }
    out
}

#[test]
fn bos_alignment_matches_cosine_oracle() {
    let f = synthetic(&SynthConfig::default());
    let image = &f.truth.images[0].id;
    let roles = f.bundle.image_roles(image).unwrap().clone();
    let sinks = &f.truth.images[0].sink_llm;
    let trace = bos_alignment_trace(&f.bundle, image, sinks).unwrap();
    let oracle = oracle_stages(&f, image);
    assert_eq!(trace.len(), oracle.len());
    for (p, (stage, m)) in trace.iter().zip(&oracle) {
        assert_eq!(&p.stage, stage);
        let bos = m.row(roles.bos.start);
        let want = sinks
            .iter()
            .map(|&i| cos64(m.row(roles.visual.start + i), bos))
            .sum::<f64>()
            / sinks.len() as f64;
        assert!((p.mean_cosine - want).abs() < 1e-6, "{stage}");
    }
    assert!(matches!(
        bos_alignment_trace(&f.bundle, image, &[]),
        Err(Error::EmptySelection)
    ));
}

#[test]
fn rank_trace_matches_full_sort() {
    let f = synthetic(&SynthConfig::default());
    let image = &f.truth.images[2].id;
    let roles = f.bundle.image_roles(image).unwrap().clone();
    let oracle = oracle_stages(&f, image);
    let probe = Stage::Att(2);
    let trace = bos_rank_trace(&f.bundle, image, probe, 7).unwrap();
    let start = oracle.iter().position(|(s, _)| s == "att2").unwrap();
    let order_at = |m: &Matrix| -> Vec<usize> {
        let bos = m.row(roles.bos.start);
        let mut scored: Vec<(usize, f64)> = (0..roles.visual.len())
            .map(|i| (i, cos64(m.row(roles.visual.start + i), bos)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        scored.into_iter().map(|(i, _)| i).collect()
    };
    assert_eq!(trace.tracked, order_at(&oracle[start].1)[..7]);
    for ((stage, ranks), (ostage, m)) in trace.ranks.iter().zip(&oracle[start..]) {
        assert_eq!(stage, ostage);
        let order = order_at(m);
        let want: Vec<usize> = trace
            .tracked
            .iter()
            .map(|t| order.iter().position(|o| o == t).unwrap() + 1)
            .collect();
        assert_eq!(ranks, &want, "{stage}");
    }
    assert_eq!(trace.ranks.len(), oracle.len() - start);
}

#[test]
fn stage_names_parse() {
    for s in ["L0", "att1", "mlp12"] {
        assert_eq!(s.parse::<Stage>().unwrap().to_string(), s);
    }
    for s in ["att0", "mlp", "L1", "x3"] {
        assert!(s.parse::<Stage>().is_err());
    }
}
