mod common;

use std::fs;

use proptest::prelude::*;
use rand::Rng;
use vistoken_core::dumpio::{
    names, open_bundle, validate_bundle, write_bundle, BundleSpec, IssueKind, Profile,
    MANIFEST_FILE,
};
use vistoken_core::synth::{self, synthetic_bundle, SynthConfig};
use vistoken_core::Error;

use common::*;

/// Reads the raw little-endian payload of `name` straight from disk.
fn raw_bytes(dir: &std::path::Path, name: &str) -> Vec<u8> {
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    let entry = manifest["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["name"] == name)
        .unwrap();
    let numel: u64 = entry["shape"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d.as_u64().unwrap())
        .product();
    let off = entry["byte_offset"].as_u64().unwrap() as usize;
    let data = fs::read(dir.join(entry["file"].as_str().unwrap())).unwrap();
    data[off..off + numel as usize * 4].to_vec()
}

#[test]
fn ten_thousand_elements_round_trip_bit_exact() {
    let mut rng = synth::rng(11);
    let mut data: Vec<f32> = (0..10_000)
        .map(|_| f32::from_bits(rng.random::<u32>()))
        .collect();
    // edge encodings
    data[0] = -0.0;
    data[1] = f32::MIN_POSITIVE / 4.0;
    data[2] = f32::INFINITY;
    data[3] = f32::from_bits(0x7fc0_1234);
    let mut spec = BundleSpec::new("m");
    spec.add_tensor("t", vec![100, 100], data.clone()).unwrap();
    spec.add_tensor("small", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&spec, dir.path()).unwrap();

    let bytes = raw_bytes(dir.path(), "t");
    let expect: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(bytes, expect);

    let b = open_bundle(dir.path()).unwrap();
    let m = b.load_tensor("t").unwrap();
    assert_eq!((m.rows(), m.cols()), (100, 100));
    let got: Vec<u32> = m.data().iter().map(|v| v.to_bits()).collect();
    let want: Vec<u32> = data.iter().map(|v| v.to_bits()).collect();
    assert_eq!(got, want);
    // repeated loads are identical
    let again: Vec<u32> = b
        .load_tensor("t")
        .unwrap()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect();
    assert_eq!(again, want);
    assert_eq!(
        b.load_tensor("small").unwrap().data(),
        &[1.0, 2.0, 3.0, 4.0]
    );
}

#[test]
fn hand_written_bytes_decode_as_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("x.bin"), [0x00, 0x00, 0x80, 0x3f]).unwrap();
    fs::write(
        dir.path().join(MANIFEST_FILE),
        r#"{"version":1,"model_id":"m","dtype":"f32","endianness":"little",
            "tensors":[{"name":"one","shape":[1,1],"file":"x.bin","byte_offset":0}]}"#,
    )
    .unwrap();
    let b = open_bundle(dir.path()).unwrap();
    assert_eq!(b.load_tensor("one").unwrap().data(), &[1.0]);
}

#[test]
fn short_file_is_a_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("x.bin"), [0u8; 20]).unwrap();
    fs::write(
        dir.path().join(MANIFEST_FILE),
        r#"{"version":1,"model_id":"m","dtype":"f32","endianness":"little",
            "tensors":[{"name":"a","shape":[2,3],"file":"x.bin","byte_offset":0}]}"#,
    )
    .unwrap();
    let b = open_bundle(dir.path()).unwrap();
    let report = validate_bundle(&b, Profile::Probe);
    assert!(report.has(IssueKind::SizeMismatch, "a"), "{report}");
    assert!(matches!(
        b.load_tensor("a"),
        Err(Error::SizeMismatch { .. })
    ));
}

#[test]
fn open_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        open_bundle(dir.path()),
        Err(Error::MissingManifest(_))
    ));
    fs::write(dir.path().join(MANIFEST_FILE), "{\"version\":1}").unwrap();
    assert!(matches!(
        open_bundle(dir.path()),
        Err(Error::MalformedManifest(_))
    ));
    fs::write(
        dir.path().join(MANIFEST_FILE),
        r#"{"version":9,"model_id":"m","dtype":"f32","endianness":"little","tensors":[]}"#,
    )
    .unwrap();
    assert!(matches!(
        open_bundle(dir.path()),
        Err(Error::UnsupportedVersion(9))
    ));
    let b = {
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"version":1,"model_id":"m","dtype":"f32","endianness":"little","tensors":[]}"#,
        )
        .unwrap();
        open_bundle(dir.path()).unwrap()
    };
    assert!(matches!(
        b.load_tensor("nope"),
        Err(Error::UnknownTensor(_))
    ));
}

#[test]
fn full_synthetic_bundle_passes_both_profiles() {
    let f = synthetic(&SynthConfig::default());
    let probe = validate_bundle(&f.bundle, Profile::Probe);
    assert!(probe.is_empty(), "{probe}");
    let full = validate_bundle(&f.bundle, Profile::Full);
    assert!(full.is_empty(), "{full}");
}

#[test]
fn probe_only_bundle_fails_full_profile_on_attention() {
    let f = synthetic(&SynthConfig {
        full: false,
        ..SynthConfig::default()
    });
    assert!(validate_bundle(&f.bundle, Profile::Probe).is_empty());
    let full = validate_bundle(&f.bundle, Profile::Full);
    for image in image_ids(&f) {
        let attn = names::attn(&image, 1);
        assert!(full.has(IssueKind::MissingTensor, &attn), "{full}");
    }
    assert!(full.has(IssueKind::MissingTensor, names::OUTPUT_VOCAB));
}

#[test]
fn dropping_one_tensor_is_reported_by_name() {
    let (spec, truth) = synthetic_bundle(&SynthConfig::default()).unwrap();
    let image = &truth.images[1].id;
    let victim = names::sub_mlp(image, 2);
    let mut pruned = BundleSpec::new(spec.model_id.clone());
    pruned.meta = spec.meta.clone();
    pruned.vocab = spec.vocab.clone();
    pruned.roles = spec.roles.clone();
    pruned.labels = spec.labels.clone();
    let full = tempfile::tempdir().unwrap();
    write_bundle(&spec, full.path()).unwrap();
    let b = open_bundle(full.path()).unwrap();
    for name in spec.tensor_names().filter(|n| *n != victim) {
        pruned
            .add_matrix(name, &b.load_tensor(name).unwrap())
            .unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    write_bundle(&pruned, dir.path()).unwrap();
    let report = validate_bundle(&open_bundle(dir.path()).unwrap(), Profile::Full);
    assert_eq!(report.issues.len(), 1, "{report}");
    assert!(report.has(IssueKind::MissingTensor, &victim));
}

#[test]
fn cache_dir_serves_identical_values() {
    let f = synthetic(&SynthConfig {
        images: 2,
        full: false,
        ..SynthConfig::default()
    });
    let cache = tempfile::tempdir().unwrap();
    let name = names::visual_proj(&image_ids(&f)[0]);
    let direct = f.bundle.load_tensor(&name).unwrap();
    for _ in 0..2 {
        let cached = open_bundle(f.dir.path())
            .unwrap()
            .with_cache_dir(cache.path())
            .load_tensor(&name)
            .unwrap();
        assert_eq!(cached, direct);
    }
    assert!(fs::read_dir(cache.path()).unwrap().next().is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn random_matrices_round_trip(
        rows in 1usize..40,
        cols in 1usize..40,
        seed in any::<u64>(),
    ) {
        let m = synth::gaussian_matrix(&mut synth::rng(seed), rows, cols);
        let mut spec = BundleSpec::new("m");
        spec.add_matrix("m", &m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&spec, dir.path()).unwrap();
        let back = open_bundle(dir.path()).unwrap().load_tensor("m").unwrap();
        prop_assert_eq!(back, m);
    }
}
