//! Intervention-spec fixtures shared by the spec tests and the acceptance gate.

use std::collections::BTreeSet;

use jsonschema::Validator;
use proptest::prelude::*;
use serde_json::Value;
use vistoken_core::intervene::{
    make_decouple_spec, make_late_entry_spec, make_norm_scale_spec, make_prune_spec,
    make_sublayer_skip_spec, DecoupleTarget, InterventionSpec, LayerSet, Sample, SampleSize,
    Sublayer, TokenSelector, SCHEMA,
};
use vistoken_core::partition::{tri_partition, Group, PartitionFile};

pub fn validator() -> Validator {
    let schema: Value = serde_json::from_str(SCHEMA).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

pub fn assert_schema_valid(v: &Validator, text: &str) {
    let instance: Value = serde_json::from_str(text).unwrap();
    let errors: Vec<String> = v.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{text}: {errors:?}");
}

/// Three images of 100 tokens with 10 sinks (some flagged by both detectors),
/// 30 dead and 60 alive.
pub fn partitions() -> PartitionFile {
    let mut pf = PartitionFile::default();
    for (i, id) in ["coco_1", "coco_2", "coco_3"].iter().enumerate() {
        let off = i * 7;
        let vit: Vec<usize> = (0..6).map(|k| (off + k * 13) % 100).collect();
        let llm: Vec<usize> = (0..6)
            .map(|k| (off + k * 13 + if k < 2 { 0 } else { 50 }) % 100)
            .collect();
        let sinks: BTreeSet<usize> = vit.iter().chain(&llm).copied().collect();
        let dead: Vec<usize> = (0..100)
            .filter(|t| !sinks.contains(t))
            .skip(off)
            .take(30)
            .collect();
        pf.images.insert(
            id.to_string(),
            tri_partition(id, 100, &vit, &llm, &dead).unwrap(),
        );
    }
    pf
}

pub fn all_layers(n: usize) -> LayerSet {
    LayerSet::List((1..=n).collect())
}

/// Every configuration used in the pruning, skipping, decoupling, late-entry and
/// norm-scaling experiments.
pub fn paper_configs(pf: &PartitionFile) -> Vec<(&'static str, InterventionSpec)> {
    let mut out = vec![
        (
            "-I_S_LLM",
            make_prune_spec(pf, &[Group::SinkLlm], None).unwrap(),
        ),
        (
            "-I_S_ViT",
            make_prune_spec(pf, &[Group::SinkVit], None).unwrap(),
        ),
        (
            "-I_S",
            make_prune_spec(pf, &[Group::SinkVit, Group::SinkLlm], None).unwrap(),
        ),
        ("-Dead", make_prune_spec(pf, &[Group::Dead], None).unwrap()),
        (
            "-Remaining",
            make_prune_spec(
                pf,
                &[Group::SinkVit, Group::SinkLlm, Group::Alive],
                Some(Sample {
                    count: SampleSize::SizeOf(Group::Dead),
                    seed: 7,
                }),
            )
            .unwrap(),
        ),
        (
            "FF2",
            make_sublayer_skip_spec(&[(2, Sublayer::Mlp)], TokenSelector::AllVisual {}).unwrap(),
        ),
        (
            "FF1Att2",
            make_sublayer_skip_spec(
                &[(1, Sublayer::Mlp), (2, Sublayer::Att)],
                TokenSelector::AllVisual {},
            )
            .unwrap(),
        ),
        (
            "FF1/2Att2",
            make_sublayer_skip_spec(
                &[(1, Sublayer::Mlp), (2, Sublayer::Att), (2, Sublayer::Mlp)],
                TokenSelector::AllVisual {},
            )
            .unwrap(),
        ),
        (
            "notI_S_LLM-FF2",
            make_sublayer_skip_spec(
                &[(2, Sublayer::Mlp)],
                TokenSelector::NonSinkVisual {
                    partition: "partition.json".into(),
                },
            )
            .unwrap(),
        ),
        ("vMHA", make_decouple_spec("vMHA", LayerSet::All).unwrap()),
        ("vFFN", make_decouple_spec("vFFN", LayerSet::All).unwrap()),
        (
            "vMHA-32",
            make_decouple_spec("vMHA", all_layers(32)).unwrap(),
        ),
        (
            "vFFN-32",
            make_decouple_spec("vFFN", all_layers(32)).unwrap(),
        ),
        ("norm-0.01", make_norm_scale_spec(0.01).unwrap()),
    ];
    for l in [4, 5, 6, 8, 10] {
        out.push(("L_in", make_late_entry_spec(l).unwrap()));
    }
    out
}

pub fn ascending(max: usize) -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::btree_set(1..=max, 1..8).prop_map(|s| s.into_iter().collect())
}

pub fn selector() -> impl Strategy<Value = TokenSelector> {
    let group = prop_oneof![
        Just(Group::SinkVit),
        Just(Group::SinkLlm),
        Just(Group::Dead),
        Just(Group::Alive)
    ];
    prop_oneof![
        proptest::collection::btree_map(
            "[a-z0-9_]{1,10}",
            proptest::collection::btree_set(0usize..576, 1..20)
                .prop_map(|s| s.into_iter().collect::<Vec<_>>()),
            1..4
        )
        .prop_map(|indices| TokenSelector::Explicit { indices }),
        ("[a-z/_.]{1,20}", proptest::collection::vec(group, 1..4))
            .prop_map(|(partition, groups)| TokenSelector::Group { partition, groups }),
        Just(TokenSelector::AllVisual {}),
        "[a-z/_.]{1,20}".prop_map(|partition| TokenSelector::NonSinkVisual { partition }),
    ]
}

pub fn spec() -> impl Strategy<Value = InterventionSpec> {
    let sublayers = proptest::collection::btree_set(
        (
            1usize..=40,
            prop_oneof![Just(Sublayer::Att), Just(Sublayer::Mlp)],
        ),
        1..6,
    )
    .prop_map(|s| s.into_iter().collect::<Vec<_>>());
    let target = prop_oneof![Just(DecoupleTarget::VMha), Just(DecoupleTarget::VFfn)];
    let layers = prop_oneof![Just(LayerSet::All), ascending(80).prop_map(LayerSet::List)];
    prop_oneof![
        selector().prop_map(|selector| InterventionSpec::Prune { selector }),
        (sublayers, selector()).prop_map(|(sublayers, selector)| InterventionSpec::SublayerSkip {
            sublayers,
            selector
        }),
        (target, layers).prop_map(|(target, layers)| InterventionSpec::Decouple { target, layers }),
        (1usize..=80).prop_map(|entry_layer| InterventionSpec::LateEntry { entry_layer }),
        (1e-6f64..1e6).prop_map(|factor| InterventionSpec::NormScale { factor }),
    ]
}
