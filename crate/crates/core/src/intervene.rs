//! Declarative inference-time interventions.
//!
//! A spec is plain data consumed by an external runner. Its canonical text form is
//! compact JSON with sorted keys and shortest round-trip floats, so equal specs
//! always serialize to identical bytes. The JSON schema is [`SCHEMA`].
//!
//! Layer numbers are 1-based, matching the bundle's `llm.sub.L<n>` naming.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::partition::{Group, PartitionFile};

/// JSON schema of the canonical spec format.
pub const SCHEMA: &str = include_str!("../intervention.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    tag = "kind",
    content = "params",
    rename_all = "snake_case",
    deny_unknown_fields
)]
pub enum InterventionSpec {
    /// Remove the selected visual tokens before position ids are assigned.
    Prune { selector: TokenSelector },
    /// Suppress the residual contribution of the listed sublayers at the selected tokens.
    SublayerSkip {
        sublayers: Vec<(usize, Sublayer)>,
        selector: TokenSelector,
    },
    /// Zero a sublayer's output at all visual positions; text positions are untouched.
    Decouple {
        target: DecoupleTarget,
        layers: LayerSet,
    },
    /// Insert the projected visual tokens at `entry_layer` instead of the input.
    LateEntry { entry_layer: usize },
    /// Multiply the projected visual embeddings by `factor` before entry.
    NormScale { factor: f64 },
}

/// Which visual tokens an intervention touches. Indices are 0-based within the visual range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenSelector {
    /// Per-image index lists, ascending and unique.
    Explicit {
        indices: BTreeMap<String, Vec<usize>>,
    },
    /// Union of groups of a partition file.
    Group {
        partition: String,
        groups: Vec<Group>,
    },
    AllVisual {},
    /// Visual tokens outside the partition's LLM sinks.
    NonSinkVisual {
        partition: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sublayer {
    Att,
    Mlp,
}

impl FromStr for Sublayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "att" => Ok(Sublayer::Att),
            "mlp" => Ok(Sublayer::Mlp),
            other => Err(Error::InvalidLayer(format!(
                "unknown sublayer `{other}` (expected att or mlp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecoupleTarget {
    #[serde(rename = "vMHA")]
    VMha,
    #[serde(rename = "vFFN")]
    VFfn,
}

impl FromStr for DecoupleTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vMHA" => Ok(DecoupleTarget::VMha),
            "vFFN" => Ok(DecoupleTarget::VFfn),
            other => Err(Error::InvalidTarget(other.to_string())),
        }
    }
}

/// `"all"` or an explicit ascending list of layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSet {
    All,
    List(Vec<usize>),
}

impl Serialize for LayerSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerSet::All => s.serialize_str("all"),
            LayerSet::List(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = LayerSet;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("\"all\" or a list of layer numbers")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<LayerSet, E> {
                if v == "all" {
                    Ok(LayerSet::All)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }

            fn visit_seq<A: de::SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<LayerSet, A::Error> {
                let mut out = Vec::new();
                while let Some(l) = seq.next_element()? {
                    out.push(l);
                }
                Ok(LayerSet::List(out))
            }
        }
        d.deserialize_any(V)
    }
}

impl FromStr for LayerSet {
    type Err = Error;

    /// `all` or comma-separated layer numbers.
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(LayerSet::All);
        }
        let layers = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidLayer(format!("`{t}` is not a layer number")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerSet::List(layers))
    }
}

/// Size of a random control sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSize {
    Fixed(usize),
    /// Per image, the size of another group (e.g. as many tokens as are dead).
    SizeOf(Group),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub count: SampleSize,
    pub seed: u64,
}

/// Prune the union of `groups`, or a seeded uniform sample of that union.
///
/// Images are visited in id order with one generator, so a given partition file,
/// group list and seed always select the same tokens.
pub fn make_prune_spec(
    partition: &PartitionFile,
    groups: &[Group],
    sample_cfg: Option<Sample>,
) -> Result<InterventionSpec> {
    if groups.is_empty() {
        return Err(Error::EmptySelection);
    }
    let mut rng = sample_cfg.map(|s| ChaCha8Rng::seed_from_u64(s.seed));
    let mut indices = BTreeMap::new();
    for (image, p) in &partition.images {
        p.check()?;
        let pool: Vec<usize> = groups
            .iter()
            .flat_map(|&g| p.group(g).iter().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let chosen = match (sample_cfg, rng.as_mut()) {
            (Some(s), Some(rng)) => {
                let count = match s.count {
                    SampleSize::Fixed(n) => n,
                    SampleSize::SizeOf(g) => p.group(g).len(),
                };
                if count > pool.len() {
                    return Err(Error::SampleTooLarge {
                        image: image.clone(),
                        requested: count,
                        available: pool.len(),
                    });
                }
                let mut picked: Vec<usize> = sample(rng, pool.len(), count)
                    .into_iter()
                    .map(|i| pool[i])
                    .collect();
                picked.sort_unstable();
                picked
            }
            _ => pool,
        };
        if !chosen.is_empty() {
            indices.insert(image.clone(), chosen);
        }
    }
    if indices.is_empty() {
        return Err(Error::EmptySelection);
    }
    Ok(InterventionSpec::Prune {
        selector: TokenSelector::Explicit { indices },
    })
}

pub fn make_sublayer_skip_spec(
    pairs: &[(usize, Sublayer)],
    selector: TokenSelector,
) -> Result<InterventionSpec> {
    let spec = InterventionSpec::SublayerSkip {
        sublayers: pairs.to_vec(),
        selector,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn make_decouple_spec(target: &str, layers: LayerSet) -> Result<InterventionSpec> {
    let spec = InterventionSpec::Decouple {
        target: target.parse()?,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn make_late_entry_spec(entry_layer: usize) -> Result<InterventionSpec> {
    let spec = InterventionSpec::LateEntry { entry_layer };
    spec.validate()?;
    Ok(spec)
}

pub fn make_norm_scale_spec(factor: f64) -> Result<InterventionSpec> {
    let spec = InterventionSpec::NormScale { factor };
    spec.validate()?;
    Ok(spec)
}

fn check_layers(layers: &[usize], what: &str) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::InvalidLayer(format!("{what}: empty layer list")));
    }
    if layers.contains(&0) {
        return Err(Error::InvalidLayer(format!(
            "{what}: layers are numbered from 1"
        )));
    }
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidLayer(format!(
            "{what}: layers must be strictly ascending"
        )));
    }
    Ok(())
}

impl TokenSelector {
    pub fn validate(&self) -> Result<()> {
        match self {
            TokenSelector::Explicit { indices } => {
                if indices.values().all(Vec::is_empty) {
                    return Err(Error::EmptySelection);
                }
                for (image, v) in indices {
                    if v.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::InvalidSpec(format!(
                            "indices for `{image}` must be strictly ascending"
                        )));
                    }
                }
                Ok(())
            }
            TokenSelector::Group { partition, groups } => {
                if groups.is_empty() {
                    return Err(Error::EmptySelection);
                }
                if partition.is_empty() {
                    return Err(Error::InvalidSpec("partition path is empty".into()));
                }
                Ok(())
            }
            TokenSelector::NonSinkVisual { partition } if partition.is_empty() => {
                Err(Error::InvalidSpec("partition path is empty".into()))
            }
            _ => Ok(()),
        }
    }

    /// Resolves the selection for one image against its partition.
    pub fn resolve(&self, image: &str, partition: &PartitionFile) -> Result<Vec<usize>> {
        let part = || {
            partition
                .images
                .get(image)
                .ok_or_else(|| Error::InvalidSpec(format!("image `{image}` not in partition file")))
        };
        Ok(match self {
            TokenSelector::Explicit { indices } => indices.get(image).cloned().unwrap_or_default(),
            TokenSelector::Group { groups, .. } => {
                let p = part()?;
                let set: BTreeSet<usize> = groups
                    .iter()
                    .flat_map(|&g| p.group(g).iter().copied())
                    .collect();
                set.into_iter().collect()
            }
            TokenSelector::AllVisual {} => (0..part()?.num_visual).collect(),
            TokenSelector::NonSinkVisual { .. } => {
                let p = part()?;
                (0..p.num_visual)
                    .filter(|i| p.sink_llm.binary_search(i).is_err())
                    .collect()
            }
        })
    }
}

impl InterventionSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            InterventionSpec::Prune { .. } => "prune",
            InterventionSpec::SublayerSkip { .. } => "sublayer_skip",
            InterventionSpec::Decouple { .. } => "decouple",
            InterventionSpec::LateEntry { .. } => "late_entry",
            InterventionSpec::NormScale { .. } => "norm_scale",
        }
    }

    /// Checks the per-kind invariants not expressible in the type.
    pub fn validate(&self) -> Result<()> {
        match self {
            InterventionSpec::Prune { selector } => selector.validate(),
            InterventionSpec::SublayerSkip {
                sublayers,
                selector,
            } => {
                if sublayers.is_empty() {
                    return Err(Error::InvalidLayer("no sublayers to skip".into()));
                }
                if sublayers.iter().any(|&(l, _)| l == 0) {
                    return Err(Error::InvalidLayer("layers are numbered from 1".into()));
                }
                if sublayers.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidLayer(
                        "sublayers must be unique and ordered by (layer, att < mlp)".into(),
                    ));
                }
                selector.validate()
            }
            InterventionSpec::Decouple { layers, .. } => match layers {
                LayerSet::All => Ok(()),
                LayerSet::List(v) => check_layers(v, "decouple"),
            },
            InterventionSpec::LateEntry { entry_layer } => {
                if *entry_layer == 0 {
                    Err(Error::InvalidLayer(
                        "entry layer 0 is the unmodified model".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            InterventionSpec::NormScale { factor } => {
                if factor.is_finite() && *factor > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidFactor(*factor))
                }
            }
        }
    }

    /// Checks explicit indices against a partition's visual ranges.
    pub fn check_against(&self, partition: &PartitionFile) -> Result<()> {
        let selector = match self {
            InterventionSpec::Prune { selector }
            | InterventionSpec::SublayerSkip { selector, .. } => selector,
            _ => return Ok(()),
        };
        if let TokenSelector::Explicit { indices } = selector {
            for (image, v) in indices {
                let p = partition.images.get(image).ok_or_else(|| {
                    Error::InvalidSpec(format!("image `{image}` not in partition file"))
                })?;
                if let Some(&i) = v.iter().find(|&&i| i >= p.num_visual) {
                    return Err(Error::IndexOutOfRange {
                        index: i,
                        len: p.num_visual,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Canonical text: compact JSON, keys sorted.
pub fn serialize(spec: &InterventionSpec) -> Result<String> {
    spec.validate()?;
    // Value objects are BTreeMap-backed, which sorts keys.
    let value = serde_json::to_value(spec)?;
    Ok(serde_json::to_string(&value)?)
}

/// Parses and validates a spec. Syntax and shape errors carry their location.
pub fn parse(text: &str) -> Result<InterventionSpec> {
    let spec: InterventionSpec = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::tri_partition;

    fn partition() -> PartitionFile {
        let mut pf = PartitionFile::default();
        pf.images.insert(
            "a".into(),
            tri_partition("a", 10, &[0], &[1], &[2, 3, 4]).unwrap(),
        );
        pf.images.insert(
            "b".into(),
            tri_partition("b", 10, &[9], &[9], &[5, 6]).unwrap(),
        );
        pf
    }

    #[test]
    fn prune_union_and_matched_sample() {
        let pf = partition();
        let spec = make_prune_spec(&pf, &[Group::SinkVit, Group::SinkLlm], None).unwrap();
        let InterventionSpec::Prune {
            selector: TokenSelector::Explicit { indices },
        } = &spec
        else {
            panic!("unexpected {spec:?}")
        };
        assert_eq!(indices["a"], vec![0, 1]);
        assert_eq!(indices["b"], vec![9]);

        let s = Sample {
            count: SampleSize::SizeOf(Group::Dead),
            seed: 7,
        };
        let remaining = [Group::SinkVit, Group::SinkLlm, Group::Alive];
        let ctrl = make_prune_spec(&pf, &remaining, Some(s)).unwrap();
        assert_eq!(ctrl, make_prune_spec(&pf, &remaining, Some(s)).unwrap());
        let sel = match &ctrl {
            InterventionSpec::Prune { selector } => selector,
            _ => unreachable!(),
        };
        let a = sel.resolve("a", &pf).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|i| ![2, 3, 4].contains(i)));
        assert_eq!(sel.resolve("b", &pf).unwrap().len(), 2);
    }

    #[test]
    fn prune_errors() {
        let pf = partition();
        assert!(matches!(
            make_prune_spec(&pf, &[], None),
            Err(Error::EmptySelection)
        ));
        assert!(matches!(
            make_prune_spec(&PartitionFile::default(), &[Group::Dead], None),
            Err(Error::EmptySelection)
        ));
        let big = Sample {
            count: SampleSize::Fixed(4),
            seed: 1,
        };
        assert!(matches!(
            make_prune_spec(&pf, &[Group::Dead], Some(big)),
            Err(Error::SampleTooLarge { .. })
        ));
    }

    #[test]
    fn constructor_errors() {
        let sel = TokenSelector::AllVisual {};
        assert!(matches!(
            make_sublayer_skip_spec(&[], sel.clone()),
            Err(Error::InvalidLayer(_))
        ));
        assert!(matches!(
            make_sublayer_skip_spec(&[(0, Sublayer::Mlp)], sel),
            Err(Error::InvalidLayer(_))
        ));
        assert!(matches!(
            make_decouple_spec("vXYZ", LayerSet::All),
            Err(Error::InvalidTarget(_))
        ));
        assert!(matches!(
            make_late_entry_spec(0),
            Err(Error::InvalidLayer(_))
        ));
        assert!(make_late_entry_spec(10).is_ok());
        assert!(matches!(
            make_norm_scale_spec(-1.0),
            Err(Error::InvalidFactor(_))
        ));
        assert!(matches!(
            make_norm_scale_spec(f64::NAN),
            Err(Error::InvalidFactor(_))
        ));
        assert!(make_norm_scale_spec(1.0).is_ok());
    }

    #[test]
    fn canonical_text() {
        let spec = make_norm_scale_spec(0.01).unwrap();
        assert_eq!(
            serialize(&spec).unwrap(),
            r#"{"kind":"norm_scale","params":{"factor":0.01}}"#
        );
        let spec = make_decouple_spec("vFFN", LayerSet::All).unwrap();
        assert_eq!(
            serialize(&spec).unwrap(),
            r#"{"kind":"decouple","params":{"layers":"all","target":"vFFN"}}"#
        );
        let spec = make_sublayer_skip_spec(
            &[(1, Sublayer::Mlp), (2, Sublayer::Att)],
            TokenSelector::Group {
                partition: "p.json".into(),
                groups: vec![Group::SinkLlm],
            },
        )
        .unwrap();
        let text = serialize(&spec).unwrap();
        assert_eq!(
            text,
            r#"{"kind":"sublayer_skip","params":{"selector":{"groups":["sink_llm"],"partition":"p.json","type":"group"},"sublayers":[[1,"mlp"],[2,"att"]]}}"#
        );
        assert_eq!(parse(&text).unwrap(), spec);
    }

    #[test]
    fn parse_errors_carry_location() {
        let err = parse("{\"kind\":\"explode\",\n\"params\":{}}").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err:?}");
        let err =
            parse("{\"kind\":\"late_entry\",\"params\":{\"entry_layer\":\"x\"}}").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(matches!(
            parse(r#"{"kind":"late_entry","params":{"entry_layer":0}}"#),
            Err(Error::InvalidLayer(_))
        ));
    }

    #[test]
    fn selector_resolution() {
        let pf = partition();
        let ns = TokenSelector::NonSinkVisual {
            partition: "p".into(),
        };
        assert_eq!(
            ns.resolve("a", &pf).unwrap(),
            vec![0, 2, 3, 4, 5, 6, 7, 8, 9]
        );
        assert_eq!(
            TokenSelector::AllVisual {}.resolve("b", &pf).unwrap().len(),
            10
        );
        assert!(ns.resolve("zzz", &pf).is_err());
    }

    #[test]
    fn layer_set_parsing() {
        assert_eq!("all".parse::<LayerSet>().unwrap(), LayerSet::All);
        assert_eq!(
            "1,2, 5".parse::<LayerSet>().unwrap(),
            LayerSet::List(vec![1, 2, 5])
        );
        assert!("1,x".parse::<LayerSet>().is_err());
        assert!(make_decouple_spec("vMHA", LayerSet::List(vec![2, 1])).is_err());
    }
}
