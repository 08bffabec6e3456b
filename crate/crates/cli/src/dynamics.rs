use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, ValueEnum};
use serde::Serialize;
use vistoken_core::dumpio::Bundle;
use vistoken_core::dynamics::{
    attention_flow, group_entropy, in_cluster_consistency, late_entry_grounding,
    layer_similarity_map, norm_trajectory, partition_groups, write_long_csv, FlowNorm, GroupTrace,
    NormKind, Source, TokenGroup,
};
use vistoken_core::partition::{PartitionFile, TokenPartition};
use vistoken_core::probe::MatchRule;

use crate::output::{format, open, usage, write_csv, write_json, writer};
use crate::{Format, Global};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    /// Share of text-to-visual attention received by each group.
    Attention,
    /// Attention share divided by group size.
    AttentionPerToken,
    /// Mean pairwise cosine of each group's LLM states.
    Consistency,
    /// Mean p-norm of each group's tokens.
    Norm,
    /// Output-distribution entropy of each group at the final layer.
    Entropy,
    /// Layer-by-layer cosine map of each group (CSV: layer_a, layer_b, group, value).
    Similarity,
    /// Object-token grounding of late-entry exports on absolute layers.
    LateEntry,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SourceArg {
    Llm,
    Vit,
}

impl From<SourceArg> for Source {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Llm => Source::Llm,
            SourceArg::Vit => Source::Vit,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FlowArg {
    WithinVisual,
    Absolute,
}

#[derive(Debug, Args)]
pub struct DynamicsArgs {
    #[arg(value_enum)]
    pub metric: Metric,
    /// Bundle directory (late-entry: one per entry layer, repeat the flag).
    #[arg(long, required = true)]
    pub bundle: Vec<PathBuf>,
    /// Partition file from `partition run`.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    /// One image; by default every partitioned image is computed and the values averaged.
    #[arg(long)]
    pub image: Option<String>,
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Attention denominator.
    #[arg(long, value_enum, default_value = "within-visual")]
    pub norm: FlowArg,
    /// Norm order for `norm` (1 or 2).
    #[arg(long, default_value_t = 2)]
    pub p: u32,
    #[arg(long, value_enum, default_value = "llm")]
    pub source: SourceArg,
    /// Retrieval depth for `late-entry`.
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Serialize)]
struct SimilarityRow<'a> {
    layer_a: usize,
    layer_b: usize,
    group: &'a str,
    value: f64,
}

/// Averages per-image traces group by group and layer by layer, ignoring undefined values.
fn mean_traces(per_image: &[Vec<GroupTrace>]) -> Vec<GroupTrace> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for traces in per_image {
        for t in traces {
            if !order.contains(&t.group) {
                order.push(t.group.clone());
            }
            for (&l, v) in t.layers.iter().zip(&t.values) {
                let e = acc.entry((t.group.clone(), l)).or_default();
                if let Some(v) = v {
                    e.0 += v;
                    e.1 += 1;
                }
            }
        }
    }
    order
        .into_iter()
        .map(|group| {
            let cells: Vec<(usize, Option<f64>)> = acc
                .range((group.clone(), 0)..=(group.clone(), usize::MAX))
                .map(|((_, l), &(s, n))| (*l, (n > 0).then(|| s / n as f64)))
                .collect();
            GroupTrace {
                group,
                layers: cells.iter().map(|c| c.0).collect(),
                values: cells.iter().map(|c| c.1).collect(),
            }
        })
        .collect()
}

fn groups_with_text(
    b: &Bundle,
    image: &str,
    p: &TokenPartition,
    source: Source,
) -> anyhow::Result<Vec<TokenGroup>> {
    let mut groups = partition_groups(p);
    if source == Source::Llm {
        groups.push(TokenGroup::text(b, image)?);
    }
    Ok(groups)
}

fn per_image(
    metric: Metric,
    b: &Bundle,
    image: &str,
    p: &TokenPartition,
    a: &DynamicsArgs,
) -> anyhow::Result<Vec<GroupTrace>> {
    let source = Source::from(a.source);
    Ok(match metric {
        Metric::Attention | Metric::AttentionPerToken => {
            let norm = match a.norm {
                FlowArg::WithinVisual => FlowNorm::WithinVisual,
                FlowArg::Absolute => FlowNorm::Absolute,
            };
            let flow = attention_flow(b, image, p, norm)?;
            if metric == Metric::Attention {
                flow.mass_fraction
            } else {
                flow.token_mean
            }
        }
        Metric::Consistency => partition_groups(p)
            .into_iter()
            .filter(|g| g.indices.len() >= 2)
            .map(|g| {
                let mut t = in_cluster_consistency(b, image, &g.indices)?;
                t.group = g.label;
                Ok(t)
            })
            .collect::<anyhow::Result<_>>()?,
        Metric::Norm => {
            let kind = NormKind::from_p(a.p)?;
            norm_trajectory(
                b,
                image,
                &groups_with_text(b, image, p, source)?,
                kind,
                source,
            )?
        }
        Metric::Entropy => groups_with_text(b, image, p, Source::Llm)?
            .iter()
            .filter(|g| !g.indices.is_empty())
            .map(|g| {
                let r = group_entropy(b, image, g)?;
                Ok(GroupTrace {
                    group: r.group,
                    layers: vec![r.layer],
                    values: vec![r.mean],
                })
            })
            .collect::<anyhow::Result<_>>()?,
        Metric::Similarity | Metric::LateEntry => unreachable!("handled by the caller"),
    })
}

fn emit(g: &Global, traces: &[GroupTrace], out: Option<&std::path::Path>) -> anyhow::Result<()> {
    if format(g, Format::Csv, &[Format::Csv, Format::Json])? == Format::Json {
        write_json(traces, out)
    } else {
        let mut w = writer(out)?;
        write_long_csv(traces, &mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn late_entry(g: &Global, a: &DynamicsArgs) -> anyhow::Result<ExitCode> {
    let bundles = a
        .bundle
        .iter()
        .map(|p| open(p, g))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let refs: Vec<&Bundle> = bundles.iter().collect();
    let curves = late_entry_grounding(&refs, a.k, MatchRule::default())?;
    let mut traces = Vec::new();
    for c in &curves {
        let layers: Vec<usize> = c.curve.points.iter().map(|p| p.layer).collect();
        traces.push(GroupTrace {
            group: format!("entry{}/object", c.entry_layer),
            layers: layers.clone(),
            values: c
                .curve
                .points
                .iter()
                .map(|p| Some(p.object_token_fraction))
                .collect(),
        });
        traces.push(GroupTrace {
            group: format!("entry{}/all", c.entry_layer),
            layers,
            values: c
                .curve
                .points
                .iter()
                .map(|p| Some(p.all_token_fraction))
                .collect(),
        });
    }
    emit(g, &traces, a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

pub fn run(g: &Global, a: DynamicsArgs) -> anyhow::Result<ExitCode> {
    if a.metric == Metric::LateEntry {
        return late_entry(g, &a);
    }
    let [bundle] = a.bundle.as_slice() else {
        return usage(format!("{:?} takes exactly one --bundle", a.metric).to_lowercase());
    };
    let Some(part_path) = &a.partition else {
        return usage("this metric needs --partition");
    };
    let b = open(bundle, g)?;
    let pf = PartitionFile::from_json(&std::fs::read_to_string(part_path)?)?;
    let ids: Vec<String> = match &a.image {
        Some(id) if pf.images.contains_key(id) => vec![id.clone()],
        Some(id) => return usage(format!("--image `{id}` is not in the partition file")),
        None => pf.images.keys().cloned().collect(),
    };
    if ids.is_empty() {
        anyhow::bail!("partition file lists no images");
    }

    if a.metric == Metric::Similarity {
        let source = Source::from(a.source);
        let mut acc: BTreeMap<(String, usize, usize), (f64, usize)> = BTreeMap::new();
        let mut order = Vec::new();
        for id in &ids {
            for grp in partition_groups(&pf.images[id]) {
                if grp.indices.is_empty() {
                    continue;
                }
                let map = layer_similarity_map(&b, id, &grp.indices, source)?;
                if !order.contains(&grp.label) {
                    order.push(grp.label.clone());
                }
                for (i, row) in map.values.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        let e = acc
                            .entry((grp.label.clone(), map.layers[i], map.layers[j]))
                            .or_default();
                        e.0 += v;
                        e.1 += 1;
                    }
                }
            }
        }
        let rows: Vec<SimilarityRow> = order
            .iter()
            .flat_map(|grp| {
                acc.range((grp.clone(), 0, 0)..=(grp.clone(), usize::MAX, usize::MAX))
                    .map(|((label, la, lb), &(s, n))| SimilarityRow {
                        layer_a: *la,
                        layer_b: *lb,
                        group: label,
                        value: s / n as f64,
                    })
            })
            .collect();
        if format(g, Format::Csv, &[Format::Csv, Format::Json])? == Format::Json {
            write_json(&rows, a.out.as_deref())?;
        } else {
            write_csv(rows, a.out.as_deref())?;
        }
        return Ok(ExitCode::SUCCESS);
    }

    let traces = ids
        .iter()
        .map(|id| per_image(a.metric, &b, id, &pf.images[id], &a))
        .collect::<anyhow::Result<Vec<_>>>()?;
    emit(g, &mean_traces(&traces), a.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}
