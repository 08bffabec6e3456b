use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Subcommand, ValueEnum};
use serde::Serialize;
use vistoken_core::cluster::{
    anchor_cluster, cross_image_similarity, homogeneity_stats, ClusterSet, HomogeneityStats,
};
use vistoken_core::dumpio::{names, validate_bundle, write_bundle, Profile, ValidationReport};
use vistoken_core::partition::{run_partition, DeadCriteria, DeadDecision, PartitionFile};
use vistoken_core::probe::{matching_accuracy, sparsity_curve_layers, Lens, MatchRule, MatchScope};
use vistoken_core::sinks::{bos_alignment_trace, bos_rank_trace, detect_sinks, sink_report, Stage};
use vistoken_core::synth::{synthetic_bundle, SynthConfig};

use crate::output::{format, images, open, read_json, sink_config, usage, write_csv, write_json};
use crate::{Format, Global, Io};

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Bundle directory.
    pub dir: PathBuf,
    #[arg(long, default_value = "probe", value_parser = parse_profile)]
    pub profile: Profile,
    /// Report file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse().map_err(|e: vistoken_core::Error| e.to_string())
}

#[derive(Serialize)]
struct ValidateOutput<'a> {
    profile: Profile,
    ok: bool,
    #[serde(flatten)]
    report: &'a ValidationReport,
}

pub fn validate(g: &Global, a: ValidateArgs) -> anyhow::Result<ExitCode> {
    format(g, Format::Json, &[Format::Json])?;
    let b = open(&a.dir, g)?;
    let report = validate_bundle(&b, a.profile);
    write_json(
        &ValidateOutput {
            profile: a.profile,
            ok: report.is_empty(),
            report: &report,
        },
        a.out.as_deref(),
    )?;
    if report.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprint!("{report}");
        Ok(ExitCode::from(1))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output bundle directory.
    pub out: PathBuf,
    /// Generator settings as JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<usize>,
    /// Omit hidden states, sublayers, attention and the output vocabulary.
    #[arg(long)]
    pub probe_only: bool,
    /// Omit the vision-tower hidden states.
    #[arg(long)]
    pub no_vit: bool,
    /// Also write the planted ground truth here.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

pub fn synth(g: &Global, a: SynthArgs) -> anyhow::Result<ExitCode> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.images {
        cfg.images = n;
    }
    cfg.full &= !a.probe_only;
    cfg.vit &= !a.no_vit;
    let (spec, truth) = synthetic_bundle(&cfg)?;
    write_bundle(&spec, &a.out)?;
    if let Some(p) = &a.truth {
        write_json(&truth, Some(p))?;
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Subcommand)]
pub enum ProbeCmd {
    /// Top-k vocabulary tokens nearest one visual token.
    Topk(TopkArgs),
    /// Object-label matching accuracy per layer (CSV: layer, accuracy, ...).
    Accuracy(AccuracyArgs),
    /// Fraction of object / all visual tokens that match a label, per layer.
    Curve(CurveArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LensArg {
    Embed,
    Logit,
}

#[derive(Debug, Args)]
pub struct TopkArgs {
    #[command(flatten)]
    pub io: Io,
    #[arg(long)]
    pub image: String,
    /// Visual-token index (0-based within the image's visual range).
    #[arg(long)]
    pub token: usize,
    /// LLM layer; 0 reads the projected visual tokens.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, value_enum, default_value = "embed")]
    pub lens: LensArg,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Require exact (normalized) equality instead of subword containment.
    #[arg(long)]
    pub exact: bool,
    /// Shortest token accepted as a subword of a label.
    #[arg(long, default_value_t = 3)]
    pub min_substring_len: usize,
}

impl MatchArgs {
    fn rule(&self) -> MatchRule {
        if self.exact {
            MatchRule::Exact
        } else {
            MatchRule::Subword {
                min_substring_len: self.min_substring_len,
            }
        }
    }
}

/// `all` or a comma-separated list of layers.
#[derive(Debug, Clone)]
pub enum Layers {
    All,
    List(Vec<usize>),
}

fn parse_layers(s: &str) -> Result<Layers, String> {
    if s == "all" {
        return Ok(Layers::All);
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("`{t}` is not a layer number"))
        })
        .collect::<Result<Vec<_>, _>>()
        .map(Layers::List)
}

impl Layers {
    fn resolve(&self, num_layers: usize) -> Vec<usize> {
        match self {
            Layers::All => (0..=num_layers).collect(),
            Layers::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Object,
    Image,
}

#[derive(Debug, Args)]
pub struct AccuracyArgs {
    #[command(flatten)]
    pub io: Io,
    /// `all` or comma-separated LLM layers (0 = projected tokens).
    #[arg(long, default_value = "all", value_parser = parse_layers)]
    pub layers: Layers,
    #[command(flatten)]
    pub matching: MatchArgs,
    /// Where a label may be retrieved from: its own patches or anywhere in the image.
    #[arg(long, value_enum, default_value = "object")]
    pub scope: ScopeArg,
}

#[derive(Debug, Args)]
pub struct CurveArgs {
    #[command(flatten)]
    pub io: Io,
    #[arg(long, default_value = "all", value_parser = parse_layers)]
    pub layers: Layers,
    #[command(flatten)]
    pub matching: MatchArgs,
}

#[derive(Serialize)]
struct AccuracyRow {
    layer: usize,
    accuracy: f64,
    matched: usize,
    instances: usize,
    k: usize,
}

pub fn probe(g: &Global, cmd: ProbeCmd) -> anyhow::Result<ExitCode> {
    match cmd {
        ProbeCmd::Topk(a) => {
            format(g, Format::Json, &[Format::Json])?;
            let b = open(&a.io.bundle, g)?;
            let states = b.visual_states(&a.image, a.layer)?;
            if a.token >= states.rows() {
                return usage(format!(
                    "--token {} is outside 0..{}",
                    a.token,
                    states.rows()
                ));
            }
            let strings = b.vocab();
            let ranked = match a.lens {
                LensArg::Embed => {
                    let vocab = b.require(names::INPUT_VOCAB)?;
                    Lens::embed(&vocab, strings).topk(states.row(a.token), a.k)?
                }
                LensArg::Logit => {
                    let unembed = b.require(names::OUTPUT_VOCAB)?;
                    Lens::logit(&unembed, strings).topk(states.row(a.token), a.k)?
                }
            };
            write_json(&ranked, a.io.out.as_deref())?;
        }
        ProbeCmd::Accuracy(a) => {
            let f = format(g, Format::Csv, &[Format::Csv, Format::Json])?;
            let b = open(&a.io.bundle, g)?;
            let scope = match a.scope {
                ScopeArg::Object => MatchScope::Object,
                ScopeArg::Image => MatchScope::Image,
            };
            let layers = a.layers.resolve(b.num_layers().unwrap_or(0));
            let reports = layers
                .iter()
                .map(|&l| matching_accuracy(&b, l, a.matching.k, a.matching.rule(), scope))
                .collect::<Result<Vec<_>, _>>()?;
            if f == Format::Json {
                write_json(&reports, a.io.out.as_deref())?;
            } else {
                write_csv(
                    reports.iter().map(|r| AccuracyRow {
                        layer: r.layer,
                        accuracy: r.accuracy,
                        matched: r.matched,
                        instances: r.instances,
                        k: r.k,
                    }),
                    a.io.out.as_deref(),
                )?;
            }
        }
        ProbeCmd::Curve(a) => {
            let f = format(g, Format::Csv, &[Format::Csv, Format::Json])?;
            let b = open(&a.io.bundle, g)?;
            let layers = a.layers.resolve(b.num_layers().unwrap_or(0));
            let curve = sparsity_curve_layers(&b, layers, a.matching.k, a.matching.rule())?;
            if f == Format::Json {
                write_json(&curve, a.io.out.as_deref())?;
            } else {
                write_csv(&curve.points, a.io.out.as_deref())?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Subcommand)]
pub enum ClusterCmd {
    /// Cluster every requested image and report rank-0 centroid homogeneity.
    Run(ClusterRunArgs),
    /// Centroid similarity between the clusters of two images.
    Cross(ClusterCrossArgs),
}

#[derive(Debug, Args)]
pub struct ClusterRunArgs {
    #[command(flatten)]
    pub io: Io,
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    /// Comma-separated image ids (default: all).
    #[arg(long, value_delimiter = ',')]
    pub images: Vec<String>,
    /// LLM layer to cluster; 0 reads the projected visual tokens.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
}

#[derive(Debug, Args)]
pub struct ClusterCrossArgs {
    #[command(flatten)]
    pub io: Io,
    #[arg(long)]
    pub a: String,
    #[arg(long)]
    pub b: String,
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
}

#[derive(Serialize)]
struct ClusterOutput {
    tau: f64,
    layer: usize,
    images: Vec<ClusterSet>,
    /// Cross-image homogeneity of the largest cluster's centroid; absent for a single image.
    rank0_homogeneity: Option<HomogeneityStats>,
}

#[derive(Serialize)]
struct AssignmentRow<'a> {
    image: &'a str,
    token: usize,
    cluster: usize,
    rank: usize,
    anchor: usize,
}

pub fn cluster(g: &Global, cmd: ClusterCmd) -> anyhow::Result<ExitCode> {
    match cmd {
        ClusterCmd::Run(a) => {
            let f = format(g, Format::Json, &[Format::Json, Format::Csv])?;
            let b = open(&a.io.bundle, g)?;
            let ids = images(&b, &a.images)?;
            let sets = ids
                .iter()
                .map(|id| Ok(anchor_cluster(id, &b.visual_states(id, a.layer)?, a.tau)?))
                .collect::<anyhow::Result<Vec<_>>>()?;
            if f == Format::Csv {
                let mut rows = Vec::new();
                for cs in &sets {
                    let rank_of: Vec<usize> = {
                        let mut r = vec![0; cs.clusters.len()];
                        for (rank, &c) in cs.ranking.iter().enumerate() {
                            r[c] = rank;
                        }
                        r
                    };
                    for (token, c) in cs.assignment().into_iter().enumerate() {
                        rows.push(AssignmentRow {
                            image: &cs.image_id,
                            token,
                            cluster: c,
                            rank: rank_of[c],
                            anchor: cs.clusters[c].anchor_index,
                        });
                    }
                }
                write_csv(rows, a.io.out.as_deref())?;
            } else {
                let rank0: Vec<Vec<f32>> = sets
                    .iter()
                    .filter_map(|cs| cs.largest().map(|c| c.centroid.clone()))
                    .collect();
                let rank0_homogeneity = if rank0.len() >= 2 {
                    Some(homogeneity_stats(&rank0)?)
                } else {
                    None
                };
                write_json(
                    &ClusterOutput {
                        tau: a.tau,
                        layer: a.layer,
                        images: sets,
                        rank0_homogeneity,
                    },
                    a.io.out.as_deref(),
                )?;
            }
        }
        ClusterCmd::Cross(a) => {
            format(g, Format::Json, &[Format::Json])?;
            let b = open(&a.io.bundle, g)?;
            let ca = anchor_cluster(&a.a, &b.visual_states(&a.a, a.layer)?, a.tau)?;
            let cb = anchor_cluster(&a.b, &b.visual_states(&a.b, a.layer)?, a.tau)?;
            write_json(&cross_image_similarity(&ca, &cb)?, a.io.out.as_deref())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Args)]
pub struct SinkArgs {
    /// Sink thresholds as JSON (`vit_norm_threshold`, `sink_channels`, `phi_threshold`, `llm_layer`).
    #[arg(long = "config")]
    pub config: Option<PathBuf>,
    /// Comma-separated massive-activation channels; overrides the config and bundle metadata.
    #[arg(long, value_delimiter = ',')]
    pub channels: Vec<usize>,
}

#[derive(Debug, Subcommand)]
pub enum SinksCmd {
    /// Detect ViT and LLM sink tokens in every requested image.
    Detect(SinksDetectArgs),
    /// Mean cosine between an image's LLM sinks and bos at every sublayer (CSV: stage, mean_cosine).
    Trace(SinksTraceArgs),
    /// Bos-similarity ranks of the tokens most aligned with bos at a probe stage.
    Rank(SinksRankArgs),
}

#[derive(Debug, Args)]
pub struct SinksDetectArgs {
    #[command(flatten)]
    pub io: Io,
    #[command(flatten)]
    pub sinks: SinkArgs,
    #[arg(long, value_delimiter = ',')]
    pub images: Vec<String>,
}

#[derive(Debug, Args)]
pub struct SinksTraceArgs {
    #[command(flatten)]
    pub io: Io,
    #[command(flatten)]
    pub sinks: SinkArgs,
    #[arg(long)]
    pub image: String,
    /// Take the sink tokens from this partition file instead of detecting them.
    #[arg(long)]
    pub partition: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SinksRankArgs {
    #[command(flatten)]
    pub io: Io,
    #[arg(long)]
    pub image: String,
    /// Stage that picks the tracked tokens: L0, att<l> or mlp<l>.
    #[arg(long, default_value = "att2", value_parser = parse_stage)]
    pub stage: Stage,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse().map_err(|e: vistoken_core::Error| e.to_string())
}

#[derive(Serialize)]
struct RankRow<'a> {
    stage: &'a str,
    token: usize,
    rank: usize,
}

pub fn sinks(g: &Global, cmd: SinksCmd) -> anyhow::Result<ExitCode> {
    match cmd {
        SinksCmd::Detect(a) => {
            format(g, Format::Json, &[Format::Json])?;
            let b = open(&a.io.bundle, g)?;
            let cfg = sink_config(&b, a.sinks.config.as_deref(), &a.sinks.channels)?;
            let ids = images(&b, &a.images)?;
            write_json(&detect_sinks(&b, &ids, &cfg)?, a.io.out.as_deref())?;
        }
        SinksCmd::Trace(a) => {
            let f = format(g, Format::Csv, &[Format::Csv, Format::Json])?;
            let b = open(&a.io.bundle, g)?;
            let sinks = match &a.partition {
                Some(p) => {
                    let pf = PartitionFile::from_json(&std::fs::read_to_string(p)?)?;
                    pf.images
                        .get(&a.image)
                        .with_context(|| format!("partition has no image `{}`", a.image))?
                        .sink_llm
                        .clone()
                }
                None => {
                    let cfg = sink_config(&b, a.sinks.config.as_deref(), &a.sinks.channels)?;
                    sink_report(&b, &a.image, &cfg)?.llm_sink_indices
                }
            };
            let trace = bos_alignment_trace(&b, &a.image, &sinks)?;
            if f == Format::Json {
                write_json(&trace, a.io.out.as_deref())?;
            } else {
                write_csv(&trace, a.io.out.as_deref())?;
            }
        }
        SinksCmd::Rank(a) => {
            let f = format(g, Format::Csv, &[Format::Csv, Format::Json])?;
            let b = open(&a.io.bundle, g)?;
            let trace = bos_rank_trace(&b, &a.image, a.stage, a.top)?;
            if f == Format::Json {
                write_json(&trace, a.io.out.as_deref())?;
            } else {
                let rows = trace.ranks.iter().flat_map(|(stage, ranks)| {
                    trace
                        .tracked
                        .iter()
                        .zip(ranks)
                        .map(move |(&token, &rank)| RankRow { stage, token, rank })
                });
                write_csv(rows, a.io.out.as_deref())?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Subcommand)]
pub enum PartitionCmd {
    /// Partition every gallery image into sink, dead and alive tokens.
    Run(PartitionRunArgs),
}

#[derive(Debug, Args)]
pub struct PartitionRunArgs {
    #[command(flatten)]
    pub io: Io,
    /// Comma-separated gallery image ids (default: all).
    #[arg(long, value_delimiter = ',')]
    pub gallery: Vec<String>,
    #[arg(long, default_value_t = 0.9)]
    pub tau: f64,
    /// Dead-token criteria as JSON; missing fields take their defaults.
    #[arg(long)]
    pub criteria: Option<PathBuf>,
    #[arg(long)]
    pub sinks_config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub channels: Vec<usize>,
    /// Also write the per-image dead-token decisions here.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
}

#[derive(Serialize)]
struct DecisionsOutput<'a> {
    criteria: &'a DeadCriteria,
    decisions: &'a [DeadDecision],
}

pub fn partition(g: &Global, cmd: PartitionCmd) -> anyhow::Result<ExitCode> {
    let PartitionCmd::Run(a) = cmd;
    format(g, Format::Json, &[Format::Json])?;
    let b = open(&a.io.bundle, g)?;
    let crit: DeadCriteria = match &a.criteria {
        Some(p) => read_json(p)?,
        None => DeadCriteria::default(),
    };
    let cfg = sink_config(&b, a.sinks_config.as_deref(), &a.channels)?;
    let gallery = images(&b, &a.gallery)?;
    let run = run_partition(&b, &gallery, a.tau, &cfg, &crit)?;
    if g.verbose > 0 {
        for (id, p) in &run.partitions.images {
            eprintln!(
                "{id}: {} sink, {} dead, {} alive",
                p.sinks().len(),
                p.dead.len(),
                p.alive.len()
            );
        }
    }
    if let Some(p) = &a.decisions {
        write_json(
            &DecisionsOutput {
                criteria: &crit,
                decisions: &run.decisions,
            },
            Some(p),
        )?;
    }
    let mut w = crate::output::writer(a.io.out.as_deref())?;
    w.write_all(run.partitions.to_json()?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}
