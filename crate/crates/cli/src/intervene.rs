use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Subcommand, ValueEnum};
use vistoken_core::intervene::{
    make_decouple_spec, make_late_entry_spec, make_norm_scale_spec, make_prune_spec,
    make_sublayer_skip_spec, parse, serialize, InterventionSpec, LayerSet, Sample, SampleSize,
    Sublayer, TokenSelector, SCHEMA,
};
use vistoken_core::partition::{Group, PartitionFile};
use vistoken_core::Error;

use crate::output::{format, usage, writer, Usage};
use crate::{Format, Global};

#[derive(Debug, Subcommand)]
pub enum InterveneCmd {
    /// Remove a partition's groups (or a seeded sample of them) at the model input.
    MakePrune(PruneArgs),
    /// Suppress the residual contribution of chosen sublayers on visual tokens.
    MakeSkip(SkipArgs),
    /// Cut visual-to-visual interaction in attention (vMHA) or feed-forward (vFFN).
    MakeDecouple(DecoupleArgs),
    /// Inject the projected visual tokens at a later layer.
    MakeLateEntry(LateEntryArgs),
    /// Scale the norm of every visual token.
    MakeNormScale(NormScaleArgs),
    /// Parse a spec, check it against the schema rules (and a partition), print its canonical form.
    Check(CheckArgs),
    /// Print the JSON schema of intervention specs.
    Schema(OutArg),
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Output file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_group(s: &str) -> Result<Group, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Copy)]
pub enum SampleArg {
    Fixed(usize),
    SizeOf(Group),
}

fn parse_sample(s: &str) -> Result<SampleArg, String> {
    match s.parse::<usize>() {
        Ok(n) => Ok(SampleArg::Fixed(n)),
        Err(_) => parse_group(s).map(SampleArg::SizeOf),
    }
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub partition: PathBuf,
    /// Comma-separated groups: sink_vit, sink_llm, dead, alive.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_group)]
    pub groups: Vec<Group>,
    /// Prune a uniform sample of this size per image: a number, or a group name for "as many as that group".
    #[arg(long, value_parser = parse_sample)]
    pub sample: Option<SampleArg>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelectorArg {
    AllVisual,
    NonSinkVisual,
    Group,
}

fn parse_sublayer(s: &str) -> Result<(usize, Sublayer), String> {
    let (l, k) = s
        .split_once(':')
        .ok_or_else(|| format!("`{s}` is not <layer>:<att|mlp>"))?;
    let layer = l
        .parse()
        .map_err(|_| format!("`{l}` is not a layer number"))?;
    let kind = k.parse().map_err(|e: Error| e.to_string())?;
    Ok((layer, kind))
}

#[derive(Debug, Args)]
pub struct SkipArgs {
    /// Comma-separated `<layer>:<att|mlp>` pairs, layers from 1.
    #[arg(long, value_delimiter = ',', required = true, value_parser = parse_sublayer)]
    pub sublayers: Vec<(usize, Sublayer)>,
    #[arg(long, value_enum, default_value = "all-visual")]
    pub selector: SelectorArg,
    /// Partition file referenced by `non-sink-visual` and `group` selectors.
    #[arg(long)]
    pub partition: Option<String>,
    #[arg(long, value_delimiter = ',', value_parser = parse_group)]
    pub groups: Vec<Group>,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct DecoupleArgs {
    /// vMHA or vFFN.
    #[arg(long)]
    pub target: String,
    /// `all` or comma-separated layers.
    #[arg(long, default_value = "all", value_parser = parse_layer_set)]
    pub layers: LayerSet,
    #[command(flatten)]
    pub out: OutArg,
}

fn parse_layer_set(s: &str) -> Result<LayerSet, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct LateEntryArgs {
    /// First layer that sees the visual tokens.
    #[arg(long)]
    pub layer: usize,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct NormScaleArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub factor: f64,
    #[command(flatten)]
    pub out: OutArg,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    pub spec: PathBuf,
    /// Also check that every referenced image and index exists in this partition.
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArg,
}

fn load_partition(path: &Path) -> anyhow::Result<PartitionFile> {
    let text = std::fs::read_to_string(path)?;
    Ok(PartitionFile::from_json(&text)?)
}

/// Spec builders reject bad flag values; those are usage errors.
fn built(r: vistoken_core::Result<InterventionSpec>) -> anyhow::Result<InterventionSpec> {
    r.map_err(|e| match e {
        Error::InvalidLayer(_)
        | Error::InvalidTarget(_)
        | Error::InvalidFactor(_)
        | Error::InvalidConfig(_) => Usage(e.to_string()).into(),
        other => other.into(),
    })
}

fn emit(spec: &InterventionSpec, out: &OutArg) -> anyhow::Result<()> {
    let mut w = writer(out.out.as_deref())?;
    w.write_all(serialize(spec)?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn run(g: &Global, cmd: InterveneCmd) -> anyhow::Result<ExitCode> {
    format(g, Format::Json, &[Format::Json])?;
    match cmd {
        InterveneCmd::MakePrune(a) => {
            let pf = load_partition(&a.partition)?;
            let sample = a.sample.map(|s| Sample {
                count: match s {
                    SampleArg::Fixed(n) => SampleSize::Fixed(n),
                    SampleArg::SizeOf(grp) => SampleSize::SizeOf(grp),
                },
                seed: g.seed.unwrap_or(0),
            });
            emit(&make_prune_spec(&pf, &a.groups, sample)?, &a.out)?;
        }
        InterveneCmd::MakeSkip(a) => {
            let need_partition = || match &a.partition {
                Some(p) => Ok(p.clone()),
                None => usage("this selector needs --partition"),
            };
            let selector = match a.selector {
                SelectorArg::AllVisual => TokenSelector::AllVisual {},
                SelectorArg::NonSinkVisual => TokenSelector::NonSinkVisual {
                    partition: need_partition()?,
                },
                SelectorArg::Group => {
                    if a.groups.is_empty() {
                        return usage("the group selector needs --groups");
                    }
                    TokenSelector::Group {
                        partition: need_partition()?,
                        groups: a.groups.clone(),
                    }
                }
            };
            emit(
                &built(make_sublayer_skip_spec(&a.sublayers, selector))?,
                &a.out,
            )?;
        }
        InterveneCmd::MakeDecouple(a) => {
            emit(&built(make_decouple_spec(&a.target, a.layers))?, &a.out)?
        }
        InterveneCmd::MakeLateEntry(a) => emit(&built(make_late_entry_spec(a.layer))?, &a.out)?,
        InterveneCmd::MakeNormScale(a) => emit(&built(make_norm_scale_spec(a.factor))?, &a.out)?,
        InterveneCmd::Check(a) => {
            let text = std::fs::read_to_string(&a.spec)?;
            let spec = parse(&text)?;
            if let Some(p) = &a.partition {
                spec.check_against(&load_partition(p)?)?;
            }
            emit(&spec, &a.out)?;
        }
        InterveneCmd::Schema(o) => {
            let mut w = writer(o.out.as_deref())?;
            w.write_all(SCHEMA.as_bytes())?;
            w.flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
