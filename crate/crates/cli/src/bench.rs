use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Subcommand};
use serde::Serialize;
use vistoken_core::patchbench::{
    audit_dir, generate_benchmark, read_answers, score_answers, AnswerNorm, BenchConfig,
    ANSWERS_FILE,
};

use crate::output::{format, read_json, write_csv, write_json};
use crate::{Format, Global};

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Render the benchmark into a directory.
    Generate(GenerateArgs),
    /// Check that every target lies inside its declared patch cells; exits 1 on any failure.
    Audit(AuditArgs),
    /// Score model answers per group and question type.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Benchmark settings as JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    /// Benchmark directory.
    pub dir: PathBuf,
    /// Report file (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Benchmark directory holding the ground truth.
    #[arg(long)]
    pub bench: PathBuf,
    /// Model answers, one `{item_id, q_type, answer}` object per line.
    #[arg(long)]
    pub answers: PathBuf,
    /// Normalization settings as JSON (`lowercase`, `strip_punctuation`, `number_words`).
    #[arg(long)]
    pub norm: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct CellRow {
    group: String,
    q_type: String,
    correct: usize,
    total: usize,
    accuracy: f64,
}

pub fn run(g: &Global, cmd: BenchCmd) -> anyhow::Result<ExitCode> {
    match cmd {
        BenchCmd::Generate(a) => {
            format(g, Format::Json, &[Format::Json])?;
            let mut cfg: BenchConfig = match &a.config {
                Some(p) => read_json(p)?,
                None => BenchConfig::default(),
            };
            if let Some(s) = g.seed {
                cfg.seed = s;
            }
            let items = generate_benchmark(&cfg, &a.out)?;
            if g.verbose > 0 {
                eprintln!("wrote {} items to {}", items.len(), a.out.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        BenchCmd::Audit(a) => {
            format(g, Format::Json, &[Format::Json])?;
            let results = audit_dir(&a.dir)?;
            write_json(&results, a.out.as_deref())?;
            let failed: Vec<&str> = results
                .iter()
                .filter(|r| !r.pass)
                .map(|r| r.item_id.as_str())
                .collect();
            if failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!(
                    "{} of {} items fail the audit: {}",
                    failed.len(),
                    results.len(),
                    failed.join(", ")
                );
                Ok(ExitCode::from(1))
            }
        }
        BenchCmd::Score(a) => {
            let f = format(g, Format::Json, &[Format::Json, Format::Csv])?;
            let norm: AnswerNorm = match &a.norm {
                Some(p) => read_json(p)?,
                None => AnswerNorm::default(),
            };
            let truth = read_answers(&a.bench.join(ANSWERS_FILE))?;
            let given = read_answers(&a.answers)?;
            let report = score_answers(&given, &truth, &norm)?;
            if f == Format::Json {
                write_json(&report, a.out.as_deref())?;
            } else {
                let rows = report.cells.iter().flat_map(|(grp, qs)| {
                    qs.iter().map(move |(q, c)| CellRow {
                        group: grp.as_str().to_string(),
                        q_type: q.as_str().to_string(),
                        correct: c.correct,
                        total: c.total,
                        accuracy: c.accuracy,
                    })
                });
                write_csv(rows, a.out.as_deref())?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
