//! Bundle opening, output sinks and small flag helpers shared by the commands.

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::de::DeserializeOwned;
use serde::Serialize;
use vistoken_core::dumpio::{open_bundle, Bundle};
use vistoken_core::sinks::SinkConfig;

use crate::{Format, Global};

/// Environment variable naming a directory for decoded-tensor caches.
pub const CACHE_ENV: &str = "EMBEDLENS_CACHE";

/// A flag combination the grammar accepts but the command does not; exits with 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage<T>(msg: impl Into<String>) -> anyhow::Result<T> {
    Err(Usage(msg.into()).into())
}

pub fn open(path: &Path, g: &Global) -> anyhow::Result<Bundle> {
    let mut b = open_bundle(path).with_context(|| format!("opening bundle {}", path.display()))?;
    if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
        b = b.with_cache_dir(PathBuf::from(dir));
    }
    if g.verbose > 0 {
        eprintln!("opened {} ({} images)", path.display(), b.image_ids().len());
    }
    Ok(b)
}

pub fn writer(out: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)
                    .with_context(|| format!("creating {}", parent.display()))?;
            }
            let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(io::stdout().lock()),
    })
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let mut w = writer(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn write_csv<T: Serialize>(
    rows: impl IntoIterator<Item = T>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(writer(out)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// The requested format, or `default` when none was given; `allowed` lists what the command can write.
pub fn format(g: &Global, default: Format, allowed: &[Format]) -> anyhow::Result<Format> {
    let f = g.format.unwrap_or(default);
    if allowed.contains(&f) {
        Ok(f)
    } else {
        usage(format!("--format {f:?} is not supported by this command").to_lowercase())
    }
}

/// Requested images, or every image of the bundle.
pub fn images(bundle: &Bundle, requested: &[String]) -> anyhow::Result<Vec<String>> {
    if requested.is_empty() {
        let all = bundle.image_ids();
        if all.is_empty() {
            anyhow::bail!("bundle lists no images");
        }
        return Ok(all);
    }
    for id in requested {
        bundle.image_roles(id)?;
    }
    Ok(requested.to_vec())
}

/// Sink thresholds from `--sinks-config`, with channels taken from `--channels`,
/// else the bundle's `meta.sink_channels`, else the config (or built-in) default.
pub fn sink_config(
    bundle: &Bundle,
    file: Option<&Path>,
    channels: &[usize],
) -> anyhow::Result<SinkConfig> {
    let mut cfg: SinkConfig = match file {
        Some(p) => read_json(p)?,
        None => SinkConfig::default(),
    };
    if !channels.is_empty() {
        cfg.sink_channels = channels.to_vec();
    } else if let Some(meta) = bundle.manifest().meta.get("sink_channels") {
        let parsed: Result<Vec<usize>, _> = meta.split(',').map(|c| c.trim().parse()).collect();
        match parsed {
            Ok(c) if !c.is_empty() && file.is_none() => cfg.sink_channels = c,
            Ok(_) => {}
            Err(_) => {
                anyhow::bail!("bundle meta.sink_channels `{meta}` is not a comma-separated list")
            }
        }
    }
    Ok(cfg)
}
