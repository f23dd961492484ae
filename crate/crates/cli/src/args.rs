//! Argument parsing. Dotted flags such as `--eda.lam 0.25` are pulled out
//! before clap sees the rest.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use edadet::SplitFilter;

use crate::commands;
use crate::config::{split_assignment, RunConfig};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "edadet", version, about = "Open-vocabulary detection with early dense alignment")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set eda.lam=0.25`. Dotted flags
    /// (`--eda.lam 0.25`) do the same.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write prompt-ensembled category embeddings.
    Embed {
        /// Which categories to embed.
        #[arg(long, default_value = "all")]
        split: SplitFilter,
        /// Output file; defaults to `<output_dir>/embeddings.edaemb`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on base-category boxes and write a checkpoint.
    Train,
    /// Score a checkpoint on the eval set.
    Eval(CheckpointArg),
    /// Detect objects in images.
    Infer {
        #[command(flatten)]
        ckpt: CheckpointArg,
        /// Image files to run on.
        #[arg(long = "image", conflicts_with = "synthetic")]
        images: Vec<PathBuf>,
        /// Run on this many generated eval images instead.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Also write one annotated image per input.
        #[arg(long)]
        overlay: bool,
    },
    /// Dense score heatmaps, argmax label map and a detection overlay.
    Visualize {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        image: PathBuf,
        /// Category to draw a heatmap for; repeatable. Defaults to the config.
        #[arg(long = "category")]
        categories: Vec<String>,
    },
    /// k-means over the detector's per-location features.
    Cluster {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        image: PathBuf,
        /// Number of clusters; defaults to `cluster.k`.
        #[arg(long)]
        k: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Split dotted `--a.b value` / `--a.b=value` flags from the rest.
pub fn extract_dotted(args: Vec<String>) -> CliResult<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Config(format!("--{key} needs a value")))?,
        };
        overrides.push((key.to_string(), value));
    }
    Ok((rest, overrides))
}

/// Parse `args` (including the program name) and run the command.
pub fn run(args: Vec<String>) -> CliResult<()> {
    let (rest, mut overrides) = extract_dotted(args)?;
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    let mut all = Vec::new();
    for s in &cli.set {
        let (k, v) = split_assignment(s)?;
        all.push((k.to_string(), v.to_string()));
    }
    all.append(&mut overrides);
    let cfg = RunConfig::load(cli.config.as_deref(), &all)?;
    commands::dispatch(&cfg, cli.command)
}
