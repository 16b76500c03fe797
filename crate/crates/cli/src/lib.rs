//! Command-line entry points. `run` parses arguments, dispatches to one
//! subcommand and maps errors onto exit codes: 0 success, 1 usage or
//! configuration, 2 data, 3 numeric.

mod commands;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sketchprompt::config::RunConfig;
use sketchprompt::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "sketchprompt", version, about = "Prompted CLIP-style sketch-to-photo retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// key=value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; receives a manifest.json.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Print the resolved configuration and planned outputs, then stop.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Seen,
    Unseen,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Fg,
    Cat,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seen/unseen category split.
    PrepareSplits {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Number of held-out categories.
        #[arg(long)]
        unseen: usize,
    },
    /// Pick one sketch and two photos per category.
    SelectSupport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        #[arg(long, value_enum, default_value = "unseen")]
        which: Which,
    },
    /// Train on the seen categories of a split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        /// Continue from a checkpoint; its configuration wins.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write sketch and photo embedding files.
    Embed {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        support: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "unseen")]
        which: Which,
    },
    /// Fine-grained evaluation (per-category instance retrieval).
    EvalFg {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: EvalSource,
        #[arg(long)]
        support: Option<PathBuf>,
    },
    /// Category-level evaluation over all test categories.
    EvalCat {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: EvalSource,
    },
    /// Prompt/image-token similarity maps for one image.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Category whose support set conditions the prompts.
        #[arg(long)]
        category: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        support: Option<PathBuf>,
        /// Layer index (default: vis_layer, -1 = last).
        #[arg(long)]
        layer: Option<i64>,
        #[arg(long)]
        use_inputs: bool,
    },
    /// Compare fast metrics with the brute-force oracle.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 2, value_names = ["QUERIES", "GALLERY"])]
        embeddings: Option<Vec<PathBuf>>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "fg")]
        protocol: ProtocolArg,
        /// Random distance matrices to check instead of embedding files.
        #[arg(long)]
        random: Option<usize>,
        /// Compare artifacts even when their config hashes differ.
        #[arg(long)]
        force: bool,
    },
    /// Parameter counts per component.
    ParamAudit {
        #[command(flatten)]
        common: Common,
        /// Scaling mode override.
        #[arg(long)]
        mode: Option<String>,
        /// Side-way width override.
        #[arg(long)]
        ls: Option<usize>,
    },
    /// Write a synthetic sketch/photo tree.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        categories: usize,
        #[arg(long, default_value_t = 6)]
        instances: usize,
        #[arg(long, default_value_t = 2)]
        sketches: usize,
        #[arg(long, default_value_t = 56)]
        size: usize,
    },
}

/// Where evaluation features come from: embedding files or a checkpoint
/// plus data.
#[derive(Debug, Clone, Args)]
pub struct EvalSource {
    #[arg(long, num_args = 2, value_names = ["QUERIES", "GALLERY"])]
    pub embeddings: Option<Vec<PathBuf>>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value = "unseen")]
    pub which: Which,
    /// Print the aligned text table instead of JSON.
    #[arg(long)]
    pub table: bool,
    /// Compare even when the two embedding files carry different hashes.
    #[arg(long)]
    pub force: bool,
}

impl Common {
    /// Defaults, then the config file, then `--set`, then `--seed`.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        self.apply_overrides(&mut cfg)?;
        Ok(cfg)
    }

    pub fn apply_overrides(&self, cfg: &mut RunConfig) -> Result<()> {
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        Ok(())
    }

    pub fn exec(&self) -> sketchprompt::exec::Exec {
        if self.sequential {
            sketchprompt::exec::Exec::Sequential
        } else {
            sketchprompt::exec::Exec::Parallel
        }
    }
}

/// Runs one command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
