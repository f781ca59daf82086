use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "ifrp", version, about = "Identity-preserving face recovery from stylized portraits")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    /// Dataset root; defaults to $IFRP_DATA_ROOT, then ./data.
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the paired dataset and its manifest.
    Synth,
    /// Train, resuming from the newest checkpoint if there is one.
    Train {
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Recover photorealistic faces, written next to each input.
    Recover {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score the test split and write metrics.csv and metrics.txt.
    Eval {
        /// Defaults to the newest checkpoint in the checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every op and both networks.
    Gradcheck,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        let c = &self.common;
        let mut o = Overrides {
            seed: c.seed,
            resolution: c.resolution,
            data_root: c.data_root.clone(),
            checkpoint_dir: c.checkpoint_dir.clone(),
            report_dir: c.report_dir.clone(),
            ..Overrides::default()
        };
        if let Command::Train { epochs, batch_size } = &self.command {
            o.epochs = *epochs;
            o.batch_size = *batch_size;
        }
        o
    }

    pub fn resolve_config(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.common.config.as_deref(), &self.overrides())
    }
}

/// Runs one command, writing its human-readable result to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let cfg = cli.resolve_config()?;
    let io = |e: std::io::Error| CliError::Usage(format!("cannot write output: {e}"));
    match &cli.command {
        Command::Synth => {
            let o = commands::synth(&cfg)?;
            write!(out, "{}", o.summary()).map_err(io)?;
        }
        Command::Train { .. } => {
            let o = commands::train(&cfg)?;
            if o.summaries.is_empty() {
                writeln!(out, "already trained to epoch {}", o.final_epoch).map_err(io)?;
            } else {
                writeln!(out, "trained epochs {}..{}", o.summaries[0].epoch, o.final_epoch).map_err(io)?;
            }
            if let Some(p) = &o.checkpoint {
                writeln!(out, "checkpoint {}", p.display()).map_err(io)?;
            }
        }
        Command::Recover { checkpoint, inputs } => {
            let outputs = commands::recover(checkpoint, inputs)?;
            for p in &outputs {
                writeln!(out, "{}", p.display()).map_err(io)?;
            }
        }
        Command::Eval { checkpoint } => {
            let ckpt = commands::resolve_checkpoint(&cfg, checkpoint.as_deref())?;
            let o = commands::eval(&cfg, &ckpt)?;
            write!(out, "{}", o.report.to_text()).map_err(io)?;
            writeln!(out, "wrote {} and {}", o.csv_path.display(), o.text_path.display()).map_err(io)?;
        }
        Command::Gradcheck => {
            let rows = commands::gradcheck(cfg.seed)?;
            write!(out, "{}", commands::format_checks(&rows)).map_err(io)?;
            let failed = rows.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(CliError::ChecksFailed(failed, rows.len()));
            }
        }
    }
    Ok(())
}
