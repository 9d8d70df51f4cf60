use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::server::{serve, ServeState};
use crate::stages;

#[derive(Debug, Parser)]
#[command(name = "glacier", version, about = "Glacier segmentation workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pipeline configuration (JSON); defaults apply to anything omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic 13-band scene with glacier outlines.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Drop unused bands and equalize the rest to [-1, 1].
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Sample patch centers inside glaciers and cut patches.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the U-Net on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Predict masks for every patch.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint file, or a training directory (latest epoch is used).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict, score and render every patch for the panel.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Activation grids, probability panels and layer statistics for one patch.
    Repr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        patch: Option<String>,
    },
    /// Serve an evaluation directory over HTTP.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long)]
        root: PathBuf,
        /// Built panel bundle to serve under `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

fn run_command(command: Command) -> anyhow::Result<()> {
    let load = |c: &Common| PipelineConfig::load(c.config.as_deref());
    match command {
        Command::Synth { common } => {
            stages::synth(common.seed, &load(&common)?, &common.out)?;
        }
        Command::Preprocess { common, input } => {
            stages::preprocess(&input, &load(&common)?, &common.out)?;
        }
        Command::Sample { common, input } => {
            stages::sample(&input, common.seed, &load(&common)?, &common.out)?;
        }
        Command::Train { common, input } => {
            let out = stages::train_stage(&input, common.seed, &load(&common)?, &common.out)?;
            println!("{}", out.last_checkpoint.display());
        }
        Command::Infer { common, input, checkpoint } => {
            stages::infer(&checkpoint, &input, &load(&common)?, &common.out)?;
        }
        Command::Eval { common, input, checkpoint } => {
            let records = stages::eval(&checkpoint, &input, common.seed, &load(&common)?, &common.out)?;
            let mean = records.iter().map(|r| r.accuracy).sum::<f64>() / records.len() as f64;
            println!("{} patches, mean accuracy {mean:.4}", records.len());
        }
        Command::Repr { common, input, checkpoint, patch } => {
            stages::repr(&checkpoint, &input, patch.as_deref(), common.seed, &load(&common)?, &common.out)?;
        }
        Command::Serve { port, host, root, static_dir } => {
            let state = ServeState::load(&root)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(state, SocketAddr::new(host, port), static_dir.as_deref()))?;
        }
    }
    Ok(())
}

/// Parses `args` and runs the subcommand. Returns the process exit status:
/// 0 on success, 2 for usage errors, 1 when a stage fails.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
