//! `janus`: generate data, train, evaluate, export embeddings and check gradients.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use janus_core::tasks::TaskKind;
use janus_core::training::BranchMode;

#[derive(Parser, Debug)]
#[command(name = "janus", version, about = "Joint graph-text embedding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/dev/test JSONL splits from a generator spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a run config; writes a checkpoint and appends metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a dataset with a checkpoint and print metrics rows.
    Eval {
        /// Checkpoint stem (without `.manifest` / `.params`).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split label for the metrics rows.
        #[arg(long, default_value = "test")]
        split: String,
        /// Run config whose model must match the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also append the rows to this TSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Export one f32 joint embedding per record.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output stem; writes `<out>.vectors` and `<out>.ids`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compare every trainable block's gradient with finite differences in 64-bit.
    Gradcheck {
        /// Run config supplying the model; defaults to the micro model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "pair")]
        task: TaskKind,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// Corrupt matmul backward passes; the check must then fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

/// Command-line overrides applied on top of the run config.
#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// Drop the graph token and encode text only.
    #[arg(long)]
    pub no_graph: bool,
    /// Set the alignment weight to 0.
    #[arg(long)]
    pub no_align: bool,
    #[arg(long)]
    pub branch: Option<BranchMode>,
    #[arg(long)]
    pub gnn_layers: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub precision: Option<janus_core::numerics::Precision>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen { spec, out } => commands::gen(&spec, &out),
        Command::Train { config, overrides } => commands::train(&config, &overrides),
        Command::Eval {
            checkpoint,
            data,
            split,
            config,
            metrics,
            threads,
        } => commands::eval(&checkpoint, &data, &split, config.as_deref(), metrics.as_deref(), threads),
        Command::Embed {
            checkpoint,
            data,
            out,
            threads,
        } => commands::embed(&checkpoint, &data, &out, threads),
        Command::Gradcheck {
            config,
            task,
            seed,
            inject_fault,
        } => commands::gradcheck(config.as_deref(), task, seed, inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
