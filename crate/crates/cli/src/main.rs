use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Train PReLU MLP blocks toward linearity, collapse them, and account
/// for what that saves.
#[derive(Parser, Debug)]
#[command(name = "layercollapse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command. Each one overrides the matching config
/// value.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Seed for initialization, shuffling, dropout and probes.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Slope regularizer strength.
    #[arg(long)]
    pub lc: Option<f64>,
    /// Collapse tolerance on |1 - alpha|.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory [default: config `output`, else `out`].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model checkpoint, used in place of the config's `model` section.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from its architecture or a checkpoint.
    Train(Common),
    /// Fine-tune a checkpoint with the slope regularizer, distilling from
    /// the starting model.
    Finetune(Common),
    /// Fuse every block whose slope passes the tolerance test.
    Collapse {
        #[command(flatten)]
        common: Common,
        /// Fine-tune and collapse one block at a time, last block first.
        #[arg(long)]
        sequential: bool,
    },
    /// Parameters, per-sample MACs, and loss/metric per split.
    Eval(Common),
    /// Parameter and MAC shares and totals for reference architectures.
    GainReport {
        #[command(flatten)]
        common: Common,
        /// Architecture family such as `vgg16` or `vit-t/16`; repeatable.
        /// All families when omitted.
        #[arg(long = "family")]
        families: Vec<String>,
        /// Count the attention products of ViT blocks as MACs.
        #[arg(long)]
        attention_macs: bool,
    },
    /// Check the collapse error bound on every block.
    BoundCheck(Common),
    /// Metric and size after each sequential collapse stage.
    Sensitivity(Common),
    /// Fixed versus learned slopes on a 1-D regression problem.
    DemoFig1(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LC_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Finetune(c) => commands::finetune(&c),
        Command::Collapse { common, sequential } => commands::collapse(&common, sequential),
        Command::Eval(c) => commands::eval(&c),
        Command::GainReport {
            common,
            families,
            attention_macs,
        } => commands::gain_report(&common, &families, attention_macs),
        Command::BoundCheck(c) => commands::bound_check(&c),
        Command::Sensitivity(c) => commands::sensitivity(&c),
        Command::DemoFig1(c) => commands::demo_fig1(&c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
