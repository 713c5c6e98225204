use clap::{Args, Parser, Subcommand};
use lns::harness::{run_command, CliOptions, Command};
use std::path::PathBuf;
use std::process::ExitCode;

/// Train, fine-tune, evaluate, and deploy 1-bit CNNs with learned weight
/// binarization under noise-corrected supervision.
#[derive(Parser)]
#[command(name = "lns", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (`key = value` lines; defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint (.lns1) or exported model (.lnsb) to start from / act on
    #[arg(long)]
    from: Option<PathBuf>,
    /// Output directory (overrides `out.dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed (overrides `train.seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the sign/STE binary baseline (use --from to resume, which is
    /// also the plain fine-tuning arm of an ablation)
    Pretrain(CommonArgs),
    /// Fine-tune a pretrained baseline with mapping nets and the corrected loss
    Finetune(CommonArgs),
    /// Evaluate a checkpoint or exported model on the test split
    Eval(CommonArgs),
    /// Write the bit-packed inference model for a checkpoint
    Export(CommonArgs),
    /// Run the unbiasedness / gradient / kernel property suites
    Selftest(CommonArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.cmd {
        Cmd::Pretrain(a) => (Command::Pretrain, a),
        Cmd::Finetune(a) => (Command::Finetune, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Export(a) => (Command::Export, a),
        Cmd::Selftest(a) => (Command::Selftest, a),
    };
    let opts = CliOptions { config: args.config, from: args.from, out: args.out, seed: args.seed };
    match run_command(cmd, &opts) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
