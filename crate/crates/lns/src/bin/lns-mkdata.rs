//! Generate the synthetic 10-class IDX corpus used by the desk-scale
//! experiments, so the main tool can run without external datasets.

use clap::Parser;
use lns::synth::{write_idx_files, SynthSpec};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lns-mkdata", version, about)]
struct Cli {
    /// Output directory for the IDX files
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Training images
    #[arg(long, default_value_t = 6000)]
    train: usize,
    /// Test images
    #[arg(long, default_value_t = 1000)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixel noise amplitude in [0,1] units
    #[arg(long, default_value_t = SynthSpec::default().noise)]
    noise: f32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = std::fs::create_dir_all(&cli.out) {
        eprintln!("error: cannot create {}: {e}", cli.out.display());
        return ExitCode::from(2);
    }
    let train_spec = SynthSpec { n: cli.train, noise: cli.noise, ..Default::default() };
    let test_spec = SynthSpec { n: cli.test, noise: cli.noise, ..Default::default() };
    let result = write_idx_files(&cli.out, "train", &train_spec, cli.seed)
        .and_then(|_| write_idx_files(&cli.out, "test", &test_spec, cli.seed.wrapping_add(1)));
    match result {
        Ok(_) => {
            println!("wrote train/test IDX files to {}", cli.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
