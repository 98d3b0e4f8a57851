use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use taca::config::ExperimentConfig;
use taca::pipeline::{run_stage, RunOptions, Stage};
use taca::Error;

/// Runs one pipeline stage.
#[derive(Parser)]
#[command(name = "taca", version)]
struct Args {
    /// gen-data | train-speech-style | train-text-style | pretrain-lm |
    /// finetune-context | eval | synth
    stage: String,
    #[arg(long)]
    config: PathBuf,
    /// Defaults to runs/<name>.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs of the stage.
    #[arg(long)]
    force: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Schema { .. } => 2,
        Error::Dependency { .. } => 3,
        _ => 4,
    }
}

fn run(args: Args) -> taca::Result<()> {
    let stage: Stage = args.stage.parse()?;
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let opts = RunOptions {
        run_dir: args.run_dir,
        force: args.force,
    };
    for p in run_stage(&cfg, stage, &opts)?.artifacts {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
