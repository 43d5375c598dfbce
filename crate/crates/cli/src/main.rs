mod args;
mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};
use commands::GlobalOpts;
use config::RunConfig;
use error::CliError;

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("MODFUS_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("MODFUS_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let g = GlobalOpts {
        seed: cli.seed,
        env_seed: env_seed()?,
        output_dir: cli.output_dir,
        run_dir: cli.run_dir,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(cfg, &g, a),
        Command::TrainDiffusion(a) => commands::train_diffusion(cfg, &g, a),
        Command::Probe(a) => commands::probe(cfg, &g, a),
        Command::Ablate(a) => commands::ablate(cfg, &g, a),
        Command::EvalShift(a) => commands::eval_shift(cfg, &g, a),
        Command::EvalChannel(a) => commands::eval_channel(cfg, &g, a),
        Command::EvalLength(a) => commands::eval_length(cfg, &g, a),
        Command::Generate(a) => commands::generate(cfg, &g, a),
        Command::InspectCheckpoint(a) => commands::inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
