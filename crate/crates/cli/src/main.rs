mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;
use poisson_trick::Error;

use args::{Cli, Command};
use commands::Outcome;

const EXIT_MISMATCH: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NONCONVERGENCE: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error[validation]: --threads must be at least 1");
        return ExitCode::from(EXIT_VALIDATION);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error[internal]: {e}");
        return ExitCode::FAILURE;
    }

    let result = match &cli.command {
        Command::Convert(a) => commands::convert(a),
        Command::FitFixed(a) => commands::fit_fixed_cmd(a),
        Command::FitGp(a) => commands::fit_gp_cmd(a),
        Command::Predict(a) => commands::predict_cmd(a),
        Command::Simulate(a) => commands::simulate_cmd(a),
        Command::Verify(a) => commands::verify_cmd(a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged(msg)) => {
            eprintln!("error[non-convergence]: {msg}; results written with converged = false");
            ExitCode::from(EXIT_NONCONVERGENCE)
        }
        Ok(Outcome::Mismatch(n)) => {
            eprintln!("error[mismatch]: {n} oracle check(s) failed");
            ExitCode::from(EXIT_MISMATCH)
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(match e {
                Error::NonConvergence { .. } => EXIT_NONCONVERGENCE,
                _ => EXIT_VALIDATION,
            })
        }
    }
}
