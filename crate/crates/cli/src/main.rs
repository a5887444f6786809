//! `lac` command-line tool.
//!
//! Exit codes: 0 success, 2 validation failure, 3 I/O failure, 64 usage error.

mod args;
mod commands;
mod run;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { run::EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads(cli.threads) {
        eprintln!("error: {e:#}");
        return run::exit_code(&e);
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::Pool(cmd) => commands::pool(cmd, seed),
        Command::TrainLac(a) => commands::train_lac(a, seed),
        Command::EvalLac(a) => commands::eval_lac(a, seed),
        Command::Boost(a) => commands::boost(a, seed),
        Command::Bag(a) => commands::bag(a, seed),
        Command::Stack(a) => commands::stack(a, seed),
        Command::Report(cmd) => commands::report(cmd, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            run::exit_code(&e)
        }
    }
}

fn configure_threads(threads: Option<usize>) -> anyhow::Result<()> {
    let n = match threads {
        Some(0) => return Err(run::usage("--threads must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}
