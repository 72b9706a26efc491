//! `usseg` command-line entry point.

mod commands;
mod dataset;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("error: kind=config message=\"cannot configure thread pool: {e}\"");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<usseg::Error>().map_or("runtime", |u| u.kind());
            let message = format!("{e:#}").replace('\n', " ").replace('"', "'");
            eprintln!("error: kind={kind} message=\"{message}\"");
            ExitCode::from(1)
        }
    }
}
