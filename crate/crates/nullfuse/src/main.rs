use std::process::ExitCode;

use clap::Parser;
use nullfuse::cli::{run, Cli, Status, LOG_ENV};
use nullfuse::CheckpointError;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::ChecksFailed) => ExitCode::from(1),
        Err(err) => {
            match err.chain().find_map(|e| e.downcast_ref::<CheckpointError>()) {
                Some(ce) => eprintln!("error [{}]: {err:#}", ce.stage()),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::from(2)
        }
    }
}
