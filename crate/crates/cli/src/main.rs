use std::process::ExitCode;

use clap::Parser;
use keyfield_cli::{run, CliConfig, EXIT_CONFIG};
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let config = match CliConfig::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    ExitCode::from(run(&config, &mut std::io::stdout(), &mut std::io::stderr()))
}
