use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use dixray::harness::{run, Command, RunConfig};

/// Layer-wise path-integrated explanations, metrics and sanity checks.
#[derive(Parser, Debug)]
#[command(name = "dixray", version)]
struct Cli {
    /// explain | evaluate | segment | sanity | ablate
    command: Command,
    /// TOML run configuration
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Serial, fixed-order evaluation
    #[arg(long)]
    deterministic: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dixray: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: &Cli) -> dixray::Result<()> {
    let mut config = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.deterministic |= cli.deterministic;
    dixray::set_deterministic(config.deterministic);
    let base = cli.config.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let summary = run(cli.command, &config, base)?;
    println!(
        "{}: wrote {} files to {}",
        cli.command,
        summary.files.len(),
        summary.output_dir.display()
    );
    if !summary.failures.is_empty() {
        println!("{} items failed; see failures.csv", summary.failures.len());
    }
    Ok(())
}
