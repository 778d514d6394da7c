use std::path::PathBuf;
use std::process::ExitCode;

use blockspectra::cli::{load_config, run, CliError, Command};
use clap::Parser;

/// Limiting spectra of correlated block Gaussian matrices.
#[derive(Debug, Parser)]
#[command(name = "blockspectra", version)]
struct Args {
    /// JSON problem config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum)]
    command: Command,
    /// Overrides the Monte Carlo seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 picks automatically.
    #[arg(long, env = "BLOCKSPECTRA_THREADS", default_value_t = 0)]
    threads: usize,
}

fn fail(err: &CliError) -> ExitCode {
    println!("{}", err.to_json());
    log::error!("{err}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.to_string())),
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build_global() {
        return fail(&CliError::Usage(format!("cannot start {} threads: {e}", args.threads)));
    }
    let mut config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let (Some(seed), Some(mc)) = (args.seed, config.mc.as_mut()) {
        mc.seed = seed;
    }
    match run(args.command, &config, &args.out) {
        Ok(outcome) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome.summary).expect("json serializes")
            );
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => fail(&e),
    }
}
