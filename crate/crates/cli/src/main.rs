use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use levy_bsde_cli::{run, RunOptions, Task};

/// Runs BSDE experiments described by a JSON configuration.
#[derive(Debug, Parser)]
#[command(name = "levy-bsde", version)]
struct Args {
    /// Configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving the artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// One of simulate, solve, verify, malliavin, hlimit, pdie.
    #[arg(long)]
    task: Task,
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let opts = RunOptions {
        config: args.config,
        out: args.out,
        seed: args.seed,
        task: args.task,
    };
    match run(&opts) {
        Ok(m) => {
            println!("{}: wrote {}", m.task, m.outputs.join(", "));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("levy-bsde: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
