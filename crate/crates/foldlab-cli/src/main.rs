use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use foldlab::experiments::{self, RunConfig};
use foldlab::Error;

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_COMPUTE: u8 = 3;

#[derive(Parser)]
#[command(name = "foldlab", version, about = "Experiments on generalized Radon transforms with fold singularities")]
struct Cli {
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        #[arg(long, short)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides the master seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long, action = ArgAction::Count)]
        verbose: u8,
    },
    /// List the built-in models.
    ListModels,
    /// Show the config keys an experiment reads.
    Describe { experiment: String },
}

fn report_config_error(err: &Error) {
    eprintln!("error: {err}");
    if let Error::Config { suggestions, .. } = err {
        if !suggestions.is_empty() {
            eprintln!("did you mean: {}", suggestions.join(", "));
        }
    }
}

fn run(config: PathBuf, output_dir: Option<PathBuf>, seed: Option<u64>, verbose: u8) -> ExitCode {
    let text = match std::fs::read_to_string(&config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", config.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut cfg = match RunConfig::from_json(&text) {
        Ok(c) => c,
        Err(e) => {
            report_config_error(&e);
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if verbose > 0 {
        eprintln!("running {} on {} (seed {})", cfg.experiment, cfg.model_name, cfg.seed);
        if verbose > 1 {
            eprintln!("{cfg:?}");
        }
    }
    let outcome = match experiments::run(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_COMPUTE);
        }
    };
    for c in &outcome.checks {
        println!("{c}");
    }
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
    let stem = format!("{}-{}-{stamp}", outcome.experiment, outcome.model);
    match outcome.write(&cfg.output_dir, &stem) {
        Ok((csv, json)) => {
            if verbose > 0 {
                eprintln!("wrote {} and {}", csv.display(), json.display());
            }
        }
        Err(e) => {
            eprintln!("error: writing reports to {}: {e}", cfg.output_dir.display());
            return ExitCode::from(EXIT_COMPUTE);
        }
    }
    let pass = outcome.pass();
    println!("{} {} {}", if pass { "PASS" } else { "FAIL" }, outcome.experiment, outcome.model);
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAIL)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    foldlab::par::set_workers(cli.workers);
    match cli.command {
        Command::Run { config, output_dir, seed, verbose } => run(config, output_dir, seed, verbose),
        Command::ListModels => {
            for (name, note) in experiments::list_models() {
                println!("{name:<18} {note}");
            }
            ExitCode::SUCCESS
        }
        Command::Describe { experiment } => match experiments::describe(&experiment) {
            Ok(text) => {
                println!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                report_config_error(&e);
                ExitCode::from(EXIT_CONFIG)
            }
        },
    }
}
