//! Command-line front end: train and resume experiments, evaluate and
//! inspect checkpoints, and run the verification suites.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 runtime failure (IO, data corruption, non-finite training, ...).

use clap::{Parser, Subcommand, ValueEnum};
use inner_imaging::config::ExperimentConfig;
use inner_imaging::error::Error;
use inner_imaging::experiment;
use inner_imaging::verify::{self, CheckRecord, FaultInjection};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ini",
    about = "Channel attention over folded signal maps: training and verification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a configuration file.
    Train {
        /// Configuration file (key = value lines); omit to use defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override single keys, e.g. --set epochs=10 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Continue training from a checkpoint.
    Resume {
        /// Checkpoint written by a previous run.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override single keys of the embedded configuration (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint on its configured test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the self-verification suites and report one line per check.
    Verify {
        /// Which suite to run.
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        /// Deliberately break one check (exercises the failure path).
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Show the channel groups each attention block would form.
    InspectGroups {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scope {
    Grad,
    Groups,
    Theory,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fault {
    WrongSignGrad,
}

fn load_config(path: Option<&PathBuf>, overrides: &[String]) -> Result<ExperimentConfig, Error> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::default(),
    };
    config.apply_overrides(overrides)?;
    Ok(config)
}

fn report(records: &[CheckRecord]) -> i32 {
    let mut failures = 0usize;
    for record in records {
        println!("{}", record.to_json_line());
        if !record.passed() {
            failures += 1;
        }
    }
    if failures == 0 {
        println!("verification: {} checks passed", records.len());
        0
    } else {
        println!("verification: {failures} of {} checks FAILED", records.len());
        1
    }
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Train { config, overrides } => {
            let config = load_config(config.as_ref(), &overrides)?;
            let outcome = experiment::run_train(&config, &mut |record| {
                println!("{}", record.to_json_line());
            })?;
            println!(
                "trained {} epochs | {} trainable parameters | checkpoint: {}",
                outcome.records.len(),
                outcome.param_count,
                outcome.checkpoint.display()
            );
            Ok(0)
        }
        Command::Resume { checkpoint, overrides } => {
            let outcome = experiment::run_resume(&checkpoint, &overrides, &mut |record| {
                println!("{}", record.to_json_line());
            })?;
            println!(
                "resumed for {} epochs | checkpoint: {}",
                outcome.records.len(),
                outcome.checkpoint.display()
            );
            Ok(0)
        }
        Command::Eval { checkpoint } => {
            let eval = experiment::run_eval(&checkpoint)?;
            println!(
                "{{\"split\":\"{}\",\"examples\":{},\"loss\":{:?},\"accuracy\":{:?}}}",
                eval.split, eval.examples, eval.metrics.loss, eval.metrics.accuracy
            );
            Ok(0)
        }
        Command::Verify { scope, inject_fault } => {
            let fault = inject_fault.map(|Fault::WrongSignGrad| FaultInjection::WrongSignGrad);
            let records = match scope {
                Scope::Grad => verify::grad_suite(fault)?,
                Scope::Groups => verify::groups_suite(&[(2, 16), (4, 8), (8, 4)])?,
                Scope::Theory => verify::theory_suite(0xDEED)?,
                Scope::All => verify::all_suites(fault)?,
            };
            Ok(report(&records))
        }
        Command::InspectGroups { config, overrides } => {
            let config = load_config(config.as_ref(), &overrides)?;
            print!("{}", experiment::inspect_groups(&config)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(if err.is_config() { 2 } else { 3 })
        }
    }
}
