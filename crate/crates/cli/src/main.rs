//! `adlab`: run experiments from a run file, run the property suites, or
//! describe an experiment.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod describe;
mod exit;
mod output;
mod run;

use config::RunFile;
use exit::Failure;
use output::RunManifest;
use run::RunOptions;

#[derive(Parser)]
#[command(name = "adlab", version, about = "Bound-checking experiments for random-feature adversarial density estimation")]
struct Cli {
    /// Worker threads; defaults to the run file's value, then to the logical cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments of a run file and write CSVs and a manifest.
    Run {
        /// TOML run file.
        #[arg(required_unless_present = "replay")]
        config: Option<PathBuf>,
        /// Override a leaf by dotted path, e.g. experiment.generalization_gap.seeds=20.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        overrides: Vec<String>,
        /// Output directory (takes precedence over ADLAB_OUTPUT_DIR and the run file).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Rerun the configuration recorded in a manifest and compare CSV hashes.
        #[arg(long, conflicts_with = "config")]
        replay: Option<PathBuf>,
        /// Print only the final verdict.
        #[arg(long)]
        quiet: bool,
    },
    /// Run the fixed-size property suites.
    Selftest {
        /// Run a single suite.
        #[arg(long)]
        suite: Option<String>,
    },
    /// Print an experiment's statement, schema, defaults and columns.
    Describe { experiment: String },
}

fn init_pool(workers: Option<usize>) -> Result<usize, Failure> {
    let threads = match workers {
        Some(0) => return Err(Failure::schema("workers: must be positive")),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::schema(format!("workers: {e}")))?;
    Ok(threads)
}

fn selftest(suite: Option<&str>) -> Result<i32, Failure> {
    let verdicts = match suite {
        Some(name) => vec![adlab::selftest::run_suite(name).ok_or_else(|| {
            Failure::schema(format!("unknown suite \"{name}\"; known: {}", adlab::selftest::SUITES.join(", ")))
        })?],
        None => adlab::selftest::run_all(),
    };
    for v in &verdicts {
        println!("{v}");
    }
    Ok(if verdicts.iter().all(|v| v.passed()) { exit::PASS } else { exit::BOUND })
}

fn dispatch(cli: Cli) -> Result<i32, Failure> {
    match cli.command {
        Command::Run {
            config,
            overrides,
            out,
            replay,
            quiet,
        } => {
            if let Some(path) = replay {
                let previous = RunManifest::load(&path)?;
                let workers = init_pool(cli.workers.or(Some(previous.workers)))?;
                let opts = RunOptions {
                    out: out.as_deref(),
                    workers,
                    quiet,
                };
                return run::replay(&previous, &opts);
            }
            let path = config.expect("clap requires a config without --replay");
            let file = RunFile::load(&path, &overrides)?;
            let workers = init_pool(cli.workers.or(file.run.workers))?;
            let opts = RunOptions {
                out: out.as_deref(),
                workers,
                quiet,
            };
            let outcome = run::execute(&file, &opts)?;
            let verdict = if outcome.manifest.passed { "PASS" } else { "FAIL" };
            println!("{verdict} manifest -> {}", outcome.manifest_path.display());
            debug_assert_eq!(outcome.reports.len(), outcome.manifest.experiments.len());
            Ok(outcome.code())
        }
        Command::Selftest { suite } => {
            init_pool(cli.workers)?;
            selftest(suite.as_deref())
        }
        Command::Describe { experiment } => {
            print!("{}", describe::describe(&experiment)?);
            Ok(exit::PASS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {f}");
            f.code
        }
    };
    ExitCode::from(code as u8)
}
