use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::warn;
use mvpg_cli::{output_root, run_config_file, summarize_dir, CliError};
use mvpg_core::verify::{all_passed, run_suite, Suite, SuiteBudget};

#[derive(Debug, Parser)]
#[command(
    name = "mvpg",
    version,
    about = "Mean-variability policy gradient experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every seed of a run config and write per-seed CSVs.
    Run {
        config: PathBuf,
        /// Seeds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run a verification suite: estimators, coherence, oracle or all.
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Batches per unbiasedness check.
        #[arg(long)]
        reps: Option<usize>,
        /// Batches per bias-rate point.
        #[arg(long)]
        bias_reps: Option<usize>,
        /// Random cases per property check.
        #[arg(long)]
        trials: Option<usize>,
        /// Where to write the JSON results (default: <output root>/verify_<suite>.json).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Average the last 100 logged iterations of every finished run below a directory.
    Summarize { dir: PathBuf },
}

fn verify(
    name: &str,
    seed: u64,
    reps: Option<usize>,
    bias_reps: Option<usize>,
    trials: Option<usize>,
    json: Option<PathBuf>,
) -> Result<bool, CliError> {
    let suite = Suite::from_name(name).ok_or_else(|| CliError::UnknownSuite(name.to_string()))?;
    let defaults = SuiteBudget::default();
    let budget = SuiteBudget {
        unbiased_reps: reps.unwrap_or(defaults.unbiased_reps),
        bias_rate_reps: bias_reps.unwrap_or(defaults.bias_rate_reps),
        property_trials: trials.unwrap_or(defaults.property_trials),
    };
    let results = run_suite(suite, budget, seed)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!(
            "{verdict}  {:<11} {:<width$}  {}",
            r.suite, r.name, r.detail
        );
    }
    let passed = all_passed(&results);
    println!(
        "{} of {} checks passed",
        results.iter().filter(|r| r.passed).count(),
        results.len()
    );
    let path = json.unwrap_or_else(|| output_root().join(format!("verify_{name}.json")));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&results).expect("check results serialize");
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(passed)
}

fn execute(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.command {
        Command::Run { config, jobs } => {
            let report = run_config_file(&config, &output_root(), jobs)?;
            let failed = report.failed();
            if failed > 0 {
                warn!("{failed} of {} seeds failed", report.entries.len());
            }
            println!("{}", report.run_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            suite,
            seed,
            reps,
            bias_reps,
            trials,
            json,
        } => Ok(if verify(&suite, seed, reps, bias_reps, trials, json)? {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        }),
        Command::Summarize { dir } => {
            let summary = summarize_dir(&dir)?;
            if !summary.failed.is_empty() {
                eprintln!(
                    "warning: skipped {} failed seed file(s)",
                    summary.failed.len()
                );
                for path in &summary.failed {
                    eprintln!("  {}", path.display());
                }
            }
            print!("{}", summary.to_csv_text());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
