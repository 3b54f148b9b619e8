//! Executing a resolved config: one training run per seed, one CSV per seed,
//! one manifest line per seed.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use mvpg_core::trainers::{Algorithm, IterationLog, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::{ResolvedRun, RunConfig};
use crate::error::CliError;

pub const CSV_SCHEMA_VERSION: u32 = 1;

/// Column order of every per-seed CSV.
pub const CSV_COLUMNS: [&str; 15] = [
    "seed",
    "iteration",
    "metric",
    "noise",
    "lambda",
    "mean_return",
    "risk_averse_rate",
    "variability",
    "grad_variance",
    "goal_rate",
    "mean_episode_length",
    "variability_grad_variance",
    "mean_grad_norm",
    "variability_grad_norm",
    "degenerate_updates",
];

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_COPY_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub seed: u64,
    pub iteration: usize,
    pub metric: String,
    pub noise: String,
    pub lambda: f64,
    pub mean_return: f64,
    pub risk_averse_rate: f64,
    pub variability: f64,
    pub grad_variance: f64,
    pub goal_rate: f64,
    pub mean_episode_length: f64,
    pub variability_grad_variance: f64,
    pub mean_grad_norm: f64,
    pub variability_grad_norm: f64,
    pub degenerate_updates: usize,
}

impl CsvRow {
    fn new(seed: u64, run: &ResolvedRun, log: &IterationLog) -> Self {
        Self {
            seed,
            iteration: log.iteration,
            metric: run.train.metric.to_string(),
            noise: run.noise.name().to_string(),
            lambda: run.train.lambda,
            mean_return: log.mean_return,
            risk_averse_rate: log.risk_averse_rate,
            variability: log.variability,
            grad_variance: log.grad_variance,
            goal_rate: log.goal_rate,
            mean_episode_length: log.mean_episode_length,
            variability_grad_variance: log.variability_grad_variance,
            mean_grad_norm: log.mean_grad_norm,
            variability_grad_norm: log.variability_grad_norm,
            degenerate_updates: log.degenerate_updates,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedStatus {
    Finished,
    Failed,
}

/// One line of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub experiment: String,
    pub seed: u64,
    pub status: SeedStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub csv: String,
    pub rows: usize,
    pub config_sha256: String,
    pub mvpg_version: String,
    pub csv_schema: u32,
    pub algorithm: String,
    pub metric: String,
    pub noise: String,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

pub fn seed_csv_name(seed: u64) -> String {
    format!("seed_{seed}.csv")
}

pub fn failed_csv_name(seed: u64) -> String {
    format!("seed_{seed}.failed.csv")
}

/// Output root: `$MVPG_OUTPUT_ROOT` when set, `runs` otherwise.
pub fn output_root() -> PathBuf {
    std::env::var_os("MVPG_OUTPUT_ROOT")
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub run_dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl RunReport {
    pub fn failed(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.status == SeedStatus::Failed)
            .count()
    }
}

/// Loads, resolves and runs the config at `path` under `root`.
pub fn run_config_file(path: &Path, root: &Path, jobs: usize) -> Result<RunReport, CliError> {
    let config = RunConfig::load(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolved = config.resolve(base)?;
    run_experiment(&config, &resolved, root, jobs)
}

pub fn run_experiment(
    config: &RunConfig,
    run: &ResolvedRun,
    root: &Path,
    jobs: usize,
) -> Result<RunReport, CliError> {
    let run_dir = root.join(&run.output_dir);
    fs::create_dir_all(&run_dir).map_err(|e| CliError::io(&run_dir, e))?;
    let copy = run_dir.join(CONFIG_COPY_FILE);
    fs::write(&copy, config.to_toml()).map_err(|e| CliError::io(&copy, e))?;
    info!(
        "{}: {} seed(s), {} iterations each, writing to {}",
        run.name,
        run.seeds.len(),
        run.train.iterations,
        run_dir.display()
    );

    let slots: Mutex<Vec<Option<ManifestEntry>>> = Mutex::new(vec![None; run.seeds.len()]);
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, run.seeds.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = run.seeds.get(k) else { break };
                let entry = run_seed(run, seed, &run_dir);
                slots.lock().expect("no worker panicked")[k] = Some(entry);
            });
        }
    });
    let entries: Vec<ManifestEntry> = slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|e| e.expect("every seed ran"))
        .collect();

    let manifest = run_dir.join(MANIFEST_FILE);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest)
        .map_err(|e| CliError::io(&manifest, e))?;
    for entry in &entries {
        let line = serde_json::to_string(entry).expect("manifest entries serialize");
        writeln!(file, "{line}").map_err(|e| CliError::io(&manifest, e))?;
    }

    let report = RunReport { run_dir, entries };
    if report.failed() == report.entries.len() {
        return Err(CliError::AllSeedsFailed(report.entries.len()));
    }
    Ok(report)
}

fn run_seed(run: &ResolvedRun, seed: u64, run_dir: &Path) -> ManifestEntry {
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let clock = Instant::now();
    let path = run_dir.join(seed_csv_name(seed));
    let (rows, error) = match train_seed(run, seed, &path) {
        Ok(rows) => (rows, None),
        Err((rows, msg)) => (rows, Some(msg)),
    };
    let csv = if let Some(msg) = &error {
        warn!("{} seed {seed} failed after {rows} row(s): {msg}", run.name);
        let failed = run_dir.join(failed_csv_name(seed));
        if let Err(e) = fs::rename(&path, &failed) {
            warn!("could not mark {} as failed: {e}", path.display());
        }
        failed_csv_name(seed)
    } else {
        info!("{} seed {seed} finished ({rows} rows)", run.name);
        seed_csv_name(seed)
    };
    ManifestEntry {
        experiment: run.name.clone(),
        seed,
        status: if error.is_some() {
            SeedStatus::Failed
        } else {
            SeedStatus::Finished
        },
        error,
        csv,
        rows,
        config_sha256: run.config_sha256.clone(),
        mvpg_version: env!("CARGO_PKG_VERSION").to_string(),
        csv_schema: CSV_SCHEMA_VERSION,
        algorithm: match run.algorithm {
            Algorithm::Reinforce => "reinforce",
            Algorithm::Ppo => "ppo",
        }
        .to_string(),
        metric: run.train.metric.to_string(),
        noise: run.noise.name().to_string(),
        started_unix_secs: started,
        wall_clock_secs: clock.elapsed().as_secs_f64(),
    }
}

/// Trains one seed, streaming rows to `path`. On failure returns the number of
/// rows written and the reason.
fn train_seed(run: &ResolvedRun, seed: u64, path: &Path) -> Result<usize, (usize, String)> {
    let file = File::create(path).map_err(|e| (0, format!("{}: {e}", path.display())))?;
    let mut writer = csv::Writer::from_writer(file);
    let mut rows = 0;
    let mut cfg = run.train.clone();
    cfg.seed = seed;
    let mut trainer =
        Trainer::new(run.algorithm, run.maze.clone(), cfg).map_err(|e| (0, e.to_string()))?;
    let last = run.train.iterations - 1;
    let mut outcome = Ok(());
    for it in 0..run.train.iterations {
        let log = match trainer.step() {
            Ok(out) => out.log,
            Err(e) => {
                outcome = Err(e.to_string());
                break;
            }
        };
        if !log.is_finite() {
            outcome = Err(format!("non-finite diagnostics at iteration {it}"));
            break;
        }
        if it % run.log_every == 0 || it == last {
            if let Err(e) = writer.serialize(CsvRow::new(seed, run, &log)) {
                outcome = Err(e.to_string());
                break;
            }
            rows += 1;
        }
    }
    if rows == 0 {
        if let Err(e) = writer.write_record(CSV_COLUMNS) {
            outcome = outcome.and(Err(e.to_string()));
        }
    }
    if let Err(e) = writer.flush() {
        outcome = outcome.and(Err(e.to_string()));
    }
    outcome.map(|()| rows).map_err(|msg| (rows, msg))
}
