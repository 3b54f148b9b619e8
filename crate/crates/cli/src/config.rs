//! Run configuration files.
//!
//! A config is a TOML document with five tables:
//!
//! ```toml
//! [experiment]
//! name = "maze_gaussian_ginidev"
//! algorithm = "reinforce"        # or "ppo"
//! seeds = [0, 1, 2]
//! log_every = 1                  # optional, write every k-th iteration
//! output_dir = "gaussian/gd"     # optional, relative to the output root
//!
//! [env]                          # all keys optional
//! map_file = "maps/default.txt"  # relative to the config file; or `map = """..."""`
//! gamma = 0.999
//! max_steps = 100
//! step_reward = -1.0
//!
//! [noise]
//! kind = "gaussian"              # none | gaussian | pareto | uniform | handcraft | discrete
//! mean = -1.0
//! std = 20.0
//!
//! [metric]
//! kind = "gini_dev"
//! lambda = 1.0                   # optional, tuned maze value by default
//! alpha = 0.2                    # cvar_dev and iqr only
//!
//! [train]                        # all keys optional
//! iterations = 3000
//! batch_size = 50
//! policy_lr = 1e-3
//! value_lr = 1e-2                # defaults to 10 × policy_lr
//! ```
//!
//! Missing `[train]` keys take the maze defaults for the chosen metric and
//! noise.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mvpg_core::softmax_policy::OptimizerKind;
use mvpg_core::tabular_env::{parse_map, UniformComponent, DEFAULT_MAP};
use mvpg_core::trainers::{Algorithm, RiskRateMode};
use mvpg_core::{GridMaze, MetricKind, NoiseSpec, QuantileMethod, TrainConfig, UpperBound};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub env: EnvSection,
    pub noise: NoiseSection,
    pub metric: MetricSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    #[default]
    Reinforce,
    Ppo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    #[serde(default)]
    pub algorithm: AlgorithmName,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_every: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_reward: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    Gaussian,
    Pareto,
    Uniform,
    Handcraft,
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSection {
    pub weight: f64,
    pub low: f64,
    pub high: f64,
}

/// Noise parameters; keys that do not belong to `kind` are rejected and
/// missing ones take the standard maze values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub components: Option<Vec<ComponentSection>>,
    /// `[[value, probability], ...]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atoms: Option<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSection {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileName {
    LinearInterpolation,
    LowerOrderStat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskRateName {
    TrainingBatch,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantile: Option<QuantileName>,
    /// Fixed upper bound `b` for Gini and mean-median deviation; the batch
    /// maximum when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_updates: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppo_clip: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gae_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_minibatch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_rate: Option<RiskRateName>,
}

/// A config with every default filled in and every reference resolved.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub name: String,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub log_every: usize,
    pub output_dir: PathBuf,
    pub maze: GridMaze,
    pub noise: NoiseSpec,
    pub train: TrainConfig,
    pub config_sha256: String,
}

fn field_err(field: &str, msg: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::ConfigSyntax(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config tables serialize")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn sha256(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Validates the config and fills in defaults; relative map paths are
    /// taken relative to `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<ResolvedRun, CliError> {
        let exp = &self.experiment;
        if exp.name.trim().is_empty() {
            return Err(field_err("experiment.name", "must not be empty"));
        }
        if exp.seeds.is_empty() {
            return Err(field_err(
                "experiment.seeds",
                "at least one seed is required",
            ));
        }
        let distinct: BTreeSet<u64> = exp.seeds.iter().copied().collect();
        if distinct.len() != exp.seeds.len() {
            return Err(field_err("experiment.seeds", "seeds must be distinct"));
        }
        let log_every = exp.log_every.unwrap_or(1);
        if log_every == 0 {
            return Err(field_err("experiment.log_every", "must be at least 1"));
        }

        let noise = self.noise.to_spec()?;
        let metric = MetricKind::from_parts(&self.metric.kind, self.metric.alpha)
            .map_err(|e| field_err("metric", e.to_string()))?;
        if self.metric.alpha.is_some() && metric.alpha().is_none() {
            return Err(field_err(
                "metric.alpha",
                format!("`{}` takes no alpha", metric.name()),
            ));
        }
        let maze = self.env.to_maze(base_dir, noise.clone())?;
        let train = self
            .train
            .to_config(metric, &noise, self.metric.lambda, maze.gamma)?;

        Ok(ResolvedRun {
            name: exp.name.clone(),
            algorithm: match exp.algorithm {
                AlgorithmName::Reinforce => Algorithm::Reinforce,
                AlgorithmName::Ppo => Algorithm::Ppo,
            },
            seeds: exp.seeds.clone(),
            log_every,
            output_dir: exp
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from(&exp.name)),
            maze,
            noise,
            train,
            config_sha256: self.sha256(),
        })
    }
}

impl EnvSection {
    fn to_maze(&self, base_dir: &Path, noise: NoiseSpec) -> Result<GridMaze, CliError> {
        let text = match (&self.map, &self.map_file) {
            (Some(_), Some(_)) => {
                return Err(field_err(
                    "env.map",
                    "give either `map` or `map_file`, not both",
                ))
            }
            (Some(inline), None) => inline.clone(),
            (None, Some(file)) => {
                let path = base_dir.join(file);
                std::fs::read_to_string(&path).map_err(|e| {
                    field_err(
                        "env.map_file",
                        format!("cannot read map `{}`: {e}", path.display()),
                    )
                })?
            }
            (None, None) => DEFAULT_MAP.to_string(),
        };
        let mut maze = parse_map(&text)
            .map_err(|e| field_err("env.map", e.to_string()))?
            .with_noise(noise);
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return Err(field_err(
                    "env.gamma",
                    format!("must lie in (0, 1], got {g}"),
                ));
            }
            maze = maze.with_gamma(g);
        }
        if let Some(m) = self.max_steps {
            if m == 0 {
                return Err(field_err("env.max_steps", "must be at least 1"));
            }
            maze = maze.with_max_steps(m);
        }
        if let Some(r) = self.step_reward {
            if !r.is_finite() {
                return Err(field_err("env.step_reward", "must be finite"));
            }
            maze = maze.with_step_reward(r);
        }
        maze.validate()
            .map_err(|e| field_err("env", e.to_string()))?;
        Ok(maze)
    }
}

impl NoiseSection {
    fn to_spec(&self) -> Result<NoiseSpec, CliError> {
        let allowed: &[&str] = match self.kind {
            NoiseKind::None => &[],
            NoiseKind::Gaussian => &["mean", "std"],
            NoiseKind::Pareto => &["shape", "multiplier"],
            NoiseKind::Uniform => &["low", "high"],
            NoiseKind::Handcraft => &["components"],
            NoiseKind::Discrete => &["atoms"],
        };
        let present = [
            ("mean", self.mean.is_some()),
            ("std", self.std.is_some()),
            ("shape", self.shape.is_some()),
            ("multiplier", self.multiplier.is_some()),
            ("low", self.low.is_some()),
            ("high", self.high.is_some()),
            ("components", self.components.is_some()),
            ("atoms", self.atoms.is_some()),
        ];
        if let Some((key, _)) = present.iter().find(|(k, set)| *set && !allowed.contains(k)) {
            return Err(field_err(
                &format!("noise.{key}"),
                format!("not a parameter of {:?} noise", self.kind).to_lowercase(),
            ));
        }
        let spec = match self.kind {
            NoiseKind::None => NoiseSpec::None,
            NoiseKind::Gaussian => match NoiseSpec::gaussian() {
                NoiseSpec::Gaussian { mean, std } => NoiseSpec::Gaussian {
                    mean: self.mean.unwrap_or(mean),
                    std: self.std.unwrap_or(std),
                },
                _ => unreachable!(),
            },
            NoiseKind::Pareto => match NoiseSpec::pareto() {
                NoiseSpec::Pareto { shape, multiplier } => NoiseSpec::Pareto {
                    shape: self.shape.unwrap_or(shape),
                    multiplier: self.multiplier.unwrap_or(multiplier),
                },
                _ => unreachable!(),
            },
            NoiseKind::Uniform => match NoiseSpec::uniform() {
                NoiseSpec::Uniform { low, high } => NoiseSpec::Uniform {
                    low: self.low.unwrap_or(low),
                    high: self.high.unwrap_or(high),
                },
                _ => unreachable!(),
            },
            NoiseKind::Handcraft => match &self.components {
                Some(c) => NoiseSpec::HandcraftMixture {
                    components: c
                        .iter()
                        .map(|c| UniformComponent {
                            weight: c.weight,
                            low: c.low,
                            high: c.high,
                        })
                        .collect(),
                },
                None => NoiseSpec::handcraft(),
            },
            NoiseKind::Discrete => NoiseSpec::Discrete {
                atoms: self
                    .atoms
                    .clone()
                    .ok_or_else(|| field_err("noise.atoms", "discrete noise needs atoms"))?,
            },
        };
        spec.validate()
            .map_err(|e| field_err("noise", e.to_string()))?;
        Ok(spec)
    }
}

impl TrainSection {
    fn to_config(
        &self,
        metric: MetricKind,
        noise: &NoiseSpec,
        lambda: Option<f64>,
        gamma: f64,
    ) -> Result<TrainConfig, CliError> {
        let mut cfg = TrainConfig::maze(metric, noise);
        cfg.gamma = gamma;
        if let Some(l) = lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(field_err(
                    "metric.lambda",
                    format!("must be a finite value ≥ 0, got {l}"),
                ));
            }
            cfg.lambda = l;
        }
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(field_err(
                    field,
                    format!("must be positive and finite, got {v}"),
                ))
            }
        };
        let at_least_one = |field: &str, v: usize| {
            if v >= 1 {
                Ok(v)
            } else {
                Err(field_err(field, "must be at least 1"))
            }
        };
        if let Some(v) = self.iterations {
            cfg.iterations = at_least_one("train.iterations", v)?;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = at_least_one("train.batch_size", v)?;
        }
        if let Some(v) = self.policy_lr {
            cfg.policy_lr = positive("train.policy_lr", v)?;
            cfg.value_lr = 10.0 * cfg.policy_lr;
        }
        if let Some(v) = self.value_lr {
            cfg.value_lr = positive("train.value_lr", v)?;
        }
        if let Some(o) = self.optimizer {
            cfg.optimizer = match o {
                OptimizerName::Sgd => OptimizerKind::Sgd,
                OptimizerName::Adam => OptimizerKind::adam(),
            };
        }
        if let Some(q) = self.quantile {
            cfg.qmethod = match q {
                QuantileName::LinearInterpolation => QuantileMethod::LinearInterpolation,
                QuantileName::LowerOrderStat => QuantileMethod::LowerOrderStat,
            };
        }
        if let Some(b) = self.upper_bound {
            if !b.is_finite() {
                return Err(field_err("train.upper_bound", "must be finite"));
            }
            cfg.upper_bound = UpperBound::Fixed(b);
        }
        if let Some(v) = self.inner_updates {
            cfg.inner_updates = at_least_one("train.inner_updates", v)?;
        }
        if let Some(v) = self.is_clip {
            cfg.is_clip = v;
        }
        if let Some(v) = self.ppo_clip {
            cfg.ppo_clip = v;
        }
        if let Some(v) = self.gae_lambda {
            cfg.gae_lambda = v;
        }
        if let Some(v) = self.value_minibatch {
            cfg.value_minibatch = at_least_one("train.value_minibatch", v)?;
        }
        if let Some(r) = self.risk_rate {
            cfg.risk_rate = match r {
                RiskRateName::TrainingBatch => RiskRateMode::TrainingBatch,
                RiskRateName::Greedy => RiskRateMode::Greedy,
            };
        }
        cfg.validate()
            .map_err(|e| field_err("train", e.to_string()))?;
        Ok(cfg)
    }
}
