//! Mean-variability training loops on the grid maze: REINFORCE with a value
//! baseline, and PPO-clip with clipped per-trajectory importance ratios.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad_estimators::{
    combined_objective_gradient, grad_mean_reinforce, EstimatorConfig, GradientBatch,
    GradientEstimate, StepScores, UpperBound,
};
use crate::risk_metrics::{empirical_metric, MetricKind, QuantileMethod, SampleBatch};
use crate::softmax_policy::{
    apply_gradient, returns_and_advantages, Greedy, OptimizerKind, OptimizerState, SoftmaxPolicy,
    StepTargets, ValueTable,
};
use crate::tabular_env::{
    goal_rate, risk_averse_rate, rollout_episodes, GridMaze, NoiseSpec, Trajectory,
};

/// How the logged risk-averse rate is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RiskRateMode {
    /// Fraction of the training batch.
    #[default]
    TrainingBatch,
    /// One rollout of the greedy policy after the update.
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub metric: MetricKind,
    pub lambda: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// PPO inner updates per batch.
    pub inner_updates: usize,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub gamma: f64,
    /// Upper clip of the per-trajectory IS ratios.
    pub is_clip: f64,
    pub ppo_clip: f64,
    pub gae_lambda: f64,
    /// Steps per value-function mini-batch in PPO.
    pub value_minibatch: usize,
    pub qmethod: QuantileMethod,
    pub upper_bound: UpperBound<f64>,
    pub optimizer: OptimizerKind,
    pub risk_rate: RiskRateMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            metric: MetricKind::GiniDev,
            lambda: 0.0,
            iterations: 3000,
            batch_size: 50,
            inner_updates: 5,
            policy_lr: 1e-3,
            value_lr: 1e-2,
            gamma: 0.999,
            is_clip: 5.0,
            ppo_clip: 0.2,
            gae_lambda: 0.95,
            value_minibatch: 64,
            qmethod: QuantileMethod::LinearInterpolation,
            upper_bound: UpperBound::BatchMax,
            optimizer: OptimizerKind::Sgd,
            risk_rate: RiskRateMode::TrainingBatch,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Maze defaults for `metric` under `noise`: tuned policy learning rate
    /// and λ, value learning rate ten times the policy rate.
    pub fn maze(metric: MetricKind, noise: &NoiseSpec) -> Self {
        let (policy_lr, lambda) = maze_hyperparameters(metric, noise).unwrap_or((1e-3, 0.0));
        Self {
            metric,
            lambda,
            policy_lr,
            value_lr: 10.0 * policy_lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.metric.validate()?;
        let checks = [
            (
                self.lambda >= 0.0 && self.lambda.is_finite(),
                "lambda must be finite and ≥ 0",
            ),
            (self.iterations >= 1, "iterations must be ≥ 1"),
            (self.batch_size >= 1, "batch_size must be ≥ 1"),
            (self.inner_updates >= 1, "inner_updates must be ≥ 1"),
            (
                self.policy_lr > 0.0 && self.policy_lr.is_finite(),
                "policy_lr must be positive",
            ),
            (
                self.value_lr > 0.0 && self.value_lr.is_finite(),
                "value_lr must be positive",
            ),
            (
                self.gamma > 0.0 && self.gamma <= 1.0,
                "gamma must lie in (0, 1]",
            ),
            (self.is_clip >= 1.0, "is_clip must be ≥ 1"),
            (
                self.ppo_clip > 0.0 && self.ppo_clip < 1.0,
                "ppo_clip must lie in (0, 1)",
            ),
            (
                self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0,
                "gae_lambda must lie in [0, 1]",
            ),
            (self.value_minibatch >= 1, "value_minibatch must be ≥ 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::invalid(msg));
            }
        }
        if self.lambda > 0.0 && self.metric.needs_double_sampling() && self.batch_size < 4 {
            return Err(Error::invalid(format!(
                "{} needs batch_size ≥ 4 for double sampling",
                self.metric
            )));
        }
        Ok(())
    }

    fn estimator(&self) -> EstimatorConfig<f64> {
        EstimatorConfig {
            qmethod: self.qmethod,
            upper_bound: self.upper_bound,
        }
    }
}

/// Tuned `(policy learning rate, λ)` for the maze, per metric and noise.
pub fn maze_hyperparameters(metric: MetricKind, noise: &NoiseSpec) -> Option<(f64, f64)> {
    let column = match noise {
        NoiseSpec::Gaussian { .. } => 0,
        NoiseSpec::Pareto { .. } => 1,
        NoiseSpec::Uniform { .. } => 2,
        NoiseSpec::HandcraftMixture { .. } => 3,
        _ => return None,
    };
    let row: [(f64, f64); 4] = match metric {
        MetricKind::CVaRDev { .. } => [(1e-3, 0.6), (1e-3, 0.6), (1e-3, 0.7), (1e-3, 0.6)],
        MetricKind::GiniDev => [(1e-3, 1.0), (1e-3, 1.3), (1e-4, 1.4), (1e-3, 1.3)],
        MetricKind::Iqr { .. } => [(1e-3, 0.3), (1e-3, 0.3), (7e-4, 0.3), (5e-4, 0.3)],
        MetricKind::MeanDev => [(1e-3, 0.8), (1e-3, 0.9), (1e-3, 0.9), (1e-3, 0.8)],
        MetricKind::MeanMedianDev => [(1e-3, 0.7), (1e-3, 0.8), (1e-3, 0.8), (7e-4, 0.8)],
        MetricKind::Variance => [(1e-4, 0.1); 4],
        MetricKind::Std => [(1e-3, 0.7), (7e-4, 1.0), (7e-4, 1.0), (1e-3, 1.0)],
        MetricKind::SemiVar => [(5e-4, 0.1); 4],
        MetricKind::SemiStd => [(1e-3, 1.2), (1e-3, 1.2), (1e-3, 1.3), (1e-3, 1.2)],
    };
    Some(row[column])
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub mean_return: f64,
    /// Empirical metric of the batch returns.
    pub variability: f64,
    pub risk_averse_rate: f64,
    pub goal_rate: f64,
    pub mean_episode_length: f64,
    /// Spread of the combined gradient across the batch's trajectories.
    pub grad_variance: f64,
    pub variability_grad_variance: f64,
    pub mean_grad_norm: f64,
    pub variability_grad_norm: f64,
    /// Updates in this iteration whose variability term was skipped.
    pub degenerate_updates: usize,
    pub elapsed_secs: f64,
}

impl IterationLog {
    /// Copy with the wall-clock field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            elapsed_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.mean_return,
            self.variability,
            self.risk_averse_rate,
            self.goal_rate,
            self.mean_episode_length,
            self.grad_variance,
            self.variability_grad_variance,
            self.mean_grad_norm,
            self.variability_grad_norm,
            self.elapsed_secs,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One iteration's log and the policy gradient that was applied (the last
/// one for PPO).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub log: IterationLog,
    pub gradient: Vec<f64>,
}

/// Independent random streams of one run, all derived from the seed.
#[derive(Debug, Clone)]
struct Streams {
    rollout: ChaCha8Rng,
    split: ChaCha8Rng,
    value: ChaCha8Rng,
    eval: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k);
            rng
        };
        Self {
            rollout: stream(0),
            split: stream(1),
            value: stream(2),
            eval: stream(3),
        }
    }
}

/// Which mean-gradient estimator drives the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Reinforce,
    Ppo,
}

/// Owns the parameters of one run and advances it one iteration at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    algorithm: Algorithm,
    maze: GridMaze,
    policy: SoftmaxPolicy<f64>,
    value: ValueTable<f64>,
    config: TrainConfig,
    policy_opt: OptimizerState<f64>,
    value_opt: OptimizerState<f64>,
    streams: Streams,
    iteration: usize,
}

impl Trainer {
    pub fn new(algorithm: Algorithm, maze: GridMaze, config: TrainConfig) -> Result<Self> {
        let n = maze.n_states();
        let policy = SoftmaxPolicy::new(n, maze.n_actions());
        Self::with_parameters(algorithm, maze, policy, ValueTable::new(n), config)
    }

    pub fn with_parameters(
        algorithm: Algorithm,
        maze: GridMaze,
        policy: SoftmaxPolicy<f64>,
        value: ValueTable<f64>,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let maze = maze.with_gamma(config.gamma);
        maze.validate()?;
        if policy.n_states() != maze.n_states()
            || policy.param_dim() != maze.n_states() * maze.n_actions()
            || value.values().len() != maze.n_states()
        {
            return Err(Error::invalid(
                "policy or value table does not match the maze",
            ));
        }
        let policy_opt =
            OptimizerState::new(config.optimizer, config.policy_lr, policy.param_dim())?;
        let value_opt = OptimizerState::new(config.optimizer, config.value_lr, maze.n_states())?;
        Ok(Self {
            algorithm,
            streams: Streams::new(config.seed),
            maze,
            policy,
            value,
            config,
            policy_opt,
            value_opt,
            iteration: 0,
        })
    }

    pub fn policy(&self) -> &SoftmaxPolicy<f64> {
        &self.policy
    }

    pub fn value(&self) -> &ValueTable<f64> {
        &self.value
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn maze(&self) -> &GridMaze {
        &self.maze
    }

    pub fn step(&mut self) -> Result<IterationOutcome> {
        let start = Instant::now();
        let trajs = rollout_episodes(
            &self.maze,
            &self.policy,
            self.config.batch_size,
            &mut self.streams.rollout,
        );
        let (stats, gradient) = match self.algorithm {
            Algorithm::Reinforce => self.reinforce_update(&trajs)?,
            Algorithm::Ppo => self.ppo_update(&trajs)?,
        };
        let log = self.finish_log(&trajs, stats, start)?;
        self.iteration += 1;
        Ok(IterationOutcome { log, gradient })
    }

    /// Runs the remaining iterations, handing every log to `sink`.
    pub fn run(&mut self, mut sink: impl FnMut(&IterationLog)) -> Result<Vec<IterationLog>> {
        let mut logs = Vec::with_capacity(self.config.iterations);
        while self.iteration < self.config.iterations {
            let out = self.step()?;
            sink(&out.log);
            logs.push(out.log);
        }
        Ok(logs)
    }

    fn reinforce_update(&mut self, trajs: &[Trajectory]) -> Result<(UpdateStats, Vec<f64>)> {
        let batch =
            gradient_batch(&self.policy, trajs)?.with_steps(step_scores(&self.policy, trajs))?;
        let baselines: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| {
                t.states
                    .iter()
                    .map(|&s| self.value.state_value(s))
                    .collect()
            })
            .collect();
        let mean = grad_mean_reinforce(&batch, &baselines, self.config.gamma)?;
        let combined = combined_objective_gradient(
            self.config.metric,
            &batch,
            mean,
            self.config.lambda,
            &self.config.estimator(),
            &mut self.streams.split,
        )?;
        apply_gradient(
            self.policy.theta_mut(),
            &mut self.policy_opt,
            &combined.estimate.grad,
            true,
        )?;
        for traj in trajs {
            let targets = &traj.rewards_to_go;
            let g = self.value.squared_error_grad(&traj.states, targets);
            apply_gradient(self.value.values_mut(), &mut self.value_opt, &g, false)?;
        }
        let stats = UpdateStats::from_combined(&combined);
        Ok((stats, combined.estimate.grad))
    }

    fn ppo_update(&mut self, trajs: &[Trajectory]) -> Result<(UpdateStats, Vec<f64>)> {
        let old = self.policy.clone();
        let targets = returns_and_advantages(
            trajs,
            &self.value,
            self.config.gamma,
            Some(self.config.gae_lambda),
        );
        let steps = ppo_steps(&old, trajs, &targets);
        let value_steps: Vec<(usize, f64)> = trajs
            .iter()
            .zip(&targets)
            .flat_map(|(t, tg)| {
                t.states
                    .iter()
                    .copied()
                    .zip(tg.rewards_to_go.iter().copied())
            })
            .collect();
        let mut first: Option<UpdateStats> = None;
        let mut degenerate = 0;
        let mut gradient = Vec::new();
        for _ in 0..self.config.inner_updates {
            let ppo = ppo_clip_gradient(&steps, &self.policy, self.config.ppo_clip, trajs.len())?;
            let ratios = is_ratios_clipped(&old, &self.policy, trajs, self.config.is_clip)?;
            let batch = gradient_batch(&self.policy, trajs)?.with_is_ratios(ratios)?;
            let combined = combined_objective_gradient(
                self.config.metric,
                &batch,
                ppo,
                self.config.lambda,
                &self.config.estimator(),
                &mut self.streams.split,
            )?;
            degenerate += usize::from(combined.degenerate);
            apply_gradient(
                self.policy.theta_mut(),
                &mut self.policy_opt,
                &combined.estimate.grad,
                true,
            )?;
            self.fit_value_minibatches(&value_steps)?;
            first.get_or_insert_with(|| UpdateStats::from_combined(&combined));
            gradient = combined.estimate.grad;
        }
        let mut stats = first.expect("at least one inner update");
        stats.degenerate_updates = degenerate;
        Ok((stats, gradient))
    }

    fn fit_value_minibatches(&mut self, steps: &[(usize, f64)]) -> Result<()> {
        let mut order: Vec<usize> = (0..steps.len()).collect();
        order.shuffle(&mut self.streams.value);
        for chunk in order.chunks(self.config.value_minibatch) {
            let states: Vec<usize> = chunk.iter().map(|&k| steps[k].0).collect();
            let targets: Vec<f64> = chunk.iter().map(|&k| steps[k].1).collect();
            let g = self.value.squared_error_grad(&states, &targets);
            apply_gradient(self.value.values_mut(), &mut self.value_opt, &g, false)?;
        }
        Ok(())
    }

    fn finish_log(
        &mut self,
        trajs: &[Trajectory],
        stats: UpdateStats,
        start: Instant,
    ) -> Result<IterationLog> {
        let returns: Vec<f64> = trajs.iter().map(|t| t.total_return).collect();
        let sample = SampleBatch::new(returns)?;
        let variability = if sample.len() >= 2 {
            empirical_metric(self.config.metric, &sample, self.config.qmethod)?
        } else {
            0.0
        };
        let risk_averse = match self.config.risk_rate {
            RiskRateMode::TrainingBatch => risk_averse_rate(trajs),
            RiskRateMode::Greedy => {
                let t = self
                    .maze
                    .rollout_episode(&Greedy(&self.policy), &mut self.streams.eval);
                if t.is_risk_averse() {
                    1.0
                } else {
                    0.0
                }
            }
        };
        Ok(IterationLog {
            iteration: self.iteration,
            mean_return: sample.mean(),
            variability,
            risk_averse_rate: risk_averse,
            goal_rate: goal_rate(trajs),
            mean_episode_length: trajs.iter().map(Trajectory::len).sum::<usize>() as f64
                / trajs.len() as f64,
            grad_variance: stats.grad_variance,
            variability_grad_variance: stats.variability_grad_variance,
            mean_grad_norm: stats.mean_grad_norm,
            variability_grad_norm: stats.variability_grad_norm,
            degenerate_updates: stats.degenerate_updates,
            elapsed_secs: start.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct UpdateStats {
    grad_variance: f64,
    variability_grad_variance: f64,
    mean_grad_norm: f64,
    variability_grad_norm: f64,
    degenerate_updates: usize,
}

impl UpdateStats {
    fn from_combined(c: &crate::grad_estimators::CombinedGradient<f64>) -> Self {
        Self {
            grad_variance: c.estimate.gradient_variance(),
            variability_grad_variance: c.variability_grad_variance,
            mean_grad_norm: c.mean_norm,
            variability_grad_norm: c.variability_norm,
            degenerate_updates: usize::from(c.degenerate),
        }
    }
}

/// Returns and trajectory scores under `policy`.
pub fn gradient_batch(
    policy: &SoftmaxPolicy<f64>,
    trajs: &[Trajectory],
) -> Result<GradientBatch<f64>> {
    let dim = policy.param_dim();
    let mut scores = Vec::with_capacity(trajs.len() * dim);
    for t in trajs {
        scores.extend(policy.trajectory_score(t));
    }
    GradientBatch::new(trajs.iter().map(|t| t.total_return).collect(), scores, dim)
}

/// Sparse per-step scores and rewards-to-go for the REINFORCE mean gradient.
pub fn step_scores(policy: &SoftmaxPolicy<f64>, trajs: &[Trajectory]) -> Vec<StepScores<f64>> {
    let k = policy.n_actions();
    trajs
        .iter()
        .map(|t| StepScores {
            scores: t
                .states
                .iter()
                .zip(&t.actions)
                .map(|(&s, &a)| {
                    policy
                        .action_probs(s)
                        .into_iter()
                        .enumerate()
                        .map(|(b, p)| (s * k + b, if b == a { 1.0 - p } else { -p }))
                        .collect()
                })
                .collect(),
            rewards_to_go: t.rewards_to_go.clone(),
        })
        .collect()
}

/// `exp(min(Σ_t [log π_new − log π_old], ln ζ))` per trajectory.
pub fn is_ratios_clipped(
    old: &SoftmaxPolicy<f64>,
    new: &SoftmaxPolicy<f64>,
    trajs: &[Trajectory],
    zeta: f64,
) -> Result<Vec<f64>> {
    if !(zeta >= 1.0) {
        return Err(Error::invalid(format!("IS clip ζ must be ≥ 1, got {zeta}")));
    }
    let cap = zeta.ln();
    Ok(trajs
        .iter()
        .map(|t| {
            let log_ratio: f64 = t
                .states
                .iter()
                .zip(&t.actions)
                .map(|(&s, &a)| new.log_prob(s, a) - old.log_prob(s, a))
                .sum();
            log_ratio.min(cap).exp()
        })
        .collect())
}

/// One step of PPO data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoStep {
    pub trajectory: usize,
    pub state: usize,
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
}

pub fn ppo_steps(
    old: &SoftmaxPolicy<f64>,
    trajs: &[Trajectory],
    targets: &[StepTargets<f64>],
) -> Vec<PpoStep> {
    trajs
        .iter()
        .zip(targets)
        .enumerate()
        .flat_map(|(i, (t, tg))| {
            t.states.iter().zip(&t.actions).zip(&tg.advantages).map(
                move |((&state, &action), &advantage)| PpoStep {
                    trajectory: i,
                    state,
                    action,
                    old_log_prob: old.log_prob(state, action),
                    advantage,
                },
            )
        })
        .collect()
}

/// Gradient of the mean clipped surrogate `min(r A, clip(r, 1±ε) A)` over all
/// steps. A step contributes `r A ∇log π` when the unclipped term is the
/// minimum (ties included) and nothing otherwise; contributions are grouped
/// by trajectory.
pub fn ppo_clip_gradient(
    steps: &[PpoStep],
    policy: &SoftmaxPolicy<f64>,
    clip: f64,
    n_trajectories: usize,
) -> Result<GradientEstimate<f64>> {
    if !(clip > 0.0) {
        return Err(Error::invalid("PPO clip range must be positive"));
    }
    let dim = policy.param_dim();
    let mut est = GradientEstimate::zeros(n_trajectories, dim);
    if steps.is_empty() {
        return Ok(est);
    }
    if steps.iter().any(|s| s.trajectory >= n_trajectories) {
        return Err(Error::invalid("PPO step refers to a missing trajectory"));
    }
    let inv = 1.0 / steps.len() as f64;
    for s in steps {
        let ratio = (policy.log_prob(s.state, s.action) - s.old_log_prob).exp();
        let unclipped = ratio * s.advantage;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * s.advantage;
        if unclipped <= clipped {
            let row = &mut est.contributions[s.trajectory * dim..(s.trajectory + 1) * dim];
            policy.add_grad_log_prob(s.state, s.action, inv * unclipped, row);
        }
    }
    for row in est.contributions.chunks(dim) {
        for (g, &c) in est.grad.iter_mut().zip(row) {
            *g += c;
        }
    }
    Ok(est)
}

/// Algorithm-1 training run from a uniform policy and zero value table.
pub fn train_reinforce_variability(
    maze: &GridMaze,
    config: &TrainConfig,
) -> Result<Vec<IterationLog>> {
    Trainer::new(Algorithm::Reinforce, maze.clone(), config.clone())?.run(|_| {})
}

/// Algorithm-2 training run from a uniform policy and zero value table.
pub fn train_ppo_variability(maze: &GridMaze, config: &TrainConfig) -> Result<Vec<IterationLog>> {
    Trainer::new(Algorithm::Ppo, maze.clone(), config.clone())?.run(|_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad_estimators::{grad_mean_plain, variability_gradient};
    use crate::tabular_env::parse_map;

    fn short(iterations: usize, metric: MetricKind, lambda: f64) -> TrainConfig {
        TrainConfig {
            metric,
            lambda,
            iterations,
            batch_size: 8,
            seed: 7,
            ..TrainConfig::maze(metric, &NoiseSpec::gaussian())
        }
    }

    fn random_policy(n_states: usize, seed: u64) -> SoftmaxPolicy<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = (0..n_states * 4)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        SoftmaxPolicy::from_theta(n_states, 4, theta).unwrap()
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                lambda: -0.1,
                ..ok.clone()
            },
            TrainConfig {
                iterations: 0,
                ..ok.clone()
            },
            TrainConfig {
                is_clip: 0.5,
                ..ok.clone()
            },
            TrainConfig {
                ppo_clip: 1.0,
                ..ok.clone()
            },
            TrainConfig {
                metric: MetricKind::CVaRDev { alpha: 1.5 },
                ..ok.clone()
            },
            TrainConfig {
                metric: MetricKind::MeanDev,
                lambda: 1.0,
                batch_size: 3,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn maze_table_values() {
        let g = TrainConfig::maze(MetricKind::GiniDev, &NoiseSpec::gaussian());
        assert_eq!((g.policy_lr, g.lambda, g.value_lr), (1e-3, 1.0, 1e-2));
        assert_eq!(
            maze_hyperparameters(MetricKind::GiniDev, &NoiseSpec::uniform()),
            Some((1e-4, 1.4))
        );
        assert_eq!(
            maze_hyperparameters(MetricKind::Std, &NoiseSpec::None),
            None
        );
    }

    #[test]
    fn identical_policies_give_unit_ratios() {
        let maze = GridMaze::default();
        let p = random_policy(36, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trajs = rollout_episodes(&maze, &p, 5, &mut rng);
        assert!(is_ratios_clipped(&p, &p, &trajs, 3.0)
            .unwrap()
            .iter()
            .all(|&r| r == 1.0));
        let q = random_policy(36, 3);
        assert!(is_ratios_clipped(&p, &q, &trajs, 1.0)
            .unwrap()
            .iter()
            .all(|&r| r <= 1.0 && r > 0.0));
        assert!(is_ratios_clipped(&p, &q, &trajs, 0.9).is_err());
    }

    #[test]
    fn ratio_is_product_of_step_ratios() {
        let maze = GridMaze::default();
        let p = random_policy(36, 4);
        let q = random_policy(36, 5);
        let traj = Trajectory::from_steps(
            vec![30, 31],
            vec![3, 0],
            vec![-1.0, -1.0],
            1.0,
            false,
            false,
        );
        let direct = (q.action_probs(30)[3] / p.action_probs(30)[3])
            * (q.action_probs(31)[0] / p.action_probs(31)[0]);
        let r = is_ratios_clipped(&p, &q, &[traj], 1e9).unwrap()[0];
        assert!((r - direct).abs() < 1e-12 * direct);
        let _ = maze;
    }

    #[test]
    fn ppo_gradient_cases() {
        let maze = GridMaze::default();
        let p = random_policy(36, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let trajs = rollout_episodes(&maze, &p, 4, &mut rng);
        let targets = returns_and_advantages(&trajs, &ValueTable::new(36), 0.999, Some(0.95));
        let steps = ppo_steps(&p, &trajs, &targets);
        // old = new: vanilla advantage-weighted score gradient
        let g = ppo_clip_gradient(&steps, &p, 0.2, 4).unwrap();
        let mut vanilla = vec![0.0; 144];
        for s in &steps {
            p.add_grad_log_prob(
                s.state,
                s.action,
                s.advantage / steps.len() as f64,
                &mut vanilla,
            );
        }
        for (a, b) in g.grad.iter().zip(&vanilla) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero: Vec<PpoStep> = steps
            .iter()
            .map(|s| PpoStep {
                advantage: 0.0,
                ..*s
            })
            .collect();
        assert!(ppo_clip_gradient(&zero, &p, 0.2, 4).unwrap().is_zero());
        // one step, positive advantage, ratio above 1 + ε
        let s = PpoStep {
            trajectory: 0,
            state: 30,
            action: 3,
            old_log_prob: p.log_prob(30, 3) - 0.5,
            advantage: 2.0,
        };
        assert!(ppo_clip_gradient(&[s], &p, 0.2, 1).unwrap().is_zero());
        let inside = PpoStep {
            old_log_prob: p.log_prob(30, 3) - 0.1,
            ..s
        };
        assert!(!ppo_clip_gradient(&[inside], &p, 0.2, 1).unwrap().is_zero());
    }

    #[test]
    fn reinforce_is_deterministic() {
        let maze = GridMaze::default().with_noise(NoiseSpec::gaussian());
        let cfg = short(20, MetricKind::MeanDev, 0.8);
        let a = train_reinforce_variability(&maze, &cfg).unwrap();
        let b = train_reinforce_variability(&maze, &cfg).unwrap();
        let strip = |v: &[IterationLog]| {
            v.iter()
                .map(IterationLog::without_timing)
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
        assert!(a.iter().all(IterationLog::is_finite));
        let other = train_reinforce_variability(&maze, &TrainConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(strip(&a), strip(&other));
    }

    #[test]
    fn ppo_is_deterministic() {
        let maze = GridMaze::default().with_noise(NoiseSpec::gaussian());
        let cfg = TrainConfig {
            inner_updates: 3,
            ..short(10, MetricKind::CVaRDev { alpha: 0.2 }, 0.6)
        };
        let a = train_ppo_variability(&maze, &cfg).unwrap();
        let b = train_ppo_variability(&maze, &cfg).unwrap();
        let strip = |v: &[IterationLog]| {
            v.iter()
                .map(IterationLog::without_timing)
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn lambda_zero_matches_risk_neutral_per_iteration() {
        let maze = GridMaze::default().with_noise(NoiseSpec::gaussian());
        for algorithm in [Algorithm::Reinforce, Algorithm::Ppo] {
            let base = short(15, MetricKind::Variance, 0.0);
            let mut neutral = Trainer::new(algorithm, maze.clone(), base.clone()).unwrap();
            let other_cfg = TrainConfig {
                metric: MetricKind::SemiStd,
                ..base
            };
            let mut other = Trainer::new(algorithm, maze.clone(), other_cfg).unwrap();
            for _ in 0..15 {
                let a = neutral.step().unwrap();
                let b = other.step().unwrap();
                assert_eq!(a.gradient, b.gradient);
                assert_eq!(a.log.mean_return, b.log.mean_return);
            }
        }
    }

    #[test]
    fn reinforce_step_matches_hand_assembled_gradient() {
        let maze = GridMaze::default().with_noise(NoiseSpec::gaussian());
        let cfg = short(1, MetricKind::GiniDev, 1.0);
        let mut trainer = Trainer::new(Algorithm::Reinforce, maze.clone(), cfg.clone()).unwrap();
        let out = trainer.step().unwrap();
        let mut streams = Streams::new(cfg.seed);
        let policy = SoftmaxPolicy::new(36, 4);
        let trajs = rollout_episodes(
            &maze.with_gamma(cfg.gamma),
            &policy,
            cfg.batch_size,
            &mut streams.rollout,
        );
        // zero value table: baseline-free REINFORCE
        let mut mean = vec![0.0; 144];
        for t in &trajs {
            let mut discount = 1.0;
            for ((&s, &a), &g) in t.states.iter().zip(&t.actions).zip(&t.rewards_to_go) {
                policy.add_grad_log_prob(s, a, discount * g / trajs.len() as f64, &mut mean);
                discount *= cfg.gamma;
            }
        }
        let batch = gradient_batch(&policy, &trajs).unwrap();
        let var = variability_gradient(
            MetricKind::GiniDev,
            &batch,
            &cfg.estimator(),
            &mut streams.split,
        )
        .unwrap();
        for k in 0..144 {
            let expected = mean[k] - var.grad[k];
            assert!((out.gradient[k] - expected).abs() < 1e-9 * (1.0 + expected.abs()));
        }
        let _ = grad_mean_plain(&batch).unwrap();
    }

    #[test]
    fn ppo_first_inner_update_uses_unit_ratios() {
        // M = 1, ζ = 1: the variability gradient equals the unweighted one
        let maze = GridMaze::default().with_noise(NoiseSpec::gaussian());
        let policy = random_policy(36, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let trajs = rollout_episodes(&maze, &policy, 12, &mut rng);
        let ratios = is_ratios_clipped(&policy, &policy, &trajs, 1.0).unwrap();
        let plain = gradient_batch(&policy, &trajs).unwrap();
        let weighted = plain.clone().with_is_ratios(ratios).unwrap();
        for kind in MetricKind::ALL {
            let cfg = EstimatorConfig::default();
            let a = variability_gradient(kind, &plain, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
            let b = variability_gradient(kind, &weighted, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
            assert_eq!(a.grad, b.grad, "{kind}");
        }
    }

    #[test]
    fn greedy_risk_rate_mode() {
        let maze = parse_map("S.G").unwrap();
        let cfg = TrainConfig {
            risk_rate: RiskRateMode::Greedy,
            ..short(3, MetricKind::GiniDev, 0.0)
        };
        let logs = train_reinforce_variability(&maze, &cfg).unwrap();
        assert!(logs
            .iter()
            .all(|l| l.risk_averse_rate == 0.0 || l.risk_averse_rate == 1.0));
    }
}
