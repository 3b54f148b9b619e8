//! Exact ground truth for small problems: finite return distributions,
//! exhaustive enumeration of tiny MDPs, finite-difference metric gradients,
//! and Monte Carlo measurement of estimator bias.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad_estimators::{variability_gradient, EstimatorConfig, GradientBatch};
use crate::risk_metrics::{exact_metric_on_atoms, MetricKind, QuantileMethod, SampleBatch};
use crate::scalar::Scalar;
use crate::softmax_policy::SoftmaxPolicy;
use crate::tabular_env::{GridMaze, Trajectory};

/// Finite law given as `(value, probability)` atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomDistribution<T> {
    atoms: Vec<(T, T)>,
}

const MERGE_TOL: f64 = 1e-12;

fn mass_tol<T: Scalar>() -> T {
    T::of(1e-12).max(T::of(1e3) * T::epsilon())
}

impl<T: Scalar> AtomDistribution<T> {
    pub fn new(atoms: Vec<(T, T)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::invalid("atom distribution has no atoms"));
        }
        if atoms
            .iter()
            .any(|&(v, p)| !v.is_finite() || !p.is_finite() || p < T::zero())
        {
            return Err(Error::invalid(
                "atoms need finite values and non-negative probabilities",
            ));
        }
        let dist = Self { atoms };
        dist.check_normalized()?;
        Ok(dist)
    }

    /// `m` equally likely atoms.
    pub fn uniform(values: Vec<T>) -> Result<Self> {
        let p = T::one() / T::of_usize(values.len().max(1));
        Self::new(values.into_iter().map(|v| (v, p)).collect())
    }

    /// Normal law restricted to an `m`-point grid over `mean ± width·std`,
    /// weights proportional to the density.
    pub fn discretized_normal(mean: T, std: T, m: usize, width: T) -> Result<Self> {
        if m < 2 || !(std > T::zero()) {
            return Err(Error::invalid("discretized normal needs m ≥ 2 and std > 0"));
        }
        let step = T::of(2.0) * width / T::of_usize(m - 1);
        let zs: Vec<T> = (0..m).map(|k| -width + step * T::of_usize(k)).collect();
        let dens: Vec<T> = zs.iter().map(|&z| (-(z * z) / T::of(2.0)).exp()).collect();
        let total: T = dens.iter().copied().sum();
        Self::new(
            zs.iter()
                .zip(&dens)
                .map(|(&z, &d)| (mean + std * z, d / total))
                .collect(),
        )
    }

    pub fn check_normalized(&self) -> Result<()> {
        let total: T = self.atoms.iter().map(|a| a.1).sum();
        if (total - T::one()).abs() > mass_tol::<T>() {
            return Err(Error::invalid(format!(
                "atom probabilities sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    pub fn atoms(&self) -> &[(T, T)] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn to_batch(&self) -> Result<SampleBatch<T>> {
        SampleBatch::with_weights(
            self.atoms.iter().map(|a| a.0).collect(),
            self.atoms.iter().map(|a| a.1).collect(),
        )
    }

    /// Atoms sorted by value with values closer than `1e−12` (relative to
    /// their magnitude) merged and zero-mass atoms dropped.
    pub fn merged(&self) -> Self {
        let mut sorted: Vec<(T, T)> = self
            .atoms
            .iter()
            .copied()
            .filter(|a| a.1 > T::zero())
            .collect();
        sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite values"));
        let tol = T::of(MERGE_TOL);
        let mut out: Vec<(T, T)> = Vec::with_capacity(sorted.len());
        for (v, p) in sorted {
            match out.last_mut() {
                Some(last) if (v - last.0).abs() <= tol * T::one().max(v.abs()) => last.1 += p,
                _ => out.push((v, p)),
            }
        }
        Self { atoms: out }
    }

    pub fn mean(&self) -> T {
        self.atoms.iter().map(|&(v, p)| v * p).sum()
    }

    pub fn variance(&self) -> T {
        let m = self.mean();
        self.atoms.iter().map(|&(v, p)| p * (v - m) * (v - m)).sum()
    }

    /// Inverse-CDF draw over the atoms in stored order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let u = T::of(rng.random::<f64>());
        let mut acc = T::zero();
        for &(v, p) in &self.atoms {
            acc += p;
            if u < acc {
                return v;
            }
        }
        self.atoms[self.atoms.len() - 1].0
    }

    /// Precomputed sampler for repeated draws.
    pub fn sampler(&self) -> AtomSampler<T> {
        let mut acc = T::zero();
        let cumulative = self
            .atoms
            .iter()
            .map(|a| {
                acc += a.1;
                acc
            })
            .collect();
        AtomSampler {
            values: self.atoms.iter().map(|a| a.0).collect(),
            cumulative,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AtomSampler<T> {
    values: Vec<T>,
    cumulative: Vec<T>,
}

impl<T: Scalar> AtomSampler<T> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        let u = T::of(rng.random::<f64>());
        let k = self.cumulative.partition_point(|&c| c <= u);
        self.values[k.min(self.values.len() - 1)]
    }
}

/// Signed Choquet integral `∫₀¹ F⁻¹(1−α) dh(α)` of a finite law, summed
/// exactly over the sorted atoms.
pub fn choquet_integral<T: Scalar>(dist: &AtomDistribution<T>, h: impl Fn(T) -> T) -> T {
    let merged = dist.merged();
    let mut cum = T::zero();
    let mut total = T::zero();
    for &(v, p) in merged.atoms() {
        let next = (cum + p).min(T::one());
        total += v * (h(T::one() - cum) - h(T::one() - next));
        cum = next;
    }
    total
}

/// Gini deviation through its distortion `h(α) = α − α²`.
pub fn gini_deviation_choquet<T: Scalar>(dist: &AtomDistribution<T>) -> T {
    choquet_integral(dist, |a| a - a * a)
}

/// `½ Σ_i Σ_j p_i p_j |x_i − x_j|`.
pub fn gini_deviation_double_sum<T: Scalar>(dist: &AtomDistribution<T>) -> T {
    let atoms = dist.atoms();
    let mut total = T::zero();
    for &(xi, pi) in atoms {
        for &(xj, pj) in atoms {
            total += pi * pj * (xi - xj).abs();
        }
    }
    total / T::of(2.0)
}

/// Mean-median deviation through its distortion `h(α) = min{α, 1 − α}`.
pub fn mean_median_dev_choquet<T: Scalar>(dist: &AtomDistribution<T>) -> T {
    choquet_integral(dist, |a| a.min(T::one() - a))
}

/// `E|X − q_{1/2}|` with the lower median `inf{z : F(z) ≥ ½}`.
pub fn mean_median_dev_direct<T: Scalar>(dist: &AtomDistribution<T>) -> Result<T> {
    let median = crate::risk_metrics::quantile(
        &dist.to_batch()?,
        T::of(0.5),
        QuantileMethod::LowerOrderStat,
    )?;
    Ok(dist
        .atoms()
        .iter()
        .map(|&(v, p)| p * (v - median).abs())
        .sum())
}

/// One weighted outcome of taking an action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next_state: usize,
    pub reward: f64,
    pub probability: f64,
    pub terminal: bool,
}

/// A finite-horizon MDP with finitely many outcomes per step.
pub trait FiniteMdp {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn initial_state(&self) -> usize;
    fn gamma(&self) -> f64;
    /// Outcomes of `action` in `state` at step `t`; episodes always end by the
    /// horizon, so the last step must be terminal.
    fn transitions(&self, state: usize, action: usize, t: usize) -> Result<Vec<Transition>>;

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        state: usize,
        action: usize,
        t: usize,
        rng: &mut R,
    ) -> Result<Transition> {
        let outcomes = self.transitions(state, action, t)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for o in &outcomes {
            acc += o.probability;
            if u < acc {
                return Ok(*o);
            }
        }
        outcomes
            .last()
            .copied()
            .ok_or_else(|| Error::invalid("action has no outcomes"))
    }
}

impl FiniteMdp for GridMaze {
    fn n_states(&self) -> usize {
        GridMaze::n_states(self)
    }

    fn n_actions(&self) -> usize {
        GridMaze::n_actions(self)
    }

    fn initial_state(&self) -> usize {
        self.start()
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn transitions(&self, state: usize, action: usize, t: usize) -> Result<Vec<Transition>> {
        let act = crate::tabular_env::Action::from_index(action)
            .ok_or_else(|| Error::invalid(format!("action index {action} out of range")))?;
        let next_state = self.next_state(state, act);
        let terminal = next_state == self.goal() || t + 1 >= self.max_steps;
        let rewards = if self.is_risky(next_state) {
            self.noise.support(self.step_reward).ok_or_else(|| {
                Error::invalid(format!(
                    "{} noise has no finite support; use discrete noise for enumeration",
                    self.noise.name()
                ))
            })?
        } else {
            vec![(self.step_reward, 1.0)]
        };
        Ok(rewards
            .into_iter()
            .map(|(reward, probability)| Transition {
                next_state,
                reward,
                probability,
                terminal,
            })
            .collect())
    }
}

/// One-step problem: pick an arm, receive a draw from its return law.
#[derive(Debug, Clone)]
pub struct Bandit {
    arms: Vec<AtomDistribution<f64>>,
    samplers: Vec<AtomSampler<f64>>,
}

impl Bandit {
    pub fn new(arms: Vec<AtomDistribution<f64>>) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::invalid("bandit needs at least one arm"));
        }
        let samplers = arms.iter().map(AtomDistribution::sampler).collect();
        Ok(Self { arms, samplers })
    }

    /// Arm `k` pays `1` with probability `success[k]`, else `0`.
    pub fn bernoulli(success: &[f64]) -> Result<Self> {
        Self::new(
            success
                .iter()
                .map(|&s| AtomDistribution::new(vec![(0.0, 1.0 - s), (1.0, s)]))
                .collect::<Result<_>>()?,
        )
    }

    pub fn arm(&self, k: usize) -> &AtomDistribution<f64> {
        &self.arms[k]
    }
}

impl FiniteMdp for Bandit {
    fn n_states(&self) -> usize {
        1
    }

    fn n_actions(&self) -> usize {
        self.arms.len()
    }

    fn initial_state(&self) -> usize {
        0
    }

    fn gamma(&self) -> f64 {
        1.0
    }

    fn transitions(&self, _state: usize, action: usize, _t: usize) -> Result<Vec<Transition>> {
        let arm = self
            .arms
            .get(action)
            .ok_or_else(|| Error::invalid(format!("arm {action} out of range")))?;
        Ok(arm
            .atoms()
            .iter()
            .map(|&(reward, probability)| Transition {
                next_state: 0,
                reward,
                probability,
                terminal: true,
            })
            .collect())
    }

    fn sample_transition<R: Rng + ?Sized>(
        &self,
        _state: usize,
        action: usize,
        _t: usize,
        rng: &mut R,
    ) -> Result<Transition> {
        let sampler = self
            .samplers
            .get(action)
            .ok_or_else(|| Error::invalid(format!("arm {action} out of range")))?;
        Ok(Transition {
            next_state: 0,
            reward: sampler.sample(rng),
            probability: 1.0,
            terminal: true,
        })
    }
}

pub const DEFAULT_PATH_BUDGET: u64 = 1_000_000;

/// Exact law of the discounted return under `policy`, by depth-first
/// expansion of every (action, outcome) path. More than `budget` complete
/// paths is an error.
pub fn enumerate_return_distribution<M: FiniteMdp + ?Sized>(
    mdp: &M,
    policy: &SoftmaxPolicy<f64>,
    budget: u64,
) -> Result<AtomDistribution<f64>> {
    check_policy(mdp, policy)?;
    let mut atoms = Vec::new();
    let mut paths = 0u64;
    expand(
        mdp,
        policy,
        mdp.initial_state(),
        0,
        1.0,
        0.0,
        1.0,
        budget,
        &mut paths,
        &mut atoms,
    )?;
    let dist = AtomDistribution { atoms }.merged();
    dist.check_normalized()?;
    Ok(dist)
}

#[allow(clippy::too_many_arguments)]
fn expand<M: FiniteMdp + ?Sized>(
    mdp: &M,
    policy: &SoftmaxPolicy<f64>,
    state: usize,
    t: usize,
    discount: f64,
    ret: f64,
    prob: f64,
    budget: u64,
    paths: &mut u64,
    atoms: &mut Vec<(f64, f64)>,
) -> Result<()> {
    for (action, pa) in policy.action_probs(state).into_iter().enumerate() {
        if pa == 0.0 {
            continue;
        }
        for o in mdp.transitions(state, action, t)? {
            if o.probability == 0.0 {
                continue;
            }
            let p = prob * pa * o.probability;
            let r = ret + discount * o.reward;
            if o.terminal {
                *paths += 1;
                if *paths > budget {
                    return Err(Error::OracleTooLarge { budget });
                }
                atoms.push((r, p));
            } else {
                expand(
                    mdp,
                    policy,
                    o.next_state,
                    t + 1,
                    discount * mdp.gamma(),
                    r,
                    p,
                    budget,
                    paths,
                    atoms,
                )?;
            }
        }
    }
    Ok(())
}

fn check_policy<M: FiniteMdp + ?Sized>(mdp: &M, policy: &SoftmaxPolicy<f64>) -> Result<()> {
    if policy.n_states() != mdp.n_states() || policy.param_dim() != mdp.n_states() * mdp.n_actions()
    {
        return Err(Error::invalid("policy shape does not match the MDP"));
    }
    Ok(())
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central finite differences of the exact metric value with respect to
/// every policy logit.
pub fn finite_diff_gradient<M: FiniteMdp + ?Sized>(
    kind: MetricKind,
    mdp: &M,
    policy: &SoftmaxPolicy<f64>,
    h: f64,
    budget: u64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let value = |theta: Vec<f64>| -> Result<f64> {
        let p = SoftmaxPolicy::from_theta(policy.n_states(), mdp.n_actions(), theta)?;
        let dist = enumerate_return_distribution(mdp, &p, budget)?;
        exact_metric_on_atoms(kind, &dist, QuantileMethod::LowerOrderStat)
    };
    let base = policy.theta().to_vec();
    (0..base.len())
        .map(|k| {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[k] += h;
            minus[k] -= h;
            Ok((value(plus)? - value(minus)?) / (2.0 * h))
        })
        .collect()
}

/// Same as [`finite_diff_gradient`] for the expected return.
pub fn finite_diff_mean_gradient<M: FiniteMdp + ?Sized>(
    mdp: &M,
    policy: &SoftmaxPolicy<f64>,
    h: f64,
    budget: u64,
) -> Result<Vec<f64>> {
    let base = policy.theta().to_vec();
    (0..base.len())
        .map(|k| {
            let mut shifted = [base.clone(), base.clone()];
            shifted[0][k] += h;
            shifted[1][k] -= h;
            let mut means = [0.0; 2];
            for (m, theta) in means.iter_mut().zip(shifted) {
                let p = SoftmaxPolicy::from_theta(policy.n_states(), mdp.n_actions(), theta)?;
                *m = enumerate_return_distribution(mdp, &p, budget)?.mean();
            }
            Ok((means[0] - means[1]) / (2.0 * h))
        })
        .collect()
}

/// Episode drawn from the model itself.
pub fn sample_episode<M: FiniteMdp + ?Sized, R: Rng + ?Sized>(
    mdp: &M,
    policy: &SoftmaxPolicy<f64>,
    rng: &mut R,
) -> Result<Trajectory> {
    use crate::softmax_policy::ActionSampler;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    let mut rewards = Vec::new();
    let mut state = mdp.initial_state();
    for t in 0.. {
        let action = policy.sample_action(state, rng);
        let o = mdp.sample_transition(state, action, t, rng)?;
        states.push(state);
        actions.push(action);
        rewards.push(o.reward);
        state = o.next_state;
        if o.terminal {
            break;
        }
    }
    Ok(Trajectory::from_steps(
        states,
        actions,
        rewards,
        mdp.gamma(),
        false,
        false,
    ))
}

/// Trajectory-level estimator inputs for `n` fresh episodes.
pub fn sample_gradient_batch<M: FiniteMdp + ?Sized, R: Rng + ?Sized>(
    mdp: &M,
    policy: &SoftmaxPolicy<f64>,
    n: usize,
    rng: &mut R,
) -> Result<GradientBatch<f64>> {
    let dim = policy.param_dim();
    let mut returns = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let traj = sample_episode(mdp, policy, rng)?;
        returns.push(traj.total_return);
        scores.extend(policy.trajectory_score(&traj));
    }
    GradientBatch::new(returns, scores, dim)
}

/// Monte Carlo mean of an estimator at one batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMoments {
    pub n: usize,
    pub reps: usize,
    pub mean: Vec<f64>,
    /// Standard error of each coordinate of `mean`.
    pub std_error: Vec<f64>,
    /// Batches whose estimate was a degenerate-scale error (left out of `mean`).
    pub degenerate: usize,
}

/// Averages the variability-gradient estimator of `kind` over `reps`
/// independent batches of size `n`.
pub fn estimator_moments<M: FiniteMdp + ?Sized, R: Rng + ?Sized>(
    kind: MetricKind,
    mdp: &M,
    policy: &SoftmaxPolicy<f64>,
    n: usize,
    reps: usize,
    config: &EstimatorConfig<f64>,
    rng: &mut R,
) -> Result<EstimatorMoments> {
    let dim = policy.param_dim();
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    let mut used = 0usize;
    let mut degenerate = 0usize;
    for _ in 0..reps {
        let batch = sample_gradient_batch(mdp, policy, n, rng)?;
        match variability_gradient(kind, &batch, config, rng) {
            Ok(est) => {
                for k in 0..dim {
                    sum[k] += est.grad[k];
                    sum_sq[k] += est.grad[k] * est.grad[k];
                }
                used += 1;
            }
            Err(e) if e.is_degenerate() => degenerate += 1,
            Err(e) => return Err(e),
        }
    }
    if used < 2 {
        return Err(Error::invalid("fewer than two usable batches"));
    }
    let u = used as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / u).collect();
    let std_error = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / u - m * m).max(0.0) * u / (u - 1.0) / u).sqrt())
        .collect();
    Ok(EstimatorMoments {
        n,
        reps: used,
        mean,
        std_error,
        degenerate,
    })
}

/// Error of the averaged estimator against the oracle gradient at one batch size.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasPoint {
    pub n: usize,
    pub moments: EstimatorMoments,
    /// `‖mean − truth‖`.
    pub error_norm: f64,
    /// Delta-method standard error of `error_norm`.
    pub error_se: f64,
    /// `√max(‖e‖² − Σ_k se_k², 0)`, removing the Monte Carlo noise floor.
    pub debiased_norm: f64,
}

pub fn estimator_bias_curve<M: FiniteMdp + ?Sized, R: Rng + ?Sized>(
    kind: MetricKind,
    mdp: &M,
    policy: &SoftmaxPolicy<f64>,
    truth: &[f64],
    sizes: &[usize],
    reps: usize,
    config: &EstimatorConfig<f64>,
    rng: &mut R,
) -> Result<Vec<BiasPoint>> {
    if truth.len() != policy.param_dim() {
        return Err(Error::invalid("oracle gradient has the wrong dimension"));
    }
    sizes
        .iter()
        .map(|&n| {
            let moments = estimator_moments(kind, mdp, policy, n, reps, config, rng)?;
            let err: Vec<f64> = moments.mean.iter().zip(truth).map(|(m, t)| m - t).collect();
            let norm_sq: f64 = err.iter().map(|e| e * e).sum();
            let error_norm = norm_sq.sqrt();
            let noise: f64 = moments.std_error.iter().map(|s| s * s).sum();
            let error_se = if error_norm > 0.0 {
                err.iter()
                    .zip(&moments.std_error)
                    .map(|(e, s)| (e / error_norm * s).powi(2))
                    .sum::<f64>()
                    .sqrt()
            } else {
                noise.sqrt()
            };
            Ok(BiasPoint {
                n,
                error_norm,
                error_se,
                debiased_norm: (norm_sq - noise).max(0.0).sqrt(),
                moments,
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("log-log slope needs ≥ 2 positive pairs"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}
