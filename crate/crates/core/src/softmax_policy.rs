//! Tabular softmax policy over one-hot state-action features, a tabular
//! (one-hot linear) value baseline, and first-order optimizers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tabular_env::Trajectory;

/// Anything that can pick an action in a state; used by environment rollouts.
pub trait ActionSampler {
    fn n_actions(&self) -> usize;
    fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize;
}

/// `π_θ(a|s) ∝ exp(θ[s·|A| + a])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy<T> {
    n_states: usize,
    n_actions: usize,
    theta: Vec<T>,
}

impl<T: Scalar> SoftmaxPolicy<T> {
    /// Uniform policy (all logits zero).
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            theta: vec![T::zero(); n_states * n_actions],
        }
    }

    pub fn from_theta(n_states: usize, n_actions: usize, theta: Vec<T>) -> Result<Self> {
        if n_actions == 0 || n_states == 0 {
            return Err(Error::invalid("policy needs at least one state and action"));
        }
        if theta.len() != n_states * n_actions {
            return Err(Error::invalid(format!(
                "theta has {} entries, expected {}",
                theta.len(),
                n_states * n_actions
            )));
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("theta has non-finite entries"));
        }
        Ok(Self {
            n_states,
            n_actions,
            theta,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn param_dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[T] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    fn logits(&self, state: usize) -> &[T] {
        let k = self.n_actions;
        &self.theta[state * k..(state + 1) * k]
    }

    /// Softmax of the state's logits, stabilized by subtracting the max logit.
    pub fn action_probs(&self, state: usize) -> Vec<T> {
        let logits = self.logits(state);
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    pub fn log_prob(&self, state: usize, action: usize) -> T {
        let logits = self.logits(state);
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
        logits[action] - lse
    }

    /// `W(s,a) − Σ_b π(b|s) W(s,b)` as a dense parameter vector.
    pub fn grad_log_prob(&self, state: usize, action: usize) -> Vec<T> {
        let mut g = vec![T::zero(); self.param_dim()];
        self.add_grad_log_prob(state, action, T::one(), &mut g);
        g
    }

    /// `out += scale · ∇_θ log π(action|state)`; touches only the state's block.
    pub fn add_grad_log_prob(&self, state: usize, action: usize, scale: T, out: &mut [T]) {
        let probs = self.action_probs(state);
        let base = state * self.n_actions;
        for (b, p) in probs.into_iter().enumerate() {
            let indicator = if b == action { T::one() } else { T::zero() };
            out[base + b] += scale * (indicator - p);
        }
    }

    /// Trajectory score `Σ_t ∇ log π(a_t|s_t)`.
    pub fn trajectory_score(&self, traj: &Trajectory) -> Vec<T> {
        let mut score = vec![T::zero(); self.param_dim()];
        for (&s, &a) in traj.states.iter().zip(&traj.actions) {
            self.add_grad_log_prob(s, a, T::one(), &mut score);
        }
        score
    }

    /// `Σ_t log π(a_t|s_t)`.
    pub fn trajectory_log_prob(&self, traj: &Trajectory) -> T {
        traj.states
            .iter()
            .zip(&traj.actions)
            .map(|(&s, &a)| self.log_prob(s, a))
            .sum()
    }

    pub fn greedy_action(&self, state: usize) -> usize {
        let logits = self.logits(state);
        let mut best = 0;
        for (a, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = a;
            }
        }
        best
    }

    pub fn snapshot(&self) -> ParamSnapshot<T> {
        ParamSnapshot {
            n_states: self.n_states,
            n_actions: self.n_actions,
            values: self.theta.clone(),
        }
    }

    pub fn from_snapshot(snap: ParamSnapshot<T>) -> Result<Self> {
        Self::from_theta(snap.n_states, snap.n_actions, snap.values)
    }
}

impl<T: Scalar> ActionSampler for SoftmaxPolicy<T> {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let probs = self.action_probs(state);
        for (a, p) in probs.iter().enumerate() {
            acc += p.to_f64_lossy();
            if u < acc {
                return a;
            }
        }
        probs.len() - 1
    }
}

/// Wraps a policy and always takes its most likely action.
pub struct Greedy<'a, T>(pub &'a SoftmaxPolicy<T>);

impl<T: Scalar> ActionSampler for Greedy<'_, T> {
    fn n_actions(&self) -> usize {
        self.0.n_actions
    }

    fn sample_action<R: Rng + ?Sized>(&self, state: usize, _rng: &mut R) -> usize {
        self.0.greedy_action(state)
    }
}

/// `V_υ(s) = υ[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable<T> {
    values: Vec<T>,
}

impl<T: Scalar> ValueTable<T> {
    pub fn new(n_states: usize) -> Self {
        Self {
            values: vec![T::zero(); n_states],
        }
    }

    pub fn from_values(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("value table has non-finite entries"));
        }
        Ok(Self { values })
    }

    pub fn state_value(&self, state: usize) -> T {
        self.values[state]
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Gradient of `(1/T) Σ_t (V(s_t) − target_t)²` with respect to the table.
    pub fn squared_error_grad(&self, states: &[usize], targets: &[T]) -> Vec<T> {
        let mut g = vec![T::zero(); self.values.len()];
        if states.is_empty() {
            return g;
        }
        let scale = T::of(2.0) / T::of_usize(states.len());
        for (&s, &target) in states.iter().zip(targets) {
            g[s] += scale * (self.values[s] - target);
        }
        g
    }

    pub fn mean_squared_error(&self, states: &[usize], targets: &[T]) -> T {
        if states.is_empty() {
            return T::zero();
        }
        let sum: T = states
            .iter()
            .zip(targets)
            .map(|(&s, &t)| (self.values[s] - t) * (self.values[s] - t))
            .sum();
        sum / T::of_usize(states.len())
    }

    pub fn snapshot(&self) -> ParamSnapshot<T> {
        ParamSnapshot {
            n_states: self.values.len(),
            n_actions: 1,
            values: self.values.clone(),
        }
    }
}

/// Per-step regression targets and advantages of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTargets<T> {
    /// `R_{τ,t}`.
    pub rewards_to_go: Vec<T>,
    pub advantages: Vec<T>,
}

/// Advantages `R_{τ,t} − V(s_t)`, or GAE(λ) over TD residuals when
/// `gae_lambda` is given (bootstrap value 0 after the last step).
pub fn returns_and_advantages<T: Scalar>(
    trajectories: &[Trajectory],
    value: &ValueTable<T>,
    gamma: T,
    gae_lambda: Option<T>,
) -> Vec<StepTargets<T>> {
    trajectories
        .iter()
        .map(|traj| {
            let rewards_to_go: Vec<T> = traj.rewards_to_go.iter().map(|&r| T::of(r)).collect();
            let len = traj.states.len();
            let advantages = match gae_lambda {
                None => traj
                    .states
                    .iter()
                    .zip(&rewards_to_go)
                    .map(|(&s, &g)| g - value.state_value(s))
                    .collect(),
                Some(lambda) => {
                    let mut adv = vec![T::zero(); len];
                    let mut running = T::zero();
                    for t in (0..len).rev() {
                        let next_value = if t + 1 < len {
                            value.state_value(traj.states[t + 1])
                        } else {
                            T::zero()
                        };
                        let delta = T::of(traj.rewards[t]) + gamma * next_value
                            - value.state_value(traj.states[t]);
                        running = delta + gamma * lambda * running;
                        adv[t] = running;
                    }
                    adv
                }
            };
            StepTargets {
                rewards_to_go,
                advantages,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub learning_rate: T,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
    steps: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: T, dim: usize) -> Result<Self> {
        if !(learning_rate > T::zero()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => dim,
        };
        Ok(Self {
            kind,
            learning_rate,
            first_moment: vec![T::zero(); moments],
            second_moment: vec![T::zero(); moments],
            steps: 0,
        })
    }

    pub fn sgd(learning_rate: T) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate, 0)
    }
}

/// One optimizer step; `ascent` moves along `grad`, otherwise against it.
pub fn apply_gradient<T: Scalar>(
    params: &mut [T],
    opt: &mut OptimizerState<T>,
    grad: &[T],
    ascent: bool,
) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries, parameters {}",
            grad.len(),
            params.len()
        )));
    }
    let sign = if ascent { T::one() } else { -T::one() };
    match opt.kind {
        OptimizerKind::Sgd => {
            for (p, &g) in params.iter_mut().zip(grad) {
                *p += sign * opt.learning_rate * g;
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            if opt.first_moment.len() != params.len() {
                return Err(Error::invalid(
                    "Adam moments do not match parameter dimension",
                ));
            }
            opt.steps += 1;
            let (b1, b2, eps) = (T::of(beta1), T::of(beta2), T::of(eps));
            let t = opt.steps as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            for i in 0..params.len() {
                let g = grad[i];
                opt.first_moment[i] = b1 * opt.first_moment[i] + (T::one() - b1) * g;
                opt.second_moment[i] = b2 * opt.second_moment[i] + (T::one() - b2) * g * g;
                let m_hat = opt.first_moment[i] / c1;
                let v_hat = opt.second_moment[i] / c2;
                params[i] += sign * opt.learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// Flat parameter array with a small header.
///
/// Text layout:
///
/// ```text
/// mvpg-params v1
/// states <n>
/// actions <k>
/// <value>        (n·k lines, row-major by state)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSnapshot<T> {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<T>,
}

const SNAPSHOT_MAGIC: &str = "mvpg-params v1";

impl<T: Scalar> ParamSnapshot<T> {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{SNAPSHOT_MAGIC}\nstates {}\nactions {}\n",
            self.n_states, self.n_actions
        );
        for v in &self.values {
            out.push_str(&format!("{v:?}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(SNAPSHOT_MAGIC) {
            return Err(Error::invalid("missing parameter snapshot header"));
        }
        let mut header = |key: &str| -> Result<usize> {
            let line = lines.next().unwrap_or_default();
            line.strip_prefix(key)
                .and_then(|rest| rest.trim().parse().ok())
                .ok_or_else(|| Error::invalid(format!("malformed `{key}` header line")))
        };
        let n_states = header("states")?;
        let n_actions = header("actions")?;
        let values = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                l.trim()
                    .parse::<T>()
                    .map_err(|_| Error::invalid(format!("value {i} is not a number: `{l}`")))
            })
            .collect::<Result<Vec<T>>>()?;
        if values.len() != n_states * n_actions {
            return Err(Error::invalid(format!(
                "snapshot has {} values, header says {}",
                values.len(),
                n_states * n_actions
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }
}
