//! Score-function gradient estimators for the mean return and for every
//! measure of variability.
//!
//! All estimators work on trajectory-level statistics only: per-trajectory
//! returns `R_i`, trajectory scores `ω_i = Σ_t ∇ log π(a_t|s_t)`, and optional
//! clipped importance ratios `ρ_i` (treated as 1 when absent). Every estimate
//! has the form `Σ_i c_i` with one parameter-vector contribution `c_i` per
//! trajectory; the contributions are kept so callers can measure the spread
//! of the estimator within a batch.
//!
//! Inner expectations (leave-one-out means, the max-term of the Gini
//! gradient) are self-normalized by the IS ratios of the samples they average
//! over. Quantiles switch to IS-weighted quantiles as soon as one ratio
//! differs from 1, so an all-ones ratio vector reproduces the unweighted
//! estimators bit for bit.
//!
//! Where the published estimators would leave a zero-mean but nonzero term on
//! a batch of identical returns (`R² ω̄` in the variance gradient, `R ω̄` in
//! the mean part of the CVaR deviation gradient), the returns are centred on
//! a scalar that does not change the estimand: the mean of the other split
//! for variance and the empirical α-quantile for CVaR deviation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::risk_metrics::{
    empirical_metric, kde_density_at, quantile, MetricKind, QuantileMethod, SampleBatch,
};
use crate::scalar::Scalar;

/// Per-step data of one trajectory for the REINFORCE mean gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct StepScores<T> {
    /// Sparse `∇ log π(a_t|s_t)` per step as `(parameter index, value)` pairs.
    pub scores: Vec<Vec<(usize, T)>>,
    /// `R_{τ,t}` per step.
    pub rewards_to_go: Vec<T>,
}

/// Trajectory-level inputs shared by every estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch<T> {
    returns: Vec<T>,
    scores: Vec<T>,
    param_dim: usize,
    steps: Option<Vec<StepScores<T>>>,
    is_ratios: Option<Vec<T>>,
}

impl<T: Scalar> GradientBatch<T> {
    /// `scores` holds one row of length `param_dim` per trajectory, row-major.
    pub fn new(returns: Vec<T>, scores: Vec<T>, param_dim: usize) -> Result<Self> {
        if returns.is_empty() {
            return Err(Error::invalid("gradient batch is empty"));
        }
        if param_dim == 0 {
            return Err(Error::invalid("param_dim must be positive"));
        }
        if scores.len() != returns.len() * param_dim {
            return Err(Error::invalid(format!(
                "{} score entries for {} trajectories of dimension {param_dim}",
                scores.len(),
                returns.len()
            )));
        }
        if returns.iter().chain(&scores).any(|v| !v.is_finite()) {
            return Err(Error::invalid("returns and scores must be finite"));
        }
        Ok(Self {
            returns,
            scores,
            param_dim,
            steps: None,
            is_ratios: None,
        })
    }

    pub fn from_rows(returns: Vec<T>, rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("score rows have different lengths"));
        }
        Self::new(returns, rows.concat(), dim)
    }

    pub fn with_steps(mut self, steps: Vec<StepScores<T>>) -> Result<Self> {
        if steps.len() != self.returns.len() {
            return Err(Error::invalid("step data must cover every trajectory"));
        }
        for s in &steps {
            if s.scores.len() != s.rewards_to_go.len() {
                return Err(Error::invalid(
                    "step scores and rewards-to-go are misaligned",
                ));
            }
            if s.scores.iter().flatten().any(|&(k, _)| k >= self.param_dim) {
                return Err(Error::invalid("step score index out of range"));
            }
        }
        self.steps = Some(steps);
        Ok(self)
    }

    pub fn with_is_ratios(mut self, ratios: Vec<T>) -> Result<Self> {
        if ratios.len() != self.returns.len() {
            return Err(Error::invalid("one IS ratio per trajectory is required"));
        }
        if ratios.iter().any(|r| !(r.is_finite() && *r > T::zero())) {
            return Err(Error::invalid("IS ratios must be positive and finite"));
        }
        self.is_ratios = Some(ratios);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.is_empty()
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn returns(&self) -> &[T] {
        &self.returns
    }

    pub fn score(&self, i: usize) -> &[T] {
        &self.scores[i * self.param_dim..(i + 1) * self.param_dim]
    }

    pub fn is_ratios(&self) -> Option<&[T]> {
        self.is_ratios.as_deref()
    }

    pub fn steps(&self) -> Option<&[StepScores<T>]> {
        self.steps.as_deref()
    }

    #[inline]
    fn rho(&self, i: usize) -> T {
        self.is_ratios.as_ref().map_or(T::one(), |r| r[i])
    }

    /// IS weights when at least one ratio differs from 1.
    fn effective_weights(&self) -> Option<&[T]> {
        self.is_ratios
            .as_deref()
            .filter(|r| r.iter().any(|&x| x != T::one()))
    }

    /// Returns as a sample batch, IS-weighted when the ratios are not all 1.
    pub fn return_batch(&self) -> Result<SampleBatch<T>> {
        match self.effective_weights() {
            None => SampleBatch::new(self.returns.clone()),
            Some(w) => SampleBatch::with_weights(self.returns.clone(), w.to_vec()),
        }
    }

    fn max_return(&self) -> T {
        self.returns.iter().copied().fold(T::neg_infinity(), T::max)
    }

    fn require_len(&self, min: usize, what: &str) -> Result<()> {
        if self.len() < min {
            Err(Error::invalid(format!(
                "{what} needs at least {min} trajectories, got {}",
                self.len()
            )))
        } else {
            Ok(())
        }
    }
}

/// A gradient together with its per-trajectory decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate<T> {
    pub grad: Vec<T>,
    /// `c_i` rows (row-major, one per trajectory) with `grad = Σ_i c_i`.
    pub contributions: Vec<T>,
    pub aux: BTreeMap<&'static str, f64>,
}

impl<T: Scalar> GradientEstimate<T> {
    fn from_contributions(contributions: Contributions<T>) -> Self {
        let grad = contributions.total();
        Self {
            grad,
            contributions: contributions.rows,
            aux: BTreeMap::new(),
        }
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            grad: vec![T::zero(); dim],
            contributions: vec![T::zero(); n * dim],
            aux: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn n_trajectories(&self) -> usize {
        if self.grad.is_empty() {
            0
        } else {
            self.contributions.len() / self.grad.len()
        }
    }

    pub fn contribution(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.contributions[i * d..(i + 1) * d]
    }

    pub fn norm(&self) -> f64 {
        self.grad
            .iter()
            .map(|g| g.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.grad.iter().all(|g| *g == T::zero())
    }

    /// Variance across trajectories of the per-trajectory gradient samples
    /// `n · c_i`, averaged over coordinates.
    pub fn gradient_variance(&self) -> f64 {
        let n = self.n_trajectories();
        let d = self.dim();
        if n == 0 || d == 0 {
            return 0.0;
        }
        let nf = n as f64;
        let mut total = 0.0;
        for k in 0..d {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for i in 0..n {
                let g = nf * self.contributions[i * d + k].to_f64_lossy();
                sum += g;
                sum_sq += g * g;
            }
            let mean = sum / nf;
            total += (sum_sq / nf - mean * mean).max(0.0);
        }
        total / d as f64
    }

    fn with_aux(mut self, key: &'static str, value: T) -> Self {
        self.aux.insert(key, value.to_f64_lossy());
        self
    }
}

/// Row-major `n × dim` accumulator of per-trajectory contributions.
struct Contributions<T> {
    dim: usize,
    rows: Vec<T>,
}

impl<T: Scalar> Contributions<T> {
    fn new(n: usize, dim: usize) -> Self {
        Self {
            dim,
            rows: vec![T::zero(); n * dim],
        }
    }

    /// `c_i += coef · v`.
    fn add(&mut self, i: usize, coef: T, v: &[T]) {
        let row = &mut self.rows[i * self.dim..(i + 1) * self.dim];
        for (c, &x) in row.iter_mut().zip(v) {
            *c += coef * x;
        }
    }

    fn add_sparse(&mut self, i: usize, coef: T, v: &[(usize, T)]) {
        let base = i * self.dim;
        for &(k, x) in v {
            self.rows[base + k] += coef * x;
        }
    }

    /// `Σ_i c_i` in index order.
    fn total(&self) -> Vec<T> {
        let mut g = vec![T::zero(); self.dim];
        for row in self.rows.chunks(self.dim) {
            for (gk, &c) in g.iter_mut().zip(row) {
                *gk += c;
            }
        }
        g
    }
}

/// Disjoint index sets for double sampling. Set A carries the score-weighted
/// terms; set B supplies the independent scalar or `∇E[G_0]` factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DoubleSamplingSplit {
    set_a: Vec<usize>,
    set_b: Vec<usize>,
}

impl DoubleSamplingSplit {
    pub fn new(mut set_a: Vec<usize>, mut set_b: Vec<usize>, n: usize) -> Result<Self> {
        if set_a.is_empty() || set_b.is_empty() {
            return Err(Error::invalid(
                "both double-sampling sets must be non-empty",
            ));
        }
        set_a.sort_unstable();
        set_b.sort_unstable();
        let mut seen = vec![false; n];
        for &i in set_a.iter().chain(&set_b) {
            if i >= n || seen[i] {
                return Err(Error::invalid(format!(
                    "index {i} is out of range or appears twice in the split"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("split does not cover every trajectory"));
        }
        Ok(Self { set_a, set_b })
    }

    pub fn set_a(&self) -> &[usize] {
        &self.set_a
    }

    pub fn set_b(&self) -> &[usize] {
        &self.set_b
    }

    fn covers(&self, n: usize) -> bool {
        self.set_a.len() + self.set_b.len() == n
    }
}

/// Uniformly random partition of `0..n` into `⌈n/2⌉` (A) and `⌊n/2⌋` (B) indices.
pub fn split_double_sampling<R: Rng + ?Sized>(
    n: usize,
    rng: &mut R,
) -> Result<DoubleSamplingSplit> {
    if n < 2 {
        return Err(Error::invalid(
            "double sampling needs at least two trajectories",
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let b = idx.split_off(n.div_ceil(2));
    DoubleSamplingSplit::new(idx, b, n)
}

fn check_split<T: Scalar>(
    batch: &GradientBatch<T>,
    split: &DoubleSamplingSplit,
    min_each: usize,
    what: &str,
) -> Result<()> {
    if !split.covers(batch.len())
        || split
            .set_a
            .iter()
            .chain(&split.set_b)
            .any(|&i| i >= batch.len())
    {
        return Err(Error::invalid("split does not match the batch"));
    }
    if split.set_a.len() < min_each || split.set_b.len() < min_each {
        return Err(Error::invalid(format!(
            "{what} needs at least {min_each} trajectories in each split set"
        )));
    }
    Ok(())
}

/// Upper bound `b` used by the Gini and mean-median deviation gradients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum UpperBound<T> {
    /// Largest return in the batch.
    #[default]
    BatchMax,
    Fixed(T),
}

impl<T: Scalar> UpperBound<T> {
    fn resolve(self, batch: &GradientBatch<T>) -> T {
        match self {
            UpperBound::BatchMax => batch.max_return(),
            UpperBound::Fixed(b) => b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig<T> {
    pub qmethod: QuantileMethod,
    pub upper_bound: UpperBound<T>,
}

impl<T: Scalar> Default for EstimatorConfig<T> {
    fn default() -> Self {
        Self {
            qmethod: QuantileMethod::LinearInterpolation,
            upper_bound: UpperBound::BatchMax,
        }
    }
}

/// REINFORCE with baseline:
/// `(1/n) Σ_i Σ_t γ^t (R_{i,t} − V(s_{i,t})) ∇ log π(a_{i,t}|s_{i,t})`.
pub fn grad_mean_reinforce<T: Scalar>(
    batch: &GradientBatch<T>,
    baselines: &[Vec<T>],
    gamma: T,
) -> Result<GradientEstimate<T>> {
    let steps = batch
        .steps()
        .ok_or_else(|| Error::invalid("REINFORCE needs per-step scores"))?;
    if baselines.len() != steps.len()
        || baselines
            .iter()
            .zip(steps)
            .any(|(b, s)| b.len() != s.rewards_to_go.len())
    {
        return Err(Error::invalid(
            "baseline values are not aligned with the steps",
        ));
    }
    let n = batch.len();
    let inv_n = T::one() / T::of_usize(n);
    let mut acc = Contributions::new(n, batch.param_dim());
    for (i, (traj, base)) in steps.iter().zip(baselines).enumerate() {
        let mut discount = T::one();
        for ((score, &g), &v) in traj.scores.iter().zip(&traj.rewards_to_go).zip(base) {
            acc.add_sparse(i, inv_n * discount * (g - v), score);
            discount *= gamma;
        }
    }
    Ok(GradientEstimate::from_contributions(acc))
}

/// `(1/n) Σ_i ρ_i R_i ω_i`.
pub fn grad_mean_plain<T: Scalar>(batch: &GradientBatch<T>) -> Result<GradientEstimate<T>> {
    let n = batch.len();
    let mut acc = Contributions::new(n, batch.param_dim());
    add_mean_plain(batch, &(0..n).collect::<Vec<_>>(), T::one(), &mut acc);
    Ok(GradientEstimate::from_contributions(acc))
}

/// `acc += scale · (1/|idx|) Σ_{j∈idx} ρ_j R_j ω_j`.
fn add_mean_plain<T: Scalar>(
    batch: &GradientBatch<T>,
    idx: &[usize],
    scale: T,
    acc: &mut Contributions<T>,
) {
    let inv = T::one() / T::of_usize(idx.len());
    for &j in idx {
        acc.add(
            j,
            scale * inv * batch.rho(j) * batch.returns[j],
            batch.score(j),
        );
    }
}

/// `(1/|idx|) Σ_{j∈idx} ρ_j R_j`, accumulated as deviations from the first
/// return so a set of identical returns yields exactly that return.
fn mean_return_on<T: Scalar>(batch: &GradientBatch<T>, idx: &[usize]) -> T {
    let anchor = batch.returns[idx[0]];
    let inv = T::one() / T::of_usize(idx.len());
    let mut dev = T::zero();
    for &j in idx {
        dev += batch.rho(j) * (batch.returns[j] - anchor);
    }
    let rho_mean: T = idx.iter().map(|&j| batch.rho(j)).sum::<T>() * inv;
    anchor * rho_mean + dev * inv
}

/// `R_i − ȳ_{−i}` for every `i` in `set`, with `ȳ_{−i}` the IS-self-normalized
/// mean of the other returns in the set.
fn leave_one_out_gaps<T: Scalar>(batch: &GradientBatch<T>, set: &[usize]) -> Vec<T> {
    set.iter()
        .map(|&i| {
            let ri = batch.returns[i];
            let mut weight = T::zero();
            let mut gap = T::zero();
            for &j in set {
                if j != i {
                    let rho = batch.rho(j);
                    weight += rho;
                    gap += rho * (ri - batch.returns[j]);
                }
            }
            gap / weight
        })
        .collect()
}

/// Gradient of `V[G_0] = E[G_0²] − E[G_0]²` by double sampling:
/// `(1/|A|) Σ_{i∈A} ρ_i (R_i − m_B)² ω_i` with `m_B` the mean return of set B.
///
/// Since `E[ω] = 0`, expanding the square recovers
/// `∇E[G_0²] − 2 m_B ∇E[G_0]` up to the zero-mean term `m_B² ω̄_A`; the centred
/// form is unbiased because `m_B` is independent of set A.
pub fn grad_variance<T: Scalar>(
    batch: &GradientBatch<T>,
    split: &DoubleSamplingSplit,
) -> Result<GradientEstimate<T>> {
    check_split(batch, split, 1, "variance gradient")?;
    let centre = mean_return_on(batch, &split.set_b);
    let inv_a = T::one() / T::of_usize(split.set_a.len());
    let mut acc = Contributions::new(batch.len(), batch.param_dim());
    for &i in &split.set_a {
        let dev = batch.returns[i] - centre;
        acc.add(i, inv_a * batch.rho(i) * dev * dev, batch.score(i));
    }
    Ok(GradientEstimate::from_contributions(acc).with_aux("mean_b", centre))
}

const SCALE_TOL: f64 = 1e-12;

/// `∇V / (2 √V̂)` with `V̂` the empirical variance of the whole batch.
pub fn grad_std<T: Scalar>(
    batch: &GradientBatch<T>,
    split: &DoubleSamplingSplit,
) -> Result<GradientEstimate<T>> {
    let var = empirical_metric(
        MetricKind::Variance,
        &batch.return_batch()?,
        QuantileMethod::default(),
    )?;
    if !(var > T::of(SCALE_TOL)) {
        return Err(Error::DegenerateScale(format!(
            "return variance {var} is below {SCALE_TOL}"
        )));
    }
    let inner = grad_variance(batch, split)?;
    Ok(rescale(inner, T::one() / (T::of(2.0) * var.sqrt())).with_aux("variance", var))
}

fn rescale<T: Scalar>(mut est: GradientEstimate<T>, factor: T) -> GradientEstimate<T> {
    est.grad.iter_mut().for_each(|g| *g *= factor);
    est.contributions.iter_mut().for_each(|c| *c *= factor);
    est
}

/// Gini deviation gradient `(1/n) Σ_i ρ_i η_i ω_i` with
/// `η_i = (2/W_{−i}) Σ_{j≠i} ρ_j max{R_j, R_i} − (b + R_i)`.
pub fn grad_gini<T: Scalar>(
    batch: &GradientBatch<T>,
    bound: UpperBound<T>,
) -> Result<GradientEstimate<T>> {
    batch.require_len(2, "Gini deviation gradient")?;
    let n = batch.len();
    let b = bound.resolve(batch);
    let two = T::of(2.0);
    let inv_n = T::one() / T::of_usize(n);
    let mut acc = Contributions::new(n, batch.param_dim());
    for i in 0..n {
        let ri = batch.returns[i];
        // Σ_j ρ_j max{R_j, R_i} / W = R_i + Σ_j ρ_j (R_j − R_i)^+ / W
        let mut weight = T::zero();
        let mut excess = T::zero();
        for j in (0..n).filter(|&j| j != i) {
            let rho = batch.rho(j);
            weight += rho;
            excess += rho * (batch.returns[j] - ri).max(T::zero());
        }
        let eta = (ri - b) + two * excess / weight;
        acc.add(i, inv_n * batch.rho(i) * eta, batch.score(i));
    }
    Ok(GradientEstimate::from_contributions(acc).with_aux("upper_bound", b))
}

/// Mean deviation gradient: on set A with leave-one-out gaps `η_i`,
/// `(1/|A|) Σ ρ_i |η_i| ω_i − [(1/|A|) Σ ρ_i sgn(η_i)] · ∇Ê_B[G_0]`.
pub fn grad_mean_dev<T: Scalar>(
    batch: &GradientBatch<T>,
    split: &DoubleSamplingSplit,
) -> Result<GradientEstimate<T>> {
    check_split(batch, split, 2, "mean deviation gradient")?;
    let gaps = leave_one_out_gaps(batch, &split.set_a);
    let inv_a = T::one() / T::of_usize(split.set_a.len());
    let mut acc = Contributions::new(batch.len(), batch.param_dim());
    let mut sign_mean = T::zero();
    for (&i, &eta) in split.set_a.iter().zip(&gaps) {
        let rho = batch.rho(i);
        acc.add(i, inv_a * rho * eta.abs(), batch.score(i));
        sign_mean += inv_a * rho * sign(eta);
    }
    add_mean_plain(batch, &split.set_b, -sign_mean, &mut acc);
    Ok(GradientEstimate::from_contributions(acc).with_aux("sign_mean", sign_mean))
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean-median deviation gradient with the empirical median `q̂` and bound `b`:
/// `½·(2/n) Σ ρ_i (2q̂ − R_i − b) 𝟙[R_i ≤ q̂] ω_i − ½·(2/n) Σ ρ_i (b − R_i) 𝟙[R_i ≥ q̂] ω_i`.
/// A return equal to `q̂` enters both sums.
pub fn grad_mmd<T: Scalar>(
    batch: &GradientBatch<T>,
    qmethod: QuantileMethod,
    bound: UpperBound<T>,
) -> Result<GradientEstimate<T>> {
    batch.require_len(2, "mean-median deviation gradient")?;
    let n = batch.len();
    let median = quantile(&batch.return_batch()?, T::of(0.5), qmethod)?;
    let b = bound.resolve(batch);
    let half = T::of(0.5);
    let scale = half / (T::of_usize(n) * half);
    let mut acc = Contributions::new(n, batch.param_dim());
    for i in 0..n {
        let r = batch.returns[i];
        let rho = batch.rho(i);
        if r <= median {
            acc.add(
                i,
                scale * rho * ((median - r) + (median - b)),
                batch.score(i),
            );
        }
        if r >= median {
            acc.add(i, -scale * rho * (b - r), batch.score(i));
        }
    }
    Ok(GradientEstimate::from_contributions(acc)
        .with_aux("quantile", median)
        .with_aux("upper_bound", b))
}

/// Inter-quantile range gradient with KDE densities at both empirical quantiles:
/// `−(1/f̂(q̂_α)) (1/n) Σ ρ_i 𝟙[R_i ≤ q̂_α] ω_i + (1/f̂(q̂_{1−α})) (1/n) Σ ρ_i 𝟙[R_i ≤ q̂_{1−α}] ω_i`.
pub fn grad_iqr<T: Scalar>(
    batch: &GradientBatch<T>,
    alpha: f64,
    qmethod: QuantileMethod,
) -> Result<GradientEstimate<T>> {
    MetricKind::Iqr { alpha }.validate()?;
    batch.require_len(3, "inter-quantile range gradient")?;
    let returns = batch.return_batch()?;
    let a = T::of(alpha);
    let q_hi = quantile(&returns, a, qmethod)?;
    let q_lo = quantile(&returns, T::one() - a, qmethod)?;
    let density = |q: T| {
        kde_density_at(&returns, q).map_err(|e| match e {
            Error::DegenerateDensity(msg) => Error::DegenerateScale(msg),
            other => other,
        })
    };
    let f_hi = density(q_hi)?;
    let f_lo = density(q_lo)?;
    let n = batch.len();
    let inv_n = T::one() / T::of_usize(n);
    let mut acc = Contributions::new(n, batch.param_dim());
    for i in 0..n {
        let r = batch.returns[i];
        let rho = batch.rho(i);
        if r <= q_hi {
            acc.add(i, -inv_n * rho / f_hi, batch.score(i));
        }
        if r <= q_lo {
            acc.add(i, inv_n * rho / f_lo, batch.score(i));
        }
    }
    Ok(GradientEstimate::from_contributions(acc)
        .with_aux("quantile_hi", q_hi)
        .with_aux("quantile_lo", q_lo)
        .with_aux("density_hi", f_hi)
        .with_aux("density_lo", f_lo))
}

/// Lower-tail CVaR deviation gradient
/// `(1/n) Σ ρ_i (R_i − q̂_α) ω_i − (1/(αn)) Σ ρ_i (R_i − q̂_α) 𝟙[R_i ≤ q̂_α] ω_i`.
///
/// The first sum is `∇E[G_0]` with the returns centred on `q̂_α`, which is
/// `grad_mean_plain` minus the zero-mean term `q̂_α ω̄`.
pub fn grad_cvar_dev<T: Scalar>(
    batch: &GradientBatch<T>,
    alpha: f64,
    qmethod: QuantileMethod,
) -> Result<GradientEstimate<T>> {
    MetricKind::CVaRDev { alpha }.validate()?;
    batch.require_len(2, "CVaR deviation gradient")?;
    let n = batch.len();
    let q = quantile(&batch.return_batch()?, T::of(alpha), qmethod)?;
    let inv_n = T::one() / T::of_usize(n);
    let inv_alpha = T::one() / T::of(alpha);
    let mut acc = Contributions::new(n, batch.param_dim());
    for i in 0..n {
        let gap = batch.returns[i] - q;
        let tail = if batch.returns[i] <= q {
            inv_alpha
        } else {
            T::zero()
        };
        acc.add(
            i,
            inv_n * batch.rho(i) * gap * (T::one() - tail),
            batch.score(i),
        );
    }
    Ok(GradientEstimate::from_contributions(acc).with_aux("quantile", q))
}

/// Downside semi-variance gradient: on set A with leave-one-out means `y_i`,
/// `(1/|A|) Σ ρ_i (R_i − y_i)² 𝟙[R_i ≤ y_i] ω_i + [(1/|A|) Σ ρ_i 2(y_i − R_i) 𝟙[R_i ≤ y_i]] · ∇Ê_B[G_0]`.
pub fn grad_semivar<T: Scalar>(
    batch: &GradientBatch<T>,
    split: &DoubleSamplingSplit,
) -> Result<GradientEstimate<T>> {
    check_split(batch, split, 2, "semi-variance gradient")?;
    let gaps = leave_one_out_gaps(batch, &split.set_a);
    let inv_a = T::one() / T::of_usize(split.set_a.len());
    let two = T::of(2.0);
    let mut acc = Contributions::new(batch.len(), batch.param_dim());
    let mut scalar = T::zero();
    for (&i, &gap) in split.set_a.iter().zip(&gaps) {
        // gap = R_i − y_i
        if gap <= T::zero() {
            let rho = batch.rho(i);
            acc.add(i, inv_a * rho * gap * gap, batch.score(i));
            scalar += inv_a * rho * two * (-gap);
        }
    }
    add_mean_plain(batch, &split.set_b, scalar, &mut acc);
    Ok(GradientEstimate::from_contributions(acc).with_aux("downside_scalar", scalar))
}

/// `∇SV / (2 √SV̂)` with `SV̂` the empirical semi-variance of the whole batch.
pub fn grad_semistd<T: Scalar>(
    batch: &GradientBatch<T>,
    split: &DoubleSamplingSplit,
) -> Result<GradientEstimate<T>> {
    let sv = empirical_metric(
        MetricKind::SemiVar,
        &batch.return_batch()?,
        QuantileMethod::default(),
    )?;
    if !(sv > T::of(SCALE_TOL)) {
        return Err(Error::DegenerateScale(format!(
            "return semi-variance {sv} is below {SCALE_TOL}"
        )));
    }
    let inner = grad_semivar(batch, split)?;
    Ok(rescale(inner, T::one() / (T::of(2.0) * sv.sqrt())).with_aux("semi_variance", sv))
}

/// Dispatches to the estimator of `kind`, drawing a double-sampling split from
/// `rng` when the metric needs one.
pub fn variability_gradient<T: Scalar, R: Rng + ?Sized>(
    kind: MetricKind,
    batch: &GradientBatch<T>,
    config: &EstimatorConfig<T>,
    rng: &mut R,
) -> Result<GradientEstimate<T>> {
    kind.validate()?;
    let split = if kind.needs_double_sampling() {
        Some(split_double_sampling(batch.len(), rng)?)
    } else {
        None
    };
    let split = || {
        split
            .as_ref()
            .expect("split drawn for double-sampling kinds")
    };
    match kind {
        MetricKind::Variance => grad_variance(batch, split()),
        MetricKind::Std => grad_std(batch, split()),
        MetricKind::MeanDev => grad_mean_dev(batch, split()),
        MetricKind::SemiVar => grad_semivar(batch, split()),
        MetricKind::SemiStd => grad_semistd(batch, split()),
        MetricKind::GiniDev => grad_gini(batch, config.upper_bound),
        MetricKind::MeanMedianDev => grad_mmd(batch, config.qmethod, config.upper_bound),
        MetricKind::Iqr { alpha } => grad_iqr(batch, alpha, config.qmethod),
        MetricKind::CVaRDev { alpha } => grad_cvar_dev(batch, alpha, config.qmethod),
    }
}

/// `mean_grad − λ · variability_grad` and its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedGradient<T> {
    pub estimate: GradientEstimate<T>,
    pub mean_norm: f64,
    pub variability_norm: f64,
    /// Within-batch spread of the variability gradient alone.
    pub variability_grad_variance: f64,
    /// The variability term was skipped because its normalizer vanished.
    pub degenerate: bool,
}

/// Combines a precomputed mean gradient (REINFORCE or PPO) with `λ` times the
/// variability gradient of `kind`. With `λ = 0` the variability term is not
/// evaluated and no randomness is consumed. Degenerate-scale errors drop the
/// variability term for this update.
pub fn combined_objective_gradient<T: Scalar, R: Rng + ?Sized>(
    kind: MetricKind,
    batch: &GradientBatch<T>,
    mean: GradientEstimate<T>,
    lambda: T,
    config: &EstimatorConfig<T>,
    rng: &mut R,
) -> Result<CombinedGradient<T>> {
    if !(lambda >= T::zero()) {
        return Err(Error::invalid(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    if mean.dim() != batch.param_dim() || mean.n_trajectories() != batch.len() {
        return Err(Error::invalid("mean gradient does not match the batch"));
    }
    let mean_norm = mean.norm();
    if lambda == T::zero() {
        return Ok(CombinedGradient {
            estimate: mean,
            mean_norm,
            variability_norm: 0.0,
            variability_grad_variance: 0.0,
            degenerate: false,
        });
    }
    let variability = match variability_gradient(kind, batch, config, rng) {
        Ok(v) => v,
        Err(e) if e.is_degenerate() => {
            log::debug!("{kind}: variability term skipped ({e})");
            let mut estimate = mean;
            estimate.aux.insert("degenerate", 1.0);
            return Ok(CombinedGradient {
                estimate,
                mean_norm,
                variability_norm: 0.0,
                variability_grad_variance: 0.0,
                degenerate: true,
            });
        }
        Err(e) => return Err(e),
    };
    let variability_norm = variability.norm();
    let variability_grad_variance = variability.gradient_variance();
    let mut estimate = mean;
    for (g, &v) in estimate.grad.iter_mut().zip(&variability.grad) {
        *g -= lambda * v;
    }
    for (c, &v) in estimate
        .contributions
        .iter_mut()
        .zip(&variability.contributions)
    {
        *c -= lambda * v;
    }
    for (k, v) in variability.aux {
        estimate.aux.insert(k, v);
    }
    Ok(CombinedGradient {
        estimate,
        mean_norm,
        variability_norm,
        variability_grad_variance,
        degenerate: false,
    })
}
