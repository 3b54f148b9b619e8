//! Point estimators for measures of variability.
//!
//! Every metric is evaluated on the (optionally weighted) empirical measure of
//! a [`SampleBatch`]: sample `i` carries probability `p_i = w_i / Σ w` (or
//! `1/n` when unweighted). The same code evaluates exact metrics of a finite
//! [`AtomDistribution`], since an atom distribution is just a weighted batch
//! whose weights already sum to one.
//!
//! Conventions:
//!
//! * `Variance` is the population variance of the empirical measure.
//! * `GiniDev` is `½ Σ_i Σ_j p_i p_j |x_i − x_j|`, diagonal included.
//! * `MeanMedianDev` centres on the ½-quantile chosen by [`QuantileMethod`].
//! * `CVaRDev` is lower-tail: `mean − CVaR_α`, with `CVaR_α` the average of
//!   the worst `α` probability mass (fractional atoms split exactly).
//! * `SemiVar` is downside: `Σ p_i (x_i − μ)² 𝟙[x_i ≤ μ]`.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::oracle::AtomDistribution;
use crate::scalar::Scalar;

/// Scalar samples of a random variable, with optional non-negative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch<T> {
    values: Vec<T>,
    weights: Option<Vec<T>>,
}

impl<T: Scalar> SampleBatch<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("sample batch is empty"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("sample {i} is not finite")));
        }
        Ok(Self {
            values,
            weights: None,
        })
    }

    pub fn with_weights(values: Vec<T>, weights: Vec<T>) -> Result<Self> {
        let mut batch = Self::new(values)?;
        if weights.len() != batch.values.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} samples",
                weights.len(),
                batch.values.len()
            )));
        }
        if let Some(i) = weights
            .iter()
            .position(|w| !w.is_finite() || *w < T::zero())
        {
            return Err(Error::invalid(format!(
                "weight {i} is negative or not finite"
            )));
        }
        let total: T = weights.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::invalid("weights sum to zero"));
        }
        batch.weights = Some(weights);
        Ok(batch)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn weights(&self) -> Option<&[T]> {
        self.weights.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_weighted(&self) -> bool {
        self.weights.is_some()
    }

    /// Normalized probabilities of the empirical measure.
    pub fn probabilities(&self) -> Vec<T> {
        match &self.weights {
            None => {
                let p = T::one() / T::of_usize(self.values.len());
                vec![p; self.values.len()]
            }
            Some(w) => {
                let total: T = w.iter().copied().sum();
                w.iter().map(|&wi| wi / total).collect()
            }
        }
    }

    pub fn mean(&self) -> T {
        self.values
            .iter()
            .zip(self.probabilities())
            .map(|(&x, p)| p * x)
            .sum()
    }

    /// `(value, probability)` pairs sorted ascending by value.
    fn sorted_atoms(&self) -> Vec<(T, T)> {
        let mut atoms: Vec<(T, T)> = self
            .values
            .iter()
            .copied()
            .zip(self.probabilities())
            .collect();
        atoms.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
        atoms
    }
}

/// How an empirical quantile is read off the sorted samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum QuantileMethod {
    /// `inf { z : F̂(z) ≥ α }`, always one of the samples.
    #[default]
    LowerOrderStat,
    /// Linear interpolation between order statistics (numpy's default).
    LinearInterpolation,
}

impl QuantileMethod {
    pub fn name(self) -> &'static str {
        match self {
            QuantileMethod::LowerOrderStat => "lower_order_stat",
            QuantileMethod::LinearInterpolation => "linear_interpolation",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "lower_order_stat" | "lower" => Some(QuantileMethod::LowerOrderStat),
            "linear_interpolation" | "linear" => Some(QuantileMethod::LinearInterpolation),
            _ => None,
        }
    }
}

/// Coherence and policy-gradient properties of a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricFlags {
    pub coherent: bool,
    pub pg_unbiased: bool,
    pub pg_double_sampling: bool,
}

/// The nine measures of variability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricKind {
    Variance,
    GiniDev,
    MeanDev,
    MeanMedianDev,
    Std,
    /// `q_α − q_{1−α}` for `α ∈ [½, 1)`.
    Iqr {
        alpha: f64,
    },
    /// Lower-tail CVaR deviation at level `α ∈ (0, 1)`.
    CVaRDev {
        alpha: f64,
    },
    SemiVar,
    SemiStd,
}

impl MetricKind {
    /// All kinds, with the quantile levels used by the maze experiments.
    pub const ALL: [MetricKind; 9] = [
        MetricKind::CVaRDev { alpha: 0.2 },
        MetricKind::GiniDev,
        MetricKind::Iqr { alpha: 0.9 },
        MetricKind::MeanDev,
        MetricKind::MeanMedianDev,
        MetricKind::Variance,
        MetricKind::Std,
        MetricKind::SemiVar,
        MetricKind::SemiStd,
    ];

    pub fn flags(self) -> MetricFlags {
        let (coherent, pg_unbiased, pg_double_sampling) = match self {
            MetricKind::CVaRDev { .. } => (true, false, false),
            MetricKind::GiniDev => (true, true, false),
            MetricKind::Iqr { .. } => (false, false, false),
            MetricKind::MeanDev => (true, true, true),
            MetricKind::MeanMedianDev => (false, false, false),
            MetricKind::Variance => (false, true, true),
            MetricKind::Std => (true, true, true),
            MetricKind::SemiVar => (false, true, true),
            MetricKind::SemiStd => (true, true, true),
        };
        MetricFlags {
            coherent,
            pg_unbiased,
            pg_double_sampling,
        }
    }

    pub fn is_coherent(self) -> bool {
        self.flags().coherent
    }

    pub fn pg_unbiased(self) -> bool {
        self.flags().pg_unbiased
    }

    pub fn needs_double_sampling(self) -> bool {
        self.flags().pg_double_sampling
    }

    pub fn alpha(self) -> Option<f64> {
        match self {
            MetricKind::Iqr { alpha } | MetricKind::CVaRDev { alpha } => Some(alpha),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Variance => "variance",
            MetricKind::GiniDev => "gini_dev",
            MetricKind::MeanDev => "mean_dev",
            MetricKind::MeanMedianDev => "mean_median_dev",
            MetricKind::Std => "std",
            MetricKind::Iqr { .. } => "iqr",
            MetricKind::CVaRDev { .. } => "cvar_dev",
            MetricKind::SemiVar => "semi_var",
            MetricKind::SemiStd => "semi_std",
        }
    }

    /// Builds a kind from its name and optional quantile level, validating the level.
    pub fn from_parts(name: &str, alpha: Option<f64>) -> Result<Self> {
        let needs_alpha = |a: Option<f64>| {
            a.ok_or_else(|| Error::invalid(format!("metric `{name}` requires alpha")))
        };
        let kind = match name {
            "variance" => MetricKind::Variance,
            "gini_dev" => MetricKind::GiniDev,
            "mean_dev" => MetricKind::MeanDev,
            "mean_median_dev" => MetricKind::MeanMedianDev,
            "std" => MetricKind::Std,
            "iqr" => MetricKind::Iqr {
                alpha: needs_alpha(alpha)?,
            },
            "cvar_dev" => MetricKind::CVaRDev {
                alpha: needs_alpha(alpha)?,
            },
            "semi_var" => MetricKind::SemiVar,
            "semi_std" => MetricKind::SemiStd,
            other => return Err(Error::invalid(format!("unknown metric `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(self) -> Result<()> {
        match self {
            MetricKind::Iqr { alpha } if !(0.5..1.0).contains(&alpha) => Err(Error::invalid(
                format!("IQR alpha must lie in [0.5, 1), got {alpha}"),
            )),
            MetricKind::CVaRDev { alpha } if !(alpha > 0.0 && alpha < 1.0) => Err(Error::invalid(
                format!("CVaR alpha must lie in (0, 1), got {alpha}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.alpha() {
            Some(a) => write!(f, "{}(alpha={a})", self.name()),
            None => f.write_str(self.name()),
        }
    }
}

/// Slack used when comparing cumulative probabilities against a quantile level.
pub(crate) fn cum_tol<T: Scalar>() -> T {
    T::of(1e-12).max(T::epsilon() * T::of(64.0))
}

fn check_level<T: Scalar>(alpha: T) -> Result<()> {
    if alpha > T::zero() && alpha < T::one() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "quantile level must lie in (0, 1), got {alpha}"
        )))
    }
}

fn sorted_values<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    xs
}

/// Quantile of an unweighted batch.
pub fn empirical_quantile<T: Scalar>(
    batch: &SampleBatch<T>,
    alpha: T,
    method: QuantileMethod,
) -> Result<T> {
    check_level(alpha)?;
    if batch.is_weighted() {
        return Err(Error::invalid(
            "empirical_quantile expects an unweighted batch",
        ));
    }
    let xs = sorted_values(batch.values());
    Ok(quantile_of_sorted(&xs, alpha, method))
}

pub(crate) fn quantile_of_sorted<T: Scalar>(xs: &[T], alpha: T, method: QuantileMethod) -> T {
    let n = xs.len();
    let nf = T::of_usize(n);
    match method {
        QuantileMethod::LowerOrderStat => {
            // smallest k with (k + 1) / n >= alpha
            let target = (alpha * nf - cum_tol::<T>() * nf).ceil();
            let k = target.to_usize().unwrap_or(0).saturating_sub(1).min(n - 1);
            xs[k]
        }
        QuantileMethod::LinearInterpolation => {
            let mut h = alpha * T::of_usize(n - 1);
            if (h - h.round()).abs() <= cum_tol::<T>() * nf {
                h = h.round();
            }
            let lo = h.floor().to_usize().unwrap_or(0).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            let frac = h - T::of_usize(lo);
            xs[lo] + frac * (xs[hi] - xs[lo])
        }
    }
}

/// IS-weighted quantile: normalized cumulative weights are attached to the
/// sorted samples (inclusive), and `alpha` is linearly interpolated on that
/// grid, clamping to the extreme samples outside it.
pub fn weighted_quantile<T: Scalar>(batch: &SampleBatch<T>, alpha: T) -> Result<T> {
    check_level(alpha)?;
    if !batch.is_weighted() {
        return Err(Error::invalid("weighted_quantile expects a weighted batch"));
    }
    let atoms = batch.sorted_atoms();
    let mut cum = Vec::with_capacity(atoms.len());
    let mut acc = T::zero();
    for &(_, p) in &atoms {
        acc += p;
        cum.push(acc);
    }
    let Some(j) = cum.iter().position(|&c| c >= alpha) else {
        return Ok(atoms[atoms.len() - 1].0);
    };
    if j == 0 {
        return Ok(atoms[0].0);
    }
    let (c0, c1) = (cum[j - 1], cum[j]);
    let (x0, x1) = (atoms[j - 1].0, atoms[j].0);
    if c1 <= c0 {
        return Ok(x1);
    }
    Ok(x0 + (alpha - c0) / (c1 - c0) * (x1 - x0))
}

/// `inf { z : F̂(z) ≥ α }` under the weighted empirical measure.
fn weighted_lower_quantile<T: Scalar>(batch: &SampleBatch<T>, alpha: T) -> T {
    let atoms = batch.sorted_atoms();
    let tol = cum_tol::<T>();
    let mut acc = T::zero();
    for &(x, p) in &atoms {
        acc += p;
        if acc >= alpha - tol {
            return x;
        }
    }
    atoms[atoms.len() - 1].0
}

/// Quantile of any batch: unweighted batches use [`empirical_quantile`];
/// weighted batches use the weighted inf-definition or [`weighted_quantile`].
pub fn quantile<T: Scalar>(batch: &SampleBatch<T>, alpha: T, method: QuantileMethod) -> Result<T> {
    check_level(alpha)?;
    match (batch.is_weighted(), method) {
        (false, _) => empirical_quantile(batch, alpha, method),
        (true, QuantileMethod::LowerOrderStat) => Ok(weighted_lower_quantile(batch, alpha)),
        (true, QuantileMethod::LinearInterpolation) => weighted_quantile(batch, alpha),
    }
}

/// Gaussian kernel density estimate with the one-dimensional Silverman bandwidth
/// `h = σ̂ · (3 n_eff / 4)^(−1/5)`; `σ̂` is the (weighted) sample standard
/// deviation with Bessel correction and `n_eff = 1 / Σ p_i²`.
pub fn kde_density_at<T: Scalar>(batch: &SampleBatch<T>, point: T) -> Result<T> {
    if batch.len() < 2 {
        return Err(Error::invalid("KDE needs at least two samples"));
    }
    let probs = batch.probabilities();
    let xs = batch.values();
    let mean: T = xs.iter().zip(&probs).map(|(&x, &p)| p * x).sum();
    let sum_p2: T = probs.iter().map(|&p| p * p).sum();
    let spread: T = xs
        .iter()
        .zip(&probs)
        .map(|(&x, &p)| p * (x - mean) * (x - mean))
        .sum();
    let var = spread / (T::one() - sum_p2);
    let sd = var.sqrt();
    let scale = xs.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
    if !(sd > T::of(1e3) * T::epsilon() * scale) || sd == T::zero() {
        return Err(Error::DegenerateDensity(format!(
            "sample standard deviation {sd} is zero"
        )));
    }
    let n_eff = T::one() / sum_p2;
    let factor = (T::of(0.75) * n_eff).powf(T::of(-0.2));
    let h = sd * factor;
    let norm = T::one() / (h * T::of((2.0 * std::f64::consts::PI).sqrt()));
    let half = T::of(0.5);
    let density: T = xs
        .iter()
        .zip(&probs)
        .map(|(&x, &p)| {
            let z = (point - x) / h;
            p * norm * (-half * z * z).exp()
        })
        .sum();
    if density > T::zero() && density.is_finite() {
        Ok(density)
    } else {
        Err(Error::DegenerateDensity(format!(
            "density at {point} underflowed"
        )))
    }
}

/// Average of the lowest `alpha` probability mass.
pub fn cvar_lower<T: Scalar>(batch: &SampleBatch<T>, alpha: T) -> Result<T> {
    check_level(alpha)?;
    Ok(tail_mean(batch.sorted_atoms().into_iter(), alpha))
}

/// Average of the highest `alpha` probability mass.
pub fn cvar_upper<T: Scalar>(batch: &SampleBatch<T>, alpha: T) -> Result<T> {
    check_level(alpha)?;
    Ok(tail_mean(batch.sorted_atoms().into_iter().rev(), alpha))
}

fn tail_mean<T: Scalar>(atoms: impl Iterator<Item = (T, T)>, alpha: T) -> T {
    let mut remaining = alpha;
    let mut acc = T::zero();
    for (x, p) in atoms {
        if remaining <= T::zero() {
            break;
        }
        let take = p.min(remaining);
        acc += take * x;
        remaining -= take;
    }
    acc / alpha
}

/// Upper-tail CVaR deviation `CVaR^∧_α − mean`; only used to check coherence.
pub fn cvar_deviation_upper<T: Scalar>(batch: &SampleBatch<T>, alpha: T) -> Result<T> {
    Ok((cvar_upper(batch, alpha)? - batch.mean()).max(T::zero()))
}

/// Metric of the (weighted) empirical measure of `batch`.
pub fn empirical_metric<T: Scalar>(
    kind: MetricKind,
    batch: &SampleBatch<T>,
    qmethod: QuantileMethod,
) -> Result<T> {
    kind.validate()?;
    let probs = batch.probabilities();
    let xs = batch.values();
    let mean: T = xs.iter().zip(&probs).map(|(&x, &p)| p * x).sum();
    let variance = || -> T {
        xs.iter()
            .zip(&probs)
            .map(|(&x, &p)| p * (x - mean) * (x - mean))
            .sum()
    };
    let semi_variance = || -> T {
        xs.iter()
            .zip(&probs)
            .filter(|(&x, _)| x <= mean)
            .map(|(&x, &p)| p * (x - mean) * (x - mean))
            .sum()
    };
    let value = match kind {
        MetricKind::Variance => variance(),
        MetricKind::Std => variance().sqrt(),
        MetricKind::SemiVar => semi_variance(),
        MetricKind::SemiStd => semi_variance().sqrt(),
        MetricKind::MeanDev => xs
            .iter()
            .zip(&probs)
            .map(|(&x, &p)| p * (x - mean).abs())
            .sum(),
        MetricKind::GiniDev => gini_deviation(batch, mean),
        MetricKind::MeanMedianDev => {
            let median = quantile(batch, T::of(0.5), qmethod)?;
            xs.iter()
                .zip(&probs)
                .map(|(&x, &p)| p * (x - median).abs())
                .sum()
        }
        MetricKind::Iqr { alpha } => {
            let a = T::of(alpha);
            quantile(batch, a, qmethod)? - quantile(batch, T::one() - a, qmethod)?
        }
        MetricKind::CVaRDev { alpha } => mean - cvar_lower(batch, T::of(alpha))?,
    };
    Ok(value.max(T::zero()))
}

/// `Σ_{i<j} p_i p_j (x_(j) − x_(i))` over sorted, centred samples; equal to
/// `½ Σ_i Σ_j p_i p_j |x_i − x_j|`.
fn gini_deviation<T: Scalar>(batch: &SampleBatch<T>, mean: T) -> T {
    let mut below_mass = T::zero();
    let mut below_moment = T::zero();
    let mut acc = T::zero();
    for (x, p) in batch.sorted_atoms() {
        let c = x - mean;
        acc += p * (c * below_mass - below_moment);
        below_mass += p;
        below_moment += p * c;
    }
    acc
}

/// Exact metric of a finite atom distribution, same conventions as [`empirical_metric`].
pub fn exact_metric_on_atoms<T: Scalar>(
    kind: MetricKind,
    dist: &AtomDistribution<T>,
    qmethod: QuantileMethod,
) -> Result<T> {
    dist.check_normalized()?;
    empirical_metric(kind, &dist.to_batch()?, qmethod)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const LOS: QuantileMethod = QuantileMethod::LowerOrderStat;
    const LIN: QuantileMethod = QuantileMethod::LinearInterpolation;

    fn batch(xs: &[f64]) -> SampleBatch<f64> {
        SampleBatch::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn identical_samples_have_zero_dispersion() {
        let b = batch(&[3.7, 3.7, 3.7]);
        for kind in MetricKind::ALL {
            for q in [LOS, LIN] {
                assert_eq!(empirical_metric(kind, &b, q).unwrap(), 0.0, "{kind}");
            }
        }
    }

    #[test]
    fn two_point_batch_values() {
        let b = batch(&[0.0, 1.0]);
        let m = |k| empirical_metric(k, &b, LOS).unwrap();
        assert_relative_eq!(m(MetricKind::GiniDev), 0.25);
        assert_relative_eq!(m(MetricKind::Variance), 0.25);
        assert_relative_eq!(m(MetricKind::MeanDev), 0.5);
        assert_relative_eq!(m(MetricKind::SemiVar), 0.125);
        assert_relative_eq!(m(MetricKind::SemiStd), 0.125f64.sqrt());
        assert_relative_eq!(m(MetricKind::Std), 0.5);
    }

    #[test]
    fn iqr_and_cvar_on_four_points() {
        let b = batch(&[1.0, 2.0, 3.0, 4.0]);
        let iqr = empirical_metric(MetricKind::Iqr { alpha: 0.75 }, &b, LIN).unwrap();
        assert_relative_eq!(iqr, 1.5, epsilon = 1e-12);
        let cd = empirical_metric(MetricKind::CVaRDev { alpha: 0.5 }, &b, LIN).unwrap();
        assert_relative_eq!(cd, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cvar_splits_fractional_atoms() {
        // lowest 0.3 of mass: 0.25 at 1 and 0.05 at 2
        let b = batch(&[1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(
            cvar_lower(&b, 0.3).unwrap(),
            (0.25 + 0.1) / 0.3,
            epsilon = 1e-12
        );
        assert_relative_eq!(cvar_upper(&b, 0.5).unwrap(), 3.5, epsilon = 1e-12);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(empirical_quantile(&batch(&[5.0]), 0.3, LOS).unwrap(), 5.0);
        assert_eq!(empirical_quantile(&batch(&[5.0]), 0.9, LIN).unwrap(), 5.0);
        let b = batch(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(empirical_quantile(&b, 0.5, LOS).unwrap(), 2.0);
        assert_eq!(empirical_quantile(&b, 0.5, LIN).unwrap(), 2.5);
        assert_relative_eq!(empirical_quantile(&b, 0.75, LIN).unwrap(), 3.25);
        assert_relative_eq!(empirical_quantile(&b, 0.25, LIN).unwrap(), 1.75);
    }

    #[test]
    fn lower_order_stat_tolerates_rounding_in_alpha_times_n() {
        // 0.7 * 10 = 7.000000000000001 in binary; F̂(x_(7)) = 0.7 must qualify
        let xs: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(empirical_quantile(&batch(&xs), 0.7, LOS).unwrap(), 7.0);
    }

    #[test]
    fn empirical_quantile_rejects_bad_input() {
        assert!(empirical_quantile(&batch(&[1.0]), 0.0, LOS).is_err());
        assert!(empirical_quantile(&batch(&[1.0]), 1.0, LOS).is_err());
        let w = SampleBatch::with_weights(vec![1.0, 2.0], vec![1.0, 1.0]).unwrap();
        assert!(empirical_quantile(&w, 0.5, LOS).is_err());
        assert!(SampleBatch::<f64>::new(vec![]).is_err());
        assert!(SampleBatch::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn weighted_quantile_examples() {
        let skewed = SampleBatch::with_weights(vec![0.0, 10.0], vec![0.9, 0.1]).unwrap();
        assert_eq!(weighted_quantile(&skewed, 0.5).unwrap(), 0.0);
        let even = SampleBatch::with_weights(vec![10.0, 0.0], vec![0.5, 0.5]).unwrap();
        // grid (0.5 -> 0, 1.0 -> 10); golden value
        assert_eq!(weighted_quantile(&even, 0.75).unwrap(), 5.0);
        assert_eq!(weighted_quantile(&even, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn weighted_quantile_equal_weights_interpolate_on_k_over_n_grid() {
        let xs = [3.0, -1.0, 7.5, 2.0, 0.5];
        let w = SampleBatch::with_weights(xs.to_vec(), vec![2.0; 5]).unwrap();
        let sorted = sorted_values(&xs);
        for alpha in [0.05, 0.2, 0.33, 0.5, 0.61, 0.8, 0.97] {
            // grid point k/n carries x_(k), k = 1..n
            let pos: f64 = alpha * 5.0;
            let expected = if pos <= 1.0 {
                sorted[0]
            } else {
                let k = pos.floor() as usize;
                let frac = pos - k as f64;
                sorted[k - 1] + frac * (sorted[k.min(4)] - sorted[k - 1])
            };
            assert_relative_eq!(
                weighted_quantile(&w, alpha).unwrap(),
                expected,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn zero_weights_are_rejected() {
        assert!(SampleBatch::with_weights(vec![0.0, 1.0], vec![0.0, 0.0]).is_err());
        assert!(SampleBatch::with_weights(vec![0.0, 1.0], vec![1.0, -0.5]).is_err());
        assert!(weighted_quantile(&batch(&[0.0, 1.0]), 0.5).is_err());
    }

    #[test]
    fn kde_symmetric_pair() {
        let b = batch(&[-1.0, 1.0]);
        let d = kde_density_at(&b, 0.0).unwrap();
        let sd = 2.0f64.sqrt();
        let h = sd * (0.75f64 * 2.0).powf(-0.2);
        let one_kernel = (-0.5 / (h * h)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt());
        assert_relative_eq!(d, one_kernel, epsilon = 1e-14);
        assert_relative_eq!(
            kde_density_at(&b, 0.3).unwrap(),
            kde_density_at(&b, -0.3).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn kde_degenerate_and_small_batches() {
        assert!(matches!(
            kde_density_at(&batch(&[0.0, 0.0, 0.0]), 0.0),
            Err(Error::DegenerateDensity(_))
        ));
        assert!(matches!(
            kde_density_at(&batch(&[-95.3, -95.3]), -95.3),
            Err(Error::DegenerateDensity(_))
        ));
        assert!(kde_density_at(&batch(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn kde_recovers_normal_peak() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let d = kde_density_at(&batch(&xs), 0.0).unwrap();
        let truth = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((d - truth).abs() < 0.05 * truth, "{d}");
    }

    #[test]
    fn alpha_validation() {
        let b = batch(&[1.0, 2.0]);
        assert!(empirical_metric(MetricKind::Iqr { alpha: 0.4 }, &b, LOS).is_err());
        assert!(empirical_metric(MetricKind::CVaRDev { alpha: 1.0 }, &b, LOS).is_err());
        assert!(MetricKind::from_parts("cvar_dev", None).is_err());
        assert!(MetricKind::from_parts("iqr", Some(1.2)).is_err());
        assert!(MetricKind::from_parts("nope", None).is_err());
        assert_eq!(
            MetricKind::from_parts("iqr", Some(0.9)).unwrap(),
            MetricKind::Iqr { alpha: 0.9 }
        );
    }

    #[test]
    fn flags_match_summary_table() {
        let table = [
            ("cvar_dev", (true, false, false)),
            ("gini_dev", (true, true, false)),
            ("iqr", (false, false, false)),
            ("mean_dev", (true, true, true)),
            ("mean_median_dev", (false, false, false)),
            ("variance", (false, true, true)),
            ("std", (true, true, true)),
            ("semi_var", (false, true, true)),
            ("semi_std", (true, true, true)),
        ];
        for (name, (c, u, d)) in table {
            let kind = MetricKind::from_parts(name, Some(0.75)).unwrap();
            let f = kind.flags();
            assert_eq!(
                (f.coherent, f.pg_unbiased, f.pg_double_sampling),
                (c, u, d),
                "{name}"
            );
        }
    }

    #[test]
    fn exact_atoms_examples() {
        let single = AtomDistribution::new(vec![(4.2, 1.0)]).unwrap();
        for kind in MetricKind::ALL {
            assert_eq!(exact_metric_on_atoms(kind, &single, LOS).unwrap(), 0.0);
        }
        let half = AtomDistribution::new(vec![(0.0, 0.5), (1.0, 0.5)]).unwrap();
        for kind in MetricKind::ALL {
            assert_relative_eq!(
                exact_metric_on_atoms(kind, &half, LOS).unwrap(),
                empirical_metric(kind, &batch(&[0.0, 1.0]), LOS).unwrap(),
                epsilon = 1e-12
            );
        }
        for p in [0.1, 0.37, 0.5, 0.9] {
            let d = AtomDistribution::new(vec![(0.0, p), (1.0, 1.0 - p)]).unwrap();
            assert_relative_eq!(
                exact_metric_on_atoms(MetricKind::GiniDev, &d, LOS).unwrap(),
                p * (1.0 - p),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn works_in_single_precision() {
        let b = SampleBatch::new(vec![0.0f32, 1.0]).unwrap();
        let gd = empirical_metric(MetricKind::GiniDev, &b, LOS).unwrap();
        assert!((gd - 0.25).abs() < 1e-6);
        let q = empirical_quantile(&b, 0.5f32, LOS).unwrap();
        assert_eq!(q, 0.0);
    }
}
