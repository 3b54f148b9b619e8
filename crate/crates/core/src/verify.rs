//! Property and Monte Carlo suites with pass/fail results, shared by the
//! `verify` command and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::grad_estimators::{EstimatorConfig, UpperBound};
use crate::oracle::{
    estimator_bias_curve, estimator_moments, finite_diff_gradient, gini_deviation_choquet,
    gini_deviation_double_sum, log_log_slope, mean_median_dev_choquet, mean_median_dev_direct,
    AtomDistribution, Bandit, BiasPoint, DEFAULT_FD_STEP, DEFAULT_PATH_BUDGET,
};
use crate::risk_metrics::{
    cvar_deviation_upper, empirical_metric, exact_metric_on_atoms, MetricKind, QuantileMethod,
    SampleBatch,
};
use crate::softmax_policy::SoftmaxPolicy;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(
        suite: &'static str,
        name: impl Into<String>,
        passed: bool,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub const COHERENCE_TOL: f64 = 1e-9;

/// Bernoulli bandit used for the unbiasedness checks: arm 0 pays 0, arm 1 pays 1,
/// so the return is Bernoulli(p) with p = π(arm 1).
pub fn unbiasedness_bandit() -> (Bandit, SoftmaxPolicy<f64>) {
    let bandit = Bandit::bernoulli(&[0.0, 1.0]).expect("valid arms");
    let policy = SoftmaxPolicy::from_theta(1, 2, vec![0.0, 0.5]).expect("valid logits");
    (bandit, policy)
}

/// Metrics whose estimators are claimed unbiased for a fixed upper bound.
pub const UNBIASED_METRICS: [MetricKind; 4] = [
    MetricKind::GiniDev,
    MetricKind::MeanDev,
    MetricKind::Variance,
    MetricKind::SemiVar,
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnbiasednessRow {
    pub metric: String,
    pub n: usize,
    pub estimate: Vec<f64>,
    pub std_error: Vec<f64>,
    pub oracle: Vec<f64>,
    /// `max_k |estimate_k − oracle_k| / se_k`.
    pub max_z: f64,
}

/// Mean of each estimator over `reps` batches against the finite-difference
/// gradient, for every batch size; a row passes when every coordinate lies
/// within 3 standard errors.
pub fn unbiasedness_rows(
    metric: MetricKind,
    sizes: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<UnbiasednessRow>> {
    let (bandit, policy) = unbiasedness_bandit();
    let oracle = finite_diff_gradient(
        metric,
        &bandit,
        &policy,
        DEFAULT_FD_STEP,
        DEFAULT_PATH_BUDGET,
    )?;
    let config = EstimatorConfig {
        qmethod: QuantileMethod::LowerOrderStat,
        upper_bound: UpperBound::Fixed(1.0),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sizes
        .iter()
        .map(|&n| {
            let m = estimator_moments(metric, &bandit, &policy, n, reps, &config, &mut rng)?;
            let max_z = m
                .mean
                .iter()
                .zip(&m.std_error)
                .zip(&oracle)
                .map(|((e, s), o)| (e - o).abs() / s.max(f64::MIN_POSITIVE))
                .fold(0.0, f64::max);
            Ok(UnbiasednessRow {
                metric: metric.name().to_string(),
                n,
                estimate: m.mean,
                std_error: m.std_error,
                oracle: oracle.clone(),
                max_z,
            })
        })
        .collect()
}

pub fn estimator_suite(reps: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for metric in UNBIASED_METRICS {
        for row in unbiasedness_rows(metric, &[4, 8], reps, seed)? {
            out.push(CheckResult::new(
                "estimators",
                format!("{} unbiased n={}", row.metric, row.n),
                row.max_z <= 3.0,
                format!(
                    "estimate {:?} ± {:?} vs oracle {:?} (max z {:.2})",
                    row.estimate, row.std_error, row.oracle, row.max_z
                ),
            ));
        }
    }
    Ok(out)
}

/// Two-arm bandit with near-continuous returns: discretized normals
/// `N(0, 1)` and `N(1, 2²)` on 4096-point grids.
pub fn bias_rate_bandit() -> (Bandit, SoftmaxPolicy<f64>) {
    let arms = vec![
        AtomDistribution::discretized_normal(0.0, 1.0, 4096, 6.0).expect("valid arm"),
        AtomDistribution::discretized_normal(1.0, 2.0, 4096, 6.0).expect("valid arm"),
    ];
    let policy = SoftmaxPolicy::from_theta(1, 2, vec![0.0, 0.3]).expect("valid logits");
    (Bandit::new(arms).expect("two arms"), policy)
}

pub const BIAS_RATE_SIZES: [usize; 4] = [8, 32, 128, 512];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasRate {
    pub metric: String,
    pub sizes: Vec<usize>,
    pub error_norm: Vec<f64>,
    pub error_se: Vec<f64>,
    pub slope: f64,
    /// Each error is at most the previous one plus two combined standard errors.
    pub monotone: bool,
}

impl BiasRate {
    pub fn slope_ok(&self) -> bool {
        (-1.0..=-0.25).contains(&self.slope)
    }
}

pub fn bias_rate(metric: MetricKind, sizes: &[usize], reps: usize, seed: u64) -> Result<BiasRate> {
    let (bandit, policy) = bias_rate_bandit();
    let truth = finite_diff_gradient(
        metric,
        &bandit,
        &policy,
        DEFAULT_FD_STEP,
        DEFAULT_PATH_BUDGET,
    )?;
    let config = EstimatorConfig {
        qmethod: QuantileMethod::LowerOrderStat,
        upper_bound: UpperBound::BatchMax,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let curve = estimator_bias_curve(
        metric, &bandit, &policy, &truth, sizes, reps, &config, &mut rng,
    )?;
    Ok(summarize_curve(metric, &curve))
}

fn summarize_curve(metric: MetricKind, curve: &[BiasPoint]) -> BiasRate {
    let xs: Vec<f64> = curve.iter().map(|p| p.n as f64).collect();
    let ys: Vec<f64> = curve.iter().map(|p| p.error_norm).collect();
    let ses: Vec<f64> = curve.iter().map(|p| p.error_se).collect();
    let monotone = ys
        .windows(2)
        .zip(ses.windows(2))
        .all(|(y, s)| y[1] <= y[0] + 2.0 * s[0].hypot(s[1]));
    BiasRate {
        metric: metric.name().to_string(),
        sizes: curve.iter().map(|p| p.n).collect(),
        slope: log_log_slope(&xs, &ys).unwrap_or(f64::NAN),
        error_norm: ys,
        error_se: ses,
        monotone,
    }
}

pub fn bias_rate_suite(reps: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for metric in [
        MetricKind::MeanMedianDev,
        MetricKind::CVaRDev { alpha: 0.2 },
    ] {
        let r = bias_rate(metric, &BIAS_RATE_SIZES, reps, seed)?;
        out.push(CheckResult::new(
            "oracle",
            format!("{} bias rate", r.metric),
            r.slope_ok() && r.monotone,
            format!(
                "errors {:?} (se {:?}), slope {:.3}, monotone {}",
                r.error_norm, r.error_se, r.slope, r.monotone
            ),
        ));
    }
    Ok(out)
}

/// A variability functional evaluated on an equally weighted sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoherenceTarget {
    Metric(MetricKind),
    UpperCVaRDev(f64),
}

impl CoherenceTarget {
    pub fn name(&self) -> String {
        match self {
            CoherenceTarget::Metric(k) => k.name().to_string(),
            CoherenceTarget::UpperCVaRDev(_) => "upper_cvar_dev".to_string(),
        }
    }

    pub fn eval(&self, xs: &[f64]) -> Result<f64> {
        let batch = SampleBatch::new(xs.to_vec())?;
        match *self {
            CoherenceTarget::Metric(k) => {
                empirical_metric(k, &batch, QuantileMethod::LowerOrderStat)
            }
            CoherenceTarget::UpperCVaRDev(alpha) => cvar_deviation_upper(&batch, alpha),
        }
    }
}

pub const COHERENT_TARGETS: [CoherenceTarget; 6] = [
    CoherenceTarget::Metric(MetricKind::GiniDev),
    CoherenceTarget::Metric(MetricKind::MeanDev),
    CoherenceTarget::Metric(MetricKind::MeanMedianDev),
    CoherenceTarget::Metric(MetricKind::Std),
    CoherenceTarget::Metric(MetricKind::SemiStd),
    CoherenceTarget::UpperCVaRDev(0.2),
];

/// Largest violations of the three axioms over random paired batches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct AxiomViolations {
    pub location: f64,
    pub homogeneity: f64,
    pub subadditivity: f64,
}

pub fn axiom_violations(
    target: CoherenceTarget,
    trials: usize,
    seed: u64,
) -> Result<AxiomViolations> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = AxiomViolations::default();
    for _ in 0..trials {
        let n = rng.random_range(2..=40);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let shift = rng.random_range(-50.0..50.0);
        let scale = rng.random_range(0.01..10.0);
        let dx = target.eval(&x)?;
        let dy = target.eval(&y)?;
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        worst.location = worst.location.max((target.eval(&shifted)? - dx).abs());
        worst.homogeneity = worst
            .homogeneity
            .max((target.eval(&scaled)? - scale * dx).abs());
        worst.subadditivity = worst.subadditivity.max(target.eval(&sum)? - dx - dy);
    }
    Ok(worst)
}

/// Returns `(V(2X), 2·V(X))` for a pinned sample; unequal values witness that
/// variance is not positively homogeneous.
pub fn variance_homogeneity_witness() -> Result<(f64, f64)> {
    let x = [0.0, 1.0];
    let v = |xs: &[f64]| {
        empirical_metric(
            MetricKind::Variance,
            &SampleBatch::new(xs.to_vec())?,
            QuantileMethod::LowerOrderStat,
        )
    };
    Ok((v(&[0.0, 2.0])?, 2.0 * v(&x)?))
}

/// Returns `(IQR(X+Y), IQR(X) + IQR(Y))` for pinned paired samples; the first
/// exceeding the second witnesses that the inter-quantile range is not
/// sub-additive.
pub fn iqr_subadditivity_witness() -> Result<(f64, f64)> {
    let mut x = [0.0; 10];
    let mut y = [0.0; 10];
    x[0] = 1.0;
    y[1] = 1.0;
    let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
    let iqr = |xs: &[f64]| {
        empirical_metric(
            MetricKind::Iqr { alpha: 0.9 },
            &SampleBatch::new(xs.to_vec())?,
            QuantileMethod::LowerOrderStat,
        )
    };
    Ok((iqr(&sum)?, iqr(&x)? + iqr(&y)?))
}

/// Random atom distribution with 1 to `max_atoms` atoms.
pub fn random_atoms<R: Rng + ?Sized>(rng: &mut R, max_atoms: usize) -> AtomDistribution<f64> {
    let m = rng.random_range(1..=max_atoms);
    let values: Vec<f64> = (0..m).map(|_| rng.random_range(-20.0..20.0)).collect();
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut probs: Vec<f64> = raw.iter().map(|p| p / total).collect();
    let head: f64 = probs[..m - 1].iter().sum();
    probs[m - 1] = 1.0 - head;
    AtomDistribution::new(values.into_iter().zip(probs).collect())
        .expect("normalized by construction")
}

/// `(max |GD_choquet − GD_double_sum|, max |GD_choquet − GD_exact|,
///   max |MMD_choquet − MMD_direct|, max |MMD_choquet − MMD_exact|)`.
pub fn quantile_representation_gaps(trials: usize, seed: u64) -> Result<[f64; 4]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaps = [0.0f64; 4];
    for _ in 0..trials {
        let d = random_atoms(&mut rng, 50);
        let gd = gini_deviation_choquet(&d);
        let mmd = mean_median_dev_choquet(&d);
        let los = QuantileMethod::LowerOrderStat;
        let candidates = [
            (gd - gini_deviation_double_sum(&d)).abs(),
            (gd - exact_metric_on_atoms(MetricKind::GiniDev, &d, los)?).abs(),
            (mmd - mean_median_dev_direct(&d)?).abs(),
            (mmd - exact_metric_on_atoms(MetricKind::MeanMedianDev, &d, los)?).abs(),
        ];
        for (g, c) in gaps.iter_mut().zip(candidates) {
            *g = g.max(c);
        }
    }
    Ok(gaps)
}

/// Smallest `STD − √3·GD` over random atom distributions (non-negative when
/// the bound holds).
pub fn glasser_margin(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let los = QuantileMethod::LowerOrderStat;
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let d = random_atoms(&mut rng, 50);
        let std = exact_metric_on_atoms(MetricKind::Std, &d, los)?;
        let gd = exact_metric_on_atoms(MetricKind::GiniDev, &d, los)?;
        worst = worst.min(std - 3f64.sqrt() * gd);
    }
    Ok(worst)
}

pub fn coherence_suite(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for target in COHERENT_TARGETS {
        let v = axiom_violations(target, trials, seed)?;
        for (axiom, value) in [
            ("location invariance", v.location),
            ("positive homogeneity", v.homogeneity),
            ("sub-additivity", v.subadditivity),
        ] {
            out.push(CheckResult::new(
                "coherence",
                format!("{} {axiom}", target.name()),
                value <= COHERENCE_TOL,
                format!("worst violation {value:.3e}"),
            ));
        }
    }
    let (v2x, two_vx) = variance_homogeneity_witness()?;
    out.push(CheckResult::new(
        "coherence",
        "variance homogeneity witness",
        (v2x - two_vx).abs() > 1e-6,
        format!("V(2X) = {v2x}, 2V(X) = {two_vx}"),
    ));
    let (sum, parts) = iqr_subadditivity_witness()?;
    out.push(CheckResult::new(
        "coherence",
        "iqr sub-additivity witness",
        sum > parts + 1e-6,
        format!("IQR(X+Y) = {sum}, IQR(X)+IQR(Y) = {parts}"),
    ));
    let margin = glasser_margin(trials, seed)?;
    out.push(CheckResult::new(
        "coherence",
        "std ≥ √3·gini_dev",
        margin >= -COHERENCE_TOL,
        format!("smallest margin {margin:.3e}"),
    ));
    Ok(out)
}

pub fn quantile_representation_suite(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let gaps = quantile_representation_gaps(trials, seed)?;
    let names = [
        "gini_dev quantile form vs double sum",
        "gini_dev quantile form vs exact metric",
        "mean_median_dev quantile form vs E|X − median|",
        "mean_median_dev quantile form vs exact metric",
    ];
    Ok(names
        .iter()
        .zip(gaps)
        .map(|(name, gap)| {
            CheckResult::new(
                "oracle",
                *name,
                gap <= COHERENCE_TOL,
                format!("largest gap {gap:.3e}"),
            )
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Estimators,
    Coherence,
    Oracle,
    All,
}

impl Suite {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "estimators" => Some(Suite::Estimators),
            "coherence" => Some(Suite::Coherence),
            "oracle" => Some(Suite::Oracle),
            "all" => Some(Suite::All),
            _ => None,
        }
    }
}

/// Monte Carlo sizes of a suite run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteBudget {
    pub unbiased_reps: usize,
    pub bias_rate_reps: usize,
    pub property_trials: usize,
}

impl Default for SuiteBudget {
    fn default() -> Self {
        Self {
            unbiased_reps: 200_000,
            bias_rate_reps: 100_000,
            property_trials: 1_000,
        }
    }
}

pub fn run_suite(suite: Suite, budget: SuiteBudget, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Estimators | Suite::All) {
        out.extend(estimator_suite(budget.unbiased_reps, seed)?);
    }
    if matches!(suite, Suite::Coherence | Suite::All) {
        out.extend(coherence_suite(budget.property_trials, seed)?);
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        out.extend(quantile_representation_suite(budget.property_trials, seed)?);
        out.extend(bias_rate_suite(budget.bias_rate_reps, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn witnesses_hold() {
        let (a, b) = variance_homogeneity_witness().unwrap();
        assert_eq!((a, b), (1.0, 0.5));
        let (s, p) = iqr_subadditivity_witness().unwrap();
        assert_eq!((s, p), (1.0, 0.0));
    }

    #[test]
    fn coherent_targets_small_run() {
        for t in COHERENT_TARGETS {
            let v = axiom_violations(t, 50, 1).unwrap();
            assert!(
                v.location <= COHERENCE_TOL
                    && v.homogeneity <= COHERENCE_TOL
                    && v.subadditivity <= COHERENCE_TOL
            );
        }
    }

    #[test]
    fn random_atoms_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            random_atoms(&mut rng, 50).check_normalized().unwrap();
        }
    }

    #[test]
    fn suite_names() {
        assert_eq!(Suite::from_name("all"), Some(Suite::All));
        assert_eq!(Suite::from_name("everything"), None);
    }
}
