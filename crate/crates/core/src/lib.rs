//! Measures of variability for risk-averse policy optimization.
//!
//! The crate is organised bottom-up:
//!
//! | module | contents |
//! |--------|----------|
//! | [`risk_metrics`] | point estimators for the nine variability metrics, quantiles, KDE |
//! | [`grad_estimators`] | score-function gradients of the mean and of every metric |
//! | [`softmax_policy`] | tabular softmax policy, linear value baseline, optimizers |
//! | [`tabular_env`] | grid maze with a risky cell and configurable reward noise |
//! | [`trainers`] | mean-variability REINFORCE and PPO loops |
//! | [`oracle`] | exact return distributions and finite-difference ground truth |
//! | [`verify`] | property and bias suites shared by the CLI and the test suite |
//!
//! The numeric modules are generic over [`Scalar`] (`f32` or `f64`); the
//! `*64` aliases below fix the scalar to `f64`, which is what the simulator
//! and trainers use.

pub mod error;
pub mod grad_estimators;
pub mod oracle;
pub mod risk_metrics;
pub mod scalar;
pub mod softmax_policy;
pub mod tabular_env;
pub mod trainers;
pub mod verify;

pub use error::{Error, Result};
pub use grad_estimators::{
    DoubleSamplingSplit, EstimatorConfig, GradientBatch, GradientEstimate, UpperBound,
};
pub use oracle::AtomDistribution;
pub use risk_metrics::{MetricKind, QuantileMethod, SampleBatch};
pub use scalar::Scalar;
pub use softmax_policy::{OptimizerKind, OptimizerState, SoftmaxPolicy, ValueTable};
pub use tabular_env::{GridMaze, NoiseSpec, Trajectory};
pub use trainers::{IterationLog, TrainConfig};

pub type SampleBatch64 = SampleBatch<f64>;
pub type GradientBatch64 = GradientBatch<f64>;
pub type GradientEstimate64 = GradientEstimate<f64>;
pub type AtomDistribution64 = AtomDistribution<f64>;
pub type SoftmaxPolicy64 = SoftmaxPolicy<f64>;
pub type ValueTable64 = ValueTable<f64>;
pub type OptimizerState64 = OptimizerState<f64>;
