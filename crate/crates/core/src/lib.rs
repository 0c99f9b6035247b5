//! Estimation of discretely observed ergodic diffusions with prediction-based
//! estimating functions, together with the potential-operator machinery used
//! to compute their asymptotic variances.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod error;
pub mod function;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod simulate;
pub mod solver;
pub mod estimator;
pub mod potential;
pub mod experiment;

pub use error::{Error, Result};
pub use function::SmoothFunction;
pub use model::{
    generator_apply, generator_iterate, invariant_moment, kf_coefficient, CoxIngersollRoss,
    DiffusionModel, Interval, ModelConfig, OrnsteinUhlenbeck, ParamVector,
};
pub use simulate::{simulate_path, SamplePath, SamplingScheme};
pub use estimator::{
    gamma_limit, projection_coefficients, solve_onelag, solve_simple, w_limit, CoefficientMethod,
    EstimateResult, PredictorSpec, SolveOptions,
};
pub use experiment::{
    emit_report, run_clt_check, run_estimation_study, run_lln_check, ExperimentConfig, OutputFormat,
    StudyReport,
};
pub use potential::{
    avar_onelag, avar_simple, clt_variance, potential_closed_form, potential_pairing, Avar,
    AvarReport, PairingMethod, PotentialMCConfig,
};
