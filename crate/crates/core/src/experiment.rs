//! Replication studies over high-frequency sampling schedules.
//!
//! Every replication owns the RNG stream `r` under a seed derived from the
//! study seed and the schedule index, so results do not depend on thread
//! scheduling. Reports are assembled in replication order.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::estimator::{
    solve_onelag, solve_simple, CoefficientMethod, EstimateResult, PredictorSpec, SolveOptions,
};
use crate::function::SmoothFunction;
use crate::model::{invariant_moment, DiffusionModel, ModelConfig, ParamVector};
use crate::potential::{
    avar_onelag, avar_simple, clt_variance, Avar, AvarReport, PairingMethod, PotentialMCConfig,
};
use crate::quadrature::{mean_stderr, pairwise_sum_by};
use crate::rng::derive_seed;
use crate::simulate::{simulate_path, SamplePath, SamplingScheme};

/// Predictor function: a built-in name or polynomial coefficients
/// (constant term first).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    #[serde(default)]
    pub function: Option<String>,
    #[serde(default)]
    pub coefficients: Option<Vec<f64>>,
    #[serde(default)]
    pub q: usize,
}

impl PredictorConfig {
    pub fn function(&self) -> Result<SmoothFunction> {
        match (&self.function, &self.coefficients) {
            (Some(name), None) => match name.as_str() {
                "x" | "identity" => Ok(SmoothFunction::identity()),
                "x2" | "x^2" | "square" => Ok(SmoothFunction::square()),
                "x3" | "x^3" | "cube" => Ok(SmoothFunction::cube()),
                "1" | "one" | "constant" => Ok(SmoothFunction::constant(1.0)),
                other => Err(Error::Config(format!("unknown predictor function '{other}'"))),
            },
            (None, Some(c)) => {
                if c.is_empty() {
                    return Err(Error::Config("predictor coefficients are empty".into()));
                }
                Ok(SmoothFunction::polynomial(c.clone()))
            }
            (None, None) => Err(Error::Config("predictor needs 'function' or 'coefficients'".into())),
            (Some(_), Some(_)) => Err(Error::Config(
                "predictor takes either 'function' or 'coefficients', not both".into(),
            )),
        }
    }

    pub fn spec(&self) -> Result<PredictorSpec> {
        Ok(PredictorSpec::new(self.function()?, self.q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Simple,
    Onelag,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub n: usize,
    pub delta: f64,
}

impl ScheduleEntry {
    pub fn n_delta(&self) -> f64 {
        self.n as f64 * self.delta
    }

    pub fn n_delta_cubed(&self) -> f64 {
        self.n as f64 * self.delta.powi(3)
    }

    /// `nΔ³ < 1`.
    pub fn in_clt_regime(&self) -> bool {
        self.n_delta_cubed() < 1.0
    }
}

/// `Δₙ = c·n^{−1/2}` for each listed `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePreset {
    pub c: f64,
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub entries: Vec<ScheduleEntry>,
    #[serde(default)]
    pub preset: Option<SchedulePreset>,
}

impl ScheduleConfig {
    pub fn resolve(&self) -> Result<Vec<ScheduleEntry>> {
        let mut out = self.entries.clone();
        if let Some(p) = &self.preset {
            if !(p.c > 0.0) {
                return Err(Error::Config(format!("preset constant must be positive, got {}", p.c)));
            }
            out.extend(p.n.iter().map(|&n| ScheduleEntry {
                n,
                delta: p.c / (n as f64).sqrt(),
            }));
        }
        if out.is_empty() {
            return Err(Error::Config("schedule is empty".into()));
        }
        for e in &out {
            if e.n == 0 || !(e.delta > 0.0) {
                return Err(Error::Config(format!("invalid schedule entry n={}, delta={}", e.n, e.delta)));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingChoice {
    Analytic,
    MonteCarlo,
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvarConfig {
    #[serde(default)]
    pub method: PairingChoice,
    #[serde(default)]
    pub mc: PotentialMCConfig,
    /// Also evaluate the AVAR at each θ̂ (feasible coverage).
    #[serde(default = "default_true")]
    pub feasible: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AvarConfig {
    fn default() -> Self {
        AvarConfig {
            method: PairingChoice::Auto,
            mc: PotentialMCConfig::default(),
            feasible: true,
        }
    }
}

impl AvarConfig {
    pub fn pairing(&self) -> PairingMethod {
        match self.method {
            PairingChoice::Analytic => PairingMethod::Analytic,
            PairingChoice::MonteCarlo => PairingMethod::MonteCarlo(self.mc.clone()),
            PairingChoice::Auto => PairingMethod::Auto(self.mc.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

fn default_replications() -> usize {
    100
}

fn default_substeps() -> usize {
    10
}

/// A full study description, loadable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub predictor: PredictorConfig,
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub coefficient_method: Option<CoefficientMethod>,
    pub schedule: ScheduleConfig,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub seed: u64,
    /// Euler substeps per observation interval (models without exact transitions).
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Fallback value θ* when the simple estimating equation has no root in Θ;
    /// defaults to θ₀.
    #[serde(default)]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default)]
    pub avar: AvarConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Relative tolerance for the variance comparison in the CLT check.
    #[serde(default = "default_clt_tol")]
    pub clt_rel_tol: f64,
}

fn default_clt_tol() -> f64 {
    0.15
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        self.schedule.resolve()?;
        let spec = self.predictor.spec()?;
        match (self.estimator, spec.q) {
            (EstimatorKind::Simple, 0) | (EstimatorKind::Onelag, 1) => Ok(()),
            (kind, q) => Err(Error::Config(format!("estimator {kind:?} does not match lag order q = {q}"))),
        }
    }

    /// The path that replication `replication` of schedule entry
    /// `schedule_index` observes in a study.
    pub fn simulate_replication(&self, schedule_index: usize, replication: usize) -> Result<SamplePath> {
        let s = self.setup()?;
        let entry = s.schedule.get(schedule_index).ok_or_else(|| {
            Error::Config(format!("schedule index {schedule_index} out of range ({} entries)", s.schedule.len()))
        })?;
        replication_path(s.model.as_ref(), s.theta0.values(), entry, self, schedule_index, replication)
    }

    /// Estimate θ from an observed path with the configured estimator.
    pub fn estimate(&self, path: &SamplePath) -> Result<EstimateResult> {
        let s = self.setup()?;
        estimate_path(&s, path, self.estimator, self.coefficient_method)
    }

    /// AVAR of the configured estimator at θ₀.
    pub fn predicted_avar(&self) -> Result<AvarReport> {
        let s = self.setup()?;
        predicted_avar(s.model.as_ref(), s.theta0.values(), &s.spec, self.estimator, &self.avar.pairing())
    }

    fn setup(&self) -> Result<Setup> {
        self.validate()?;
        let (model, theta0) = self.model.build()?;
        let spec = self.predictor.spec()?;
        let theta_star = match &self.theta_star {
            Some(v) => theta0.with_values(v.clone())?,
            None => theta0.clone(),
        };
        Ok(Setup {
            model,
            theta0,
            theta_star,
            spec,
            schedule: self.schedule.resolve()?,
        })
    }
}

struct Setup {
    model: Arc<dyn DiffusionModel>,
    theta0: ParamVector,
    theta_star: ParamVector,
    spec: PredictorSpec,
    schedule: Vec<ScheduleEntry>,
}

fn replication_path(
    model: &dyn DiffusionModel,
    theta0: &[f64],
    entry: &ScheduleEntry,
    cfg: &ExperimentConfig,
    schedule_index: usize,
    replication: usize,
) -> Result<SamplePath> {
    let scheme = SamplingScheme::new(entry.n, entry.delta)?
        .with_substeps(cfg.substeps)
        .with_seed(derive_seed(cfg.seed, schedule_index as u64))
        .with_stream(replication as u64);
    simulate_path(model, theta0, &scheme)
}

/// One row of the LLN check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlnRow {
    pub schedule_index: usize,
    pub n: usize,
    pub delta: f64,
    pub n_delta: f64,
    pub n_delta_cubed: f64,
    pub target: f64,
    pub mean: f64,
    pub stderr: f64,
    pub deviation: f64,
    pub n_used: usize,
    pub n_failed: usize,
    pub pass: bool,
}

/// `Vₙ(f) = n⁻¹ Σ_{i=1}^n f(X_{t_{i−1}})`.
pub fn discretized_mean(path: &SamplePath, f: &SmoothFunction) -> f64 {
    let n = path.n();
    pairwise_sum_by(n, |i| f.eval(path.values[i])) / n as f64
}

/// Compare the replication mean of `Vₙ(f)` with `μ₀(f)` (pass within 4 stderr).
pub fn run_lln_check(config: &ExperimentConfig) -> Result<Vec<LlnRow>> {
    let s = config.setup()?;
    let f = &s.spec.f;
    let th = s.theta0.values();
    let target = invariant_moment(s.model.as_ref(), th, f)?.value;
    let mut rows = Vec::new();
    for (idx, entry) in s.schedule.iter().enumerate() {
        let values: Vec<Option<f64>> = (0..config.replications)
            .into_par_iter()
            .map(|r| {
                replication_path(s.model.as_ref(), th, entry, config, idx, r)
                    .ok()
                    .map(|p| discretized_mean(&p, f))
            })
            .collect();
        let ok: Vec<f64> = values.iter().flatten().copied().collect();
        let n_failed = values.len() - ok.len();
        let (mean, stderr) = mean_stderr(&ok);
        let stderr = if stderr.is_finite() { stderr } else { 0.0 };
        let deviation = (mean - target).abs();
        rows.push(LlnRow {
            schedule_index: idx,
            n: entry.n,
            delta: entry.delta,
            n_delta: entry.n_delta(),
            n_delta_cubed: entry.n_delta_cubed(),
            target,
            mean,
            stderr,
            deviation,
            n_used: ok.len(),
            n_failed,
            pass: !ok.is_empty() && deviation <= 4.0 * stderr + 1e-12 * (1.0 + target.abs()),
        });
    }
    Ok(rows)
}

/// Distribution summaries of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

pub fn sample_moments(x: &[f64]) -> Moments {
    let n = x.len();
    let (mean, _) = mean_stderr(x);
    if n < 2 {
        return Moments {
            mean,
            variance: f64::NAN,
            skewness: f64::NAN,
            excess_kurtosis: f64::NAN,
        };
    }
    let m2 = pairwise_sum_by(n, |i| (x[i] - mean).powi(2)) / n as f64;
    let m3 = pairwise_sum_by(n, |i| (x[i] - mean).powi(3)) / n as f64;
    let m4 = pairwise_sum_by(n, |i| (x[i] - mean).powi(4)) / n as f64;
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    Moments {
        mean,
        variance: m2 * n as f64 / (n as f64 - 1.0),
        skewness,
        excess_kurtosis,
    }
}

/// Kolmogorov–Smirnov distance between the sample and `N(0, variance)`.
pub fn ks_distance_normal(x: &[f64], variance: f64) -> f64 {
    if x.is_empty() || !(variance > 0.0) {
        return f64::NAN;
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("positive sd");
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = normal.cdf(*v);
            (c - i as f64 / n).max((i + 1) as f64 / n - c)
        })
        .fold(0.0, f64::max)
}

/// One row of the CLT check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltRow {
    pub schedule_index: usize,
    pub n: usize,
    pub delta: f64,
    pub n_delta: f64,
    pub n_delta_cubed: f64,
    pub regime_violation: bool,
    pub predicted_variance: f64,
    pub empirical_mean: f64,
    pub empirical_variance: f64,
    pub relative_error: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub ks_distance: f64,
    pub n_used: usize,
    pub n_failed: usize,
    /// `None` outside the CLT regime.
    pub pass: Option<bool>,
    pub standardized: Vec<f64>,
}

/// Collect `√(nΔ)·Vₙ(g)` across replications and compare with `2μ₀(gU₀g)`.
pub fn run_clt_check(config: &ExperimentConfig, g: &SmoothFunction) -> Result<Vec<CltRow>> {
    let s = config.setup()?;
    let th = s.theta0.values();
    let model = s.model.as_ref();
    let mean = invariant_moment(model, th, g)?.value;
    let scale = crate::model::invariant_expectation(model, th, |x| g.eval(x).powi(2))?.value.sqrt();
    let gc = if mean.abs() > 1e-6 * scale.max(1e-300) {
        log::warn!("g is not centered (mean {mean:e}); subtracted its invariant mean");
        g.shifted(-mean)
    } else {
        g.clone()
    };
    let trivial = gc.polynomial_coefficients().is_some_and(|c| c.iter().all(|v| *v == 0.0));
    let predicted = if trivial {
        0.0
    } else {
        clt_variance(model, th, &gc, &config.avar.pairing())?.pairing_form.value
    };
    let mut rows = Vec::new();
    for (idx, entry) in s.schedule.iter().enumerate() {
        let root = entry.n_delta().sqrt();
        let values: Vec<Option<f64>> = (0..config.replications)
            .into_par_iter()
            .map(|r| {
                replication_path(model, th, entry, config, idx, r)
                    .ok()
                    .map(|p| root * discretized_mean(&p, &gc))
            })
            .collect();
        let ok: Vec<f64> = values.iter().flatten().copied().collect();
        let m = sample_moments(&ok);
        let relative_error = if predicted > 0.0 {
            (m.variance - predicted).abs() / predicted
        } else {
            m.variance.abs()
        };
        let regime_violation = !entry.in_clt_regime();
        let pass = if regime_violation || ok.len() < 2 {
            None
        } else if predicted == 0.0 {
            Some(ok.iter().all(|v| *v == 0.0))
        } else {
            Some(relative_error <= config.clt_rel_tol)
        };
        rows.push(CltRow {
            schedule_index: idx,
            n: entry.n,
            delta: entry.delta,
            n_delta: entry.n_delta(),
            n_delta_cubed: entry.n_delta_cubed(),
            regime_violation,
            predicted_variance: predicted,
            empirical_mean: m.mean,
            empirical_variance: m.variance,
            relative_error,
            skewness: m.skewness,
            excess_kurtosis: m.excess_kurtosis,
            ks_distance: ks_distance_normal(&ok, predicted),
            n_used: ok.len(),
            n_failed: values.len() - ok.len(),
            pass,
            standardized: ok,
        });
    }
    Ok(rows)
}

/// Outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub schedule_index: usize,
    pub replication: usize,
    pub theta_hat: Vec<f64>,
    pub converged: bool,
    pub fallback_used: bool,
    /// `√(nΔ)(θ̂ − θ₀)`.
    pub standardized_error: Vec<f64>,
    /// Diagonal of the AVAR evaluated at θ̂, when requested and available.
    pub feasible_avar: Option<Vec<f64>>,
    pub error: Option<String>,
    /// Wall-clock seconds; not persisted.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl ReplicationResult {
    /// Counted in summaries: no error, and either a root or the fallback.
    pub fn usable(&self) -> bool {
        self.error.is_none() && (self.converged || self.fallback_used)
    }
}

/// Per-schedule-entry summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSummary {
    pub schedule_index: usize,
    pub n: usize,
    pub delta: f64,
    pub n_delta: f64,
    pub n_delta_cubed: f64,
    pub in_clt_regime: bool,
    pub replications: usize,
    pub n_used: usize,
    pub n_failed: usize,
    pub convergence_rate: f64,
    pub fallback_rate: f64,
    /// Mean of `θ̂ − θ₀` per coordinate.
    pub bias: Vec<f64>,
    /// Mean of the standardized error and its standard error.
    pub mean_standardized: Vec<f64>,
    pub mean_standardized_stderr: Vec<f64>,
    /// Empirical covariance of the standardized errors (row-major).
    pub covariance: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<f64>>,
    pub coverage_oracle: Vec<f64>,
    pub coverage_feasible: Vec<Option<f64>>,
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
    pub ks_distance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub model: String,
    pub param_names: Vec<String>,
    pub theta0: Vec<f64>,
    pub estimator: EstimatorKind,
    pub predictor: String,
    pub predicted: Option<AvarReport>,
    pub schedule: Vec<ScheduleEntry>,
    pub summaries: Vec<ScheduleSummary>,
    pub replications: Vec<ReplicationResult>,
    pub notes: Vec<String>,
}

fn predicted_matrix(report: &AvarReport) -> DMatrix<f64> {
    match &report.avar {
        Avar::Scalar(v) => DMatrix::from_element(1, 1, *v),
        Avar::Matrix(m) => DMatrix::from_fn(2, 2, |i, j| m[i][j]),
    }
}

fn predicted_avar(
    model: &dyn DiffusionModel,
    theta: &[f64],
    spec: &PredictorSpec,
    kind: EstimatorKind,
    method: &PairingMethod,
) -> Result<AvarReport> {
    match kind {
        EstimatorKind::Simple => avar_simple(model, theta, spec, method),
        EstimatorKind::Onelag => avar_onelag(model, theta, spec, method),
    }
}

fn estimate_path(
    s: &Setup,
    path: &SamplePath,
    kind: EstimatorKind,
    method: Option<CoefficientMethod>,
) -> Result<EstimateResult> {
    match kind {
        EstimatorKind::Simple => solve_simple(s.model.as_ref(), path, &s.spec, &s.theta0, &s.theta_star),
        EstimatorKind::Onelag => {
            let opts = SolveOptions {
                method,
                ..Default::default()
            };
            solve_onelag(s.model.as_ref(), path, &s.spec, &s.theta0, &opts)
        }
    }
}

/// Simulate, estimate and summarize `R` replications per schedule entry.
pub fn run_estimation_study(config: &ExperimentConfig) -> Result<StudyReport> {
    let s = config.setup()?;
    let model = s.model.as_ref();
    let th0 = s.theta0.values().to_vec();
    let d = th0.len();
    let pairing = config.avar.pairing();
    let mut notes = Vec::new();
    let predicted = match predicted_avar(model, &th0, &s.spec, config.estimator, &pairing) {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("predicted AVAR unavailable: {e}"));
            None
        }
    };
    let mut replications = Vec::new();
    let mut summaries = Vec::new();
    for (idx, entry) in s.schedule.iter().enumerate() {
        let root = entry.n_delta().sqrt();
        let results: Vec<ReplicationResult> = (0..config.replications)
            .into_par_iter()
            .map(|r| {
                let start = Instant::now();
                let outcome = replication_path(model, &th0, entry, config, idx, r)
                    .and_then(|p| estimate_path(&s, &p, config.estimator, config.coefficient_method));
                let mut res = match outcome {
                    Ok(est) => {
                        let th = est.theta_hat.values().to_vec();
                        let z = th.iter().zip(&th0).map(|(a, b)| root * (a - b)).collect();
                        let feasible = if config.avar.feasible && predicted.is_some() {
                            predicted_avar(model, &th, &s.spec, config.estimator, &pairing)
                                .ok()
                                .map(|rep| {
                                    let m = predicted_matrix(&rep);
                                    (0..d).map(|k| m[(k, k)]).collect()
                                })
                        } else {
                            None
                        };
                        ReplicationResult {
                            schedule_index: idx,
                            replication: r,
                            theta_hat: th,
                            converged: est.converged,
                            fallback_used: est.fallback_used,
                            standardized_error: z,
                            feasible_avar: feasible,
                            error: None,
                            runtime_secs: 0.0,
                        }
                    }
                    Err(e) => ReplicationResult {
                        schedule_index: idx,
                        replication: r,
                        theta_hat: vec![f64::NAN; d],
                        converged: false,
                        fallback_used: false,
                        standardized_error: vec![f64::NAN; d],
                        feasible_avar: None,
                        error: Some(e.to_string()),
                        runtime_secs: 0.0,
                    },
                };
                res.runtime_secs = start.elapsed().as_secs_f64();
                res
            })
            .collect();
        let summary = summarize(idx, entry, &results, &th0, predicted.as_ref().map(predicted_matrix));
        if summary.n_used == 0 {
            return Err(Error::Numerical(format!(
                "all {} replications failed for schedule entry {idx} (n={}, delta={}); first error: {}",
                results.len(),
                entry.n,
                entry.delta,
                results.iter().find_map(|r| r.error.clone()).unwrap_or_default()
            )));
        }
        if !entry.in_clt_regime() {
            notes.push(format!("schedule entry {idx}: n*delta^3 = {} >= 1", entry.n_delta_cubed()));
        }
        summaries.push(summary);
        replications.extend(results);
    }
    Ok(StudyReport {
        model: model.name().to_string(),
        param_names: model.param_names(),
        theta0: th0,
        estimator: config.estimator,
        predictor: s.spec.label.clone(),
        predicted,
        schedule: s.schedule.clone(),
        summaries,
        replications,
        notes,
    })
}

/// Summary statistics for one schedule entry.
pub fn summarize(
    idx: usize,
    entry: &ScheduleEntry,
    results: &[ReplicationResult],
    theta0: &[f64],
    predicted: Option<DMatrix<f64>>,
) -> ScheduleSummary {
    let d = theta0.len();
    let used: Vec<&ReplicationResult> = results.iter().filter(|r| r.usable()).collect();
    let m = used.len();
    let total = results.len().max(1) as f64;
    let col = |k: usize| -> Vec<f64> { used.iter().map(|r| r.standardized_error[k]).collect() };
    let cols: Vec<Vec<f64>> = (0..d).map(col).collect();
    let moments: Vec<Moments> = cols.iter().map(|c| sample_moments(c)).collect();
    let covariance: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    if m < 2 {
                        return f64::NAN;
                    }
                    let (mi, mj) = (moments[i].mean, moments[j].mean);
                    pairwise_sum_by(m, |r| (cols[i][r] - mi) * (cols[j][r] - mj)) / (m as f64 - 1.0)
                })
                .collect()
        })
        .collect();
    let pred_diag: Vec<f64> = match &predicted {
        Some(p) => (0..d).map(|k| p[(k, k)]).collect(),
        None => vec![f64::NAN; d],
    };
    let root = entry.n_delta().sqrt();
    let coverage = |k: usize, var: &dyn Fn(&ReplicationResult) -> Option<f64>| -> Option<f64> {
        let hits: Vec<bool> = used
            .iter()
            .filter_map(|r| var(r).map(|v| (r.standardized_error[k] / root).abs() <= 1.96 * (v / entry.n_delta()).sqrt()))
            .collect();
        if hits.is_empty() {
            None
        } else {
            Some(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
        }
    };
    let coverage_oracle = (0..d)
        .map(|k| {
            let v = pred_diag[k];
            coverage(k, &|_| if v.is_finite() { Some(v) } else { None }).unwrap_or(f64::NAN)
        })
        .collect();
    let coverage_feasible = (0..d)
        .map(|k| coverage(k, &|r| r.feasible_avar.as_ref().map(|v| v[k]).filter(|v| v.is_finite())))
        .collect();
    ScheduleSummary {
        schedule_index: idx,
        n: entry.n,
        delta: entry.delta,
        n_delta: entry.n_delta(),
        n_delta_cubed: entry.n_delta_cubed(),
        in_clt_regime: entry.in_clt_regime(),
        replications: results.len(),
        n_used: m,
        n_failed: results.len() - m,
        convergence_rate: results.iter().filter(|r| r.converged).count() as f64 / total,
        fallback_rate: results.iter().filter(|r| r.fallback_used).count() as f64 / total,
        bias: moments.iter().map(|mo| mo.mean / root).collect(),
        mean_standardized: moments.iter().map(|mo| mo.mean).collect(),
        mean_standardized_stderr: moments.iter().map(|mo| (mo.variance / m as f64).sqrt()).collect(),
        covariance,
        predicted: match &predicted {
            Some(p) => (0..d).map(|i| (0..d).map(|j| p[(i, j)]).collect()).collect(),
            None => vec![vec![f64::NAN; d]; d],
        },
        coverage_oracle,
        coverage_feasible,
        skewness: moments.iter().map(|mo| mo.skewness).collect(),
        excess_kurtosis: moments.iter().map(|mo| mo.excess_kurtosis).collect(),
        ks_distance: (0..d).map(|k| ks_distance_normal(&cols[k], pred_diag[k])).collect(),
    }
}

/// Whether a symmetric matrix is positive semi-definite up to `tol·trace`.
pub fn is_psd(m: &[Vec<f64>], tol: f64) -> bool {
    let d = m.len();
    let mat = DMatrix::from_fn(d, d, |i, j| 0.5 * (m[i][j] + m[j][i]));
    if mat.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let trace = mat.trace().abs();
    SymmetricEigen::new(mat)
        .eigenvalues
        .iter()
        .all(|e| *e >= -tol * trace.max(1e-300))
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Write replication rows with header. Columns: schedule_index, replication,
/// converged, fallback_used, theta_hat_*, standardized_error_*,
/// feasible_avar_*, error.
pub fn write_replications_csv<W: std::io::Write>(
    writer: W,
    param_names: &[String],
    rows: &[ReplicationResult],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["schedule_index".to_string(), "replication".into(), "converged".into(), "fallback_used".into()];
    for prefix in ["theta_hat", "standardized_error", "feasible_avar"] {
        header.extend(param_names.iter().map(|p| format!("{prefix}_{p}")));
    }
    header.push("error".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.schedule_index.to_string(),
            r.replication.to_string(),
            r.converged.to_string(),
            r.fallback_used.to_string(),
        ];
        rec.extend(r.theta_hat.iter().map(|v| num(*v)));
        rec.extend(r.standardized_error.iter().map(|v| num(*v)));
        match &r.feasible_avar {
            Some(v) => rec.extend(v.iter().map(|x| num(*x))),
            None => rec.extend(param_names.iter().map(|_| String::new())),
        }
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Inverse of [`write_replications_csv`]; returns the parameter names too.
pub fn read_replications_csv<R: std::io::Read>(reader: R) -> Result<(Vec<String>, Vec<ReplicationResult>)> {
    let mut rd = csv::Reader::from_reader(reader);
    let header = rd.headers()?.clone();
    let names: Vec<String> = header
        .iter()
        .filter_map(|h| h.strip_prefix("theta_hat_").map(str::to_string))
        .collect();
    let d = names.len();
    let expected = 5 + 3 * d;
    if header.len() != expected {
        return Err(Error::Config(format!("replication CSV has {} columns, expected {expected}", header.len())));
    }
    let parse_f = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Config(format!("bad number '{s}' in replication CSV: {e}")))
    };
    let parse_b = |s: &str| -> Result<bool> {
        s.parse::<bool>()
            .map_err(|e| Error::Config(format!("bad flag '{s}' in replication CSV: {e}")))
    };
    let parse_u = |s: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|e| Error::Config(format!("bad index '{s}' in replication CSV: {e}")))
    };
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let block = |start: usize| -> Result<Vec<f64>> { (start..start + d).map(|i| parse_f(field(i))).collect() };
        let feasible = if (4 + 2 * d..4 + 3 * d).all(|i| field(i).is_empty()) {
            None
        } else {
            Some(block(4 + 2 * d)?)
        };
        let err = field(4 + 3 * d);
        rows.push(ReplicationResult {
            schedule_index: parse_u(field(0))?,
            replication: parse_u(field(1))?,
            converged: parse_b(field(2))?,
            fallback_used: parse_b(field(3))?,
            theta_hat: block(4)?,
            standardized_error: block(4 + d)?,
            feasible_avar: feasible,
            error: if err.is_empty() { None } else { Some(err.to_string()) },
            runtime_secs: 0.0,
        });
    }
    Ok((names, rows))
}

/// One summary row per schedule entry.
pub fn write_summary_csv<W: std::io::Write>(writer: W, report: &StudyReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let p = &report.param_names;
    let mut header: Vec<String> = [
        "schedule_index",
        "n",
        "delta",
        "n_delta",
        "n_delta_cubed",
        "in_clt_regime",
        "replications",
        "n_used",
        "n_failed",
        "convergence_rate",
        "fallback_rate",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for prefix in [
        "bias",
        "mean_standardized",
        "mean_standardized_stderr",
        "coverage_oracle",
        "coverage_feasible",
        "skewness",
        "excess_kurtosis",
        "ks_distance",
    ] {
        header.extend(p.iter().map(|n| format!("{prefix}_{n}")));
    }
    for prefix in ["cov", "predicted"] {
        for a in p {
            for b in p {
                header.push(format!("{prefix}_{a}_{b}"));
            }
        }
    }
    w.write_record(&header)?;
    for s in &report.summaries {
        let mut rec = vec![
            s.schedule_index.to_string(),
            s.n.to_string(),
            num(s.delta),
            num(s.n_delta),
            num(s.n_delta_cubed),
            s.in_clt_regime.to_string(),
            s.replications.to_string(),
            s.n_used.to_string(),
            s.n_failed.to_string(),
            num(s.convergence_rate),
            num(s.fallback_rate),
        ];
        for v in [&s.bias, &s.mean_standardized, &s.mean_standardized_stderr, &s.coverage_oracle] {
            rec.extend(v.iter().map(|x| num(*x)));
        }
        rec.extend(s.coverage_feasible.iter().map(|x| opt_num(*x)));
        for v in [&s.skewness, &s.excess_kurtosis, &s.ks_distance] {
            rec.extend(v.iter().map(|x| num(*x)));
        }
        for m in [&s.covariance, &s.predicted] {
            rec.extend(m.iter().flatten().map(|x| num(*x)));
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Write the study to `dir`. CSV: `replications.csv`, `summary.csv` and
/// `summary.json`; JSON: `study.json`. Returns the paths written.
pub fn emit_report(report: &StudyReport, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let create = |name: &str| -> Result<(PathBuf, fs::File)> {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path, file))
    };
    let mut written = Vec::new();
    match format {
        OutputFormat::Csv => {
            let (path, file) = create("replications.csv")?;
            write_replications_csv(std::io::BufWriter::new(file), &report.param_names, &report.replications)
                .map_err(|e| with_path(e, &path))?;
            written.push(path);
            let (path, file) = create("summary.csv")?;
            write_summary_csv(std::io::BufWriter::new(file), report).map_err(|e| with_path(e, &path))?;
            written.push(path);
            let mut summary = report.clone();
            summary.replications.clear();
            let (path, _) = create("summary.json")?;
            write_json(&path, &summary)?;
            written.push(path);
        }
        OutputFormat::Json => {
            let (path, _) = create("study.json")?;
            write_json(&path, report)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

/// Pretty JSON; non-finite numbers become `null`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn ou_config(estimate: &[&str], function: &str, q: usize, kind: EstimatorKind) -> ExperimentConfig {
        let mut params = BTreeMap::new();
        params.insert("eta".to_string(), 1.0);
        params.insert("kappa".to_string(), 2.0);
        params.insert("xi".to_string(), 1.0);
        ExperimentConfig {
            model: ModelConfig {
                family: "ou".into(),
                params,
                estimate: estimate.iter().map(|s| s.to_string()).collect(),
                bounds: BTreeMap::new(),
            },
            predictor: PredictorConfig {
                function: Some(function.into()),
                coefficients: None,
                q,
            },
            estimator: kind,
            coefficient_method: None,
            schedule: ScheduleConfig {
                entries: vec![ScheduleEntry { n: 2000, delta: 0.05 }],
                preset: None,
            },
            replications: 40,
            seed: 17,
            substeps: 10,
            theta_star: None,
            avar: AvarConfig::default(),
            output: OutputConfig::default(),
            clt_rel_tol: 0.15,
        }
    }

    #[test]
    fn toml_round_trip_and_preset() {
        let text = r#"
            estimator = "simple"
            replications = 3
            seed = 5
            [model]
            family = "ou"
            params = { eta = 1.0, kappa = 2.0, xi = 1.0 }
            estimate = ["eta"]
            [predictor]
            function = "x"
            [schedule]
            preset = { c = 1.0, n = [100, 400] }
            [avar]
            method = "analytic"
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        let sched = cfg.schedule.resolve().unwrap();
        assert_eq!(sched.len(), 2);
        assert!((sched[1].delta - 0.05).abs() < 1e-15);
        assert!((sched[1].n_delta_cubed() - 400.0 * 0.05f64.powi(3)).abs() < 1e-15);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ou_config(&["eta"], "x", 1, EstimatorKind::Simple);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.predictor.q = 0;
        cfg.replications = 0;
        assert!(cfg.validate().is_err());
        cfg.replications = 1;
        cfg.predictor.function = Some("sin".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lln_constant_and_mean() {
        let mut cfg = ou_config(&["eta"], "1", 0, EstimatorKind::Simple);
        let rows = run_lln_check(&cfg).unwrap();
        assert_eq!(rows[0].deviation, 0.0);
        assert!(rows[0].pass);
        cfg.predictor.function = Some("x".into());
        let rows = run_lln_check(&cfg).unwrap();
        assert!(rows[0].pass, "{:?}", rows[0]);
        assert!((rows[0].mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn clt_zero_function_and_regime_flag() {
        let mut cfg = ou_config(&["eta"], "x", 0, EstimatorKind::Simple);
        cfg.schedule.entries.push(ScheduleEntry { n: 100, delta: 0.5 });
        let rows = run_clt_check(&cfg, &SmoothFunction::zero()).unwrap();
        assert!(rows[0].standardized.iter().all(|v| *v == 0.0));
        assert!(rows[1].regime_violation);
        assert_eq!(rows[1].pass, None);
    }

    #[test]
    fn sample_statistics() {
        let m = sample_moments(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!(m.skewness.abs() < 1e-15);
        let z: Vec<f64> = (1..1000).map(|i| {
            Normal::new(0.0, 1.0).unwrap().inverse_cdf(i as f64 / 1000.0)
        }).collect();
        assert!(ks_distance_normal(&z, 1.0) < 0.002);
        assert!(ks_distance_normal(&z, 4.0) > 0.1);
        assert!(is_psd(&[vec![2.0, 1.0], vec![1.0, 2.0]], 1e-10));
        assert!(!is_psd(&[vec![1.0, 2.0], vec![2.0, 1.0]], 1e-10));
    }

    #[test]
    fn small_study_is_deterministic_and_round_trips() {
        let cfg = ou_config(&["eta"], "x", 0, EstimatorKind::Simple);
        let a = run_estimation_study(&cfg).unwrap();
        let b = run_estimation_study(&cfg).unwrap();
        assert_eq!(a.summaries, b.summaries);
        assert_eq!(a.summaries.len(), 1);
        let dir = tempfile::tempdir().unwrap();
        let files_a = emit_report(&a, &dir.path().join("a"), OutputFormat::Csv).unwrap();
        let files_b = emit_report(&b, &dir.path().join("b"), OutputFormat::Csv).unwrap();
        for (fa, fb) in files_a.iter().zip(&files_b) {
            assert_eq!(fs::read(fa).unwrap(), fs::read(fb).unwrap());
        }
        let (names, rows) = read_replications_csv(fs::File::open(&files_a[0]).unwrap()).unwrap();
        assert_eq!(names, vec!["eta".to_string()]);
        assert_eq!(rows.len(), a.replications.len());
        for (x, y) in rows.iter().zip(&a.replications) {
            let mut y = y.clone();
            y.runtime_secs = 0.0;
            assert_eq!(x, &y);
        }
        let summary = fs::read_to_string(&files_a[1]).unwrap();
        assert_eq!(summary.lines().count(), 1 + cfg.schedule.resolve().unwrap().len());
    }

    #[test]
    fn onelag_smoke_single_replication() {
        let mut cfg = ou_config(&["eta", "kappa"], "x", 1, EstimatorKind::Onelag);
        cfg.replications = 1;
        let rep = run_estimation_study(&cfg).unwrap();
        assert_eq!(rep.replications.len(), 1);
        assert!(rep.replications[0].usable());
        assert!(rep.predicted.is_some());
    }

    #[test]
    fn empty_study_writes_header_only() {
        let report = StudyReport {
            model: "ou".into(),
            param_names: vec!["eta".into()],
            theta0: vec![1.0],
            estimator: EstimatorKind::Simple,
            predictor: "x".into(),
            predicted: None,
            schedule: vec![],
            summaries: vec![],
            replications: vec![],
            notes: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&report, dir.path(), OutputFormat::Csv).unwrap();
        for f in &files[..2] {
            assert_eq!(fs::read_to_string(f).unwrap().lines().count(), 1);
        }
    }
}
