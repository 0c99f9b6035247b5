//! Potential operator `U_θ(f) = ∫₀^∞ P_t f dt` and integrals against it.
//!
//! Pairings `μ_θ(g₁ U_θ(g₂))` are computed from a closed form when the model
//! has linear mean reversion and `g₂` is affine, and by Monte Carlo
//! otherwise. Two Monte Carlo estimators are provided:
//!
//! * `exp_time`: `(1 − e^{−γt_max}) γ⁻¹ e^{γT} g₁(X₀) g₂(X_T)` with
//!   `T ~ Exp(γ)` conditioned on `T ≤ t_max`;
//! * `grid_quadrature`: trapezoidal integral of `g₁(X_s) g₂(X_{s+t})` over
//!   `t ∈ [0, t_max]`, averaged over origins `s` on a shift window.
//!
//! Both estimate the pairing truncated at `t_max`.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{w_limit, PredictorSpec};
use crate::function::SmoothFunction;
use crate::model::{
    generator_at, invariant_expectation, invariant_moment, invariant_support, invariant_support_at,
    kf_coefficient, DiffusionModel,
};
use crate::quadrature::{mean_stderr, pairwise_sum};
use crate::rng::stream_rng;
use crate::simulate::{advance, draw_stationary, simulate_path, SamplingScheme, Stepper};
use crate::solver::central_jacobian;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McEstimator {
    ExpTime,
    GridQuadrature,
}

/// Monte Carlo settings for potential pairings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PotentialMCConfig {
    /// Exponential rate; defaults to half the spectral gap, or the inverse
    /// autocorrelation time of `g₂` from a pilot path.
    pub gamma: Option<f64>,
    pub k: usize,
    /// Truncation horizon; defaults to `10/γ`.
    pub t_max: Option<f64>,
    pub estimator: McEstimator,
    /// Grid points (and Euler steps) per unit time.
    pub substeps_per_unit: usize,
    /// Origins `s ∈ [0, shift_window]` averaged per path (grid estimator);
    /// defaults to `t_max`, `0` gives a single origin.
    pub shift_window: Option<f64>,
    pub seed: u64,
}

impl Default for PotentialMCConfig {
    fn default() -> Self {
        PotentialMCConfig {
            gamma: None,
            k: 20_000,
            t_max: None,
            estimator: McEstimator::GridQuadrature,
            substeps_per_unit: 100,
            shift_window: None,
            seed: 0x00c0_ffee,
        }
    }
}

impl PotentialMCConfig {
    pub fn grid(k: usize, t_max: f64, seed: u64) -> Self {
        PotentialMCConfig {
            k,
            t_max: Some(t_max),
            seed,
            ..Default::default()
        }
    }

    pub fn exp_time(k: usize, gamma: f64, t_max: f64, seed: u64) -> Self {
        PotentialMCConfig {
            gamma: Some(gamma),
            k,
            t_max: Some(t_max),
            estimator: McEstimator::ExpTime,
            seed,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if self.substeps_per_unit == 0 {
            return Err(Error::Config("substeps_per_unit must be >= 1".into()));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("gamma must be positive, got {g}")));
            }
        }
        if let Some(t) = self.t_max {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("t_max must be positive, got {t}")));
            }
        }
        if let Some(w) = self.shift_window {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("shift_window must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    ClosedForm,
    ExpTime,
    GridQuadrature,
}

impl EstimateMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimateMethod::ClosedForm => "closed_form",
            EstimateMethod::ExpTime => "exp_time",
            EstimateMethod::GridQuadrature => "grid_quadrature",
        }
    }
}

impl From<McEstimator> for EstimateMethod {
    fn from(m: McEstimator) -> Self {
        match m {
            McEstimator::ExpTime => EstimateMethod::ExpTime,
            McEstimator::GridQuadrature => EstimateMethod::GridQuadrature,
        }
    }
}

/// Estimate of a μ-integral involving the potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialEstimate {
    pub value: f64,
    pub stderr: f64,
    pub method: EstimateMethod,
    /// Truncation bias bound `λ⁻¹‖g₁‖₂‖g₂‖₂e^{−λt_max}` when λ is known.
    pub bias_bound: Option<f64>,
    pub k_used: usize,
    /// Sample standard error of a heavy-tailed weight.
    pub stderr_unreliable: bool,
    /// `K < 10`: value only, no usable standard error.
    pub diagnostics_only: bool,
    pub gamma: Option<f64>,
    pub t_max: Option<f64>,
    pub seed: Option<u64>,
    pub warnings: Vec<String>,
}

impl PotentialEstimate {
    fn exact(value: f64) -> Self {
        PotentialEstimate {
            value,
            stderr: 0.0,
            method: EstimateMethod::ClosedForm,
            bias_bound: None,
            k_used: 0,
            stderr_unreliable: false,
            diagnostics_only: false,
            gamma: None,
            t_max: None,
            seed: None,
            warnings: Vec::new(),
        }
    }

    fn scaled(mut self, c: f64) -> Self {
        self.value *= c;
        self.stderr *= c.abs();
        self.bias_bound = self.bias_bound.map(|b| b * c.abs());
        self
    }
}

/// How pairings are evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMethod {
    /// Closed form only; errors when unavailable.
    Analytic,
    MonteCarlo(PotentialMCConfig),
    /// Closed form when available, Monte Carlo otherwise.
    Auto(PotentialMCConfig),
}

impl PairingMethod {
    fn mc(&self) -> Option<&PotentialMCConfig> {
        match self {
            PairingMethod::Analytic => None,
            PairingMethod::MonteCarlo(c) | PairingMethod::Auto(c) => Some(c),
        }
    }

    fn allows_closed_form(&self) -> bool {
        !matches!(self, PairingMethod::MonteCarlo(_))
    }
}

/// `U_θ(g)` for centered affine `g` under linear mean reversion at rate κ:
/// `U_θ(g) = g/κ`.
pub fn potential_closed_form(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g: &SmoothFunction,
) -> Result<SmoothFunction> {
    let rate = closed_form_rate(model, theta, g)?;
    Ok(g.scaled(1.0 / rate).labelled(format!("U({})", g.label())))
}

fn closed_form_rate(model: &dyn DiffusionModel, theta: &[f64], g: &SmoothFunction) -> Result<f64> {
    let mr = model
        .closed_form(theta)
        .and_then(|c| c.mean_reversion)
        .ok_or_else(|| Error::NotAvailable(format!("closed-form potential for {}", model.name())))?;
    match g.polynomial_degree() {
        Some(d) if d <= 1 => {}
        _ => {
            return Err(Error::NotAvailable(format!(
                "closed-form potential of non-affine {}",
                g.label()
            )))
        }
    }
    let c = g.polynomial_coefficients().unwrap_or(&[]);
    let c0 = c.first().copied().unwrap_or(0.0);
    let c1 = c.get(1).copied().unwrap_or(0.0);
    let mean = c0 + c1 * mr.level;
    if mean.abs() > 1e-12 * (c0.abs() + (c1 * mr.level).abs()).max(1e-300) && mean != 0.0 {
        return Err(Error::NotAvailable(format!(
            "closed-form potential needs a centered function; μ({}) = {mean}",
            g.label()
        )));
    }
    Ok(mr.rate)
}

fn l2_norm(model: &dyn DiffusionModel, theta: &[f64], g: &(dyn Fn(f64) -> f64 + Sync)) -> Result<f64> {
    Ok(invariant_expectation(model, theta, |x| g(x).powi(2))?.value.sqrt())
}

fn spectral_gap(model: &dyn DiffusionModel, theta: &[f64]) -> Option<f64> {
    model.closed_form(theta).and_then(|c| c.spectral_gap)
}

/// Integrated autocorrelation time of `g(X)` from a pilot path.
pub fn autocorrelation_time(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g: &(dyn Fn(f64) -> f64 + Sync),
    seed: u64,
) -> Result<f64> {
    let delta = 0.02;
    let scheme = SamplingScheme::new(50_000, delta)?.with_seed(seed).with_stream(u64::MAX);
    let path = simulate_path(model, theta, &scheme)?;
    let v: Vec<f64> = path.values.iter().map(|x| g(*x)).collect();
    let (mean, _) = mean_stderr(&v);
    let n = v.len();
    let c = |lag: usize| pairwise_sum(&(0..n - lag).map(|i| (v[i] - mean) * (v[i + lag] - mean)).collect::<Vec<_>>()) / n as f64;
    let c0 = c(0);
    if !(c0 > 0.0) {
        return Err(Error::DegeneratePredictor(c0));
    }
    let mut tau = 0.5;
    for lag in 1..n / 10 {
        let rho = c(lag) / c0;
        if rho <= 0.0 {
            break;
        }
        tau += rho;
    }
    Ok(tau * delta)
}

struct Resolved {
    gamma: f64,
    t_max: f64,
    h: f64,
    steps: usize,
    window_steps: usize,
}

fn resolve(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g2: &(dyn Fn(f64) -> f64 + Sync),
    cfg: &PotentialMCConfig,
) -> Result<Resolved> {
    let gamma = match (cfg.gamma, spectral_gap(model, theta)) {
        (Some(g), _) => g,
        (None, Some(l)) => 0.5 * l,
        (None, None) => 1.0 / autocorrelation_time(model, theta, g2, cfg.seed)?,
    };
    let t_max = cfg.t_max.unwrap_or(10.0 / gamma);
    let h = 1.0 / cfg.substeps_per_unit as f64;
    let steps = ((t_max / h).round() as usize).max(1);
    let window = cfg.shift_window.unwrap_or(t_max);
    Ok(Resolved {
        gamma,
        t_max: steps as f64 * h,
        h,
        steps,
        window_steps: (window / h).round() as usize,
    })
}

fn pairing_mc_fn(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g1: &(dyn Fn(f64) -> f64 + Sync),
    g2: &(dyn Fn(f64) -> f64 + Sync),
    cfg: &PotentialMCConfig,
) -> Result<PotentialEstimate> {
    cfg.validate()?;
    model.validate(theta)?;
    let r = resolve(model, theta, g2, cfg)?;
    let space = model.state_space(theta);
    let draws: Vec<f64> = match cfg.estimator {
        McEstimator::ExpTime => {
            let mass = -(-r.gamma * r.t_max).exp_m1();
            (0..cfg.k)
                .into_par_iter()
                .map(|i| -> Result<f64> {
                    let mut rng = stream_rng(cfg.seed, i as u64);
                    let x0 = draw_stationary(model, theta, &mut rng)?;
                    // Inverse CDF of Exp(γ) conditioned on [0, t_max].
                    let u: f64 = rng.random();
                    let t = -(-u * mass).ln_1p() / r.gamma;
                    let t = t.clamp(1e-300, r.t_max);
                    let m = ((t * cfg.substeps_per_unit as f64).ceil() as usize).max(1);
                    let stepper = Stepper::new(model, theta, t, m);
                    let xt = stepper.step(x0, &mut rng);
                    if !space.contains(xt) {
                        return Err(Error::Simulation { index: 1, value: xt });
                    }
                    let weight = mass * (r.gamma * t).exp() / r.gamma;
                    Ok(weight * g1(x0) * g2(xt))
                })
                .collect::<Result<_>>()?
        }
        McEstimator::GridQuadrature => {
            let stepper = Stepper::new(model, theta, r.h, 1);
            let (m, s) = (r.steps, r.window_steps);
            (0..cfg.k)
                .into_par_iter()
                .map(|i| -> Result<f64> {
                    let mut rng = stream_rng(cfg.seed, i as u64);
                    let x0 = draw_stationary(model, theta, &mut rng)?;
                    let mut path = Vec::new();
                    advance(&stepper, space, x0, m + s, &mut rng, &mut path)?;
                    let v2: Vec<f64> = path.iter().map(|x| g2(*x)).collect();
                    let mut prefix = Vec::with_capacity(v2.len() + 1);
                    prefix.push(0.0);
                    for v in &v2 {
                        prefix.push(prefix.last().unwrap() + v);
                    }
                    let mut acc = 0.0;
                    for origin in 0..=s {
                        let w1 = g1(path[origin]);
                        if w1 == 0.0 {
                            continue;
                        }
                        let trap = prefix[origin + m + 1] - prefix[origin] - 0.5 * (v2[origin] + v2[origin + m]);
                        acc += w1 * trap * r.h;
                    }
                    Ok(acc / (s + 1) as f64)
                })
                .collect::<Result<_>>()?
        }
    };
    let (value, stderr) = mean_stderr(&draws);
    let mut warnings = Vec::new();
    let diagnostics_only = cfg.k < 10;
    if diagnostics_only {
        warnings.push(format!("K = {} < 10: standard error is not meaningful", cfg.k));
    }
    let bias_bound = match spectral_gap(model, theta) {
        Some(l) => Some(l2_norm(model, theta, g1)? * l2_norm(model, theta, g2)? * (-l * r.t_max).exp() / l),
        None => None,
    };
    Ok(PotentialEstimate {
        value,
        stderr: if stderr.is_finite() { stderr } else { 0.0 },
        method: cfg.estimator.into(),
        bias_bound,
        k_used: cfg.k,
        stderr_unreliable: cfg.estimator == McEstimator::ExpTime,
        diagnostics_only,
        gamma: Some(r.gamma),
        t_max: Some(r.t_max),
        seed: Some(cfg.seed),
        warnings,
    })
}

/// Subtract `μ_θ(g)` when it exceeds `1e-6·‖g‖₂`; returns the subtracted mean.
fn center(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g: &(dyn Fn(f64) -> f64 + Sync),
    label: &str,
    warnings: &mut Vec<String>,
) -> Result<f64> {
    let mean = invariant_expectation(model, theta, g)?.value;
    let norm = l2_norm(model, theta, g)?;
    if mean.abs() > 1e-6 * norm.max(1e-300) {
        let msg = format!("{label} is not centered (mean {mean:e}); subtracted its invariant mean");
        log::warn!("{msg}");
        warnings.push(msg);
        Ok(mean)
    } else {
        Ok(0.0)
    }
}

/// Monte Carlo estimate of `μ_θ(g₁ U_θ(g₂))`. Non-centered `g₂` is centered
/// with a warning.
pub fn potential_pairing_mc(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g1: &SmoothFunction,
    g2: &SmoothFunction,
    cfg: &PotentialMCConfig,
) -> Result<PotentialEstimate> {
    pairing_fn(model, theta, &|x| g1.eval(x), &|x| g2.eval(x), g2.label(), cfg)
}

fn pairing_fn(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g1: &(dyn Fn(f64) -> f64 + Sync),
    g2: &(dyn Fn(f64) -> f64 + Sync),
    label: &str,
    cfg: &PotentialMCConfig,
) -> Result<PotentialEstimate> {
    let mut warnings = Vec::new();
    let shift = center(model, theta, g2, label, &mut warnings)?;
    let centered = move |x: f64| g2(x) - shift;
    let mut out = pairing_mc_fn(model, theta, g1, &centered, cfg)?;
    warnings.append(&mut out.warnings);
    out.warnings = warnings;
    Ok(out)
}

/// `μ_θ(g₁ U_θ(g₂))` by the requested method.
pub fn potential_pairing(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g1: &SmoothFunction,
    g2: &SmoothFunction,
    method: &PairingMethod,
) -> Result<PotentialEstimate> {
    if method.allows_closed_form() {
        match closed_form_rate(model, theta, g2) {
            Ok(rate) => {
                let v = invariant_expectation(model, theta, |x| g1.eval(x) * g2.eval(x))?.value;
                return Ok(PotentialEstimate::exact(v / rate));
            }
            Err(Error::NotAvailable(msg)) => {
                if method.mc().is_none() {
                    return Err(Error::NotAvailable(msg));
                }
            }
            Err(e) => return Err(e),
        }
    }
    potential_pairing_mc(model, theta, g1, g2, method.mc().expect("Monte Carlo configured"))
}

/// Tail probes of `|ν_θ f₁|` used to justify dropping boundary terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCheck {
    /// `(x, |ν_θ(x) f₁(x)|)` moving outward, lower end then upper end.
    pub lower: Vec<(f64, f64)>,
    pub upper: Vec<(f64, f64)>,
    pub passed: bool,
}

/// Probe `|ν_θ f₁|` at density drops of `1e-10, 1e-20, 1e-30` relative to
/// the mode (infinite ends) or at `lo + (c − lo)·10^{−k}` (finite ends).
/// Passes when the probes decay outward and the outermost is below `1e-12`.
pub fn boundary_check(
    model: &dyn DiffusionModel,
    theta: &[f64],
    f1: &(dyn Fn(f64) -> f64 + Sync),
) -> Result<BoundaryCheck> {
    let space = model.state_space(theta);
    let support = invariant_support(model, theta)?;
    let value = |x: f64| (model.invariant_logdensity(x, theta).exp() * f1(x)).abs();
    let drops = [10.0, 20.0, 30.0].map(|k| k * std::f64::consts::LN_10);
    let mut lower = Vec::new();
    let mut upper = Vec::new();
    let c = support.mode;
    for (k, drop) in drops.iter().enumerate() {
        let s = invariant_support_at(model, theta, *drop)?;
        let lo = if space.lo.is_finite() {
            space.lo + (c - space.lo) * 10f64.powi(-4 * (k as i32 + 1))
        } else {
            s.lo
        };
        let hi = if space.hi.is_finite() {
            space.hi - (space.hi - c) * 10f64.powi(-4 * (k as i32 + 1))
        } else {
            s.hi
        };
        lower.push((lo, value(lo)));
        upper.push((hi, value(hi)));
    }
    let ok = |probes: &[(f64, f64)]| {
        probes.windows(2).all(|w| w[1].1 <= w[0].1 || w[1].1 < 1e-300)
            && probes.last().is_some_and(|p| p.1 < 1e-12)
    };
    let passed = ok(&lower) && ok(&upper);
    Ok(BoundaryCheck {
        lower,
        upper,
        passed,
    })
}

/// `μ_θ(f₁ ∂ₓU_θ(g₂))`.
///
/// Closed form: direct quadrature against `∂ₓU_θ(g₂)`. Monte Carlo:
/// integration by parts, `−μ_θ(U_θ(g₂) h)` with
/// `h = f₁′ + f₁ (log ν_θ)′`, after a tail check of the boundary terms.
pub fn dx_potential_term(
    model: &dyn DiffusionModel,
    theta: &[f64],
    f1: &SmoothFunction,
    g2: &SmoothFunction,
    method: &PairingMethod,
) -> Result<(PotentialEstimate, BoundaryCheck)> {
    let check = boundary_check(model, theta, &|x| f1.eval(x))?;
    if method.allows_closed_form() {
        match potential_closed_form(model, theta, g2) {
            Ok(u) => {
                let v = invariant_expectation(model, theta, |x| f1.eval(x) * u.d1(x))?.value;
                return Ok((PotentialEstimate::exact(v), check));
            }
            Err(Error::NotAvailable(msg)) => {
                if method.mc().is_none() {
                    return Err(Error::NotAvailable(msg));
                }
            }
            Err(e) => return Err(e),
        }
    }
    let cfg = method.mc().expect("Monte Carlo configured");
    let est = by_parts(
        model,
        theta,
        &|x| f1.eval(x),
        &|x| f1.d1(x),
        &check,
        &|x| g2.eval(x),
        g2.label(),
        cfg,
    )?;
    Ok((est, check))
}

/// `−μ_θ(U_θ(g₂)(f₁′ + f₁ (log ν_θ)′))` after a passed boundary check.
#[allow(clippy::too_many_arguments)]
fn by_parts(
    model: &dyn DiffusionModel,
    theta: &[f64],
    f1: &(dyn Fn(f64) -> f64 + Sync),
    f1_d1: &(dyn Fn(f64) -> f64 + Sync),
    check: &BoundaryCheck,
    g2: &(dyn Fn(f64) -> f64 + Sync),
    label: &str,
    cfg: &PotentialMCConfig,
) -> Result<PotentialEstimate> {
    if !check.passed {
        return Err(Error::BoundaryTerm(format!(
            "|nu f1| at tail probes: lower {:?}, upper {:?}",
            check.lower, check.upper
        )));
    }
    let h = |x: f64| f1_d1(x) + f1(x) * model.invariant_logdensity_dx(x, theta);
    Ok(pairing_fn(model, theta, &h, g2, label, cfg)?.scaled(-1.0))
}

/// Scalar or 2×2 asymptotic (co)variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Avar {
    Scalar(f64),
    Matrix([[f64; 2]; 2]),
}

impl Avar {
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Avar::Scalar(v) => Some(*v),
            Avar::Matrix(_) => None,
        }
    }

    pub fn matrix(&self) -> Option<[[f64; 2]; 2]> {
        match self {
            Avar::Scalar(_) => None,
            Avar::Matrix(m) => Some(*m),
        }
    }
}

/// One μ₀-integral entering an asymptotic variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub value: f64,
    pub stderr: f64,
    pub method: EstimateMethod,
}

impl From<&PotentialEstimate> for Component {
    fn from(e: &PotentialEstimate) -> Self {
        Component {
            value: e.value,
            stderr: e.stderr,
            method: e.method,
        }
    }
}

/// Assembled asymptotic variance with its constituent integrals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvarReport {
    pub avar: Avar,
    /// Standard error of a scalar AVAR.
    pub avar_stderr: Option<f64>,
    pub components: BTreeMap<String, Component>,
    pub w_matrix: Option<[[f64; 2]; 2]>,
    /// `2 Var₀f / (λ₀ (∂_θμ₀(f))²)`.
    pub bound: Option<f64>,
    pub method_notes: Vec<String>,
    pub seeds: Vec<u64>,
}

impl AvarReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serialize(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Serialize(e.to_string()))
    }

    /// `component,value,stderr,method` rows, including the AVAR entries.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["component", "value", "stderr", "method"])?;
        for (name, c) in &self.components {
            w.write_record([
                name.as_str(),
                &format!("{:.16e}", c.value),
                &format!("{:.16e}", c.stderr),
                c.method.as_str(),
            ])?;
        }
        let method = if self.components.values().all(|c| c.method == EstimateMethod::ClosedForm) {
            "closed_form"
        } else {
            "assembled"
        };
        match &self.avar {
            Avar::Scalar(v) => {
                let se = self.avar_stderr.unwrap_or(0.0);
                w.write_record(["avar", &format!("{v:.16e}"), &format!("{se:.16e}"), method])?;
            }
            Avar::Matrix(m) => {
                for (i, row) in m.iter().enumerate() {
                    for (j, v) in row.iter().enumerate() {
                        w.write_record([
                            format!("avar_{}{}", i + 1, j + 1).as_str(),
                            &format!("{v:.16e}"),
                            "",
                            method,
                        ])?;
                    }
                }
            }
        }
        if let Some(b) = self.bound {
            w.write_record(["bound", &format!("{b:.16e}"), "0", "closed_form"])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn sensitivity(model: &dyn DiffusionModel, theta0: &[f64], f: &SmoothFunction) -> Result<f64> {
    if theta0.len() != 1 {
        return Err(Error::Config(format!(
            "the simple estimator needs a scalar parameter, got {}",
            theta0.len()
        )));
    }
    let d = central_jacobian(
        |t| Ok(vec![invariant_moment(model, t, f)?.value]),
        theta0,
        &model.param_bounds(),
    )?;
    Ok(d[(0, 0)])
}

/// `AVAR = 2μ₀(f*U₀(f*)) / (∂_θμ₀(f))²` with `f* = f − μ₀(f)`, and the
/// spectral-gap bound when λ₀ is known.
pub fn avar_simple(
    model: &dyn DiffusionModel,
    theta0: &[f64],
    spec: &PredictorSpec,
    method: &PairingMethod,
) -> Result<AvarReport> {
    if spec.q != 0 {
        return Err(Error::Config(format!("avar_simple needs q = 0, got {}", spec.q)));
    }
    let f = &spec.f;
    let dmu = sensitivity(model, theta0, f)?;
    let mean = invariant_moment(model, theta0, f)?.value;
    let scale = invariant_expectation(model, theta0, |x| f.eval(x).powi(2))?.value.sqrt();
    if !(dmu.abs() > 1e-10 * scale.max(1e-300)) {
        return Err(Error::Identifiability(format!(
            "d/dtheta mu_theta({}) = {dmu:e} at theta0",
            f.label()
        )));
    }
    let f_star = f.shifted(-mean).labelled(format!("{}*", f.label()));
    let pairing = potential_pairing(model, theta0, &f_star, &f_star, method)?;
    let avar = 2.0 * pairing.value / (dmu * dmu);
    let avar_stderr = 2.0 * pairing.stderr / (dmu * dmu);
    let var = invariant_expectation(model, theta0, |x| (f.eval(x) - mean).powi(2))?.value;
    let bound = spectral_gap(model, theta0).map(|l| 2.0 * var / (l * dmu * dmu));
    if let Some(b) = bound {
        let rel = if avar != 0.0 { avar_stderr / avar.abs() } else { 0.0 };
        if avar > b * (1.0 + 3.0 * rel) + 1e-12 * b {
            return Err(Error::Assembly(format!(
                "AVAR {avar:e} exceeds the spectral-gap bound {b:e}"
            )));
        }
    }
    let mut components = BTreeMap::new();
    components.insert("mu0(f* U0(f*))".to_string(), Component::from(&pairing));
    components.insert(
        "dtheta mu(f)".to_string(),
        Component {
            value: dmu,
            stderr: 0.0,
            method: EstimateMethod::ClosedForm,
        },
    );
    components.insert(
        "var0(f)".to_string(),
        Component {
            value: var,
            stderr: 0.0,
            method: EstimateMethod::ClosedForm,
        },
    );
    let mut notes = vec![format!("pairing via {}", pairing.method.as_str())];
    notes.extend(pairing.warnings.iter().cloned());
    Ok(AvarReport {
        avar: Avar::Scalar(avar),
        avar_stderr: Some(avar_stderr),
        components,
        w_matrix: None,
        bound,
        method_notes: notes,
        seeds: pairing.seed.into_iter().collect(),
    })
}

/// Sandwich covariance `W⁻¹𝒱₀W⁻ᵀ` for the 1-lag estimator.
///
/// With `f₁* = K_f(θ₀)(μ₀(f) − f)`, `f₂* = f(𝓛₀f + f₁*)`, `φ = f f′ b²`:
/// * `V₁₁ = 2μ₀(f₁*U₀f₁*)`
/// * `V₁₂ = μ₀(f₁*U₀f₂* + f₂*U₀f₁*) + μ₀(φ ∂ₓU₀f₁*)`
/// * `V₂₂ = 2μ₀(f₂*U₀f₂*) + μ₀(φ²/b²) + 2μ₀(φ ∂ₓU₀f₂*)`
pub fn avar_onelag(
    model: &dyn DiffusionModel,
    theta0: &[f64],
    spec: &PredictorSpec,
    method: &PairingMethod,
) -> Result<AvarReport> {
    if spec.q != 1 {
        return Err(Error::Config(format!("avar_onelag needs q = 1, got {}", spec.q)));
    }
    if theta0.len() != 2 {
        return Err(Error::Config("the 1-lag estimator needs a two-dimensional parameter".into()));
    }
    let f = spec.f.clone();
    let mu = invariant_moment(model, theta0, &f)?.value;
    let k0 = kf_coefficient(model, theta0, &f)?;
    let mut notes = Vec::new();

    let f1_star = f.shifted(-mu).scaled(-k0).labelled("f1*");
    let f2_eval = |x: f64| {
        let lf = generator_at(model, theta0, &f, x);
        f.eval(x) * (lf + k0 * (mu - f.eval(x)))
    };
    let f2_mean = invariant_expectation(model, theta0, f2_eval)?.value;
    let f2_norm = invariant_expectation(model, theta0, |x| f2_eval(x).powi(2))?.value.sqrt();
    // f₂* cancels exactly for affine f under linear drift; compare to its parts.
    let part_norm = invariant_expectation(model, theta0, |x| {
        (f.eval(x) * generator_at(model, theta0, &f, x)).powi(2)
    })?
    .value
    .sqrt();
    let f2_zero = f2_norm <= 1e-9 * part_norm.max(1e-300);
    let f2_shift = if !f2_zero && f2_mean.abs() > 1e-6 * f2_norm {
        let msg = format!("f2* is not centered (mean {f2_mean:e}); subtracted its invariant mean");
        log::warn!("{msg}");
        notes.push(msg);
        f2_mean
    } else {
        0.0
    };
    let f2_centered = |x: f64| f2_eval(x) - f2_shift;
    let phi = |x: f64| {
        let b = model.diffusion(x, theta0);
        f.eval(x) * f.d1(x) * b * b
    };

    let mut components = BTreeMap::new();
    let mut seeds = Vec::new();
    let mut record = |name: &str, e: &PotentialEstimate, comps: &mut BTreeMap<String, Component>| {
        comps.insert(name.to_string(), Component::from(e));
        if let Some(s) = e.seed {
            if !seeds.contains(&s) {
                seeds.push(s);
            }
        }
    };

    let p11 = potential_pairing(model, theta0, &f1_star, &f1_star, method)?;
    record("mu0(f1* U0(f1*))", &p11, &mut components);

    // Pairings involving f₂*; zero when f₂* vanishes identically.
    let pair_f2 = |g1: &(dyn Fn(f64) -> f64 + Sync), g2_is_f2: bool| -> Result<PotentialEstimate> {
        if f2_zero {
            return Ok(PotentialEstimate::exact(0.0));
        }
        if g2_is_f2 {
            let cfg = method.mc().ok_or_else(|| {
                Error::NotAvailable("closed-form potential of f2* (configure Monte Carlo)".into())
            })?;
            pairing_mc_fn(model, theta0, g1, &f2_centered, cfg)
        } else {
            // g₂ = f₁*: closed form allowed.
            if method.allows_closed_form() {
                if let Ok(rate) = closed_form_rate(model, theta0, &f1_star) {
                    let v = invariant_expectation(model, theta0, |x| g1(x) * f1_star.eval(x))?.value;
                    return Ok(PotentialEstimate::exact(v / rate));
                }
            }
            let cfg = method.mc().ok_or_else(|| {
                Error::NotAvailable("closed-form potential of f1* (configure Monte Carlo)".into())
            })?;
            pairing_mc_fn(model, theta0, g1, &|x| f1_star.eval(x), cfg)
        }
    };
    let p12 = pair_f2(&|x| f1_star.eval(x), true)?;
    let p21 = pair_f2(&f2_centered, false)?;
    let p22 = pair_f2(&f2_centered, true)?;
    record("mu0(f1* U0(f2*))", &p12, &mut components);
    record("mu0(f2* U0(f1*))", &p21, &mut components);
    record("mu0(f2* U0(f2*))", &p22, &mut components);

    let phi_d1 = |x: f64| {
        let (b, db) = (model.diffusion(x, theta0), model.diffusion_dx(x, theta0));
        let (v, d1, d2) = (f.eval(x), f.d1(x), f.d2(x));
        (d1 * d1 + v * d2) * b * b + 2.0 * v * d1 * b * db
    };
    let phi_check = boundary_check(model, theta0, &phi)?;
    let mc_cfg = || {
        method
            .mc()
            .ok_or_else(|| Error::NotAvailable("closed-form potential (configure Monte Carlo)".into()))
    };
    let d1 = match (method.allows_closed_form(), potential_closed_form(model, theta0, &f1_star)) {
        (true, Ok(u)) => {
            PotentialEstimate::exact(invariant_expectation(model, theta0, |x| phi(x) * u.d1(x))?.value)
        }
        _ => by_parts(
            model,
            theta0,
            &phi,
            &phi_d1,
            &phi_check,
            &|x| f1_star.eval(x),
            "f1*",
            mc_cfg()?,
        )?,
    };
    record("mu0(phi dx U0(f1*))", &d1, &mut components);
    let d2 = if f2_zero {
        PotentialEstimate::exact(0.0)
    } else {
        by_parts(model, theta0, &phi, &phi_d1, &phi_check, &f2_centered, "f2*", mc_cfg()?)?
    };
    record("mu0(phi dx U0(f2*))", &d2, &mut components);
    let sq = invariant_expectation(model, theta0, |x| {
        let b = model.diffusion(x, theta0);
        (f.eval(x) * f.d1(x) * b).powi(2)
    })?
    .value;
    record("mu0([f f' b]^2)", &PotentialEstimate::exact(sq), &mut components);

    let v11 = 2.0 * p11.value;
    let v12 = p12.value + p21.value + d1.value;
    let v22 = 2.0 * p22.value + sq + 2.0 * d2.value;
    let v = DMatrix::from_row_slice(2, 2, &[v11, v12, v12, v22]);

    let w = w_limit(model, theta0, theta0, spec)?;
    let w_inv = w
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or(Error::NearSingular(f64::INFINITY))?;
    let cond = crate::solver::condition_number(&w);
    if !(cond < 1e12) {
        return Err(Error::NearSingular(cond));
    }
    let sandwich = &w_inv * &v * w_inv.transpose();
    let sandwich = 0.5 * (&sandwich + sandwich.transpose());
    let eig = SymmetricEigen::new(sandwich.clone()).eigenvalues;
    let trace = sandwich.trace().abs();
    if eig.iter().any(|e| *e < -1e-10 * trace.max(1e-300)) {
        return Err(Error::Assembly(format!(
            "sandwich covariance is not positive semi-definite (eigenvalues {:?}); components {:?}",
            eig.as_slice(),
            components
        )));
    }
    for (name, value) in [("V11", v11), ("V12", v12), ("V22", v22)] {
        components.insert(
            name.to_string(),
            Component {
                value,
                stderr: 0.0,
                method: if [&p11, &p12, &p21, &p22, &d1, &d2]
                    .iter()
                    .all(|e| e.method == EstimateMethod::ClosedForm)
                {
                    EstimateMethod::ClosedForm
                } else {
                    p11.method
                },
            },
        );
    }
    notes.push(format!("K_f(theta0) = {k0:.17e}"));
    if f2_zero {
        notes.push("f2* vanishes identically; its pairings are zero".to_string());
    }
    let to_arr = |m: &DMatrix<f64>| [[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]];
    Ok(AvarReport {
        avar: Avar::Matrix(to_arr(&sandwich)),
        avar_stderr: None,
        components,
        w_matrix: Some(to_arr(&w)),
        bound: None,
        method_notes: notes,
        seeds,
    })
}

/// Both forms of the CLT variance of `Σ g(X_{t_i})Δ/√(nΔ)`:
/// `2μ₀(g U₀ g)` and `μ₀([∂ₓU₀(g) b]²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltVariance {
    pub pairing_form: PotentialEstimate,
    pub gradient_form: Option<PotentialEstimate>,
    pub discrepancy: Option<f64>,
}

/// `2μ₀(gU₀g)`; the gradient form is added when `U₀(g)` has a closed form.
pub fn clt_variance(
    model: &dyn DiffusionModel,
    theta0: &[f64],
    g: &SmoothFunction,
    method: &PairingMethod,
) -> Result<CltVariance> {
    let mut warnings = Vec::new();
    let shift = center(model, theta0, &|x| g.eval(x), g.label(), &mut warnings)?;
    let gc = if shift != 0.0 { g.shifted(-shift) } else { g.clone() };
    let mut pairing = potential_pairing(model, theta0, &gc, &gc, method)?.scaled(2.0);
    pairing.warnings.splice(0..0, warnings);
    let gradient_form = match potential_closed_form(model, theta0, &gc) {
        Ok(u) => {
            let v = invariant_expectation(model, theta0, |x| (u.d1(x) * model.diffusion(x, theta0)).powi(2))?
                .value;
            Some(PotentialEstimate::exact(v))
        }
        Err(Error::NotAvailable(_)) => None,
        Err(e) => return Err(e),
    };
    let discrepancy = gradient_form.as_ref().map(|gf| (gf.value - pairing.value).abs());
    Ok(CltVariance {
        pairing_form: pairing,
        gradient_form,
        discrepancy,
    })
}

/// Monte Carlo estimate of `μ₀([∂ₓU₀(g)b]²)` (truncated at `t_max`).
///
/// `∂ₓU(g)(x) = E ∫₀^{t_max} g′(X_t) Y_t dt` with tangent `Y = ∂X/∂x₀`; the
/// square is estimated without bias from two independent tangent paths per
/// stationary start.
pub fn gradient_form_mc(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g: &SmoothFunction,
    cfg: &PotentialMCConfig,
) -> Result<PotentialEstimate> {
    cfg.validate()?;
    model.validate(theta)?;
    let r = resolve(model, theta, &|x| g.eval(x), cfg)?;
    let space = model.state_space(theta);
    let transition = model.closed_form(theta).and_then(|c| c.transition);
    let h = r.h;
    let sqrt_h = h.sqrt();
    let integral = |x0: f64, rng: &mut crate::rng::StreamRng| -> Result<f64> {
        let (mut x, mut y) = (x0, 1.0);
        let mut acc = 0.5 * g.d1(x);
        for k in 1..=r.steps {
            let z: f64 = rng.sample(StandardNormal);
            match transition {
                Some(tr) => {
                    let decay = (-tr.rate * h).exp();
                    x = tr.level + (x - tr.level) * decay + tr.variance(h).sqrt() * z;
                    y *= decay;
                }
                None => {
                    let xe = space.clamp_closed(x);
                    let (a, b) = (model.drift(xe, theta), model.diffusion(xe, theta));
                    let (da, db) = (model.drift_dx(xe, theta), model.diffusion_dx(xe, theta));
                    y *= 1.0 + da * h + db * sqrt_h * z;
                    x += a * h + b * sqrt_h * z;
                }
            }
            if !x.is_finite() {
                return Err(Error::Simulation { index: k, value: x });
            }
            let w = if k == r.steps { 0.5 } else { 1.0 };
            acc += w * g.d1(space.clamp_closed(x)) * y;
        }
        Ok(acc * h)
    };
    let draws: Vec<f64> = (0..cfg.k)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let x0 = draw_stationary(model, theta, &mut rng)?;
            let a = integral(x0, &mut rng)?;
            let b = integral(x0, &mut rng)?;
            Ok(a * b * model.diffusion(x0, theta).powi(2))
        })
        .collect::<Result<_>>()?;
    let (value, stderr) = mean_stderr(&draws);
    Ok(PotentialEstimate {
        value,
        stderr: if stderr.is_finite() { stderr } else { 0.0 },
        method: EstimateMethod::GridQuadrature,
        bias_bound: None,
        k_used: cfg.k,
        stderr_unreliable: false,
        diagnostics_only: cfg.k < 10,
        gamma: Some(r.gamma),
        t_max: Some(r.t_max),
        seed: Some(cfg.seed),
        warnings: Vec::new(),
    })
}
