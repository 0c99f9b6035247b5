//! Parametric scalar diffusions `dX = a(X; θ) dt + b(X; θ) dB`.
//!
//! A model is described by the [`DiffusionModel`] trait. Two families are
//! built in, [`OrnsteinUhlenbeck`] and [`CoxIngersollRoss`]; user models
//! implement the trait directly and must supply a normalized invariant
//! log-density.

use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use rand::RngCore;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Gamma as GammaDist, Normal as NormalDist};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::function::SmoothFunction;
use crate::quadrature::{integrate_pieces, GaussHermite, QuadResult};

/// Open interval `(lo, hi)`; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const REAL_LINE: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };
    pub const POSITIVE: Interval = Interval {
        lo: 0.0,
        hi: f64::INFINITY,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.lo && x < self.hi
    }

    /// Clamp into the closed interval.
    pub fn clamp_closed(&self, x: f64) -> f64 {
        x.max(self.lo).min(self.hi)
    }

    pub fn check(&self, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::Domain {
                x,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }
}

/// A parameter value `θ ∈ Θ`, with `Θ` a product of open intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    bounds: Vec<Interval>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, bounds: Vec<Interval>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Parameter("parameter vector must have d >= 1".into()));
        }
        if values.len() != bounds.len() {
            return Err(Error::Parameter(format!(
                "{} values but {} bounds",
                values.len(),
                bounds.len()
            )));
        }
        for (i, (v, b)) in values.iter().zip(&bounds).enumerate() {
            if !b.contains(*v) {
                return Err(Error::Parameter(format!(
                    "coordinate {i} = {v} is not inside ({}, {})",
                    b.lo, b.hi
                )));
            }
        }
        Ok(ParamVector { values, bounds })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> &[Interval] {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Same bounds, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values, self.bounds.clone())
    }
}

/// Stationary law of a built-in family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InvariantLaw {
    Gaussian { mean: f64, sd: f64 },
    Gamma { shape: f64, rate: f64 },
}

impl InvariantLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            InvariantLaw::Gaussian { mean, .. } => mean,
            InvariantLaw::Gamma { shape, rate } => shape / rate,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            InvariantLaw::Gaussian { sd, .. } => sd * sd,
            InvariantLaw::Gamma { shape, rate } => shape / (rate * rate),
        }
    }

    pub fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        match *self {
            InvariantLaw::Gaussian { mean, sd } => Normal::new(mean, sd)
                .expect("validated parameters")
                .sample(rng),
            InvariantLaw::Gamma { shape, rate } => Gamma::new(shape, 1.0 / rate)
                .expect("validated parameters")
                .sample(rng),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            InvariantLaw::Gaussian { mean, sd } => NormalDist::new(mean, sd)
                .expect("validated parameters")
                .inverse_cdf(p),
            InvariantLaw::Gamma { shape, rate } => GammaDist::new(shape, rate)
                .expect("validated parameters")
                .inverse_cdf(p),
        }
    }
}

/// Exact Gaussian transition `X_t | X_0 = x ~ N(level + (x - level)e^{-rate t}, v(t))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianTransition {
    pub rate: f64,
    pub level: f64,
    pub noise: f64,
}

impl GaussianTransition {
    pub fn mean(&self, x: f64, t: f64) -> f64 {
        self.level + (x - self.level) * (-self.rate * t).exp()
    }

    pub fn variance(&self, t: f64) -> f64 {
        self.noise * self.noise * (-(-2.0 * self.rate * t).exp_m1()) / (2.0 * self.rate)
    }
}

/// `E[X_t | X_0 = x] = level + (x - level) e^{-rate t}` (linear drift).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanReversion {
    pub rate: f64,
    pub level: f64,
}

/// Analytic oracles a model may expose at a given θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedForm {
    pub invariant: InvariantLaw,
    pub spectral_gap: Option<f64>,
    pub mean_reversion: Option<MeanReversion>,
    pub transition: Option<GaussianTransition>,
}

impl ClosedForm {
    /// Autocovariance of the identity function at lag `t`.
    pub fn autocovariance(&self, t: f64) -> Option<f64> {
        self.mean_reversion
            .map(|m| self.invariant.variance() * (-m.rate * t).exp())
    }
}

/// A parametric scalar diffusion.
///
/// `theta` is always the vector of free parameters (length
/// [`DiffusionModel::dim_theta`]). Implementations must be immutable and
/// shareable across threads.
pub trait DiffusionModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim_theta(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    /// Parameter space Θ as a product of open intervals.
    fn param_bounds(&self) -> Vec<Interval>;
    fn state_space(&self, theta: &[f64]) -> Interval;

    fn drift(&self, x: f64, theta: &[f64]) -> f64;
    fn drift_dx(&self, x: f64, theta: &[f64]) -> f64;
    fn drift_dxx(&self, x: f64, theta: &[f64]) -> f64;
    fn diffusion(&self, x: f64, theta: &[f64]) -> f64;
    fn diffusion_dx(&self, x: f64, theta: &[f64]) -> f64;
    fn diffusion_dxx(&self, x: f64, theta: &[f64]) -> f64;

    /// Normalized log-density of the invariant law μ_θ.
    fn invariant_logdensity(&self, x: f64, theta: &[f64]) -> f64;
    fn invariant_logdensity_dx(&self, x: f64, theta: &[f64]) -> f64;

    fn closed_form(&self, _theta: &[f64]) -> Option<ClosedForm> {
        None
    }

    /// Check θ against Θ and family-specific constraints.
    fn validate(&self, theta: &[f64]) -> Result<()> {
        validate_in_bounds(theta, &self.param_bounds())
    }

    /// Assumptions the library relies on but cannot verify for this model.
    fn assumptions(&self) -> Vec<String> {
        vec![
            "rho-mixing (spectral gap) assumed, not verified".to_string(),
            "linear growth of drift and diffusion assumed, not verified".to_string(),
        ]
    }
}

pub(crate) fn validate_in_bounds(theta: &[f64], bounds: &[Interval]) -> Result<()> {
    if theta.len() != bounds.len() {
        return Err(Error::Parameter(format!(
            "expected {} parameters, got {}",
            bounds.len(),
            theta.len()
        )));
    }
    for (i, (v, b)) in theta.iter().zip(bounds).enumerate() {
        if !b.contains(*v) {
            return Err(Error::Parameter(format!(
                "theta[{i}] = {v} outside ({}, {})",
                b.lo, b.hi
            )));
        }
    }
    Ok(())
}

/// Names, fixed values and free coordinates of a three-parameter family
/// `(eta, kappa, xi)`.
#[derive(Debug, Clone)]
struct ParamLayout {
    values: [f64; 3],
    free: Vec<usize>,
    bounds: [Interval; 3],
}

const PARAM_NAMES: [&str; 3] = ["eta", "kappa", "xi"];

impl ParamLayout {
    fn full(&self, theta: &[f64]) -> [f64; 3] {
        debug_assert_eq!(theta.len(), self.free.len());
        let mut v = self.values;
        for (slot, value) in self.free.iter().zip(theta) {
            v[*slot] = *value;
        }
        v
    }

    fn set_free(&mut self, names: &[&str]) -> Result<()> {
        let mut free = Vec::with_capacity(names.len());
        for name in names {
            let idx = PARAM_NAMES
                .iter()
                .position(|p| p == name)
                .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
            if free.contains(&idx) {
                return Err(Error::Config(format!("parameter '{name}' listed twice")));
            }
            free.push(idx);
        }
        if free.is_empty() {
            return Err(Error::Config("at least one parameter must be free".into()));
        }
        self.free = free;
        Ok(())
    }

    fn set_bounds(&mut self, name: &str, lo: f64, hi: f64) -> Result<()> {
        let idx = PARAM_NAMES
            .iter()
            .position(|p| *p == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        if lo >= hi {
            return Err(Error::Config(format!("empty bounds for '{name}'")));
        }
        let natural = self.bounds[idx];
        self.bounds[idx] = Interval::new(lo.max(natural.lo), hi.min(natural.hi));
        Ok(())
    }

    fn nominal(&self) -> Result<ParamVector> {
        ParamVector::new(
            self.free.iter().map(|i| self.values[*i]).collect(),
            self.free.iter().map(|i| self.bounds[*i]).collect(),
        )
    }
}

/// Ornstein–Uhlenbeck process `dX = κ(η − X)dt + ξ dB`.
#[derive(Debug, Clone)]
pub struct OrnsteinUhlenbeck {
    layout: ParamLayout,
}

impl OrnsteinUhlenbeck {
    /// All parameters free in the order (eta, kappa, xi).
    pub fn new(eta: f64, kappa: f64, xi: f64) -> Result<Self> {
        let m = OrnsteinUhlenbeck {
            layout: ParamLayout {
                values: [eta, kappa, xi],
                free: vec![0, 1, 2],
                bounds: [Interval::REAL_LINE, Interval::POSITIVE, Interval::POSITIVE],
            },
        };
        m.validate(&[eta, kappa, xi])?;
        Ok(m)
    }

    /// Restrict estimation to the named parameters; the rest stay fixed.
    pub fn estimating(mut self, names: &[&str]) -> Result<Self> {
        self.layout.set_free(names)?;
        Ok(self)
    }

    pub fn with_bounds(mut self, name: &str, lo: f64, hi: f64) -> Result<Self> {
        self.layout.set_bounds(name, lo, hi)?;
        Ok(self)
    }

    /// Free parameters at their constructed values.
    pub fn nominal_theta(&self) -> Result<ParamVector> {
        self.layout.nominal()
    }

    /// `(eta, kappa, xi)` at θ.
    pub fn params(&self, theta: &[f64]) -> [f64; 3] {
        self.layout.full(theta)
    }
}

impl DiffusionModel for OrnsteinUhlenbeck {
    fn name(&self) -> &str {
        "ou"
    }

    fn dim_theta(&self) -> usize {
        self.layout.free.len()
    }

    fn param_names(&self) -> Vec<String> {
        self.layout
            .free
            .iter()
            .map(|i| PARAM_NAMES[*i].to_string())
            .collect()
    }

    fn param_bounds(&self) -> Vec<Interval> {
        self.layout.free.iter().map(|i| self.layout.bounds[*i]).collect()
    }

    fn state_space(&self, _theta: &[f64]) -> Interval {
        Interval::REAL_LINE
    }

    fn drift(&self, x: f64, theta: &[f64]) -> f64 {
        let [eta, kappa, _] = self.layout.full(theta);
        kappa * (eta - x)
    }

    fn drift_dx(&self, _x: f64, theta: &[f64]) -> f64 {
        -self.layout.full(theta)[1]
    }

    fn drift_dxx(&self, _x: f64, _theta: &[f64]) -> f64 {
        0.0
    }

    fn diffusion(&self, _x: f64, theta: &[f64]) -> f64 {
        self.layout.full(theta)[2]
    }

    fn diffusion_dx(&self, _x: f64, _theta: &[f64]) -> f64 {
        0.0
    }

    fn diffusion_dxx(&self, _x: f64, _theta: &[f64]) -> f64 {
        0.0
    }

    fn invariant_logdensity(&self, x: f64, theta: &[f64]) -> f64 {
        let [eta, kappa, xi] = self.layout.full(theta);
        let var = xi * xi / (2.0 * kappa);
        -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - eta).powi(2) / (2.0 * var)
    }

    fn invariant_logdensity_dx(&self, x: f64, theta: &[f64]) -> f64 {
        let [eta, kappa, xi] = self.layout.full(theta);
        -(x - eta) * 2.0 * kappa / (xi * xi)
    }

    fn closed_form(&self, theta: &[f64]) -> Option<ClosedForm> {
        let [eta, kappa, xi] = self.layout.full(theta);
        Some(ClosedForm {
            invariant: InvariantLaw::Gaussian {
                mean: eta,
                sd: xi / (2.0 * kappa).sqrt(),
            },
            spectral_gap: Some(kappa),
            mean_reversion: Some(MeanReversion {
                rate: kappa,
                level: eta,
            }),
            transition: Some(GaussianTransition {
                rate: kappa,
                level: eta,
                noise: xi,
            }),
        })
    }

    fn validate(&self, theta: &[f64]) -> Result<()> {
        validate_in_bounds(theta, &self.param_bounds())?;
        let [eta, kappa, xi] = self.layout.full(theta);
        if !eta.is_finite() || !(kappa > 0.0) || !(xi > 0.0) {
            return Err(Error::Parameter(format!(
                "OU requires kappa > 0 and xi > 0 (got eta={eta}, kappa={kappa}, xi={xi})"
            )));
        }
        Ok(())
    }
}

/// Cox–Ingersoll–Ross process `dX = κ(η − X)dt + ξ√X dB` on `(0, ∞)`.
///
/// Construction enforces the Feller condition `2κη ≥ ξ²`.
#[derive(Debug, Clone)]
pub struct CoxIngersollRoss {
    layout: ParamLayout,
}

impl CoxIngersollRoss {
    pub fn new(eta: f64, kappa: f64, xi: f64) -> Result<Self> {
        let m = CoxIngersollRoss {
            layout: ParamLayout {
                values: [eta, kappa, xi],
                free: vec![0, 1, 2],
                bounds: [Interval::POSITIVE, Interval::POSITIVE, Interval::POSITIVE],
            },
        };
        m.validate(&[eta, kappa, xi])?;
        Ok(m)
    }

    pub fn estimating(mut self, names: &[&str]) -> Result<Self> {
        self.layout.set_free(names)?;
        Ok(self)
    }

    pub fn with_bounds(mut self, name: &str, lo: f64, hi: f64) -> Result<Self> {
        self.layout.set_bounds(name, lo, hi)?;
        Ok(self)
    }

    pub fn nominal_theta(&self) -> Result<ParamVector> {
        self.layout.nominal()
    }

    pub fn params(&self, theta: &[f64]) -> [f64; 3] {
        self.layout.full(theta)
    }

    fn gamma_params(&self, theta: &[f64]) -> (f64, f64) {
        let [eta, kappa, xi] = self.layout.full(theta);
        let rate = 2.0 * kappa / (xi * xi);
        (rate * eta, rate)
    }
}

impl DiffusionModel for CoxIngersollRoss {
    fn name(&self) -> &str {
        "cir"
    }

    fn dim_theta(&self) -> usize {
        self.layout.free.len()
    }

    fn param_names(&self) -> Vec<String> {
        self.layout
            .free
            .iter()
            .map(|i| PARAM_NAMES[*i].to_string())
            .collect()
    }

    fn param_bounds(&self) -> Vec<Interval> {
        self.layout.free.iter().map(|i| self.layout.bounds[*i]).collect()
    }

    fn state_space(&self, _theta: &[f64]) -> Interval {
        Interval::POSITIVE
    }

    fn drift(&self, x: f64, theta: &[f64]) -> f64 {
        let [eta, kappa, _] = self.layout.full(theta);
        kappa * (eta - x)
    }

    fn drift_dx(&self, _x: f64, theta: &[f64]) -> f64 {
        -self.layout.full(theta)[1]
    }

    fn drift_dxx(&self, _x: f64, _theta: &[f64]) -> f64 {
        0.0
    }

    fn diffusion(&self, x: f64, theta: &[f64]) -> f64 {
        self.layout.full(theta)[2] * x.max(0.0).sqrt()
    }

    fn diffusion_dx(&self, x: f64, theta: &[f64]) -> f64 {
        0.5 * self.layout.full(theta)[2] / x.sqrt()
    }

    fn diffusion_dxx(&self, x: f64, theta: &[f64]) -> f64 {
        -0.25 * self.layout.full(theta)[2] / (x * x.sqrt())
    }

    fn invariant_logdensity(&self, x: f64, theta: &[f64]) -> f64 {
        let (shape, rate) = self.gamma_params(theta);
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
    }

    fn invariant_logdensity_dx(&self, x: f64, theta: &[f64]) -> f64 {
        let (shape, rate) = self.gamma_params(theta);
        (shape - 1.0) / x - rate
    }

    fn closed_form(&self, theta: &[f64]) -> Option<ClosedForm> {
        let [eta, kappa, _] = self.layout.full(theta);
        let (shape, rate) = self.gamma_params(theta);
        Some(ClosedForm {
            invariant: InvariantLaw::Gamma { shape, rate },
            spectral_gap: Some(kappa),
            mean_reversion: Some(MeanReversion {
                rate: kappa,
                level: eta,
            }),
            transition: None,
        })
    }

    fn validate(&self, theta: &[f64]) -> Result<()> {
        validate_in_bounds(theta, &self.param_bounds())?;
        let [eta, kappa, xi] = self.layout.full(theta);
        if !(eta > 0.0 && kappa > 0.0 && xi > 0.0) {
            return Err(Error::Parameter(format!(
                "CIR requires eta, kappa, xi > 0 (got {eta}, {kappa}, {xi})"
            )));
        }
        if 2.0 * kappa * eta < xi * xi {
            return Err(Error::Parameter(format!(
                "CIR requires 2*kappa*eta >= xi^2 (got {} < {})",
                2.0 * kappa * eta,
                xi * xi
            )));
        }
        Ok(())
    }
}

/// Structured description of a built-in model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `"ou"` or `"cir"`.
    pub family: String,
    /// Values of `eta`, `kappa`, `xi`; the free ones are θ₀.
    pub params: BTreeMap<String, f64>,
    /// Free parameters, in order. Empty means all three.
    #[serde(default)]
    pub estimate: Vec<String>,
    /// Optional bounds `[lo, hi]` per parameter.
    #[serde(default)]
    pub bounds: BTreeMap<String, [f64; 2]>,
}

impl ModelConfig {
    /// Build the model and the nominal parameter θ₀.
    pub fn build(&self) -> Result<(Arc<dyn DiffusionModel>, ParamVector)> {
        let get = |name: &str| {
            self.params
                .get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("missing parameter '{name}'")))
        };
        for key in self.params.keys() {
            if !PARAM_NAMES.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown parameter '{key}'")));
            }
        }
        let (eta, kappa, xi) = (get("eta")?, get("kappa")?, get("xi")?);
        let free: Vec<&str> = if self.estimate.is_empty() {
            PARAM_NAMES.to_vec()
        } else {
            self.estimate.iter().map(String::as_str).collect()
        };
        match self.family.to_ascii_lowercase().as_str() {
            "ou" | "ornstein-uhlenbeck" => {
                let mut m = OrnsteinUhlenbeck::new(eta, kappa, xi)?.estimating(&free)?;
                for (name, [lo, hi]) in &self.bounds {
                    m = m.with_bounds(name, *lo, *hi)?;
                }
                let theta = m.nominal_theta()?;
                Ok((Arc::new(m), theta))
            }
            "cir" | "cox-ingersoll-ross" => {
                let mut m = CoxIngersollRoss::new(eta, kappa, xi)?.estimating(&free)?;
                for (name, [lo, hi]) in &self.bounds {
                    m = m.with_bounds(name, *lo, *hi)?;
                }
                let theta = m.nominal_theta()?;
                Ok((Arc::new(m), theta))
            }
            other => Err(Error::Config(format!("unknown model family '{other}'"))),
        }
    }
}

/// `𝓛_θ f(x) = a(x;θ) f'(x) + ½ b²(x;θ) f''(x)`.
pub fn generator_apply(
    model: &dyn DiffusionModel,
    theta: &[f64],
    f: &SmoothFunction,
    x: f64,
) -> Result<f64> {
    model.state_space(theta).check(x)?;
    Ok(generator_at(model, theta, f, x))
}

#[inline]
pub(crate) fn generator_at(
    model: &dyn DiffusionModel,
    theta: &[f64],
    f: &SmoothFunction,
    x: f64,
) -> f64 {
    let b = model.diffusion(x, theta);
    model.drift(x, theta) * f.d1(x) + 0.5 * b * b * f.d2(x)
}

/// `𝓛ⁱ_θ f(x)` for `i ∈ {0, 1, 2}`.
pub fn generator_iterate(
    model: &dyn DiffusionModel,
    theta: &[f64],
    f: &SmoothFunction,
    x: f64,
    order: usize,
) -> Result<f64> {
    model.state_space(theta).check(x)?;
    match order {
        0 => Ok(f.eval(x)),
        1 => Ok(generator_at(model, theta, f, x)),
        2 => {
            let (f1, f2) = (f.d1(x), f.d2(x));
            let f3 = f.d3(x).ok_or_else(|| {
                Error::NotAvailable(format!("third derivative of {}", f.label()))
            })?;
            let f4 = f.d4(x).ok_or_else(|| {
                Error::NotAvailable(format!("fourth derivative of {}", f.label()))
            })?;
            let a = model.drift(x, theta);
            let a1 = model.drift_dx(x, theta);
            let a2 = model.drift_dxx(x, theta);
            let b = model.diffusion(x, theta);
            let b1 = model.diffusion_dx(x, theta);
            let b2 = model.diffusion_dxx(x, theta);
            // g = 𝓛f = a f' + ½ b² f''
            let g1 = a1 * f1 + a * f2 + b * b1 * f2 + 0.5 * b * b * f3;
            let g2 = a2 * f1
                + 2.0 * a1 * f2
                + a * f3
                + (b1 * b1 + b * b2) * f2
                + 2.0 * b * b1 * f3
                + 0.5 * b * b * f4;
            Ok(a * g1 + 0.5 * b * b * g2)
        }
        other => Err(Error::UnsupportedOrder(other)),
    }
}

/// Region outside which the invariant density is below `1e-16` of its mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantSupport {
    pub lo: f64,
    pub hi: f64,
    pub mode: f64,
    pub log_mode: f64,
}

const LOG_TAIL_CUTOFF: f64 = 36.841_361_487_904_734; // ln(1e16)

/// Locate the mode of the invariant density and its `1e-16` truncation points.
pub fn invariant_support(model: &dyn DiffusionModel, theta: &[f64]) -> Result<InvariantSupport> {
    invariant_support_at(model, theta, LOG_TAIL_CUTOFF)
}

pub(crate) fn invariant_support_at(
    model: &dyn DiffusionModel,
    theta: &[f64],
    log_drop: f64,
) -> Result<InvariantSupport> {
    let space = model.state_space(theta);
    let logd = |x: f64| model.invariant_logdensity(x, theta);
    let (center, scale) = match model.closed_form(theta) {
        Some(cf) => (cf.invariant.mean(), cf.invariant.variance().sqrt()),
        None => match (space.lo.is_finite(), space.hi.is_finite()) {
            (true, true) => (0.5 * (space.lo + space.hi), 0.25 * (space.hi - space.lo)),
            (true, false) => (space.lo + 1.0, 1.0),
            (false, true) => (space.hi - 1.0, 1.0),
            (false, false) => (0.0, 1.0),
        },
    };
    // Coarse scan for the mode.
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for k in -160..=160 {
        let x = center + scale * k as f64 / 8.0;
        if space.contains(x) {
            let v = logd(x);
            if v > best.1 {
                best = (x, v);
            }
        }
    }
    if !best.1.is_finite() {
        return Err(Error::Numerical(format!(
            "could not locate the invariant density of {} near {center}",
            model.name()
        )));
    }
    // Golden-section refinement on the neighbouring cells.
    let h = scale / 8.0;
    let (mut a, mut b) = (
        (best.0 - h).max(space.lo),
        (best.0 + h).min(space.hi),
    );
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        let (fc, fd) = (
            if space.contains(c) { logd(c) } else { f64::NEG_INFINITY },
            if space.contains(d) { logd(d) } else { f64::NEG_INFINITY },
        );
        if fc > fd {
            b = d;
        } else {
            a = c;
        }
    }
    let mid = 0.5 * (a + b);
    let (mode, log_mode) = if space.contains(mid) && logd(mid) > best.1 {
        (mid, logd(mid))
    } else {
        best
    };
    let threshold = log_mode - log_drop;
    let walk = |dir: f64, limit: f64| -> f64 {
        let mut x = mode;
        let mut step = scale / 8.0;
        for _ in 0..400 {
            let next = x + dir * step;
            if (dir > 0.0 && next >= limit) || (dir < 0.0 && next <= limit) {
                let (mut inside, mut outside) = (x, limit);
                if !limit.is_finite() {
                    return x;
                }
                for _ in 0..200 {
                    let m = 0.5 * (inside + outside);
                    if m == inside || m == outside {
                        break;
                    }
                    if logd(m) > threshold {
                        inside = m;
                    } else {
                        outside = m;
                    }
                }
                return if logd(inside) > threshold { limit } else { outside };
            }
            if logd(next) <= threshold {
                let (mut inside, mut outside) = (x, next);
                for _ in 0..200 {
                    let m = 0.5 * (inside + outside);
                    if m == inside || m == outside {
                        break;
                    }
                    if logd(m) > threshold {
                        inside = m;
                    } else {
                        outside = m;
                    }
                }
                return outside;
            }
            x = next;
            step *= 1.5;
        }
        x
    };
    Ok(InvariantSupport {
        lo: walk(-1.0, space.lo),
        hi: walk(1.0, space.hi),
        mode,
        log_mode,
    })
}

fn secondary_hermite() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| GaussHermite::new(48))
}

/// `μ_θ(g)` for an arbitrary integrand.
///
/// Gaussian invariant laws use Gauss–Hermite quadrature (error estimate from
/// a lower-order rule); everything else uses adaptive Gauss–Kronrod on the
/// truncated support.
pub fn invariant_expectation<G>(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g: G,
) -> Result<QuadResult>
where
    G: Fn(f64) -> f64,
{
    if let Some(ClosedForm {
        invariant: InvariantLaw::Gaussian { mean, sd },
        ..
    }) = model.closed_form(theta)
    {
        let value = GaussHermite::standard().expectation(mean, sd, &g);
        let coarse = secondary_hermite().expectation(mean, sd, &g);
        if !value.is_finite() {
            return Err(Error::Numerical("non-finite invariant expectation".into()));
        }
        return Ok(QuadResult {
            value,
            error: (value - coarse).abs(),
            evaluations: 112,
        });
    }
    let support = invariant_support(model, theta)?;
    let mut breaks: Vec<f64> = (0..=8)
        .map(|k| support.lo + (support.hi - support.lo) * k as f64 / 8.0)
        .collect();
    if support.mode > support.lo && support.mode < support.hi {
        breaks.push(support.mode);
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
    }
    let integrand = |x: f64| {
        let w = model.invariant_logdensity(x, theta).exp();
        if w == 0.0 {
            0.0
        } else {
            w * g(x)
        }
    };
    integrate_pieces(&integrand, &breaks, 1e-15, 1e-12, 4000)
}

/// `μ_θ(g)` with an error estimate.
pub fn invariant_moment(
    model: &dyn DiffusionModel,
    theta: &[f64],
    g: &SmoothFunction,
) -> Result<QuadResult> {
    invariant_expectation(model, theta, |x| g.eval(x))
}

/// `K_f(θ) = μ_θ(f 𝓛_θ f) / Var_θ f(X₀)`.
pub fn kf_coefficient(model: &dyn DiffusionModel, theta: &[f64], f: &SmoothFunction) -> Result<f64> {
    let mean = invariant_moment(model, theta, f)?.value;
    let var = invariant_expectation(model, theta, |x| (f.eval(x) - mean).powi(2))?.value;
    let scale = invariant_expectation(model, theta, |x| f.eval(x).powi(2))?.value;
    if !(var > 1e-13 * scale.max(1e-300)) {
        return Err(Error::DegeneratePredictor(var));
    }
    // Centering f makes the numerator exactly shift invariant.
    let num = invariant_expectation(model, theta, |x| {
        (f.eval(x) - mean) * generator_at(model, theta, f, x)
    })?
    .value;
    Ok(num / var)
}

/// `P_t f(x) = E[f(X_t) | X_0 = x]` when it is available in closed form:
/// Gaussian transitions (Gauss–Hermite) or affine `f` under linear mean
/// reversion.
pub fn transition_expectation(
    model: &dyn DiffusionModel,
    theta: &[f64],
    f: &SmoothFunction,
    x: f64,
    t: f64,
) -> Option<f64> {
    let cf = model.closed_form(theta)?;
    if let Some(tr) = cf.transition {
        return Some(
            GaussHermite::standard().expectation(tr.mean(x, t), tr.variance(t).sqrt(), |y| f.eval(y)),
        );
    }
    match (cf.mean_reversion, f.polynomial_coefficients()) {
        (Some(mr), Some(c)) if f.polynomial_degree() <= Some(1) => {
            let c0 = c.first().copied().unwrap_or(0.0);
            let c1 = c.get(1).copied().unwrap_or(0.0);
            Some(c0 + c1 * (mr.level + (x - mr.level) * (-mr.rate * t).exp()))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou(eta: f64, kappa: f64, xi: f64) -> OrnsteinUhlenbeck {
        OrnsteinUhlenbeck::new(eta, kappa, xi).unwrap()
    }

    /// OU with no closed form, to exercise the generic code paths.
    struct PlainOu(OrnsteinUhlenbeck);

    impl DiffusionModel for PlainOu {
        fn name(&self) -> &str {
            "plain-ou"
        }
        fn dim_theta(&self) -> usize {
            self.0.dim_theta()
        }
        fn param_names(&self) -> Vec<String> {
            self.0.param_names()
        }
        fn param_bounds(&self) -> Vec<Interval> {
            self.0.param_bounds()
        }
        fn state_space(&self, t: &[f64]) -> Interval {
            self.0.state_space(t)
        }
        fn drift(&self, x: f64, t: &[f64]) -> f64 {
            self.0.drift(x, t)
        }
        fn drift_dx(&self, x: f64, t: &[f64]) -> f64 {
            self.0.drift_dx(x, t)
        }
        fn drift_dxx(&self, x: f64, t: &[f64]) -> f64 {
            self.0.drift_dxx(x, t)
        }
        fn diffusion(&self, x: f64, t: &[f64]) -> f64 {
            self.0.diffusion(x, t)
        }
        fn diffusion_dx(&self, x: f64, t: &[f64]) -> f64 {
            self.0.diffusion_dx(x, t)
        }
        fn diffusion_dxx(&self, x: f64, t: &[f64]) -> f64 {
            self.0.diffusion_dxx(x, t)
        }
        fn invariant_logdensity(&self, x: f64, t: &[f64]) -> f64 {
            self.0.invariant_logdensity(x, t)
        }
        fn invariant_logdensity_dx(&self, x: f64, t: &[f64]) -> f64 {
            self.0.invariant_logdensity_dx(x, t)
        }
    }

    #[test]
    fn generator_examples() {
        let m = ou(0.0, 1.0, 1.0);
        let th = [0.0, 1.0, 1.0];
        let v = generator_apply(&m, &th, &SmoothFunction::identity(), 2.0).unwrap();
        assert_eq!(v, -2.0);

        let (eta, kappa, xi) = (0.7, 1.3, 0.4);
        let m = ou(eta, kappa, xi);
        let th = [eta, kappa, xi];
        for x in [-1.0, 0.2, 3.0] {
            let v = generator_apply(&m, &th, &SmoothFunction::square(), x).unwrap();
            let expected = 2.0 * kappa * x * (eta - x) + xi * xi;
            assert!((v - expected).abs() < 1e-14);
            let w = generator_iterate(&m, &th, &SmoothFunction::square(), x, 1).unwrap();
            assert_eq!(v, w);
        }

        let c = CoxIngersollRoss::new(1.0, 2.0, 0.5).unwrap();
        let v = generator_apply(&c, &[1.0, 2.0, 0.5], &SmoothFunction::identity(), 1.0).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn generator_domain_error() {
        let c = CoxIngersollRoss::new(1.0, 2.0, 0.5).unwrap();
        let err = generator_apply(&c, &[1.0, 2.0, 0.5], &SmoothFunction::identity(), -1.0);
        assert!(matches!(err, Err(Error::Domain { .. })));
    }

    #[test]
    fn generator_iterate_orders() {
        let m = ou(0.0, 1.0, 1.0);
        let th = [0.0, 1.0, 1.0];
        let f = SmoothFunction::identity();
        assert_eq!(generator_iterate(&m, &th, &f, 3.0, 0).unwrap(), 3.0);
        // 𝓛x = -x, 𝓛²x = x
        for x in [-2.0, 0.5, 3.0] {
            assert!((generator_iterate(&m, &th, &f, x, 2).unwrap() - x).abs() < 1e-14);
        }
        assert!(matches!(
            generator_iterate(&m, &th, &f, 1.0, 3),
            Err(Error::UnsupportedOrder(3))
        ));
    }

    #[test]
    fn second_generator_power_matches_symbolic_composition() {
        // For OU and f = x²: 𝓛f = -2κx² + 2κηx + ξ², 𝓛²f = 𝓛 applied to that quadratic.
        let (eta, kappa, xi) = (0.5, 1.7, 0.8);
        let m = ou(eta, kappa, xi);
        let th = [eta, kappa, xi];
        let lf = SmoothFunction::polynomial(vec![xi * xi, 2.0 * kappa * eta, -2.0 * kappa]);
        for x in [-1.0, 0.3, 2.2] {
            let direct = generator_iterate(&m, &th, &SmoothFunction::square(), x, 2).unwrap();
            let composed = generator_apply(&m, &th, &lf, x).unwrap();
            assert!((direct - composed).abs() < 1e-12, "{direct} vs {composed}");
        }
        // CIR has non-constant b; compare against finite differences of 𝓛f.
        let c = CoxIngersollRoss::new(1.2, 0.9, 0.6).unwrap();
        let thc = [1.2, 0.9, 0.6];
        let f = SmoothFunction::cube();
        let fc = f.clone();
        let cc = c.clone();
        let lf = SmoothFunction::from_fn("Lf", move |x| generator_at(&cc, &thc, &fc, x));
        for x in [0.4, 1.0, 2.5] {
            let direct = generator_iterate(&c, &thc, &f, x, 2).unwrap();
            let numeric = generator_apply(&c, &thc, &lf, x).unwrap();
            assert!((direct - numeric).abs() < 1e-5 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn invariant_moments_ou() {
        let (eta, kappa, xi) = (0.8, 1.5, 0.6);
        let m = ou(eta, kappa, xi);
        let th = [eta, kappa, xi];
        let mean = invariant_moment(&m, &th, &SmoothFunction::identity()).unwrap();
        assert!((mean.value - eta).abs() < 1e-14);
        let m2 = ou(0.0, 1.0, 2f64.sqrt());
        let v = invariant_moment(&m2, &[0.0, 1.0, 2f64.sqrt()], &SmoothFunction::square()).unwrap();
        assert!((v.value - 1.0).abs() < 1e-13);
        let one = invariant_moment(&m, &th, &SmoothFunction::constant(1.0)).unwrap();
        assert!((one.value - 1.0).abs() < 1e-14);
    }

    #[test]
    fn generic_quadrature_matches_closed_form() {
        let inner = ou(0.8, 1.5, 0.6);
        let th = [0.8, 1.5, 0.6];
        let plain = PlainOu(inner.clone());
        for f in [
            SmoothFunction::constant(1.0),
            SmoothFunction::identity(),
            SmoothFunction::square(),
            SmoothFunction::cube(),
        ] {
            let a = invariant_moment(&inner, &th, &f).unwrap().value;
            let b = invariant_moment(&plain, &th, &f).unwrap();
            assert!((a - b.value).abs() < 1e-11, "{}: {a} vs {}", f.label(), b.value);
            assert!(b.error < 1e-10);
        }
    }

    #[test]
    fn cir_density_is_normalized_and_matches_gamma_moments() {
        let c = CoxIngersollRoss::new(1.0, 2.0, 0.5).unwrap();
        let th = [1.0, 2.0, 0.5];
        let cf = c.closed_form(&th).unwrap();
        let one = invariant_moment(&c, &th, &SmoothFunction::constant(1.0)).unwrap();
        assert!((one.value - 1.0).abs() < 1e-10);
        let mean = invariant_moment(&c, &th, &SmoothFunction::identity()).unwrap().value;
        assert!((mean - cf.invariant.mean()).abs() < 1e-10);
        let m2 = invariant_moment(&c, &th, &SmoothFunction::square()).unwrap().value;
        assert!((m2 - mean * mean - cf.invariant.variance()).abs() < 1e-10);
        // Feller boundary case: shape = 1, density finite at 0.
        let c = CoxIngersollRoss::new(0.5, 1.0, 1.0).unwrap();
        let one = invariant_moment(&c, &[0.5, 1.0, 1.0], &SmoothFunction::constant(1.0)).unwrap();
        assert!((one.value - 1.0).abs() < 1e-10);
    }

    #[test]
    fn stationarity_of_generator() {
        let models: Vec<(Box<dyn DiffusionModel>, Vec<f64>)> = vec![
            (Box::new(ou(0.3, 1.2, 0.7)), vec![0.3, 1.2, 0.7]),
            (
                Box::new(CoxIngersollRoss::new(1.0, 2.0, 0.5).unwrap()),
                vec![1.0, 2.0, 0.5],
            ),
            (Box::new(PlainOu(ou(-0.4, 0.8, 1.1))), vec![-0.4, 0.8, 1.1]),
        ];
        for (m, th) in &models {
            for f in [
                SmoothFunction::identity(),
                SmoothFunction::square(),
                SmoothFunction::cube(),
            ] {
                let v = invariant_expectation(m.as_ref(), th, |x| generator_at(m.as_ref(), th, &f, x))
                    .unwrap()
                    .value;
                assert!(v.abs() < 1e-9, "{} {}: {v}", m.name(), f.label());
            }
        }
    }

    #[test]
    fn kf_examples() {
        let (eta, kappa, xi) = (0.4, 1.8, 0.9);
        let m = ou(eta, kappa, xi);
        let th = [eta, kappa, xi];
        let k = kf_coefficient(&m, &th, &SmoothFunction::identity()).unwrap();
        assert!((k + kappa).abs() < 1e-12);
        let c = CoxIngersollRoss::new(1.3, 0.7, 0.6).unwrap();
        let k = kf_coefficient(&c, &[1.3, 0.7, 0.6], &SmoothFunction::identity()).unwrap();
        assert!((k + 0.7).abs() < 1e-9);
        // f = x² under N(0, 1/2): μ(f𝓛f) = E[x²(1 - 2x²)] = 1/2 - 3/2 = -1,
        // Var x² = 2σ⁴ = 1/2, so K = -2.
        let m = ou(0.0, 1.0, 1.0);
        let k = kf_coefficient(&m, &[0.0, 1.0, 1.0], &SmoothFunction::square()).unwrap();
        assert!((k + 2.0).abs() < 1e-12);
    }

    #[test]
    fn kf_degenerate_predictor() {
        let m = ou(0.0, 1.0, 1.0);
        let err = kf_coefficient(&m, &[0.0, 1.0, 1.0], &SmoothFunction::constant(3.0));
        assert!(matches!(err, Err(Error::DegeneratePredictor(_))));
    }

    #[test]
    fn kf_shift_invariance() {
        let m = CoxIngersollRoss::new(1.0, 1.5, 0.8).unwrap();
        let th = [1.0, 1.5, 0.8];
        let f = SmoothFunction::square();
        let k0 = kf_coefficient(&m, &th, &f).unwrap();
        for c in [-3.0, 0.5, 10.0] {
            let k = kf_coefficient(&m, &th, &f.shifted(c)).unwrap();
            assert!((k - k0).abs() < 1e-10 * k0.abs());
        }
    }

    #[test]
    fn closed_form_consistent_with_quadrature() {
        let c = CoxIngersollRoss::new(0.9, 1.1, 0.7).unwrap();
        let th = [0.9, 1.1, 0.7];
        let plain_mean = invariant_expectation(&c, &th, |x| x).unwrap().value;
        let cf = c.closed_form(&th).unwrap();
        assert!((plain_mean - cf.invariant.mean()).abs() < 1e-10);
        assert_eq!(cf.spectral_gap, Some(1.1));
        let o = ou(0.0, 2.5, 1.0);
        let cf = o.closed_form(&[0.0, 2.5, 1.0]).unwrap();
        assert_eq!(cf.spectral_gap, Some(2.5));
        let acf = cf.autocovariance(0.4).unwrap();
        assert!((acf - cf.invariant.variance() * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn cir_feller_condition_enforced() {
        assert!(CoxIngersollRoss::new(0.1, 1.0, 1.0).is_err());
        assert!(OrnsteinUhlenbeck::new(0.0, 1.0, 0.0).is_err());
        assert!(OrnsteinUhlenbeck::new(0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn free_parameter_layout() {
        let m = ou(1.0, 2.0, 0.5).estimating(&["kappa", "eta"]).unwrap();
        assert_eq!(m.dim_theta(), 2);
        assert_eq!(m.param_names(), vec!["kappa", "eta"]);
        assert_eq!(m.params(&[3.0, -1.0]), [-1.0, 3.0, 0.5]);
        assert_eq!(m.nominal_theta().unwrap().values(), &[2.0, 1.0]);
        assert!(ou(1.0, 2.0, 0.5).estimating(&["sigma"]).is_err());
    }

    #[test]
    fn config_round_trip() {
        let text = r#"
            family = "ou"
            estimate = ["eta", "kappa"]
            [params]
            eta = 1.0
            kappa = 2.0
            xi = 1.0
            [bounds]
            eta = [-5.0, 5.0]
        "#;
        let cfg: ModelConfig = toml::from_str(text).unwrap();
        let (m, theta) = cfg.build().unwrap();
        assert_eq!(m.name(), "ou");
        assert_eq!(theta.values(), &[1.0, 2.0]);
        assert_eq!(theta.bounds()[0], Interval::new(-5.0, 5.0));
        let back: ModelConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn param_vector_invariants() {
        assert!(ParamVector::new(vec![], vec![]).is_err());
        assert!(ParamVector::new(vec![1.0], vec![Interval::new(1.0, 2.0)]).is_err());
        assert!(ParamVector::new(vec![1.5], vec![Interval::new(1.0, 2.0)]).is_ok());
    }

    #[test]
    fn transition_expectation_closed_forms() {
        let m = ou(0.5, 1.5, 0.7);
        let th = [0.5, 1.5, 0.7];
        let v = transition_expectation(&m, &th, &SmoothFunction::identity(), 2.0, 0.3).unwrap();
        assert!((v - (0.5 + 1.5 * (-0.45f64).exp())).abs() < 1e-14);
        let tr = m.closed_form(&th).unwrap().transition.unwrap();
        let v2 = transition_expectation(&m, &th, &SmoothFunction::square(), 2.0, 0.3).unwrap();
        assert!((v2 - (tr.mean(2.0, 0.3).powi(2) + tr.variance(0.3))).abs() < 1e-13);
        let c = CoxIngersollRoss::new(1.0, 2.0, 0.5).unwrap();
        let th = [1.0, 2.0, 0.5];
        assert!(transition_expectation(&c, &th, &SmoothFunction::square(), 1.0, 0.1).is_none());
        let v = transition_expectation(&c, &th, &SmoothFunction::identity(), 2.0, 0.1).unwrap();
        assert!((v - (1.0 + (-0.2f64).exp())).abs() < 1e-14);
    }
}
