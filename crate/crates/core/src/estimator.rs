//! Prediction-based estimating functions.
//!
//! For a predictor function `f` and lag order `q`, the predictor space at
//! step `i` is spanned by `1, f(X_{i-1}), …, f(X_{i-q})`. The estimating
//! function sums the basis vector times the prediction residual
//! `f(X_i) − π̆_{i−1}(θ)`, where the projection coefficients solve the
//! moment (normal) equations under `P_θ`.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function::SmoothFunction;
use crate::model::{
    generator_at, invariant_expectation, invariant_moment, invariant_support, kf_coefficient,
    transition_expectation, DiffusionModel, Interval, ParamVector,
};
use crate::quadrature::{pairwise_sum, pairwise_sum_by};
use crate::simulate::{conditional_expectation_mc, SamplePath};
use crate::solver::{central_jacobian, damped_newton, NewtonOptions};

/// A predictor function with the lag order of its predictor space.
#[derive(Debug, Clone)]
pub struct PredictorSpec {
    pub f: SmoothFunction,
    pub q: usize,
    pub label: String,
}

impl PredictorSpec {
    pub fn new(f: SmoothFunction, q: usize) -> Self {
        let label = format!("{} (q={q})", f.label());
        PredictorSpec { f, q, label }
    }

    pub fn simple(f: SmoothFunction) -> Self {
        Self::new(f, 0)
    }

    pub fn one_lag(f: SmoothFunction) -> Self {
        Self::new(f, 1)
    }

    /// Full asymptotic theory is available for q ∈ {0, 1}.
    pub fn is_scaffold(&self) -> bool {
        self.q >= 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientMethod {
    /// Solve the moment conditions with the exact lag moments.
    ExactMoments,
    /// First-order Δ-expansion `a₁ = 1 + ΔK_f`, `a₀ = −ΔK_f μ_θ(f)`.
    ExpansionOrder1,
}

/// Coefficients `(a₀, a₁, …, a_q)` of the best linear predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionCoefficients {
    pub a: Vec<f64>,
    pub method: CoefficientMethod,
    pub delta: f64,
}

/// Monte Carlo settings used for lag moments that have no closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagMomentMc {
    pub n_rep: usize,
    pub substeps: usize,
    pub seed: u64,
}

impl Default for LagMomentMc {
    fn default() -> Self {
        LagMomentMc {
            n_rep: 2000,
            substeps: 20,
            seed: 0x5eed,
        }
    }
}

/// Whether `E_θ[f(X₀) f(X_t)]` can be computed without Monte Carlo.
pub fn lag_moment_closed_form(model: &dyn DiffusionModel, theta: &[f64], f: &SmoothFunction) -> bool {
    transition_expectation(model, theta, f, probe_point(model, theta), 1.0).is_some()
}

fn probe_point(model: &dyn DiffusionModel, theta: &[f64]) -> f64 {
    match model.closed_form(theta) {
        Some(cf) => cf.invariant.mean(),
        None => {
            let s = model.state_space(theta);
            match (s.lo.is_finite(), s.hi.is_finite()) {
                (true, true) => 0.5 * (s.lo + s.hi),
                (true, false) => s.lo + 1.0,
                (false, true) => s.hi - 1.0,
                (false, false) => 0.0,
            }
        }
    }
}

/// Exact moments when the lag moment is available in closed form, else the
/// first-order expansion.
pub fn default_coefficient_method(
    model: &dyn DiffusionModel,
    theta: &[f64],
    spec: &PredictorSpec,
) -> CoefficientMethod {
    if spec.q >= 2 || lag_moment_closed_form(model, theta, &spec.f) {
        CoefficientMethod::ExactMoments
    } else {
        CoefficientMethod::ExpansionOrder1
    }
}

/// `E_θ[f(X₀) f(X_lag)]`.
///
/// Uses the closed-form transition expectation when the model provides one;
/// otherwise integrates Monte Carlo estimates of `P_lag f` against μ_θ with a
/// fixed composite Gauss–Kronrod rule (common random numbers across nodes).
pub fn lag_moment(
    model: &dyn DiffusionModel,
    theta: &[f64],
    f: &SmoothFunction,
    lag: f64,
    mc: &LagMomentMc,
) -> Result<f64> {
    if lag == 0.0 {
        return Ok(invariant_expectation(model, theta, |x| f.eval(x).powi(2))?.value);
    }
    if lag_moment_closed_form(model, theta, f) {
        return Ok(invariant_expectation(model, theta, |x| {
            f.eval(x) * transition_expectation(model, theta, f, x, lag).expect("checked")
        })?
        .value);
    }
    // Fixed (non-adaptive) rule: the integrand is noisy.
    let support = invariant_support(model, theta)?;
    let pieces = 16;
    let width = (support.hi - support.lo) / pieces as f64;
    let nodes = kronrod_nodes();
    let mut total = 0.0;
    let mut mass = 0.0;
    for p in 0..pieces {
        let center = support.lo + (p as f64 + 0.5) * width;
        for (z, w) in &nodes {
            let x = center + 0.5 * width * z;
            let weight = 0.5 * width * w * model.invariant_logdensity(x, theta).exp();
            if weight == 0.0 {
                continue;
            }
            let p_f = conditional_expectation_mc(model, theta, f, x, lag, mc.n_rep, mc.substeps, mc.seed)?
                .mean;
            total += weight * f.eval(x) * p_f;
            mass += weight;
        }
    }
    Ok(total / mass)
}

fn kronrod_nodes() -> Vec<(f64, f64)> {
    const X: [f64; 8] = [
        0.991_455_371_120_812_6,
        0.949_107_912_342_758_5,
        0.864_864_423_359_769_1,
        0.741_531_185_599_394_4,
        0.586_087_235_467_691_1,
        0.405_845_151_377_397_2,
        0.207_784_955_007_898_5,
        0.0,
    ];
    const W: [f64; 8] = [
        0.022_935_322_010_529_22,
        0.063_092_092_629_978_55,
        0.104_790_010_322_250_2,
        0.140_653_259_715_525_9,
        0.169_004_726_639_267_9,
        0.190_350_578_064_785_4,
        0.204_432_940_075_298_9,
        0.209_482_141_084_727_8,
    ];
    let mut out = Vec::with_capacity(15);
    for k in 0..7 {
        out.push((-X[k], W[k]));
        out.push((X[k], W[k]));
    }
    out.push((0.0, W[7]));
    out
}

/// Coefficients of the projection of `f(X_i)` onto the predictor space.
pub fn projection_coefficients(
    model: &dyn DiffusionModel,
    theta: &[f64],
    spec: &PredictorSpec,
    delta: f64,
    method: CoefficientMethod,
) -> Result<ProjectionCoefficients> {
    projection_coefficients_with(model, theta, spec, delta, method, &LagMomentMc::default())
}

pub fn projection_coefficients_with(
    model: &dyn DiffusionModel,
    theta: &[f64],
    spec: &PredictorSpec,
    delta: f64,
    method: CoefficientMethod,
    mc: &LagMomentMc,
) -> Result<ProjectionCoefficients> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    let f = &spec.f;
    let mean = invariant_moment(model, theta, f)?.value;
    if spec.q == 0 {
        return Ok(ProjectionCoefficients {
            a: vec![mean],
            method,
            delta,
        });
    }
    let var = invariant_expectation(model, theta, |x| (f.eval(x) - mean).powi(2))?.value;
    let scale = invariant_expectation(model, theta, |x| f.eval(x).powi(2))?.value;
    if !(var > 1e-13 * scale.max(1e-300)) {
        return Err(Error::DegeneratePredictor(var));
    }
    let a = match method {
        CoefficientMethod::ExpansionOrder1 => {
            if spec.q != 1 {
                return Err(Error::NotAvailable(format!(
                    "first-order expansion for lag order {}",
                    spec.q
                )));
            }
            let k = kf_coefficient(model, theta, f)?;
            vec![-delta * k * mean, 1.0 + delta * k]
        }
        CoefficientMethod::ExactMoments => {
            // Autocovariances c(kΔ), k = 0..=q, of f(X).
            let mut acov = vec![var];
            for k in 1..=spec.q {
                acov.push(lag_moment(model, theta, f, k as f64 * delta, mc)? - mean * mean);
            }
            let q = spec.q;
            let toeplitz = DMatrix::from_fn(q, q, |i, j| acov[i.abs_diff(j)]);
            let rhs = DVector::from_fn(q, |i, _| acov[i + 1]);
            let slopes = toeplitz
                .lu()
                .solve(&rhs)
                .ok_or(Error::DegeneratePredictor(var))?;
            let mut a = Vec::with_capacity(q + 1);
            a.push(mean * (1.0 - slopes.sum()));
            a.extend(slopes.iter());
            a
        }
    };
    Ok(ProjectionCoefficients {
        a,
        method,
        delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    /// Divided by `nΔ`.
    PerNDelta,
}

/// `Gₙ(θ)` and `∂Gₙ/∂θᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatingFunctionValue {
    pub value: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub n_terms: usize,
    pub normalization: Normalization,
    pub notes: Vec<String>,
}

impl EstimatingFunctionValue {
    fn normalize(mut self, normalization: Normalization, n_delta: f64) -> Self {
        if normalization == Normalization::PerNDelta {
            self.value /= n_delta;
            self.jacobian /= n_delta;
        }
        self.normalization = normalization;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult {
    pub theta_hat: ParamVector,
    pub converged: bool,
    pub n_iterations: usize,
    pub fallback_used: bool,
    pub residual_norm: f64,
    pub condition_number: f64,
}

fn theta_derivative<F>(model: &dyn DiffusionModel, theta: &[f64], fun: F) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    central_jacobian(fun, theta, &model.param_bounds())
}

/// `Gₙ(θ) = Σ_{i=1}^n [f(X_{iΔ}) − μ_θ(f)]`.
pub fn gfun_simple(
    model: &dyn DiffusionModel,
    theta: &[f64],
    path: &SamplePath,
    spec: &PredictorSpec,
) -> Result<EstimatingFunctionValue> {
    if spec.q != 0 {
        return Err(Error::Config(format!("simple predictor requires q = 0, got {}", spec.q)));
    }
    let n = path.n();
    let mean = invariant_moment(model, theta, &spec.f)?.value;
    let value = pairwise_sum_by(n, |i| spec.f.eval(path.values[i + 1]) - mean);
    let dmu = theta_derivative(model, theta, |t| Ok(vec![invariant_moment(model, t, &spec.f)?.value]))?;
    Ok(EstimatingFunctionValue {
        value: DVector::from_vec(vec![value]),
        jacobian: dmu * -(n as f64),
        n_terms: n,
        normalization: Normalization::Raw,
        notes: Vec::new(),
    })
}

fn bracket_root<F: Fn(f64) -> f64>(g: F, mut a: f64, mut b: f64) -> f64 {
    // Bisection with secant acceleration (Illinois variant).
    let (mut fa, mut fb) = (g(a), g(b));
    if fa == 0.0 {
        return a;
    }
    if fb == 0.0 {
        return b;
    }
    let mut side = 0;
    for _ in 0..200 {
        let c = (a * fb - b * fa) / (fb - fa);
        let c = if c.is_finite() && c > a.min(b) && c < a.max(b) {
            c
        } else {
            0.5 * (a + b)
        };
        let fc = g(c);
        if fc == 0.0 || (b - a).abs() < 1e-15 * (1.0 + c.abs()) {
            return c;
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    0.5 * (a + b)
}

/// Root of the simple estimating equation: `θ̂ = κ⁻¹(mean of f(X_{t_1..t_n}))`
/// with `κ(θ) = μ_θ(f)`. Returns `theta_star` (flagged) when the sample mean
/// lies outside `κ(Θ)`.
pub fn solve_simple(
    model: &dyn DiffusionModel,
    path: &SamplePath,
    spec: &PredictorSpec,
    theta_init: &ParamVector,
    theta_star: &ParamVector,
) -> Result<EstimateResult> {
    if model.dim_theta() != 1 || theta_init.dim() != 1 {
        return Err(Error::Config("the simple estimator needs a scalar parameter".into()));
    }
    if spec.q != 0 {
        return Err(Error::Config(format!("simple predictor requires q = 0, got {}", spec.q)));
    }
    if path.n() == 0 {
        return Err(Error::Config("path has no observations after X_0".into()));
    }
    let bound = model.param_bounds()[0];
    let kappa = |t: f64| invariant_moment(model, &[t], &spec.f).map(|r| r.value);
    let target = pairwise_sum_by(path.n(), |i| spec.f.eval(path.values[i + 1])) / path.n() as f64;

    // Probe grid over Θ (or a wide window around θ_init when unbounded).
    let init = theta_init.values()[0];
    let width = 1e3 * (1.0 + init.abs());
    let lo = if bound.lo.is_finite() { bound.lo } else { init - width };
    let hi = if bound.hi.is_finite() { bound.hi } else { init + width };
    let inset = 1e-8 * (hi - lo);
    let grid: Vec<f64> = (0..=40)
        .map(|k| (lo + inset) + (hi - lo - 2.0 * inset) * k as f64 / 40.0)
        .collect();
    let values: Vec<f64> = grid.iter().map(|t| kappa(*t)).collect::<Result<_>>()?;
    let diffs: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let increasing = diffs.iter().all(|d| *d > 0.0);
    let decreasing = diffs.iter().all(|d| *d < 0.0);
    if !(increasing || decreasing) {
        return Err(Error::Identifiability(format!(
            "theta -> mu_theta({}) is not strictly monotone on the probe grid",
            spec.f.label()
        )));
    }
    let (kmin, kmax) = if increasing {
        (values[0], values[40])
    } else {
        (values[40], values[0])
    };
    let inside = target > kmin && target < kmax;
    // An unbounded side of Θ covers everything beyond the probe window.
    let open_low = if increasing { !bound.lo.is_finite() } else { !bound.hi.is_finite() };
    let open_high = if increasing { !bound.hi.is_finite() } else { !bound.lo.is_finite() };
    let reachable = inside || (target <= kmin && open_low) || (target >= kmax && open_high);
    if !reachable {
        return Ok(EstimateResult {
            theta_hat: theta_star.clone(),
            converged: false,
            n_iterations: 0,
            fallback_used: true,
            residual_norm: f64::NAN,
            condition_number: f64::NAN,
        });
    }
    let g = |t: f64| kappa(t).map(|v| v - target).unwrap_or(f64::NAN);
    let (mut a, mut b) = match grid.windows(2).zip(values.windows(2)).find(|(_, v)| {
        (v[0] - target) * (v[1] - target) <= 0.0
    }) {
        Some((x, _)) => (x[0], x[1]),
        None => (grid[0], grid[40]),
    };
    // Expand outward for unbounded sides.
    let mut expansions = 0;
    while g(a) * g(b) > 0.0 && expansions < 200 {
        let w = b - a;
        if (g(a) - 0.0).abs() < (g(b) - 0.0).abs() {
            a -= w;
        } else {
            b += w;
        }
        expansions += 1;
    }
    if g(a) * g(b) > 0.0 {
        return Err(Error::Numerical("could not bracket the root of mu_theta(f) = mean".into()));
    }
    let root = bracket_root(g, a, b);
    let residual = g(root).abs();
    let slope = (kappa(root + 1e-6 * (1.0 + root.abs()))? - kappa(root - 1e-6 * (1.0 + root.abs()))?)
        / (2e-6 * (1.0 + root.abs()));
    let scale = 1.0 + target.abs();
    Ok(EstimateResult {
        theta_hat: theta_init.with_values(vec![root])?,
        converged: residual < 1e-10 * scale,
        n_iterations: 1,
        fallback_used: false,
        residual_norm: residual,
        condition_number: if slope != 0.0 { 1.0 } else { f64::INFINITY },
    })
}

/// Sums needed by the 1-lag estimating function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneLagStatistics {
    pub n: usize,
    pub delta: f64,
    /// Σ f(X_{i-1})
    pub prev: f64,
    /// Σ f(X_{i-1})²
    pub prev_sq: f64,
    /// Σ f(X_i)
    pub next: f64,
    /// Σ f(X_{i-1}) f(X_i)
    pub cross: f64,
}

impl OneLagStatistics {
    pub fn from_path(path: &SamplePath, f: &SmoothFunction) -> Self {
        let fx: Vec<f64> = path.values.iter().map(|x| f.eval(*x)).collect();
        let n = path.n();
        OneLagStatistics {
            n,
            delta: path.delta(),
            prev: pairwise_sum(&fx[..n]),
            prev_sq: pairwise_sum_by(n, |i| fx[i] * fx[i]),
            next: pairwise_sum(&fx[1..]),
            cross: pairwise_sum_by(n, |i| fx[i] * fx[i + 1]),
        }
    }

    /// `Gₙ` for given coefficients `(a₀, a₁)`.
    pub fn value(&self, a: &[f64]) -> DVector<f64> {
        DVector::from_vec(vec![
            self.next - self.n as f64 * a[0] - a[1] * self.prev,
            self.cross - a[0] * self.prev - a[1] * self.prev_sq,
        ])
    }

    /// `Σ Z_{i-1} Z_{i-1}ᵀ`.
    pub fn gram(&self) -> Matrix2<f64> {
        Matrix2::new(self.n as f64, self.prev, self.prev, self.prev_sq)
    }
}

/// Options for [`solve_onelag`].
#[derive(Debug, Clone, Default)]
pub struct SolveOptions {
    /// Defaults to [`default_coefficient_method`].
    pub method: Option<CoefficientMethod>,
    pub newton: NewtonOptions,
    /// Extra starting points; the converged root with the smallest residual wins.
    pub multistart: Vec<Vec<f64>>,
    pub lag_mc: LagMomentMc,
}

/// `Gₙ(θ) = Σ_{i=1}^n (1, f(X_{i-1}))ᵀ [f(X_i) − a₀(θ) − a₁(θ) f(X_{i-1})]`.
pub fn gfun_onelag(
    model: &dyn DiffusionModel,
    theta: &[f64],
    path: &SamplePath,
    spec: &PredictorSpec,
    method: CoefficientMethod,
    normalization: Normalization,
) -> Result<EstimatingFunctionValue> {
    if spec.q != 1 {
        return Err(Error::Config(format!("1-lag predictor requires q = 1, got {}", spec.q)));
    }
    if path.n() < 2 {
        return Err(Error::Config("the 1-lag estimating function needs n >= 2".into()));
    }
    let stats = OneLagStatistics::from_path(path, &spec.f);
    onelag_from_stats(model, theta, &stats, spec, method, normalization, &LagMomentMc::default())
}

fn onelag_from_stats(
    model: &dyn DiffusionModel,
    theta: &[f64],
    stats: &OneLagStatistics,
    spec: &PredictorSpec,
    method: CoefficientMethod,
    normalization: Normalization,
    mc: &LagMomentMc,
) -> Result<EstimatingFunctionValue> {
    let coeffs = |t: &[f64]| -> Result<Vec<f64>> {
        Ok(projection_coefficients_with(model, t, spec, stats.delta, method, mc)?.a)
    };
    let a = coeffs(theta)?;
    let da = theta_derivative(model, theta, coeffs)?;
    let gram = stats.gram();
    let gram = DMatrix::from_fn(2, 2, |i, j| gram[(i, j)]);
    Ok(EstimatingFunctionValue {
        value: stats.value(&a),
        jacobian: -(gram * da),
        n_terms: stats.n,
        normalization: Normalization::Raw,
        notes: Vec::new(),
    }
    .normalize(normalization, stats.n as f64 * stats.delta))
}

/// Solve the 1-lag estimating equation by damped Newton on `Gₙ/(nΔ)`.
pub fn solve_onelag(
    model: &dyn DiffusionModel,
    path: &SamplePath,
    spec: &PredictorSpec,
    theta_init: &ParamVector,
    options: &SolveOptions,
) -> Result<EstimateResult> {
    if model.dim_theta() != 2 || theta_init.dim() != 2 {
        return Err(Error::Config("the 1-lag estimator needs a two-dimensional parameter".into()));
    }
    if spec.q != 1 {
        return Err(Error::Config(format!("1-lag predictor requires q = 1, got {}", spec.q)));
    }
    if path.n() < 2 {
        return Err(Error::Config("the 1-lag estimating function needs n >= 2".into()));
    }
    let stats = OneLagStatistics::from_path(path, &spec.f);
    let method = options
        .method
        .unwrap_or_else(|| default_coefficient_method(model, theta_init.values(), spec));
    // Non-degeneracy of f at the working θ.
    projection_coefficients_with(model, theta_init.values(), spec, stats.delta, method, &options.lag_mc)?;
    let fun = |t: &[f64]| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let v = onelag_from_stats(model, t, &stats, spec, method, Normalization::PerNDelta, &options.lag_mc)?;
        Ok((v.value, v.jacobian))
    };
    let scale = 1.0 + stats.prev_sq / stats.n as f64;
    solve_with_starts(fun, theta_init, &options.multistart, scale, &options.newton)
}

/// Damped Newton from `theta_init` and any extra starting points.
pub fn solve_with_starts<F>(
    fun: F,
    theta_init: &ParamVector,
    extra_starts: &[Vec<f64>],
    scale: f64,
    newton: &NewtonOptions,
) -> Result<EstimateResult>
where
    F: Fn(&[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    let bounds: Vec<Interval> = theta_init.bounds().to_vec();
    let mut starts = vec![theta_init.values().to_vec()];
    starts.extend(extra_starts.iter().cloned());
    let mut best: Option<crate::solver::NewtonOutcome> = None;
    let mut first_err = None;
    for s in &starts {
        match damped_newton(&fun, s, &bounds, scale, newton) {
            Ok(out) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        (out.converged && !b.converged)
                            || (out.converged == b.converged && out.residual_norm < b.residual_norm)
                    }
                };
                if better {
                    best = Some(out);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    let Some(out) = best else {
        return Err(first_err.expect("at least one start"));
    };
    Ok(EstimateResult {
        theta_hat: ParamVector::new(out.theta, bounds)?,
        converged: out.converged,
        n_iterations: out.iterations,
        fallback_used: false,
        residual_norm: out.residual_norm,
        condition_number: out.condition_number,
    })
}

/// Limit of `Gₙ(θ)/(nΔ)` under θ₀:
/// `(K_f(θ)(μ_θ − μ₀)(f), μ₀(f𝓛₀f) − K_f(θ)[μ₀(f²) − μ₀(f)μ_θ(f)])`.
pub fn gamma_limit(
    model: &dyn DiffusionModel,
    theta0: &[f64],
    theta: &[f64],
    spec: &PredictorSpec,
) -> Result<[f64; 2]> {
    if spec.q != 1 {
        return Err(Error::Config("gamma_limit is defined for q = 1".into()));
    }
    let f = &spec.f;
    let mu0 = invariant_moment(model, theta0, f)?.value;
    let mu_theta = invariant_moment(model, theta, f)?.value;
    let mu0_sq = invariant_expectation(model, theta0, |x| f.eval(x).powi(2))?.value;
    let mu0_flf = invariant_expectation(model, theta0, |x| f.eval(x) * generator_at(model, theta0, f, x))?.value;
    let k = kf_coefficient(model, theta, f)?;
    Ok([k * (mu_theta - mu0), mu0_flf - k * (mu0_sq - mu0 * mu_theta)])
}

/// `Z(f)` under θ₀: `[[1, μ₀(f)], [μ₀(f), μ₀(f²)]]`.
pub fn z_limit(model: &dyn DiffusionModel, theta0: &[f64], f: &SmoothFunction) -> Result<Matrix2<f64>> {
    let m1 = invariant_moment(model, theta0, f)?.value;
    let m2 = invariant_expectation(model, theta0, |x| f.eval(x).powi(2))?.value;
    Ok(Matrix2::new(1.0, m1, m1, m2))
}

/// `W(θ) = Z(f) A(θ)` with `A(θ)` the θ-derivative of `(K_f μ_θ(f), −K_f)`.
pub fn w_limit(
    model: &dyn DiffusionModel,
    theta0: &[f64],
    theta: &[f64],
    spec: &PredictorSpec,
) -> Result<DMatrix<f64>> {
    if spec.q != 1 {
        return Err(Error::Config("w_limit is defined for q = 1".into()));
    }
    let z = z_limit(model, theta0, &spec.f)?;
    let a = theta_derivative(model, theta, |t| {
        let k = kf_coefficient(model, t, &spec.f)?;
        let mu = invariant_moment(model, t, &spec.f)?.value;
        Ok(vec![k * mu, -k])
    })?;
    let z = DMatrix::from_fn(2, 2, |i, j| z[(i, j)]);
    Ok(z * a)
}

/// Estimating function with several predictors,
/// `A · Σ_i Z_{i−1} [F(X_i) − Π̆_{i−1}(θ)]`, where `Z_{i−1}` is block
/// diagonal with one basis block per predictor.
///
/// Only the assembly is provided: no asymptotic theory is attached when
/// more than one predictor or a lag order above one is used.
pub fn assemble_multi(
    model: &dyn DiffusionModel,
    theta: &[f64],
    path: &SamplePath,
    specs: &[PredictorSpec],
    a_matrix: &DMatrix<f64>,
) -> Result<EstimatingFunctionValue> {
    if specs.is_empty() {
        return Err(Error::Config("at least one predictor is required".into()));
    }
    let d_bar: usize = specs.iter().map(|s| s.q + 1).sum();
    if a_matrix.ncols() != d_bar {
        return Err(Error::Config(format!(
            "coefficient matrix has {} columns, expected d_bar = {d_bar}",
            a_matrix.ncols()
        )));
    }
    let d = theta.len();
    if a_matrix.nrows() != d {
        return Err(Error::Config(format!(
            "coefficient matrix has {} rows, expected d = {d}",
            a_matrix.nrows()
        )));
    }
    let start = specs.iter().map(|s| s.q).max().unwrap_or(0).max(1);
    let n = path.n();
    if n < start {
        return Err(Error::Config(format!("path too short: n = {n}, need >= {start}")));
    }
    let mut stacked = DVector::<f64>::zeros(d_bar);
    let mut jac = DMatrix::<f64>::zeros(d_bar, d);
    let mut offset = 0;
    let mut notes = Vec::new();
    if specs.len() > 1 || specs.iter().any(PredictorSpec::is_scaffold) {
        notes.push("scaffold-only: no asymptotic guarantees for N >= 2 or q >= 2".to_string());
    }
    for spec in specs {
        let method = default_coefficient_method(model, theta, spec);
        let delta = path.delta();
        let coeffs = |t: &[f64]| -> Result<Vec<f64>> {
            Ok(projection_coefficients(model, t, spec, delta, method)?.a)
        };
        let a = coeffs(theta)?;
        let da = theta_derivative(model, theta, coeffs)?;
        let fx: Vec<f64> = path.values.iter().map(|x| spec.f.eval(*x)).collect();
        let q = spec.q;
        let basis = |i: usize| -> Vec<f64> {
            let mut z = Vec::with_capacity(q + 1);
            z.push(1.0);
            z.extend((1..=q).map(|k| fx[i - k]));
            z
        };
        let mut gram = DMatrix::<f64>::zeros(q + 1, q + 1);
        for i in start..=n {
            let z = basis(i);
            let pred: f64 = z.iter().zip(&a).map(|(zk, ak)| zk * ak).sum();
            let r = fx[i] - pred;
            for (k, zk) in z.iter().enumerate() {
                stacked[offset + k] += zk * r;
                for (l, zl) in z.iter().enumerate() {
                    gram[(k, l)] += zk * zl;
                }
            }
        }
        let block = -(gram * da);
        jac.view_mut((offset, 0), (q + 1, d)).copy_from(&block);
        offset += q + 1;
    }
    Ok(EstimatingFunctionValue {
        value: a_matrix * stacked,
        jacobian: a_matrix * jac,
        n_terms: n + 1 - start,
        normalization: Normalization::Raw,
        notes,
    })
}
