//! Stationary discretized trajectories.
//!
//! Models with a Gaussian transition law (OU) are advanced exactly; all other
//! models use Euler–Maruyama with `substeps` internal steps per observation
//! interval. Coefficients are evaluated at the state clamped to the closure
//! of the state space (full truncation), which keeps CIR well defined.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::function::SmoothFunction;
use crate::model::{invariant_support, DiffusionModel, GaussianTransition, Interval};
use crate::quadrature::mean_stderr;
use crate::rng::{stream_rng, StreamRng};

/// Equidistant observation grid `t_i = iΔ`, `i = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingScheme {
    pub n: usize,
    pub delta: f64,
    pub substeps: usize,
    pub seed: u64,
    pub stream_id: u64,
}

impl SamplingScheme {
    pub fn new(n: usize, delta: f64) -> Result<Self> {
        let s = SamplingScheme {
            n,
            delta,
            substeps: 1,
            seed: 0,
            stream_id: 0,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_substeps(mut self, substeps: usize) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_stream(mut self, stream_id: u64) -> Self {
        self.stream_id = stream_id;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta must be positive, got {}", self.delta)));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        Ok(())
    }

    /// `T = nΔ`.
    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.delta
    }

    pub fn n_delta(&self) -> f64 {
        self.horizon()
    }

    pub fn n_delta_cubed(&self) -> f64 {
        self.n as f64 * self.delta.powi(3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulationMethod {
    Exact,
    Euler,
    /// Read from an external file.
    Imported,
}

/// Observations `X_0, X_Δ, …, X_{nΔ}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub scheme: SamplingScheme,
    pub values: Vec<f64>,
    pub method: SimulationMethod,
}

impl SamplePath {
    /// Wrap externally supplied observations on a grid with spacing `delta`.
    pub fn from_values(values: Vec<f64>, delta: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("a path needs at least X_0".into()));
        }
        let scheme = SamplingScheme::new(values.len() - 1, delta)?;
        Ok(SamplePath {
            scheme,
            values,
            method: SimulationMethod::Imported,
        })
    }

    pub fn n(&self) -> usize {
        self.scheme.n
    }

    pub fn delta(&self) -> f64 {
        self.scheme.delta
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.scheme.delta
    }

    /// CSV with header `index,time,value`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["index", "time", "value"])?;
        for (i, v) in self.values.iter().enumerate() {
            w.write_record([
                i.to_string(),
                format!("{:.16e}", self.time(i)),
                format!("{v:.16e}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// Read a path written by [`SamplePath::write_csv`] (or any CSV with the
    /// same header). The grid spacing is taken from the first two times.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Config(format!("path CSV lacks column '{name}'")))
        };
        let (ti, vi) = (col("time")?, col("value")?);
        let mut times = Vec::new();
        let mut values = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .unwrap_or("")
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad number in path CSV: {e}")))
            };
            times.push(parse(ti)?);
            values.push(parse(vi)?);
        }
        let delta = if times.len() >= 2 { times[1] - times[0] } else { 1.0 };
        SamplePath::from_values(values, delta)
    }
}

/// Inverse-CDF sampler for invariant laws without a closed-form sampler.
pub struct StationarySampler {
    grid: Vec<f64>,
    cdf: Vec<f64>,
}

impl StationarySampler {
    pub fn new(model: &dyn DiffusionModel, theta: &[f64]) -> Result<Self> {
        const CELLS: usize = 4096;
        let support = invariant_support(model, theta)?;
        let (lo, hi) = (support.lo, support.hi);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Numerical("invariant support is unbounded".into()));
        }
        let grid: Vec<f64> = (0..=CELLS)
            .map(|k| lo + (hi - lo) * k as f64 / CELLS as f64)
            .collect();
        let density = |x: f64| model.invariant_logdensity(x, theta).exp();
        let mut cdf = Vec::with_capacity(CELLS + 1);
        cdf.push(0.0);
        for w in grid.windows(2) {
            let mass = crate::quadrature::integrate(density, w[0], w[1], 1e-16, 1e-10)?.value;
            cdf.push(cdf.last().unwrap() + mass);
        }
        let total = *cdf.last().unwrap();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Numerical(format!("invariant density has total mass {total}")));
        }
        for c in cdf.iter_mut() {
            *c /= total;
        }
        Ok(StationarySampler { grid, cdf })
    }

    pub fn quantile(&self, u: f64) -> Result<f64> {
        let k = self.cdf.partition_point(|c| *c <= u).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let (x0, x1) = (self.grid[k - 1], self.grid[k]);
        let x = if c1 > c0 {
            x0 + (x1 - x0) * (u - c0) / (c1 - c0)
        } else {
            0.5 * (x0 + x1)
        };
        if x.is_finite() {
            Ok(x)
        } else {
            Err(Error::Numerical(format!("CDF inversion failed at u = {u}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        self.quantile(rng.random::<f64>())
    }
}

/// One draw from the invariant law μ_θ.
pub fn draw_stationary<R: Rng>(model: &dyn DiffusionModel, theta: &[f64], rng: &mut R) -> Result<f64> {
    match model.closed_form(theta) {
        Some(cf) => Ok(cf.invariant.sample(rng)),
        None => StationarySampler::new(model, theta)?.sample(rng),
    }
}

/// Advances the state across one observation interval.
pub(crate) enum Stepper<'a> {
    Exact {
        transition: GaussianTransition,
        decay: f64,
        sd: f64,
    },
    Euler {
        model: &'a dyn DiffusionModel,
        theta: &'a [f64],
        space: Interval,
        h: f64,
        sqrt_h: f64,
        substeps: usize,
    },
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(
        model: &'a dyn DiffusionModel,
        theta: &'a [f64],
        delta: f64,
        substeps: usize,
    ) -> Self {
        match model.closed_form(theta).and_then(|c| c.transition) {
            Some(transition) => Stepper::Exact {
                transition,
                decay: (-transition.rate * delta).exp(),
                sd: transition.variance(delta).sqrt(),
            },
            None => {
                let h = delta / substeps as f64;
                Stepper::Euler {
                    model,
                    theta,
                    space: model.state_space(theta),
                    h,
                    sqrt_h: h.sqrt(),
                    substeps,
                }
            }
        }
    }

    pub(crate) fn method(&self) -> SimulationMethod {
        match self {
            Stepper::Exact { .. } => SimulationMethod::Exact,
            Stepper::Euler { .. } => SimulationMethod::Euler,
        }
    }

    #[inline]
    pub(crate) fn step<R: Rng>(&self, x: f64, rng: &mut R) -> f64 {
        match *self {
            Stepper::Exact {
                transition,
                decay,
                sd,
            } => {
                let z: f64 = rng.sample(StandardNormal);
                transition.level + (x - transition.level) * decay + sd * z
            }
            Stepper::Euler {
                model,
                theta,
                space,
                h,
                sqrt_h,
                substeps,
            } => {
                let mut y = x;
                for _ in 0..substeps {
                    let z: f64 = rng.sample(StandardNormal);
                    let ye = space.clamp_closed(y);
                    y += model.drift(ye, theta) * h + model.diffusion(ye, theta) * sqrt_h * z;
                }
                y
            }
        }
    }
}

/// Continue a path from `x0` for `n` steps of length `delta`; `out[0] = x0`.
pub(crate) fn advance<R: Rng>(
    stepper: &Stepper<'_>,
    space: Interval,
    x0: f64,
    n: usize,
    rng: &mut R,
    out: &mut Vec<f64>,
) -> Result<()> {
    out.clear();
    out.reserve(n + 1);
    out.push(x0);
    let mut x = x0;
    for i in 1..=n {
        x = stepper.step(x, rng);
        if !space.contains(x) {
            return Err(Error::Simulation { index: i, value: x });
        }
        out.push(x);
    }
    Ok(())
}

/// Simulate a stationary path on the grid of `scheme`.
pub fn simulate_path(
    model: &dyn DiffusionModel,
    theta: &[f64],
    scheme: &SamplingScheme,
) -> Result<SamplePath> {
    scheme.validate()?;
    model.validate(theta)?;
    let mut rng = stream_rng(scheme.seed, scheme.stream_id);
    let x0 = draw_stationary(model, theta, &mut rng)?;
    let stepper = Stepper::new(model, theta, scheme.delta, scheme.substeps);
    let mut values = Vec::new();
    advance(&stepper, model.state_space(theta), x0, scheme.n, &mut rng, &mut values)?;
    Ok(SamplePath {
        scheme: *scheme,
        values,
        method: stepper.method(),
    })
}

/// Diagnostics only: start at `x_start`, discard `burn_in` time units, then
/// record on the grid of `scheme`.
pub fn simulate_path_burn_in(
    model: &dyn DiffusionModel,
    theta: &[f64],
    scheme: &SamplingScheme,
    x_start: f64,
    burn_in: f64,
) -> Result<SamplePath> {
    scheme.validate()?;
    model.validate(theta)?;
    let space = model.state_space(theta);
    space.check(x_start)?;
    let mut rng = stream_rng(scheme.seed, scheme.stream_id);
    let stepper = Stepper::new(model, theta, scheme.delta, scheme.substeps);
    let burn_steps = (burn_in / scheme.delta).ceil() as usize;
    let mut scratch = Vec::new();
    advance(&stepper, space, x_start, burn_steps, &mut rng, &mut scratch)?;
    let mut values = Vec::new();
    advance(&stepper, space, *scratch.last().unwrap(), scheme.n, &mut rng, &mut values)?;
    Ok(SamplePath {
        scheme: *scheme,
        values,
        method: stepper.method(),
    })
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

/// Monte Carlo estimate of `P_t f(x) = E[f(X_t) | X_0 = x]` from `n_rep`
/// independent forward paths (`substeps` Euler steps when no exact
/// transition exists).
#[allow(clippy::too_many_arguments)]
pub fn conditional_expectation_mc(
    model: &dyn DiffusionModel,
    theta: &[f64],
    f: &SmoothFunction,
    x: f64,
    t: f64,
    n_rep: usize,
    substeps: usize,
    seed: u64,
) -> Result<McEstimate> {
    if !(t > 0.0) {
        return Err(Error::Config(format!("t must be positive, got {t}")));
    }
    if n_rep == 0 || substeps == 0 {
        return Err(Error::Config("n_rep and substeps must be >= 1".into()));
    }
    let space = model.state_space(theta);
    space.check(x)?;
    if f.polynomial_degree() == Some(0) {
        return Ok(McEstimate {
            mean: f.eval(x),
            stderr: 0.0,
            n: n_rep,
        });
    }
    let stepper = Stepper::new(model, theta, t, substeps);
    let draws: Result<Vec<f64>> = (0..n_rep)
        .into_par_iter()
        .map(|r| {
            let mut rng: StreamRng = stream_rng(seed, r as u64);
            let y = stepper.step(x, &mut rng);
            if !y.is_finite() {
                return Err(Error::Simulation { index: 1, value: y });
            }
            Ok(f.eval(space.clamp_closed(y)))
        })
        .collect();
    let draws = draws?;
    let (mean, stderr) = mean_stderr(&draws);
    Ok(McEstimate {
        mean,
        stderr: if n_rep > 1 { stderr } else { f64::NAN },
        n: n_rep,
    })
}

/// `E|X_Δ − X_0|^k` under stationarity for each Δ, with the least-squares
/// slope of `log E|X_Δ − X_0|^k` on `log Δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementScaling {
    pub k: u32,
    pub deltas: Vec<f64>,
    pub moments: Vec<f64>,
    pub slope: f64,
}

/// Monte Carlo increment moments from `n_pairs` stationary starts per Δ
/// (common random numbers across Δ).
pub fn increment_moment_scaling(
    model: &dyn DiffusionModel,
    theta: &[f64],
    k: u32,
    deltas: &[f64],
    n_pairs: usize,
    substeps: usize,
    seed: u64,
) -> Result<IncrementScaling> {
    if deltas.len() < 2 || deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Config("need at least two positive step sizes".into()));
    }
    if n_pairs < 2 || substeps == 0 {
        return Err(Error::Config("n_pairs must be >= 2 and substeps >= 1".into()));
    }
    model.validate(theta)?;
    let space = model.state_space(theta);
    let mut moments = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let stepper = Stepper::new(model, theta, delta, substeps);
        let draws: Vec<f64> = (0..n_pairs)
            .into_par_iter()
            .map(|r| -> Result<f64> {
                let mut rng: StreamRng = stream_rng(seed, r as u64);
                let x0 = draw_stationary(model, theta, &mut rng)?;
                let x1 = stepper.step(x0, &mut rng);
                if !space.contains(x1) {
                    return Err(Error::Simulation { index: 1, value: x1 });
                }
                Ok((x1 - x0).abs().powi(k as i32))
            })
            .collect::<Result<_>>()?;
        moments.push(mean_stderr(&draws).0);
    }
    let xs: Vec<f64> = deltas.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = moments.iter().map(|m| m.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(IncrementScaling {
        k,
        deltas: deltas.to_vec(),
        moments,
        slope: sxy / sxx,
    })
}
