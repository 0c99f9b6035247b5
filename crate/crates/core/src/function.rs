//! Scalar test functions with the derivatives the generator needs.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Where the derivative closures of a [`SmoothFunction`] come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DerivativeSource {
    Analytic,
    FiniteDifference,
}

/// A function `f` together with `f'`, `f''` and optionally `f'''`, `f''''`.
///
/// Built-in constructors supply exact derivatives. [`SmoothFunction::from_fn`]
/// falls back to central differences and records that in
/// [`SmoothFunction::derivative_source`].
#[derive(Clone)]
pub struct SmoothFunction {
    label: String,
    eval: ScalarFn,
    d1: ScalarFn,
    d2: ScalarFn,
    d3: Option<ScalarFn>,
    d4: Option<ScalarFn>,
    source: DerivativeSource,
    growth_note: String,
    polynomial: Option<Vec<f64>>,
}

impl fmt::Debug for SmoothFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothFunction")
            .field("label", &self.label)
            .field("source", &self.source)
            .field("polynomial", &self.polynomial)
            .finish()
    }
}

fn fd_step(x: f64, root: f64) -> f64 {
    f64::EPSILON.powf(root) * x.abs().max(1.0)
}

fn central_d1(f: &ScalarFn, x: f64) -> f64 {
    let h = fd_step(x, 1.0 / 3.0);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn central_d2(f: &ScalarFn, x: f64) -> f64 {
    let h = fd_step(x, 0.25);
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

impl SmoothFunction {
    /// Function with analytic first and second derivatives.
    pub fn new<F, D1, D2>(label: impl Into<String>, eval: F, d1: D1, d2: D2) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
        D1: Fn(f64) -> f64 + Send + Sync + 'static,
        D2: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        SmoothFunction {
            label: label.into(),
            eval: Arc::new(eval),
            d1: Arc::new(d1),
            d2: Arc::new(d2),
            d3: None,
            d4: None,
            source: DerivativeSource::Analytic,
            growth_note: "polynomial growth (user asserted)".to_string(),
            polynomial: None,
        }
    }

    /// Attach analytic third and fourth derivatives (needed for the second
    /// generator power).
    pub fn with_higher<D3, D4>(mut self, d3: D3, d4: D4) -> Self
    where
        D3: Fn(f64) -> f64 + Send + Sync + 'static,
        D4: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.d3 = Some(Arc::new(d3));
        self.d4 = Some(Arc::new(d4));
        self
    }

    pub fn with_growth_note(mut self, note: impl Into<String>) -> Self {
        self.growth_note = note.into();
        self
    }

    /// Function whose derivatives are all obtained by central differences.
    pub fn from_fn<F>(label: impl Into<String>, eval: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        let eval: ScalarFn = Arc::new(eval);
        let e1 = eval.clone();
        let e2 = eval.clone();
        let d1: ScalarFn = Arc::new(move |x| central_d1(&e1, x));
        let d2: ScalarFn = Arc::new(move |x| central_d2(&e2, x));
        let d2a = d2.clone();
        let d2b = d2.clone();
        SmoothFunction {
            label: label.into(),
            eval,
            d1,
            d2,
            d3: Some(Arc::new(move |x| central_d1(&d2a, x))),
            d4: Some(Arc::new(move |x| central_d2(&d2b, x))),
            source: DerivativeSource::FiniteDifference,
            growth_note: "unchecked".to_string(),
            polynomial: None,
        }
    }

    /// `Σ coeffs[k] x^k` with exact derivatives of every order.
    pub fn polynomial(coeffs: Vec<f64>) -> Self {
        let deriv = |c: &[f64]| -> Vec<f64> {
            c.iter()
                .enumerate()
                .skip(1)
                .map(|(k, v)| v * k as f64)
                .collect()
        };
        let c0 = coeffs.clone();
        let c1 = deriv(&c0);
        let c2 = deriv(&c1);
        let c3 = deriv(&c2);
        let c4 = deriv(&c3);
        let horner = |c: Vec<f64>| -> ScalarFn {
            Arc::new(move |x: f64| c.iter().rev().fold(0.0, |acc, v| acc * x + v))
        };
        SmoothFunction {
            label: polynomial_label(&coeffs),
            eval: horner(c0),
            d1: horner(c1),
            d2: horner(c2),
            d3: Some(horner(c3)),
            d4: Some(horner(c4)),
            source: DerivativeSource::Analytic,
            growth_note: format!("polynomial of degree {}", coeffs.len().saturating_sub(1)),
            polynomial: Some(coeffs),
        }
    }

    pub fn identity() -> Self {
        Self::polynomial(vec![0.0, 1.0]).labelled("x")
    }

    pub fn square() -> Self {
        Self::polynomial(vec![0.0, 0.0, 1.0]).labelled("x^2")
    }

    pub fn cube() -> Self {
        Self::polynomial(vec![0.0, 0.0, 0.0, 1.0]).labelled("x^3")
    }

    pub fn constant(c: f64) -> Self {
        Self::polynomial(vec![c]).labelled(format!("{c}"))
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn labelled(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn growth_note(&self) -> &str {
        &self.growth_note
    }

    pub fn derivative_source(&self) -> DerivativeSource {
        self.source
    }

    /// Polynomial coefficients when the function is a known polynomial.
    pub fn polynomial_coefficients(&self) -> Option<&[f64]> {
        self.polynomial.as_deref()
    }

    /// Degree when the function is a known polynomial (zero polynomial has degree 0).
    pub fn polynomial_degree(&self) -> Option<usize> {
        self.polynomial.as_ref().map(|c| {
            c.iter()
                .rposition(|v| *v != 0.0)
                .unwrap_or(0)
        })
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    #[inline]
    pub fn d1(&self, x: f64) -> f64 {
        (self.d1)(x)
    }

    #[inline]
    pub fn d2(&self, x: f64) -> f64 {
        (self.d2)(x)
    }

    pub fn d3(&self, x: f64) -> Option<f64> {
        self.d3.as_ref().map(|d| d(x))
    }

    pub fn d4(&self, x: f64) -> Option<f64> {
        self.d4.as_ref().map(|d| d(x))
    }

    /// `f + c`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        let e = self.eval.clone();
        out.eval = Arc::new(move |x| e(x) + c);
        out.label = format!("({}) + {}", self.label, c);
        if let Some(p) = out.polynomial.as_mut() {
            if p.is_empty() {
                p.push(0.0);
            }
            p[0] += c;
        }
        out
    }

    /// `c · f`.
    pub fn scaled(&self, c: f64) -> Self {
        let scale = |g: &ScalarFn| -> ScalarFn {
            let g = g.clone();
            Arc::new(move |x| c * g(x))
        };
        SmoothFunction {
            label: format!("{} * ({})", c, self.label),
            eval: scale(&self.eval),
            d1: scale(&self.d1),
            d2: scale(&self.d2),
            d3: self.d3.as_ref().map(scale),
            d4: self.d4.as_ref().map(scale),
            source: self.source,
            growth_note: self.growth_note.clone(),
            polynomial: self
                .polynomial
                .as_ref()
                .map(|p| p.iter().map(|v| c * v).collect()),
        }
    }

    /// Compare the derivative closures with central differences of `eval`.
    pub fn check_derivatives(&self, probes: &[f64], rel_tol: f64) -> Result<()> {
        for &x in probes {
            let fd1 = central_d1(&self.eval, x);
            let fd2 = central_d2(&self.eval, x);
            let (a1, a2) = (self.d1(x), self.d2(x));
            let bad1 = (a1 - fd1).abs() > rel_tol * a1.abs().max(fd1.abs()).max(1.0);
            // Second differences lose half the significant digits.
            let tol2 = rel_tol.max(1e-6) * 100.0;
            let bad2 = (a2 - fd2).abs() > tol2 * a2.abs().max(fd2.abs()).max(1.0);
            if bad1 || bad2 {
                return Err(Error::Numerical(format!(
                    "derivatives of {} disagree with finite differences at x = {x}: \
                     f' {a1} vs {fd1}, f'' {a2} vs {fd2}",
                    self.label
                )));
            }
        }
        Ok(())
    }
}

fn polynomial_label(coeffs: &[f64]) -> String {
    let terms: Vec<String> = coeffs
        .iter()
        .enumerate()
        .filter(|(_, c)| **c != 0.0)
        .map(|(k, c)| match k {
            0 => format!("{c}"),
            1 => format!("{c}*x"),
            _ => format!("{c}*x^{k}"),
        })
        .collect();
    if terms.is_empty() {
        "0".to_string()
    } else {
        terms.join(" + ")
    }
}
