//! Numerical integration and summation helpers.

use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Value and error estimate of a quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

// Kronrod 15-point nodes (non-negative half) and weights; the Gauss 7-point
// rule uses the odd-indexed nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn kronrod15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Globally adaptive Gauss–Kronrod (G7/K15) quadrature on a finite interval.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<QuadResult> {
    integrate_pieces(&f, &[a, b], abs_tol, rel_tol, 2000)
}

/// Adaptive quadrature starting from an initial partition given by `breaks`.
pub fn integrate_pieces<F: Fn(f64) -> f64>(
    f: &F,
    breaks: &[f64],
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Result<QuadResult> {
    if breaks.len() < 2 {
        return Err(Error::Numerical("quadrature needs at least one interval".into()));
    }
    let mut intervals: Vec<(f64, f64, f64, f64)> = breaks
        .windows(2)
        .map(|w| {
            let (v, e) = kronrod15(f, w[0], w[1]);
            (w[0], w[1], v, e)
        })
        .collect();
    let mut evaluations = 15 * intervals.len();
    loop {
        let total: f64 = intervals.iter().map(|i| i.2).sum();
        let err: f64 = intervals.iter().map(|i| i.3).sum();
        if !total.is_finite() || !err.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite integrand on [{}, {}]",
                breaks[0],
                breaks[breaks.len() - 1]
            )));
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(QuadResult {
                value: total,
                error: err,
                evaluations,
            });
        }
        if intervals.len() >= max_intervals {
            return Err(Error::Numerical(format!(
                "quadrature did not converge: value {total:e}, error estimate {err:e} after {} subintervals",
                intervals.len()
            )));
        }
        let (worst, _) = intervals
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .expect("non-empty");
        let (a, b, _, _) = intervals.swap_remove(worst);
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            return Err(Error::Numerical(format!(
                "quadrature interval [{a}, {b}] cannot be bisected further"
            )));
        }
        let (v1, e1) = kronrod15(f, a, mid);
        let (v2, e2) = kronrod15(f, mid, b);
        evaluations += 30;
        intervals.push((a, mid, v1, e1));
        intervals.push((mid, b, v2, e2));
    }
}

/// Probabilists' Gauss–Hermite rule: `E g(Z) ≈ Σ wᵢ g(zᵢ)` for `Z ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch construction from the Jacobi matrix of the Hermite
    /// recurrence.
    pub fn new(n: usize) -> Self {
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64).sqrt();
            jacobi[(k - 1, k)] = off;
            jacobi[(k, k - 1)] = off;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrize to remove eigen-solver asymmetry.
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let z = 0.5 * (pairs[j].0 - pairs[i].0);
            let w = 0.5 * (pairs[j].1 + pairs[i].1);
            pairs[i] = (-z, w);
            pairs[j] = (z, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    /// Shared 64-point rule (exact for polynomials up to degree 127).
    pub fn standard() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(64))
    }

    /// `E g(m + s Z)`.
    pub fn expectation<F: Fn(f64) -> f64>(&self, mean: f64, sd: f64, g: F) -> f64 {
        let terms: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(z, w)| w * g(mean + sd * z))
            .collect();
        pairwise_sum(&terms)
    }
}

/// Pairwise (cascade) summation with a fixed reduction tree.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if values.len() <= BLOCK {
        values.iter().sum()
    } else {
        let mid = values.len() / 2;
        pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
    }
}

/// Deterministic pairwise sum of `f(i)` over `0..n`.
pub fn pairwise_sum_by<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    fn rec<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
        if hi - lo <= 64 {
            (lo..hi).map(f).sum()
        } else {
            let mid = lo + (hi - lo) / 2;
            rec(lo, mid, f) + rec(mid, hi, f)
        }
    }
    rec(0, n, &f)
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(values) / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let ss = pairwise_sum_by(n, |i| (values[i] - mean).powi(2));
    (mean, (ss / (n as f64 - 1.0) / n as f64).sqrt())
}
