//! Damped Newton iteration for square estimating equations and numerical
//! θ-derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Interval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iterations: usize,
    /// Converged when `‖G‖ < residual_tol · scale`.
    pub residual_tol: f64,
    /// Stop when the accepted step is shorter than `step_tol · (1 + ‖θ‖)`.
    pub step_tol: f64,
    pub max_condition: f64,
    pub max_halvings: usize,
    /// Relative margin kept from finite parameter bounds.
    pub interior_margin: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iterations: 50,
            residual_tol: 1e-10,
            step_tol: 1e-12,
            max_condition: 1e12,
            max_halvings: 30,
            interior_margin: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOutcome {
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub residual_norm: f64,
    pub condition_number: f64,
}

/// Move `theta` inside the open box, keeping a small margin from finite ends.
pub fn project_interior(theta: &mut [f64], bounds: &[Interval], margin: f64) {
    for (v, b) in theta.iter_mut().zip(bounds) {
        if b.lo.is_finite() {
            let lo = b.lo + margin * b.lo.abs().max(1.0);
            if *v < lo {
                *v = lo;
            }
        }
        if b.hi.is_finite() {
            let hi = b.hi - margin * b.hi.abs().max(1.0);
            if *v > hi {
                *v = hi;
            }
        }
    }
}

/// 2-norm condition number from the singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve `G(θ) = 0` where `fun` returns `(G(θ), ∂G/∂θᵀ)`.
///
/// Full Newton steps are halved until the residual norm decreases. Iterates
/// are projected back into the interior of `bounds`.
pub fn damped_newton<F>(
    fun: F,
    theta0: &[f64],
    bounds: &[Interval],
    scale: f64,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome>
where
    F: Fn(&[f64]) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    let mut theta = theta0.to_vec();
    project_interior(&mut theta, bounds, opts.interior_margin);
    let (mut g, mut jac) = fun(&theta)?;
    if jac.nrows() != jac.ncols() || jac.nrows() != theta.len() {
        return Err(Error::Config(format!(
            "estimating equation is {}x{} but theta has {} coordinates",
            jac.nrows(),
            jac.ncols(),
            theta.len()
        )));
    }
    let tol = opts.residual_tol * scale;
    let mut res = g.norm();
    let mut cond = condition_number(&jac);
    for iteration in 0..opts.max_iterations {
        if res < tol {
            return Ok(NewtonOutcome {
                theta,
                converged: true,
                iterations: iteration,
                residual_norm: res,
                condition_number: cond,
            });
        }
        if !(cond <= opts.max_condition) {
            return Err(Error::NearSingular(cond));
        }
        let step = jac
            .clone()
            .lu()
            .solve(&(-&g))
            .ok_or(Error::NearSingular(f64::INFINITY))?;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(x, s)| x + t * s).collect();
            project_interior(&mut trial, bounds, opts.interior_margin);
            if let Ok((g_new, jac_new)) = fun(&trial) {
                let r_new = g_new.norm();
                if r_new.is_finite() && r_new < res {
                    accepted = Some((trial, g_new, jac_new, r_new));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, g_new, jac_new, r_new)) = accepted else {
            // No decrease along the Newton direction: stalled at the
            // floating-point resolution of G.
            return Ok(NewtonOutcome {
                theta,
                converged: res < tol,
                iterations: iteration + 1,
                residual_norm: res,
                condition_number: cond,
            });
        };
        let step_len = theta
            .iter()
            .zip(&trial)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let theta_norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        theta = trial;
        g = g_new;
        jac = jac_new;
        res = r_new;
        cond = condition_number(&jac);
        if step_len < opts.step_tol * (1.0 + theta_norm) {
            return Ok(NewtonOutcome {
                theta,
                converged: res < tol,
                iterations: iteration + 1,
                residual_norm: res,
                condition_number: cond,
            });
        }
    }
    if res < tol {
        return Ok(NewtonOutcome {
            theta,
            converged: true,
            iterations: opts.max_iterations,
            residual_norm: res,
            condition_number: cond,
        });
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iterations,
        residual: res,
    })
}

/// Central-difference derivative of a vector function of θ, step
/// `1e-5 · (1 + |θⱼ|)`, shortened near finite bounds.
pub fn central_jacobian<F>(fun: F, theta: &[f64], bounds: &[Interval]) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let d = theta.len();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut h = 1e-5 * (1.0 + theta[j].abs());
        if let Some(b) = bounds.get(j) {
            let room = (theta[j] - b.lo).min(b.hi - theta[j]);
            if room.is_finite() {
                h = h.min(0.5 * room);
            }
        }
        let mut up = theta.to_vec();
        let mut down = theta.to_vec();
        up[j] += h;
        down[j] -= h;
        let fu = fun(&up)?;
        let fd = fun(&down)?;
        cols.push(fu.iter().zip(&fd).map(|(a, b)| (a - b) / (2.0 * h)).collect());
    }
    let rows = cols.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows, d, |i, j| cols[j][i]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newton_solves_smooth_system() {
        // x² + y² = 4, x = y  →  (√2, √2)
        let fun = |t: &[f64]| -> Result<(DVector<f64>, DMatrix<f64>)> {
            let (x, y) = (t[0], t[1]);
            Ok((
                DVector::from_vec(vec![x * x + y * y - 4.0, x - y]),
                DMatrix::from_row_slice(2, 2, &[2.0 * x, 2.0 * y, 1.0, -1.0]),
            ))
        };
        let b = vec![Interval::POSITIVE, Interval::POSITIVE];
        let out = damped_newton(fun, &[3.0, 0.5], &b, 1.0, &NewtonOptions::default()).unwrap();
        assert!(out.converged);
        assert!((out.theta[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!(out.residual_norm < 1e-10);
    }

    #[test]
    fn singular_jacobian_is_reported() {
        let fun = |t: &[f64]| -> Result<(DVector<f64>, DMatrix<f64>)> {
            Ok((
                DVector::from_vec(vec![t[0] + t[1] - 1.0, 2.0 * (t[0] + t[1]) - 3.0]),
                DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]),
            ))
        };
        let b = vec![Interval::REAL_LINE; 2];
        assert!(matches!(
            damped_newton(fun, &[0.0, 0.0], &b, 1.0, &NewtonOptions::default()),
            Err(Error::NearSingular(_))
        ));
    }

    #[test]
    fn iterates_stay_inside_bounds() {
        // Root at x = -1 lies outside (0, ∞): the iteration must not leave Θ.
        let fun = |t: &[f64]| -> Result<(DVector<f64>, DMatrix<f64>)> {
            assert!(t[0] > 0.0);
            Ok((
                DVector::from_vec(vec![t[0] + 1.0]),
                DMatrix::from_row_slice(1, 1, &[1.0]),
            ))
        };
        let out = damped_newton(fun, &[2.0], &[Interval::POSITIVE], 1.0, &NewtonOptions::default())
            .unwrap();
        assert!(!out.converged);
        assert!(out.theta[0] > 0.0);
    }

    #[test]
    fn central_jacobian_of_quadratic() {
        let j = central_jacobian(
            |t| Ok(vec![t[0] * t[0] * t[1], t[1].sin()]),
            &[1.5, 0.3],
            &[Interval::REAL_LINE; 2],
        )
        .unwrap();
        assert!((j[(0, 0)] - 2.0 * 1.5 * 0.3).abs() < 1e-9);
        assert!((j[(0, 1)] - 2.25).abs() < 1e-9);
        assert!(j[(1, 0)].abs() < 1e-12);
        assert!((j[(1, 1)] - 0.3f64.cos()).abs() < 1e-9);
    }
}
