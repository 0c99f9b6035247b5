//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain binary
//! so the verdicts are always printed; exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use pbef::estimator::{gamma_limit, projection_coefficients, w_limit, CoefficientMethod, PredictorSpec};
use pbef::experiment::{
    run_estimation_study, AvarConfig, EstimatorKind, ExperimentConfig, OutputConfig, PairingChoice,
    PredictorConfig, ScheduleConfig, ScheduleEntry,
};
use pbef::model::{generator_apply, generator_iterate, transition_expectation, ModelConfig, OrnsteinUhlenbeck};
use pbef::potential::{
    avar_onelag, avar_simple, clt_variance, gradient_form_mc, potential_closed_form, potential_pairing_mc,
    Avar, PairingMethod, PotentialMCConfig,
};
use pbef::simulate::increment_moment_scaling;
use pbef::{Result, SmoothFunction};

const ETA: f64 = 1.0;
const KAPPA: f64 = 2.0;
const XI: f64 = 1.0;

struct Verdict {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Result<Verdict>);

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn ou(estimate: &[&str]) -> Result<OrnsteinUhlenbeck> {
    OrnsteinUhlenbeck::new(ETA, KAPPA, XI)?.estimating(estimate)
}

fn centered_identity() -> SmoothFunction {
    SmoothFunction::polynomial(vec![-ETA, 1.0])
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn c1_potential_pairing() -> Result<Verdict> {
    let m = ou(&["eta"])?;
    let g = centered_identity();
    let target = XI * XI / (2.0 * KAPPA * KAPPA);

    let start = Instant::now();
    let grid = potential_pairing_mc(&m, &[ETA], &g, &g, &PotentialMCConfig::grid(20_000, 12.0 / KAPPA, 101))?;
    let t_grid = start.elapsed().as_secs_f64();

    let t_max = 6.0 / KAPPA;
    let start = Instant::now();
    let exp = potential_pairing_mc(
        &m,
        &[ETA],
        &g,
        &g,
        &PotentialMCConfig::exp_time(200_000, 1.594 / t_max, t_max, 102),
    )?;
    let t_exp = start.elapsed().as_secs_f64();

    let (rg, re) = (rel(grid.value, target), rel(exp.value, target));
    verdict(
        rg <= 0.05 && re <= 0.20 && t_grid <= 120.0 && t_exp <= 120.0,
        format!(
            "target {target:.6}; grid {:.6} (rel {rg:.4}, {t_grid:.1}s); exp_time {:.6} (rel {re:.4}, {t_exp:.1}s)",
            grid.value, exp.value
        ),
    )
}

fn c2_avar_bound() -> Result<Verdict> {
    let m = ou(&["eta"])?;
    let spec = PredictorSpec::simple(SmoothFunction::identity());
    let target = (XI / KAPPA).powi(2);
    let exact = avar_simple(&m, &[ETA], &spec, &PairingMethod::Analytic)?;
    let a = exact.avar.scalar().unwrap_or(f64::NAN);
    let bound = exact.bound.unwrap_or(f64::NAN);
    let mc = avar_simple(
        &m,
        &[ETA],
        &spec,
        &PairingMethod::MonteCarlo(PotentialMCConfig::grid(20_000, 12.0 / KAPPA, 202)),
    )?;
    let am = mc.avar.scalar().unwrap_or(f64::NAN);
    verdict(
        (a - target).abs() < 1e-10 && (bound - a).abs() < 1e-10 && rel(am, target) <= 0.05,
        format!(
            "closed form {a:.12} (err {:.1e}), bound {bound:.12}, MC {am:.6} (rel {:.4})",
            (a - target).abs(),
            rel(am, target)
        ),
    )
}

fn c3_poisson_residual() -> Result<Verdict> {
    let m = ou(&["eta"])?;
    let g = centered_identity();
    let u = potential_closed_form(&m, &[ETA], &g)?;
    let sd = XI / (2.0 * KAPPA).sqrt();
    let mut worst = 0.0f64;
    for i in 0..=100 {
        let x = ETA - 6.0 * sd + 12.0 * sd * i as f64 / 100.0;
        let r = generator_apply(&m, &[ETA], &u, x)? + g.eval(x);
        worst = worst.max(r.abs());
    }
    verdict(worst < 1e-10, format!("max |L U(f*) + f*| = {worst:.2e} on 101 points"))
}

fn c4_variance_identity() -> Result<Verdict> {
    let m = ou(&["eta"])?;
    let g = centered_identity();
    let exact = clt_variance(&m, &[ETA], &g, &PairingMethod::Analytic)?;
    let pairing = exact.pairing_form.value;
    let gradient = exact.gradient_form.as_ref().map(|e| e.value).unwrap_or(f64::NAN);
    let closed_ok = (pairing - gradient).abs() < 1e-12;

    let cfg_a = PotentialMCConfig::grid(20_000, 12.0 / KAPPA, 401);
    let cfg_b = PotentialMCConfig::grid(20_000, 12.0 / KAPPA, 402);
    let mc_pair = clt_variance(&m, &[ETA], &g, &PairingMethod::MonteCarlo(cfg_a))?.pairing_form;
    let mc_grad = gradient_form_mc(&m, &[ETA], &g, &cfg_b)?;
    let combined = mc_pair.stderr.hypot(mc_grad.stderr);
    let diff = (mc_pair.value - mc_grad.value).abs();
    verdict(
        closed_ok && diff <= 3.0 * combined,
        format!(
            "closed forms {pairing:.15} vs {gradient:.15}; MC {:.5}±{:.1e} vs {:.5}±{:.1e} (|diff| {diff:.1e}, 3σ {:.1e})",
            mc_pair.value,
            mc_pair.stderr,
            mc_grad.value,
            mc_grad.stderr,
            3.0 * combined
        ),
    )
}

fn c5_expansion_order() -> Result<Verdict> {
    let m = ou(&["eta", "kappa"])?;
    let spec = PredictorSpec::one_lag(SmoothFunction::identity());
    let remainder = |d: f64| -> Result<f64> {
        let a = projection_coefficients(&m, &[ETA, KAPPA], &spec, d, CoefficientMethod::ExactMoments)?;
        Ok((a.a[1] - (1.0 - KAPPA * d)).abs())
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for d in [0.2, 0.1, 0.05] {
        let ratio = remainder(d)? / remainder(d / 2.0)?;
        ok &= (ratio - 4.0).abs() <= 0.25 * 4.0;
        parts.push(format!("Δ={d}: {ratio:.4}"));
    }
    verdict(ok, format!("remainder ratios {}", parts.join(", ")))
}

fn study_config(estimate: &[&str], kind: EstimatorKind, q: usize, seed: u64) -> ExperimentConfig {
    let params: BTreeMap<String, f64> =
        [("eta", ETA), ("kappa", KAPPA), ("xi", XI)].iter().map(|(k, v)| (k.to_string(), *v)).collect();
    ExperimentConfig {
        model: ModelConfig {
            family: "ou".into(),
            params,
            estimate: estimate.iter().map(|s| s.to_string()).collect(),
            bounds: BTreeMap::new(),
        },
        predictor: PredictorConfig {
            function: Some("x".into()),
            coefficients: None,
            q,
        },
        estimator: kind,
        coefficient_method: None,
        schedule: ScheduleConfig {
            entries: vec![ScheduleEntry { n: 100_000, delta: 0.01 }],
            preset: None,
        },
        replications: 500,
        seed,
        substeps: 1,
        theta_star: None,
        avar: AvarConfig {
            method: PairingChoice::Analytic,
            mc: PotentialMCConfig::default(),
            feasible: false,
        },
        output: OutputConfig::default(),
        clt_rel_tol: 0.15,
    }
}

fn c6_simple_clt() -> Result<Verdict> {
    let start = Instant::now();
    let report = run_estimation_study(&study_config(&["eta"], EstimatorKind::Simple, 0, 6006))?;
    let secs = start.elapsed().as_secs_f64();
    let s = &report.summaries[0];
    let target = (XI / KAPPA).powi(2);
    let var = s.covariance[0][0];
    let mean = s.mean_standardized[0];
    let se = s.mean_standardized_stderr[0];
    verdict(
        s.n_used == 500 && rel(var, target) <= 0.15 && mean.abs() <= 4.0 * se && secs <= 600.0,
        format!(
            "var {var:.5} vs {target} (rel {:.4}); mean {mean:.4} (4se {:.4}); coverage {:.3}; {secs:.1}s",
            rel(var, target),
            4.0 * se,
            s.coverage_oracle[0]
        ),
    )
}

fn c7_onelag() -> Result<Verdict> {
    let m = ou(&["eta", "kappa"])?;
    let spec = PredictorSpec::one_lag(SmoothFunction::identity());
    let s2 = XI * XI / (2.0 * KAPPA);
    let w = w_limit(&m, &[ETA, KAPPA], &[ETA, KAPPA], &spec)?;
    let expected = [[-KAPPA, 0.0], [-KAPPA * ETA, s2]];
    let mut w_err = 0.0f64;
    for (i, row) in expected.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            w_err = w_err.max((w[(i, j)] - e).abs());
        }
    }
    let predicted = match avar_onelag(&m, &[ETA, KAPPA], &spec, &PairingMethod::Analytic)?.avar {
        Avar::Matrix(p) => p,
        Avar::Scalar(_) => return verdict(false, "expected a matrix AVAR".into()),
    };
    let report = run_estimation_study(&study_config(&["eta", "kappa"], EstimatorKind::Onelag, 1, 7007))?;
    let cov = &report.summaries[0].covariance;
    let d11 = rel(cov[0][0], predicted[0][0]);
    let d22 = rel(cov[1][1], predicted[1][1]);
    // The predicted off-diagonal is zero; scale by the diagonal.
    let d12 = (cov[0][1] - predicted[0][1]).abs() / (predicted[0][0] * predicted[1][1]).sqrt();
    verdict(
        w_err < 1e-8 && d11 <= 0.2 && d22 <= 0.2 && d12 <= 0.2,
        format!(
            "W err {w_err:.1e}; cov [[{:.4}, {:.4}], [., {:.4}]] vs sandwich [[{:.4}, {:.1e}], [., {:.4}]]; rel {d11:.3}/{d12:.3}/{d22:.3}",
            cov[0][0], cov[0][1], cov[1][1], predicted[0][0], predicted[0][1], predicted[1][1]
        ),
    )
}

fn c8_gamma_root() -> Result<Verdict> {
    let m = ou(&["eta", "kappa"])?;
    let spec = PredictorSpec::one_lag(SmoothFunction::identity());
    let (h_eta, h_kappa) = (0.04, 0.06);
    let mut root = f64::NAN;
    let mut off = f64::INFINITY;
    let mut argmin = (0.0, 0.0);
    for i in 0..50 {
        for j in 0..50 {
            let eta = ETA + (i as f64 - 24.0) * h_eta;
            let kappa = KAPPA + (j as f64 - 24.0) * h_kappa;
            let g = gamma_limit(&m, &[ETA, KAPPA], &[eta, kappa], &spec)?;
            let norm = g[0].hypot(g[1]);
            if i == 24 && j == 24 {
                root = norm;
            } else if norm < off {
                off = norm;
                argmin = (eta, kappa);
            }
        }
    }
    verdict(
        off > 10.0 * root,
        format!(
            "root cell |γ| = {root:.1e}; min off-root |γ| = {off:.3e} at ({:.2}, {:.2})",
            argmin.0, argmin.1
        ),
    )
}

fn c9_increment_scaling() -> Result<Verdict> {
    let m = ou(&["eta"])?;
    let deltas = [0.001, 0.002, 0.004, 0.008, 0.016];
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [2u32, 4] {
        let s = increment_moment_scaling(&m, &[ETA], k, &deltas, 100_000, 1, 9000 + k as u64)?;
        let need = k as f64 / 2.0 - 0.15;
        ok &= s.slope >= need;
        parts.push(format!("k={k}: slope {:.4} (need ≥ {need})", s.slope));
    }
    verdict(ok, parts.join("; "))
}

fn c10_generator_expansion() -> Result<Verdict> {
    let m = ou(&["eta"])?;
    let f = SmoothFunction::new("sin", f64::sin, f64::cos, |x: f64| -x.sin()).with_higher(|x: f64| -x.cos(), f64::sin);
    let remainder = |x: f64, d: f64| -> Result<f64> {
        let exact = transition_expectation(&m, &[ETA], &f, x, d).unwrap_or(f64::NAN);
        let mut taylor = 0.0;
        let mut fact = 1.0;
        for i in 0..=2 {
            if i > 0 {
                fact *= i as f64;
            }
            taylor += d.powi(i as i32) / fact * generator_iterate(&m, &[ETA], &f, x, i)?;
        }
        Ok((exact - taylor).abs())
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for x in [0.3, 1.0, 1.8] {
        for d in [0.1, 0.05] {
            let ratio = remainder(x, d)? / remainder(x, d / 2.0)?;
            ok &= (ratio - 8.0).abs() <= 0.35 * 8.0;
            parts.push(format!("x={x},Δ={d}: {ratio:.3}"));
        }
    }
    verdict(ok, format!("remainder ratios {}", parts.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("OU potential pairing by Monte Carlo", c1_potential_pairing),
        ("simple AVAR equals the spectral-gap bound", c2_avar_bound),
        ("Poisson equation residual", c3_poisson_residual),
        ("pairing and gradient forms of the CLT variance", c4_variance_identity),
        ("order of the projection-coefficient expansion", c5_expansion_order),
        ("simple-estimator CLT", c6_simple_clt),
        ("1-lag W and sandwich covariance", c7_onelag),
        ("unique root of the 1-lag limit", c8_gamma_root),
        ("increment moment scaling", c9_increment_scaling),
        ("generator expansion remainder", c10_generator_expansion),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {:>2} {} | {name} | {detail} | {:.1}s",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
