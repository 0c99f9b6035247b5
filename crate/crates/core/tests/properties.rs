use proptest::prelude::*;

use pbef::estimator::{gamma_limit, gfun_simple, projection_coefficients, CoefficientMethod, PredictorSpec};
use pbef::model::{invariant_moment, kf_coefficient, CoxIngersollRoss, OrnsteinUhlenbeck};
use pbef::potential::{potential_closed_form, potential_pairing, PairingMethod};
use pbef::simulate::{simulate_path, SamplePath, SamplingScheme};
use pbef::SmoothFunction;

fn ou(eta: f64, kappa: f64, xi: f64) -> OrnsteinUhlenbeck {
    OrnsteinUhlenbeck::new(eta, kappa, xi).unwrap().estimating(&["eta", "kappa"]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kf_is_shift_invariant_and_scale_free(
        eta in -2.0..2.0f64, kappa in 0.2..4.0f64, xi in 0.2..2.0f64,
        c in -5.0..5.0f64, s in 0.1..10.0f64, b in -1.0..1.0f64,
    ) {
        let m = ou(eta, kappa, xi);
        let f = SmoothFunction::polynomial(vec![0.0, 1.0, b]);
        let k = kf_coefficient(&m, &[eta, kappa], &f).unwrap();
        let k_shift = kf_coefficient(&m, &[eta, kappa], &f.shifted(c)).unwrap();
        let k_scale = kf_coefficient(&m, &[eta, kappa], &f.scaled(s)).unwrap();
        prop_assert!((k - k_shift).abs() <= 1e-8 * k.abs().max(1.0));
        prop_assert!((k - k_scale).abs() <= 1e-8 * k.abs().max(1.0));
        prop_assert!(k < 0.0);
    }

    #[test]
    fn ou_identity_kf_is_minus_kappa(eta in -2.0..2.0f64, kappa in 0.2..4.0f64, xi in 0.2..2.0f64) {
        let m = ou(eta, kappa, xi);
        let k = kf_coefficient(&m, &[eta, kappa], &SmoothFunction::identity()).unwrap();
        prop_assert!((k + kappa).abs() < 1e-10);
    }

    #[test]
    fn exact_projection_matches_autocorrelation(
        eta in -2.0..2.0f64, kappa in 0.2..4.0f64, xi in 0.2..2.0f64, delta in 0.001..0.5f64,
    ) {
        let m = ou(eta, kappa, xi);
        let spec = PredictorSpec::one_lag(SmoothFunction::identity());
        let a = projection_coefficients(&m, &[eta, kappa], &spec, delta, CoefficientMethod::ExactMoments).unwrap();
        let rho = (-kappa * delta).exp();
        prop_assert!((a.a[1] - rho).abs() < 1e-10);
        prop_assert!((a.a[0] - eta * (1.0 - rho)).abs() < 1e-10 * (1.0 + eta.abs()));
    }

    #[test]
    fn gamma_vanishes_at_truth(eta in -2.0..2.0f64, kappa in 0.2..4.0f64, xi in 0.2..2.0f64) {
        let m = ou(eta, kappa, xi);
        let spec = PredictorSpec::one_lag(SmoothFunction::identity());
        let g = gamma_limit(&m, &[eta, kappa], &[eta, kappa], &spec).unwrap();
        let scale = eta * eta + xi * xi;
        prop_assert!(g[0].abs() < 1e-10 * scale.max(1.0) && g[1].abs() < 1e-10 * scale.max(1.0));
    }

    #[test]
    fn pairing_is_symmetric_and_nonnegative(
        eta in 0.5..2.0f64, kappa in 0.5..3.0f64, xi in 0.2..1.0f64, c1 in -2.0..2.0f64, c2 in -2.0..2.0f64,
    ) {
        prop_assume!(2.0 * kappa * eta >= xi * xi);
        let m = CoxIngersollRoss::new(eta, kappa, xi).unwrap().estimating(&["eta"]).unwrap();
        let g1 = SmoothFunction::polynomial(vec![-c1 * eta, c1]);
        let g2 = SmoothFunction::polynomial(vec![-c2 * eta, c2]);
        let p12 = potential_pairing(&m, &[eta], &g1, &g2, &PairingMethod::Analytic).unwrap().value;
        let p21 = potential_pairing(&m, &[eta], &g2, &g1, &PairingMethod::Analytic).unwrap().value;
        let p11 = potential_pairing(&m, &[eta], &g1, &g1, &PairingMethod::Analytic).unwrap().value;
        prop_assert!((p12 - p21).abs() <= 1e-12 * (1.0 + p12.abs()));
        prop_assert!(p11 >= -1e-14);
    }

    #[test]
    fn potential_is_linear(kappa in 0.2..4.0f64, xi in 0.2..2.0f64, s in -3.0..3.0f64) {
        let m = ou(1.0, kappa, xi);
        let g = SmoothFunction::polynomial(vec![-1.0, 1.0]);
        let u = potential_closed_form(&m, &[1.0, kappa], &g).unwrap();
        let us = potential_closed_form(&m, &[1.0, kappa], &g.scaled(s)).unwrap();
        for x in [-1.0, 0.0, 2.5] {
            prop_assert!((us.eval(x) - s * u.eval(x)).abs() < 1e-12 * (1.0 + u.eval(x).abs()));
        }
    }

    #[test]
    fn simulation_is_deterministic_per_stream(seed in any::<u64>(), stream in 0u64..1000) {
        let m = ou(0.0, 1.0, 1.0);
        let scheme = SamplingScheme::new(50, 0.1).unwrap().with_seed(seed).with_stream(stream);
        let a = simulate_path(&m, &[0.0, 1.0], &scheme).unwrap();
        let b = simulate_path(&m, &[0.0, 1.0], &scheme).unwrap();
        prop_assert_eq!(&a.values, &b.values);
        let other = simulate_path(&m, &[0.0, 1.0], &scheme.with_stream(stream + 1)).unwrap();
        prop_assert_ne!(&a.values, &other.values);
    }

    #[test]
    fn simple_g_is_linear_in_the_observations(values in prop::collection::vec(-5.0..5.0f64, 3..40), eta in -1.0..1.0f64) {
        let m = OrnsteinUhlenbeck::new(eta, 1.0, 1.0).unwrap().estimating(&["eta"]).unwrap();
        let path = SamplePath::from_values(values.clone(), 0.1).unwrap();
        let spec = PredictorSpec::simple(SmoothFunction::identity());
        let g = gfun_simple(&m, &[eta], &path, &spec).unwrap();
        let direct: f64 = values[1..].iter().map(|x| x - eta).sum();
        prop_assert!((g.value[0] - direct).abs() < 1e-10 * (1.0 + direct.abs()));
        let mu = invariant_moment(&m, &[eta], &SmoothFunction::identity()).unwrap().value;
        prop_assert!((mu - eta).abs() < 1e-12);
    }
}
