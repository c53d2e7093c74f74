use nalgebra::DMatrix;
use negctrl::inference::{normal_quantile, StackedSystem, MIN_RESAMPLES};
use negctrl::simulate::{generate_dataset, scenario_model_specs, DgpSpec, Scenario};
use negctrl::{bootstrap_se, sandwich_variance, wald_interval, wald_test, EstimatorKind, EstimatorOptions};
use proptest::prelude::*;

/// θ = E[X] by `x - θ`, τ = E[Y] / θ by `y / θ`.
struct RatioOfMeans {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl StackedSystem for RatioOfMeans {
    fn n_obs(&self) -> usize {
        self.x.len()
    }
    fn params(&self) -> Vec<f64> {
        vec![self.x.iter().sum::<f64>() / self.x.len() as f64]
    }
    fn n_targets(&self) -> usize {
        1
    }
    fn evaluate(&self, p: &[f64], out: &mut DMatrix<f64>) -> negctrl::Result<()> {
        for i in 0..self.x.len() {
            out[(0, i)] = self.x[i] - p[0];
            out[(1, i)] = self.y[i] / p[0];
        }
        Ok(())
    }
}

fn delta_method_se(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let tau = y.iter().sum::<f64>() / n / mx;
    let v = x.iter().zip(y).map(|(a, b)| ((b - tau * a) / mx).powi(2)).sum::<f64>() / n;
    (tau, (v / n).sqrt())
}

proptest! {
    #[test]
    fn sandwich_matches_the_delta_method(pairs in proptest::collection::vec((0.5f64..3.0, -2.0f64..2.0), 5..60)) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (tau, se) = delta_method_se(&x, &y);
        let s = sandwich_variance(&RatioOfMeans { x, y }).unwrap();
        prop_assert!((s.targets[0] - tau).abs() < 1e-12);
        let got = s.covariance[(1, 1)].sqrt();
        prop_assert!((got - se).abs() <= 1e-6 * se + 1e-12, "{} vs {}", got, se);
    }

    #[test]
    fn sandwich_ignores_record_order(pairs in proptest::collection::vec((0.5f64..3.0, -2.0f64..2.0), 5..40), shift in 1usize..40) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let k = shift % x.len();
        let mut xr = x.clone();
        let mut yr = y.clone();
        xr.rotate_left(k);
        yr.rotate_left(k);
        let a = sandwich_variance(&RatioOfMeans { x, y }).unwrap();
        let b = sandwich_variance(&RatioOfMeans { x: xr, y: yr }).unwrap();
        prop_assert!((a.covariance[(1, 1)] - b.covariance[(1, 1)]).abs() <= 1e-9 * a.covariance[(1, 1)].abs() + 1e-15);
    }

    #[test]
    fn wald_interval_is_symmetric_with_quantile_half_width(est in -5.0f64..5.0, se in 1e-4f64..3.0, level in 0.5f64..0.999) {
        let (lo, hi) = wald_interval(est, se, level).unwrap();
        let half = normal_quantile(0.5 + level / 2.0) * se;
        prop_assert!(((hi - lo) / 2.0 - half).abs() <= 1e-12 * (1.0 + half));
        prop_assert!(((hi + lo) / 2.0 - est).abs() <= 1e-12 * (1.0 + est.abs()));
    }

    #[test]
    fn wald_test_is_the_two_sided_normal_tail(t in -6.0f64..6.0) {
        let p = wald_test(t, 1.0).unwrap();
        let z = normal_quantile(1.0 - p / 2.0);
        prop_assert!((z - t.abs()).abs() < 1e-6 || p < 1e-8);
    }
}

#[test]
fn normal_quantile_reference_values() {
    assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
    assert!((normal_quantile(0.5)).abs() < 1e-15);
    assert!((normal_quantile(0.95) - 1.6448536269514722).abs() < 1e-12);
}

#[test]
fn bootstrap_is_deterministic_in_its_seed() {
    let (data, _) = generate_dataset(&DgpSpec::standard(400, 12)).unwrap();
    let spec = scenario_model_specs(Scenario::AllCorrect);
    let opts = EstimatorOptions::default();
    let a = bootstrap_se(&data, &spec, EstimatorKind::Delta2, &opts, MIN_RESAMPLES, 5).unwrap();
    let b = bootstrap_se(&data, &spec, EstimatorKind::Delta2, &opts, MIN_RESAMPLES, 5).unwrap();
    let c = bootstrap_se(&data, &spec, EstimatorKind::Delta2, &opts, MIN_RESAMPLES, 6).unwrap();
    assert_eq!(a.estimates, b.estimates);
    assert_ne!(a.estimates, c.estimates);
    assert_eq!(a.resamples, MIN_RESAMPLES);
    let n = a.estimates.len() as f64;
    let m = a.estimates.iter().sum::<f64>() / n;
    let sd = (a.estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((a.se - sd).abs() < 1e-12);
}

#[test]
fn bootstrap_rejects_too_few_resamples() {
    let (data, _) = generate_dataset(&DgpSpec::standard(200, 1)).unwrap();
    let spec = scenario_model_specs(Scenario::AllCorrect);
    assert!(bootstrap_se(&data, &spec, EstimatorKind::Mr, &EstimatorOptions::default(), MIN_RESAMPLES - 1, 1).is_err());
}
