use negctrl::estimators::{eif_bias_binary, eif_bias_general, eif_confounded, Record};
use negctrl::nuisance::ExposureTable;
use negctrl::point::PointNuisance;
use negctrl::simulate::{generate_dataset, scenario_model_specs, vaccine_dataset, DgpSpec, Scenario, VACCINE_N, VACCINE_SEED};
use negctrl::{estimate, reduction_check, Dataset, DesignedData, EstimatorKind, EstimatorOptions, ModelSpec};
use proptest::prelude::*;

/// Bridge functional on the empirical law, one 2×2 system per covariate stratum.
fn empirical_bridge_ate(data: &Dataset) -> f64 {
    let mut strata: std::collections::BTreeMap<Vec<u64>, Vec<&negctrl::data::ObservedSample>> = Default::default();
    for s in &data.samples {
        strata.entry(s.x.iter().map(|v| v.to_bits()).collect()).or_default().push(s);
    }
    let n = data.n() as f64;
    let mut delta = 0.0;
    for recs in strata.values() {
        let px = recs.len() as f64 / n;
        let pw = recs.iter().filter(|s| s.w == 1).count() as f64 / recs.len() as f64;
        for a in 0..2u8 {
            let cell = |z: usize| {
                let c: Vec<_> = recs.iter().filter(|s| s.a == a && s.z == z).collect();
                let m = c.iter().map(|s| s.y).sum::<f64>() / c.len() as f64;
                let p = c.iter().filter(|s| s.w == 1).count() as f64 / c.len() as f64;
                (m, p)
            };
            let (m0, p0) = cell(0);
            let (m1, p1) = cell(1);
            let slope = (m1 - m0) / (p1 - p0);
            let h0 = m0 - slope * p0;
            let sign = if a == 1 { 1.0 } else { -1.0 };
            delta += sign * px * (h0 + slope * pw);
        }
    }
    delta
}

#[test]
fn saturated_estimators_equal_the_empirical_bridge_functional() {
    let (data, _) = vaccine_dataset(VACCINE_N, VACCINE_SEED).unwrap();
    let oracle = empirical_bridge_ate(&data);
    assert!((oracle - (-0.0465179070417)).abs() < 1e-12);
    let spec = ModelSpec::saturated(&data.covariate_names);
    let d = DesignedData::new(&data, &spec).unwrap();
    let opts = EstimatorOptions::default();
    for &k in &EstimatorKind::ALL {
        let r = estimate(&d, k, &opts).unwrap().report;
        assert!((r.estimate - oracle).abs() < 1e-10, "{}: {} vs {oracle}", r.estimator, r.estimate);
        assert!((r.se.unwrap() - 0.016087244).abs() < 1e-8);
    }
}

#[test]
fn saturated_estimators_without_covariates_equal_the_bridge_functional() {
    let (mut data, _) = vaccine_dataset(1500, 8).unwrap();
    for s in &mut data.samples {
        s.x.clear();
    }
    data.covariate_names.clear();
    let oracle = empirical_bridge_ate(&data);
    let spec = ModelSpec::saturated(&[]);
    let d = DesignedData::new(&data, &spec).unwrap();
    let opts = EstimatorOptions { sandwich: false, ..Default::default() };
    for &k in &EstimatorKind::ALL {
        let e = estimate(&d, k, &opts).unwrap().report.estimate;
        assert!((e - oracle).abs() < 1e-10);
    }
}

#[test]
fn reductions_hold_in_every_scenario() {
    let (data, _) = generate_dataset(&DgpSpec::standard(1200, 21)).unwrap();
    for s in Scenario::ALL {
        let d = DesignedData::new(&data, &scenario_model_specs(s)).unwrap();
        let r = reduction_check(&d, &EstimatorOptions::default()).unwrap();
        assert!(r.max_abs_difference <= 1e-10, "{}: {}", s.tag(), r.max_abs_difference);
    }
}

#[test]
fn estimates_do_not_depend_on_record_order() {
    let (data, _) = generate_dataset(&DgpSpec::standard(800, 4)).unwrap();
    let mut rev = data.clone();
    rev.samples.reverse();
    let spec = scenario_model_specs(Scenario::AllCorrect);
    let opts = EstimatorOptions::default();
    for &k in &EstimatorKind::ALL {
        let a = estimate(&DesignedData::new(&data, &spec).unwrap(), k, &opts).unwrap().report;
        let b = estimate(&DesignedData::new(&rev, &spec).unwrap(), k, &opts).unwrap().report;
        assert!((a.estimate - b.estimate).abs() < 1e-10, "{}", a.estimator);
        assert!((a.se.unwrap() - b.se.unwrap()).abs() < 1e-8, "{}", a.estimator);
    }
}

#[test]
fn report_parts_add_up() {
    let (data, _) = generate_dataset(&DgpSpec::standard(800, 6)).unwrap();
    let d = DesignedData::new(&data, &scenario_model_specs(Scenario::AllCorrect)).unwrap();
    let r = estimate(&d, EstimatorKind::Mr, &EstimatorOptions::default()).unwrap().report;
    let (c, b) = (r.confounded.unwrap(), r.bias.unwrap());
    assert!((c - b - r.estimate).abs() < 1e-12);
    let (lo, hi) = r.ci.unwrap();
    assert!(lo < r.estimate && r.estimate < hi);
    assert!(r.p_value.unwrap() > 0.0 && r.p_value.unwrap() <= 1.0);
}

#[test]
fn estimator_tags_round_trip() {
    for &k in &EstimatorKind::ALL {
        assert_eq!(EstimatorKind::parse(k.tag()).unwrap(), k);
    }
    assert!(EstimatorKind::parse("ipw").is_err());
}

fn nuisance(joint: [f64; 4], v: [f64; 8]) -> PointNuisance {
    let total: f64 = joint.iter().sum();
    let table = ExposureTable::from_joint(2, joint.iter().map(|p| p / total).collect());
    let mut pn = PointNuisance::zeros(1, 1, 0, table);
    pn.y_base = [v[0], v[1]];
    pn.w_base = vec![v[2]];
    pn.delta0 = vec![v[3]];
    pn.xi0 = vec![v[4]];
    pn.eta = vec![v[5]];
    pn.ratio = [vec![v[6]], vec![v[7]]];
    pn
}

proptest! {
    #[test]
    fn binary_and_general_bias_paths_agree(
        joint in proptest::array::uniform4(0.05f64..1.0),
        base in proptest::array::uniform3(0.05f64..0.6),
        delta0 in -0.2f64..0.2,
        xi0 in 0.1f64..0.5,
        eta in -0.05f64..0.3,
        ratio in proptest::array::uniform2(-1.0f64..1.0),
        y in 0.0f64..1.0,
    ) {
        let pn = nuisance(joint, [base[0], base[1], base[2], delta0, xi0, eta, ratio[0], ratio[1]]);
        for a in 0..2u8 {
            for z in 0..2usize {
                for w in 0..2usize {
                    let r = Record { y, a, z, gz: (z == 1).then_some(0), gw: (w == 1).then_some(0) };
                    let b = eif_bias_binary(&r, &pn, 1e-6).unwrap();
                    let g = eif_bias_general(&r, &pn, 1e-6).unwrap();
                    prop_assert!((b - g).abs() <= 1e-10 * (1.0 + b.abs()));
                }
            }
        }
    }

    #[test]
    fn confounded_eif_is_linear_in_the_outcome(
        joint in proptest::array::uniform4(0.05f64..1.0),
        y0 in 0.0f64..1.0,
        y1 in 0.0f64..1.0,
    ) {
        let pn = nuisance(joint, [0.2, 0.3, 0.2, 0.0, 0.2, 0.1, 0.0, 0.5]);
        let r = |y| Record { y, a: 1, z: 1, gz: Some(0), gw: None };
        let f1 = pn.exposure.a_given_z(1, 1);
        let slope = (eif_confounded(&r(y1), &pn) - eif_confounded(&r(y0), &pn)) / (y1 - y0);
        prop_assume!((y1 - y0).abs() > 1e-3);
        prop_assert!((slope - 1.0 / f1).abs() < 1e-9 / (y1 - y0).abs());
    }
}

#[test]
fn weight_truncation_caps_inverse_weights() {
    let (data, _) = generate_dataset(&DgpSpec::standard(800, 13)).unwrap();
    let d = DesignedData::new(&data, &scenario_model_specs(Scenario::AllCorrect)).unwrap();
    let base = EstimatorOptions { sandwich: false, ..Default::default() };
    let at = |q: Option<f64>| {
        let opts = EstimatorOptions { weight_truncation: q, ..base.clone() };
        estimate(&d, EstimatorKind::Delta1, &opts).map(|e| e.report.estimate)
    };
    let plain = at(None).unwrap();
    assert!((at(Some(1.0)).unwrap() - plain).abs() < 1e-12);
    assert!((at(Some(0.6)).unwrap() - plain).abs() > 1e-6);
    assert!(at(Some(0.4)).is_err());
    let fitted = negctrl::estimators::fit_estimator(&d, EstimatorKind::Mr, &EstimatorOptions { weight_truncation: Some(0.9), ..base.clone() }).unwrap();
    let below = (0..d.n())
        .filter(|&i| {
            let pn = fitted.theta.point(&d, i);
            let s = &data.samples[i];
            pn.exposure.a_given_z(s.a, s.z) < fitted.weight_floor
        })
        .count();
    assert!(below > 0 && below <= d.n() / 10 + 1);
}
