use negctrl::simulate::{
    aggregate, generate_dataset, run_study, scenario_model_specs, true_ate_oracle, vaccine_dataset, DgpSpec,
    ReplicationRecord, Scenario, StudyConfig, MIN_ORACLE_N,
};
use negctrl::{EstimatorKind, EstimatorOptions};

fn small_config(reps: usize) -> StudyConfig {
    StudyConfig {
        scenario: Scenario::AllCorrect,
        reps,
        n: 300,
        base_seed: 11,
        estimators: vec![EstimatorKind::Delta1, EstimatorKind::Mr],
        options: EstimatorOptions::default(),
        truth: 0.07,
    }
}

#[test]
fn generator_is_deterministic_per_seed() {
    let (a, ua) = generate_dataset(&DgpSpec::standard(100, 1)).unwrap();
    let (b, ub) = generate_dataset(&DgpSpec::standard(100, 1)).unwrap();
    let (c, _) = generate_dataset(&DgpSpec::standard(100, 2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ua, ub);
    assert_ne!(a, c);
}

#[test]
fn latent_structure_matches_the_process_constants() {
    let spec = DgpSpec::standard(1_000_000, 31);
    let (data, u) = generate_dataset(&spec).unwrap();
    let mean = |f: &dyn Fn(usize) -> bool, v: &dyn Fn(usize) -> f64| {
        let idx: Vec<usize> = (0..data.n()).filter(|&i| f(i)).collect();
        idx.iter().map(|&i| v(i)).sum::<f64>() / idx.len() as f64
    };
    let s = &data.samples;
    for z in 0..2 {
        for a in 0..2u8 {
            let got = mean(&|i| s[i].z == z && s[i].a == a, &|i| u.0[i] as f64);
            assert!((got - spec.p_u(z, a)).abs() < 0.005, "E[U | z={z}, a={a}] = {got}");
        }
    }
    let shift = mean(&|i| u.0[i] == 1, &|i| s[i].w as f64) - mean(&|i| u.0[i] == 0, &|i| s[i].w as f64);
    assert!((shift - spec.w_shift).abs() < 0.005);
    let au = mean(&|i| s[i].a == 1 && u.0[i] == 1, &|i| s[i].y) - mean(&|i| s[i].a == 1 && u.0[i] == 0, &|i| s[i].y);
    let u_only = mean(&|i| s[i].a == 0 && u.0[i] == 1, &|i| s[i].y) - mean(&|i| s[i].a == 0 && u.0[i] == 0, &|i| s[i].y);
    assert!((au - u_only - spec.y_au).abs() < 0.01);
}

#[test]
fn oracle_matches_the_published_truth() {
    let o = true_ate_oracle(&DgpSpec::standard(10, 3), MIN_ORACLE_N).unwrap();
    assert!((o.delta - 0.07).abs() < 0.002);
    assert!(o.mc_se < 1e-4);
    assert_eq!(o.draws, MIN_ORACLE_N);
}

#[test]
fn oracle_agrees_with_a_discretized_law() {
    let spec = DgpSpec::standard(10, 3);
    let o = true_ate_oracle(&spec, MIN_ORACLE_N).unwrap();
    let grid: Vec<f64> = (0..3).map(|k| (k as f64 + 0.5) / 3.0).collect();
    let mut xs = Vec::new();
    for i in 0..3usize.pow(8) {
        let mut rest = i;
        let x: Vec<f64> = (0..8)
            .map(|_| {
                let v = grid[rest % 3];
                rest /= 3;
                v
            })
            .collect();
        xs.push(x);
    }
    let law = spec.discrete_law(&xs);
    assert!((law.latent_ate() - o.delta).abs() < 1e-3);
}

#[test]
fn scenario_specs_compile_and_differ() {
    let names = negctrl::simulate::covariate_names();
    let specs: Vec<_> = Scenario::ALL.iter().map(|&s| scenario_model_specs(s)).collect();
    for s in &specs {
        s.compile(&names).unwrap();
    }
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            assert_ne!(specs[i], specs[j]);
        }
    }
    for s in Scenario::ALL {
        assert_eq!(Scenario::parse(s.tag()).unwrap(), s);
    }
}

#[test]
fn study_is_reproducible_and_thread_independent() {
    let config = small_config(6);
    let a = run_study(&config).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let b = pool.install(|| run_study(&config)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.characteristics, b.characteristics);
    assert_eq!(a.log.len(), 12);
}

#[test]
fn empty_studies_are_rejected() {
    assert!(run_study(&small_config(0)).is_err());
    let mut c = small_config(2);
    c.estimators.clear();
    assert!(run_study(&c).is_err());
}

fn record(replication: usize, estimator: EstimatorKind, estimate: Option<f64>, covered: Option<bool>) -> ReplicationRecord {
    ReplicationRecord {
        replication,
        estimator,
        estimate,
        se: estimate.map(|_| 0.01),
        covered,
        error: estimate.is_none().then(|| "failed".to_string()),
    }
}

#[test]
fn aggregate_trims_each_tail_and_reports_untrimmed_coverage() {
    let mut config = small_config(200);
    config.estimators = vec![EstimatorKind::Mr];
    config.truth = 0.1;
    let mut log: Vec<ReplicationRecord> = (0..200)
        .map(|r| record(r, EstimatorKind::Mr, Some(0.1 + (r as f64 - 99.5) * 1e-4), Some(r % 4 != 0)))
        .collect();
    log[0].estimate = Some(-50.0);
    log[199].estimate = Some(50.0);
    let c = aggregate(&config, &log).unwrap();
    let row = c.row(EstimatorKind::Mr).unwrap();
    assert_eq!(row.retained, 198);
    assert_eq!(row.succeeded, 200);
    let kept: Vec<f64> = (1..199).map(|r| 0.1 + (r as f64 - 99.5) * 1e-4).collect();
    let mean = kept.iter().sum::<f64>() / 198.0;
    let var = kept.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 198.0;
    assert!((row.bias - (mean - 0.1)).abs() < 1e-15);
    assert!((row.variance - var).abs() < 1e-15);
    assert!((row.mse - (var + (mean - 0.1).powi(2))).abs() < 1e-15);
    assert!((row.proportion_bias - 100.0 * (mean - 0.1) / 0.1).abs() < 1e-12);
    assert!((row.coverage - 0.75).abs() < 1e-15);
}

#[test]
fn aggregate_rejects_excess_failures() {
    let mut config = small_config(100);
    config.estimators = vec![EstimatorKind::Mr];
    let log: Vec<ReplicationRecord> = (0..100)
        .map(|r| record(r, EstimatorKind::Mr, if r < 3 { None } else { Some(0.07) }, Some(true)))
        .collect();
    assert!(aggregate(&config, &log).is_err());
    let ok: Vec<ReplicationRecord> = (0..100)
        .map(|r| record(r, EstimatorKind::Mr, if r < 2 { None } else { Some(0.07) }, Some(true)))
        .collect();
    assert_eq!(aggregate(&config, &ok).unwrap().row(EstimatorKind::Mr).unwrap().failed, 2);
}

#[test]
fn vaccine_generator_has_binary_columns() {
    let (d, u) = vaccine_dataset(500, 9).unwrap();
    assert_eq!(d.z_coding.len(), 2);
    assert_eq!(d.w_coding.len(), 2);
    assert_eq!(u.0.len(), 500);
    assert!(d.samples.iter().all(|s| (s.y == 0.0 || s.y == 1.0) && s.x.iter().all(|v| *v == 0.0 || *v == 1.0)));
    assert!(vaccine_dataset(0, 1).is_err());
}
