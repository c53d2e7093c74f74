//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use negctrl::cli::{bundled_vaccine_path, run, SCHEMA};
use negctrl::gestimation::{default_index_functions, gest_r_m1, gest_w_m2};
use negctrl::identify::{law_eif_expectation, observed_matrices};
use negctrl::inference::normal_quantile;
use negctrl::nuisance::fit_joint_exposure;
use negctrl::simulate::{
    generate_dataset, run_study, scenario_model_specs, true_ate_oracle, vaccine_dataset, DgpSpec,
    OperatingCharacteristics, Scenario, StudyConfig, MIN_ORACLE_N,
};
use negctrl::{
    ate_by_identification, ate_by_reparameterization, bootstrap_se, estimate, infer_latent_cardinality,
    reduction_check, wald_interval, DesignedData, DiscreteLaw, EstimatorKind, EstimatorOptions, ModelSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

const RANK_TOL: f64 = 1e-8;
const MAX_CONDITION: f64 = 1e4;
const STUDY_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn within_budget(start: Instant, budget: Duration, mut out: Outcome) -> Outcome {
    let took = start.elapsed();
    out.detail = format!("{}; {:.2}s of {:.0}s budget", out.detail, took.as_secs_f64(), budget.as_secs_f64());
    out.pass &= took <= budget;
    out
}

fn identification_oracle() -> negctrl::Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(2..=4);
        let law = DiscreteLaw::random_well_conditioned(&mut rng, k, 2, k, k, 0.05, MAX_CONDITION);
        let m = observed_matrices(&law);
        let truth = law.latent_ate();
        worst = worst
            .max((ate_by_identification(&m, RANK_TOL)?.delta - truth).abs())
            .max((ate_by_reparameterization(&m)?.delta - truth).abs());
    }
    let out = Outcome::new(worst <= 1e-9, format!("max |error| {worst:.2e} over 50 laws"));
    Ok(within_budget(start, Duration::from_secs(10), out))
}

fn rank_diagnosis() -> negctrl::Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let mut hits = 0;
    for _ in 0..50 {
        let nu = rng.random_range(2..=3);
        let nz = rng.random_range(nu + 1..=5);
        let nw = rng.random_range(nu + 1..=5);
        let law = DiscreteLaw::random_well_conditioned(&mut rng, nu, 2, nz, nw, 0.05, MAX_CONDITION);
        if infer_latent_cardinality(&observed_matrices(&law), RANK_TOL)? == nu {
            hits += 1;
        }
    }
    let out = Outcome::new(hits == 50, format!("{hits}/50 exact"));
    Ok(within_budget(start, Duration::from_secs(5), out))
}

fn max_pairwise(values: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for a in values {
        for b in values {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn saturated_equivalence() -> negctrl::Result<Outcome> {
    let start = Instant::now();
    let (data, _) = vaccine_dataset(2000, 303)?;
    let spec = ModelSpec::saturated(&data.covariate_names);
    let d = DesignedData::new(&data, &spec)?;
    let opts = EstimatorOptions::default();
    let mut est = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    for &k in &EstimatorKind::ALL {
        let r = estimate(&d, k, &opts)?.report;
        let ci = r.ci.ok_or_else(|| negctrl::Error::Numerical(format!("{} has no interval", r.estimator)))?;
        est.push(r.estimate);
        lo.push(ci.0);
        hi.push(ci.1);
    }
    let de = max_pairwise(&est);
    let dci = max_pairwise(&lo).max(max_pairwise(&hi));
    let out = Outcome::new(
        de <= 1e-9 && dci <= 1e-6,
        format!("estimate spread {de:.2e}, interval spread {dci:.2e}"),
    );
    Ok(within_budget(start, Duration::from_secs(5), out))
}

fn eif_correctness() -> negctrl::Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let mut mean_gap: f64 = 0.0;
    let mut path_gap: f64 = 0.0;
    let mut binary = 0;
    for i in 0..50 {
        let k = if i % 2 == 0 { 2 } else { rng.random_range(3..=4) };
        let law = DiscreteLaw::random_well_conditioned(&mut rng, k, 2, k, k, 0.05, MAX_CONDITION);
        let e = law_eif_expectation(&law, 1e-6)?;
        mean_gap = mean_gap
            .max((e.confounded_mean - e.truth.confounded).abs())
            .max((e.bias_mean - e.truth.bias).abs());
        if let Some(g) = e.path_gap {
            binary += 1;
            path_gap = path_gap.max(g);
        }
    }
    let out = Outcome::new(
        mean_gap <= 1e-12 && path_gap <= 1e-12 && binary > 0,
        format!("max |E EIF| {mean_gap:.2e} over 50 laws, binary/general gap {path_gap:.2e} over {binary} laws"),
    );
    Ok(within_budget(start, Duration::from_secs(5), out))
}

struct Band {
    scenario: Scenario,
    kind: EstimatorKind,
    label: &'static str,
    check: fn(&OperatingCharacteristics, EstimatorKind) -> Option<bool>,
}

fn prop(c: &OperatingCharacteristics, k: EstimatorKind) -> Option<f64> {
    c.row(k).map(|r| r.proportion_bias)
}

fn table_reproduction() -> negctrl::Result<Outcome> {
    use EstimatorKind::*;
    use Scenario::*;
    let oracle = true_ate_oracle(&DgpSpec::standard(2000, STUDY_SEED), MIN_ORACLE_N)?;
    let mut pass = (oracle.delta - 0.07).abs() <= 0.002;
    let mut lines = vec![format!("oracle {:.5} (MC SE {:.1e})", oracle.delta, oracle.mc_se)];
    let bands = [
        Band { scenario: AllCorrect, kind: Delta1, label: "|bias| < 1.5e-3", check: |c, k| c.row(k).map(|r| r.bias.abs() < 1.5e-3) },
        Band { scenario: AllCorrect, kind: Delta2, label: "|bias| < 1.5e-3", check: |c, k| c.row(k).map(|r| r.bias.abs() < 1.5e-3) },
        Band { scenario: AllCorrect, kind: Delta3, label: "|bias| < 1.5e-3", check: |c, k| c.row(k).map(|r| r.bias.abs() < 1.5e-3) },
        Band { scenario: AllCorrect, kind: Mle, label: "|bias| < 1.5e-3", check: |c, k| c.row(k).map(|r| r.bias.abs() < 1.5e-3) },
        Band { scenario: AllCorrect, kind: Mr, label: "|bias| < 1.5e-3", check: |c, k| c.row(k).map(|r| r.bias.abs() < 1.5e-3) },
        Band { scenario: AllCorrect, kind: Mr, label: "coverage in [0.93, 0.97]", check: |c, k| c.row(k).map(|r| (0.93..=0.97).contains(&r.coverage)) },
        Band { scenario: M1Only, kind: Mle, label: "proportion bias < -15%", check: |c, k| prop(c, k).map(|p| p < -15.0) },
        Band { scenario: M1Only, kind: Delta3, label: "proportion bias < -5%", check: |c, k| prop(c, k).map(|p| p < -5.0) },
        Band { scenario: M1Only, kind: Mr, label: "|proportion bias| < 3%", check: |c, k| prop(c, k).map(|p| p.abs() < 3.0) },
        Band { scenario: M2Only, kind: Delta3, label: "proportion bias < -5%", check: |c, k| prop(c, k).map(|p| p < -5.0) },
        Band { scenario: M2Only, kind: Mr, label: "|proportion bias| < 3%", check: |c, k| prop(c, k).map(|p| p.abs() < 3.0) },
        Band { scenario: M3Only, kind: Mr, label: "|proportion bias| < 3%", check: |c, k| prop(c, k).map(|p| p.abs() < 3.0) },
        Band { scenario: M3Only, kind: Delta1, label: "|proportion bias| < 3%", check: |c, k| prop(c, k).map(|p| p.abs() < 3.0) },
        Band { scenario: M3Only, kind: Delta2, label: "|proportion bias| < 3%", check: |c, k| prop(c, k).map(|p| p.abs() < 3.0) },
        Band { scenario: AllWrong, kind: Delta3, label: "proportion bias in [-6%, -1.5%]", check: |c, k| prop(c, k).map(|p| (-6.0..=-1.5).contains(&p)) },
        Band { scenario: AllWrong, kind: Mr, label: "|proportion bias| < 3%", check: |c, k| prop(c, k).map(|p| p.abs() < 3.0) },
    ];
    for scenario in Scenario::ALL {
        let mut estimators: Vec<EstimatorKind> = bands.iter().filter(|b| b.scenario == scenario).map(|b| b.kind).collect();
        estimators.dedup();
        let config = StudyConfig {
            scenario,
            reps: 1000,
            n: 2000,
            base_seed: STUDY_SEED,
            estimators,
            options: EstimatorOptions::default(),
            truth: oracle.delta,
        };
        let start = Instant::now();
        let c = run_study(&config)?.characteristics;
        lines.push(format!("{} ({:.0}s)", scenario.tag(), start.elapsed().as_secs_f64()));
        for b in bands.iter().filter(|b| b.scenario == scenario) {
            let ok = (b.check)(&c, b.kind).unwrap_or(false);
            pass &= ok;
            let r = c.row(b.kind);
            lines.push(format!(
                "  {:<7} {:<32} {} (bias {:+.2e}, proportion {:+.2}%, coverage {:.3})",
                b.kind.tag(),
                b.label,
                if ok { "ok" } else { "MISS" },
                r.map_or(f64::NAN, |r| r.bias),
                r.map_or(f64::NAN, |r| r.proportion_bias),
                r.map_or(f64::NAN, |r| r.coverage),
            ));
        }
    }
    Ok(Outcome::new(pass, lines.join("\n    ")))
}

fn sandwich_validity() -> negctrl::Result<Outcome> {
    let start = Instant::now();
    let (data, _) = generate_dataset(&DgpSpec::standard(2000, 606))?;
    let spec = scenario_model_specs(Scenario::AllCorrect);
    let opts = EstimatorOptions::default();
    let d = DesignedData::new(&data, &spec)?;
    let sandwich = estimate(&d, EstimatorKind::Mr, &opts)?
        .report
        .se
        .ok_or_else(|| negctrl::Error::Numerical("no sandwich SE".into()))?;
    let boot = bootstrap_se(&data, &spec, EstimatorKind::Mr, &opts, 500, 607)?;
    let rel = (sandwich - boot.se).abs() / boot.se;
    let out = Outcome::new(
        rel <= 0.10,
        format!("sandwich {sandwich:.5}, bootstrap {:.5} ({} failures), relative gap {:.1}%", boot.se, boot.failures, 100.0 * rel),
    );
    Ok(within_budget(start, Duration::from_secs(300), out))
}

fn reduction_identities() -> negctrl::Result<Outcome> {
    let (data, _) = generate_dataset(&DgpSpec::standard(2000, 707))?;
    let spec = scenario_model_specs(Scenario::AllCorrect);
    let d = DesignedData::new(&data, &spec)?;
    let r = reduction_check(&d, &EstimatorOptions::default())?;
    Ok(Outcome::new(
        r.reductions.len() >= 3 && r.max_abs_difference <= 1e-10,
        format!("{} reductions, max |difference| {:.2e}", r.reductions.len(), r.max_abs_difference),
    ))
}

fn has_keys(v: &Value, keys: &[&str]) -> Vec<String> {
    keys.iter().filter(|k| v.get(**k).is_none()).map(|k| k.to_string()).collect()
}

fn vaccine_report() -> negctrl::Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().join("report.json");
    let data = bundled_vaccine_path().to_string_lossy().into_owned();
    let code = run([
        "negctrl", "estimate", "--data", &data, "--outcome", "influenza", "--treatment", "vaccinated",
        "--nce", "ringworm", "--nco", "injury", "--covariates", "elderly,comorbid", "--saturated",
        "--format", "json", "--out", &out.to_string_lossy(),
    ]);
    if code != 0 {
        return Ok(Outcome::new(false, format!("estimate exited with {code}")));
    }
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&out)?)?;
    let mut missing = has_keys(&doc, &["schema", "metadata", "estimates"]);
    missing.extend(has_keys(&doc["metadata"], &[
        "command", "version", "data", "n", "roles", "z_levels", "z_reference", "w_levels", "w_reference",
        "formulas", "estimators", "tolerances",
    ]));
    let rows = doc["estimates"].as_array().cloned().unwrap_or_default();
    let z = normal_quantile(0.975);
    let mut est = Vec::new();
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    let mut ci_gap: f64 = 0.0;
    for r in &rows {
        missing.extend(has_keys(r, &["estimator", "estimate", "se", "ci", "p_value", "level", "n", "confounded", "bias"]));
        let (Some(e), Some(se), Some(l), Some(h), Some(level)) = (
            r["estimate"].as_f64(),
            r["se"].as_f64(),
            r["ci"][0].as_f64(),
            r["ci"][1].as_f64(),
            r["level"].as_f64(),
        ) else {
            missing.push("numeric estimate, se, ci and level".into());
            continue;
        };
        let (wl, wh) = wald_interval(e, se, level)?;
        ci_gap = ci_gap
            .max(((h - l) / 2.0 - z * se).abs())
            .max((wl - l).abs())
            .max((wh - h).abs());
        est.push(e);
        lo.push(l);
        hi.push(h);
    }
    let schema_ok = doc["schema"] == SCHEMA && missing.is_empty() && rows.len() == EstimatorKind::ALL.len();
    let de = max_pairwise(&est);
    let dci = max_pairwise(&lo).max(max_pairwise(&hi));
    Ok(Outcome::new(
        schema_ok && de <= 1e-9 && dci <= 1e-6 && ci_gap <= 1e-12,
        format!(
            "schema {}, {} estimators, estimate spread {de:.2e}, interval spread {dci:.2e}, half-width vs z*SE {ci_gap:.2e}{}",
            if schema_ok { "complete" } else { "incomplete" },
            rows.len(),
            if missing.is_empty() { String::new() } else { format!(", missing {missing:?}") },
        ),
    ))
}

fn gestimation_limits() -> negctrl::Result<Outcome> {
    let (data, _) = generate_dataset(&DgpSpec::standard(100_000, 909))?;

    let spec = scenario_model_specs(Scenario::M2Only);
    let d = DesignedData::new(&data, &spec)?;
    let exposure = fit_joint_exposure(&d)?;
    let index = default_index_functions(&d.compiled, d.kz(), d.kw())?;
    let w = gest_w_m2(&d, &exposure, &index)?;
    let delta0 = w.beta_wa(0)[0];
    let xi0 = w.beta_wz(0, 0)[0];
    let eta = w.beta_waz(0, 0).map_or(f64::NAN, |b| b[0]);
    let w_gap = delta0.abs().max((xi0 - 0.2).abs()).max((eta - 0.2).abs());

    let spec = scenario_model_specs(Scenario::M1Only);
    let d = DesignedData::new(&data, &spec)?;
    let exposure = fit_joint_exposure(&d)?;
    let index = default_index_functions(&d.compiled, d.kz(), d.kw())?;
    let r = gest_r_m1(&d, &exposure, &index)?;
    let r_gap = r[0].abs().max((r[1] - 0.5).abs());

    Ok(Outcome::new(
        w_gap <= 0.01 && r_gap <= 0.02,
        format!(
            "delta(z0) {delta0:+.4}, xi(0) {xi0:.4}, eta {eta:.4} (max gap {w_gap:.4}); R = {:+.4} {:+.4} A (max gap {r_gap:.4})",
            r[0], r[1]
        ),
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> negctrl::Result<Outcome>); 9] = [
        ("identification oracle", identification_oracle),
        ("rank diagnosis", rank_diagnosis),
        ("saturated equivalence", saturated_equivalence),
        ("influence function correctness", eif_correctness),
        ("simulation table reproduction", table_reproduction),
        ("sandwich validity", sandwich_validity),
        ("reduction identities", reduction_identities),
        ("vaccine-style report", vaccine_report),
        ("g-estimation limits", gestimation_limits),
    ];
    let only: Option<usize> = std::env::var("NEGCTRL_CRITERION").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let out = f().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        if !out.pass {
            failed += 1;
        }
        println!("criterion {} {name}: {} ({})", i + 1, if out.pass { "PASS" } else { "FAIL" }, out.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
