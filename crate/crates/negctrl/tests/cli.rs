use negctrl::cli::{bundled_vaccine_path, run, SCHEMA};
use negctrl::identify::observed_matrices;
use negctrl::DiscreteLaw;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::Value;
use std::path::Path;

fn estimate_args<'a>(data: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "negctrl", "estimate", "--data", data, "--outcome", "influenza", "--treatment", "vaccinated", "--nce",
        "ringworm", "--nco", "injury", "--covariates", "elderly,comorbid", "--out", out,
    ]
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(["negctrl", "--help"]), 0);
    assert_eq!(run(["negctrl", "estimate", "--help"]), 0);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(["negctrl"]), 2);
    assert_eq!(run(["negctrl", "bogus"]), 2);
    assert_eq!(run(["negctrl", "simulate", "--scenario", "all_correct", "--reps", "x"]), 2);
}

#[test]
fn missing_role_flag_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.tsv");
    let data = bundled_vaccine_path().to_string_lossy().into_owned();
    let out_s = out.to_string_lossy().into_owned();
    let mut args = estimate_args(&data, &out_s);
    let i = args.iter().position(|a| *a == "--nco").unwrap();
    args.drain(i..i + 2);
    assert_eq!(run(args), 2);
    assert!(!out.exists());
}

#[test]
fn malformed_spec_json_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, "{ not json").unwrap();
    let out = dir.path().join("r.tsv").to_string_lossy().into_owned();
    let data = bundled_vaccine_path().to_string_lossy().into_owned();
    let spec_s = spec.to_string_lossy().into_owned();
    let mut args = estimate_args(&data, &out);
    args.extend(["--spec", &spec_s]);
    assert_eq!(run(args), 2);
}

#[test]
fn unknown_covariate_in_formula_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.tsv").to_string_lossy().into_owned();
    let data = bundled_vaccine_path().to_string_lossy().into_owned();
    let mut args = estimate_args(&data, &out);
    args.extend(["--formula-ratio", "A,age"]);
    assert_eq!(run(args), 2);
}

#[test]
fn missing_data_file_exits_nonzero() {
    let out = std::env::temp_dir().join("negctrl-never-written.tsv").to_string_lossy().into_owned();
    assert_ne!(run(estimate_args("/nonexistent/file.csv", &out)), 0);
}

#[test]
fn zero_reps_exits_two() {
    assert_eq!(run(["negctrl", "simulate", "--scenario", "all_correct", "--reps", "0"]), 2);
    assert_eq!(run(["negctrl", "simulate", "--scenario", "nope", "--reps", "2"]), 2);
}

#[test]
fn estimate_tsv_has_metadata_header_and_one_row_per_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.tsv");
    let out_s = out.to_string_lossy().into_owned();
    let data = bundled_vaccine_path().to_string_lossy().into_owned();
    let mut args = estimate_args(&data, &out_s);
    args.extend(["--estimators", "delta1,mr"]);
    assert_eq!(run(args), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    let meta: Value = serde_json::from_str(lines.next().unwrap().strip_prefix("# ").unwrap()).unwrap();
    assert_eq!(meta["command"], "estimate");
    assert!(lines.next().unwrap().starts_with("estimator\t"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("delta1\t") && rows[1].starts_with("mr\t"));
}

#[test]
fn estimate_json_with_gmm_reports_coarsening_detail() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let out_s = out.to_string_lossy().into_owned();
    let data = bundled_vaccine_path().to_string_lossy().into_owned();
    let mut args = estimate_args(&data, &out_s);
    args.extend(["--saturated", "--estimators", "mr,gmm", "--format", "json"]);
    assert_eq!(run(args), 0);
    let doc = read_json(&out);
    assert_eq!(doc["schema"], SCHEMA);
    let rows = doc["estimates"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let mr = rows[0]["estimate"].as_f64().unwrap();
    let gmm = rows[1]["estimate"].as_f64().unwrap();
    assert!((mr - gmm).abs() < 1e-12);
    assert!(doc["gmm"].is_object());
}

#[test]
fn simulate_output_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<String> = (0..2).map(|k| dir.path().join(format!("s{k}.tsv")).to_string_lossy().into_owned()).collect();
    let logs: Vec<String> = (0..2).map(|k| dir.path().join(format!("l{k}.tsv")).to_string_lossy().into_owned()).collect();
    for (k, threads) in ["1", "2"].iter().enumerate() {
        let code = run([
            "negctrl", "--threads", threads, "simulate", "--scenario", "m3_only", "--reps", "3", "--n", "300",
            "--seed", "5", "--estimators", "delta1,mr", "--out", &paths[k], "--log", &logs[k],
        ]);
        assert_eq!(code, 0);
    }
    let a = std::fs::read(&paths[0]).unwrap();
    assert_eq!(a, std::fs::read(&paths[1]).unwrap());
    assert_eq!(std::fs::read(&logs[0]).unwrap(), std::fs::read(&logs[1]).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("# {"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn identify_law_reports_the_latent_ate() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let law = DiscreteLaw::random_well_conditioned(&mut rng, 3, 2, 3, 3, 0.05, 1e4);
    let law_path = dir.path().join("law.json");
    std::fs::write(&law_path, serde_json::to_string(&law).unwrap()).unwrap();
    let out = dir.path().join("id.json");
    let code = run([
        "negctrl", "identify", "--law", &law_path.to_string_lossy(), "--format", "json", "--out",
        &out.to_string_lossy(),
    ]);
    assert_eq!(code, 0);
    let doc = read_json(&out);
    let latent = law.latent_ate();
    assert!((doc["identified_ate"].as_f64().unwrap() - latent).abs() < 1e-9);
    assert!((doc["reparameterized_ate"].as_f64().unwrap() - latent).abs() < 1e-9);
    assert_eq!(doc["inferred_latent_cardinality"], 3);
    assert_eq!(doc["strata"].as_array().unwrap().len(), 2 * observed_matrices(&law).n_x);
}

#[test]
fn identify_rejects_both_sources() {
    assert_eq!(run(["negctrl", "identify", "--law", "a.json", "--data", "b.csv"]), 2);
    assert_eq!(run(["negctrl", "identify"]), 2);
}

#[test]
fn weight_truncation_flag_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.tsv").to_string_lossy().into_owned();
    let data = bundled_vaccine_path().to_string_lossy().into_owned();
    let mut ok = estimate_args(&data, &out);
    ok.extend(["--estimators", "mr", "--weight-truncation", "0.99"]);
    assert_eq!(run(ok), 0);
    let mut bad = estimate_args(&data, &out);
    bad.extend(["--weight-truncation", "0.3"]);
    assert_eq!(run(bad), 2);
}
