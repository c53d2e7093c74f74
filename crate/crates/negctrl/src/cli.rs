//! Command-line front end: `estimate`, `simulate` and `identify`.
//!
//! Exit codes: 0 on success, 2 on validation errors (flags, data, formulas, fixtures),
//! 3 on numerical failures. Diagnostics go to stderr; data goes to `--out` or stdout.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{load_dataset, parse_terms, ColumnRoles, Dataset, DesignedData, ExposureSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimateReport, EstimatorKind, EstimatorOptions, DENSITY_FLOOR, RANK_TOL, XI_FLOOR};
use crate::identify::{
    ate_by_identification, ate_by_reparameterization, empirical_matrices, enumerate_coarsenings, gmm_combine,
    infer_latent_cardinality, observed_matrices, solve_bridge, stratum_ranks, DiscreteLaw, ObservedLawMatrices,
};
use crate::inference::{wald_interval, wald_test};
use crate::simulate::{
    run_study, scenario_model_specs, true_ate_oracle, DgpSpec, ReplicationRecord, Scenario, StudyConfig,
    OperatingCharacteristics, MIN_ORACLE_N, RNG_NAME, TRIM_PER_TAIL,
};

/// Schema tag of every JSON document written by the CLI.
pub const SCHEMA: &str = "negctrl-report/1";

/// Top-level command line.
#[derive(Debug, Parser)]
#[command(name = "negctrl", version, about = "Average treatment effects with double negative controls")]
pub struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

/// Subcommands.
#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the ATE on a CSV dataset.
    Estimate(EstimateArgs),
    /// Run a simulation scenario and aggregate operating characteristics.
    Simulate(SimulateArgs),
    /// Rank diagnostics and exact identification on a finite law or a discrete dataset.
    Identify(IdentifyArgs),
}

/// Output format.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Tsv,
    Json,
}

/// Output destination and format.
#[derive(Clone, Debug, Args)]
pub struct OutputArgs {
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Tsv)]
    pub format: Format,
}

/// Column roles of the input CSV.
#[derive(Clone, Debug, Args)]
pub struct RoleArgs {
    /// Outcome column.
    #[arg(long)]
    pub outcome: Option<String>,
    /// Binary treatment column.
    #[arg(long)]
    pub treatment: Option<String>,
    /// Negative control exposure column.
    #[arg(long)]
    pub nce: Option<String>,
    /// Negative control outcome column.
    #[arg(long)]
    pub nco: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, default_value = "")]
    pub covariates: String,
    /// Reference level of the negative control exposure.
    #[arg(long)]
    pub z_ref: Option<String>,
    /// Reference level of the negative control outcome.
    #[arg(long)]
    pub w_ref: Option<String>,
}

impl RoleArgs {
    fn roles(&self) -> Result<ColumnRoles> {
        let need = |v: &Option<String>, flag: &str| {
            v.clone()
                .ok_or_else(|| Error::Validation(format!("missing required flag --{flag}")))
        };
        Ok(ColumnRoles {
            outcome: need(&self.outcome, "outcome")?,
            treatment: need(&self.treatment, "treatment")?,
            nce: need(&self.nce, "nce")?,
            nco: need(&self.nco, "nco")?,
            covariates: parse_terms(&self.covariates),
            z_reference: self.z_ref.clone(),
            w_reference: self.w_ref.clone(),
        })
    }
}

/// Working-model term lists; each flag takes a comma-separated list, `1` for intercept only.
#[derive(Clone, Debug, Default, Args)]
pub struct FormulaArgs {
    /// Use fully saturated working models (discrete covariates).
    #[arg(long)]
    pub saturated: bool,
    /// JSON file holding a complete working-model specification.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Joint multinomial f(A, Z | X).
    #[arg(long)]
    pub formula_exposure: Option<String>,
    /// f(A | X) of a factorized exposure model.
    #[arg(long)]
    pub formula_treatment: Option<String>,
    /// f(Z | A, X) of a factorized exposure model; may contain `A`.
    #[arg(long)]
    pub formula_nce: Option<String>,
    /// E[Y | Z = z0, A, X]; must contain `A`.
    #[arg(long)]
    pub formula_outcome: Option<String>,
    /// E[W | A = 0, Z = z0, X].
    #[arg(long)]
    pub formula_nco_baseline: Option<String>,
    /// Treatment contrast of E[W | A, Z = z0, X].
    #[arg(long)]
    pub formula_nco_treatment: Option<String>,
    /// NCE contrasts of E[W | A = 0, Z, X].
    #[arg(long)]
    pub formula_nco_exposure: Option<String>,
    /// Treatment-by-NCE interaction of E[W | A, Z, X]; `none` removes it.
    #[arg(long)]
    pub formula_nco_interaction: Option<String>,
    /// R(A, X); may contain `A`.
    #[arg(long)]
    pub formula_ratio: Option<String>,
}

impl FormulaArgs {
    /// Build the model specification: a `--spec` file, saturated or main-effects defaults,
    /// then per-block overrides.
    pub fn model_spec(&self, covariates: &[String]) -> Result<ModelSpec> {
        let mut spec = match (&self.spec, self.saturated) {
            (Some(_), true) => return Err(Error::Validation("--spec and --saturated are exclusive".into())),
            (Some(p), false) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            (None, true) => ModelSpec::saturated(covariates),
            (None, false) => ModelSpec::main_effects(covariates),
        };
        if let Some(t) = &self.formula_exposure {
            if self.formula_treatment.is_some() || self.formula_nce.is_some() {
                return Err(Error::Validation(
                    "--formula-exposure excludes --formula-treatment and --formula-nce".into(),
                ));
            }
            spec.exposure = ExposureSpec::Joint { terms: parse_terms(t) };
        }
        match (&self.formula_treatment, &self.formula_nce) {
            (Some(t), Some(z)) => {
                spec.exposure = ExposureSpec::Factorized {
                    treatment: parse_terms(t),
                    nce: parse_terms(z),
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::Validation(
                    "--formula-treatment and --formula-nce must be given together".into(),
                ))
            }
        }
        let set = |slot: &mut Vec<String>, v: &Option<String>| {
            if let Some(t) = v {
                *slot = parse_terms(t);
            }
        };
        set(&mut spec.outcome, &self.formula_outcome);
        set(&mut spec.nco_baseline, &self.formula_nco_baseline);
        set(&mut spec.nco_treatment, &self.formula_nco_treatment);
        set(&mut spec.nco_exposure, &self.formula_nco_exposure);
        set(&mut spec.ratio, &self.formula_ratio);
        if let Some(t) = &self.formula_nco_interaction {
            spec.nco_interaction = (t.trim() != "none").then(|| parse_terms(t));
        }
        Ok(spec)
    }
}

/// Numerical tolerances.
#[derive(Clone, Debug, Args)]
pub struct ToleranceArgs {
    /// Confidence level of Wald intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Smallest admissible fitted f(a | z, x), f(z | a, x) and f(a | x).
    #[arg(long, default_value_t = DENSITY_FLOOR)]
    pub density_floor: f64,
    /// Relative singular-value threshold for ranks and pseudoinverses.
    #[arg(long, default_value_t = RANK_TOL)]
    pub rank_tol: f64,
    /// Truncate inverse weights at this quantile of the fitted 1/f(A | Z, X), in (0.5, 1].
    #[arg(long)]
    pub weight_truncation: Option<f64>,
}

impl ToleranceArgs {
    fn options(&self) -> Result<EstimatorOptions> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Validation(format!("--level must lie in (0, 1), got {}", self.level)));
        }
        if !(self.density_floor >= 0.0 && self.density_floor < 1.0) {
            return Err(Error::Validation("--density-floor must lie in [0, 1)".into()));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::Validation("--rank-tol must lie in (0, 1)".into()));
        }
        if let Some(q) = self.weight_truncation {
            if !(q > 0.5 && q <= 1.0) {
                return Err(Error::Validation("--weight-truncation must lie in (0.5, 1]".into()));
            }
        }
        Ok(EstimatorOptions {
            level: self.level,
            density_floor: self.density_floor,
            xi_floor: XI_FLOOR,
            rank_tol: self.rank_tol,
            sandwich: true,
            weight_truncation: self.weight_truncation,
        })
    }
}

/// `estimate` flags.
#[derive(Clone, Debug, Args)]
pub struct EstimateArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub roles: RoleArgs,
    #[command(flatten)]
    pub formulas: FormulaArgs,
    /// Comma-separated subset of delta1, delta2, delta3, mle, mr, gmm.
    #[arg(long, default_value = "delta1,delta2,delta3,mle,mr")]
    pub estimators: String,
    /// Number of levels after coarsening for `gmm`; defaults to min(|Z|, |W|).
    #[arg(long)]
    pub coarsen_to: Option<usize>,
    #[command(flatten)]
    pub tolerances: ToleranceArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// `simulate` flags.
#[derive(Clone, Debug, Args)]
pub struct SimulateArgs {
    /// One of all_correct, m1_only, m2_only, m3_only, all_wrong.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Base seed; replication r uses seed + r.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Comma-separated subset of delta1, delta2, delta3, mle, mr.
    #[arg(long, default_value = "delta1,delta2,delta3,mle,mr")]
    pub estimators: String,
    /// Monte Carlo draws of the true-ATE oracle.
    #[arg(long, default_value_t = MIN_ORACLE_N)]
    pub oracle_draws: usize,
    /// Raw per-replication log (TSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub tolerances: ToleranceArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

/// `identify` flags.
#[derive(Clone, Debug, Args)]
pub struct IdentifyArgs {
    /// Finite-law JSON fixture.
    #[arg(long, conflicts_with = "data")]
    pub law: Option<PathBuf>,
    /// CSV dataset with discrete covariates.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub roles: RoleArgs,
    /// Relative singular-value threshold for ranks and pseudoinverses.
    #[arg(long, default_value_t = RANK_TOL)]
    pub rank_tol: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn write_output(output: &OutputArgs, text: &str) -> Result<()> {
    match &output.out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn render(format: Format, doc: &Value, tsv_body: impl FnOnce() -> String) -> Result<String> {
    Ok(match format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(doc)?),
        Format::Tsv => {
            let meta = serde_json::to_string(&doc["metadata"])?;
            format!("# {meta}\n{}", tsv_body())
        }
    })
}

fn metadata(command: &str, extra: Value) -> Value {
    let mut m = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
    });
    if let (Some(m), Value::Object(e)) = (m.as_object_mut(), extra) {
        m.extend(e);
    }
    m
}

fn parse_estimators(s: &str, allow_gmm: bool) -> Result<(Vec<EstimatorKind>, bool)> {
    let mut kinds = Vec::new();
    let mut gmm = false;
    for t in parse_terms(s) {
        if t == "gmm" && allow_gmm {
            gmm = true;
        } else {
            let k = EstimatorKind::parse(&t)?;
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
    }
    if kinds.is_empty() && !gmm {
        return Err(Error::Validation("--estimators selects nothing".into()));
    }
    Ok((kinds, gmm))
}

/// Run the `gmm` row: MR over every coarsening to `target` levels.
fn gmm_report(data: &Dataset, spec: &ModelSpec, target: usize, opts: &EstimatorOptions) -> Result<(EstimateReport, Value)> {
    let cs = enumerate_coarsenings(&data.z_coding, &data.w_coding, target)?;
    let g = gmm_combine(data, spec, &cs, EstimatorKind::Mr, opts)?;
    let report = EstimateReport {
        estimator: "gmm".into(),
        estimate: g.estimate,
        confounded: None,
        bias: None,
        se: Some(g.se),
        ci: Some(wald_interval(g.estimate, g.se, opts.level)?),
        p_value: Some(wald_test(g.estimate, g.se)?),
        confounded_se: None,
        confounded_ci: None,
        bias_se: None,
        bias_ci: None,
        level: opts.level,
        n: g.n,
        condition: None,
        theta: None,
    };
    let detail = json!({ "coarsenings": cs, "result": g });
    Ok((report, detail))
}

/// `estimate`: one report row per selected estimator.
pub fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let roles = args.roles.roles()?;
    let opts = args.tolerances.options()?;
    let (kinds, gmm) = parse_estimators(&args.estimators, true)?;
    let spec = args.formulas.model_spec(&roles.covariates)?;
    spec.compile(&roles.covariates)?;
    let data = load_dataset(&args.data, &roles)?;
    let mut reports = Vec::new();
    if !kinds.is_empty() {
        let d = DesignedData::new(&data, &spec)?;
        for &k in &kinds {
            let e = estimate(&d, k, &opts).map_err(|e| annotate(e, k.tag()))?;
            reports.push(e.report);
        }
    }
    let mut gmm_detail = Value::Null;
    if gmm {
        let target = args
            .coarsen_to
            .unwrap_or(data.z_coding.len().min(data.w_coding.len()));
        let (r, detail) = gmm_report(&data, &spec, target, &opts).map_err(|e| annotate(e, "gmm"))?;
        reports.push(r);
        gmm_detail = detail;
    }
    let doc = json!({
        "schema": SCHEMA,
        "metadata": metadata("estimate", json!({
            "data": args.data,
            "n": data.n(),
            "roles": roles,
            "z_levels": data.z_coding.levels,
            "z_reference": data.z_coding.levels[data.z_coding.reference],
            "w_levels": data.w_coding.levels,
            "w_reference": data.w_coding.levels[data.w_coding.reference],
            "formulas": spec,
            "estimators": args.estimators,
            "tolerances": opts,
            "seed": Value::Null,
        })),
        "estimates": reports,
        "gmm": gmm_detail,
    });
    let text = render(args.output.format, &doc, || {
        let mut s = format!("{}\n", EstimateReport::tsv_header());
        for r in &reports {
            s.push_str(&r.tsv_row());
            s.push('\n');
        }
        s
    })?;
    write_output(&args.output, &text)
}

fn annotate(e: Error, what: &str) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("{what}: {m}")),
        Error::Validation(m) => Error::Validation(format!("{what}: {m}")),
        other => other,
    }
}

/// `simulate`: operating characteristics of one scenario.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let scenario = Scenario::parse(&args.scenario)?;
    if args.reps == 0 || args.n == 0 {
        return Err(Error::Validation("--reps and --n must be positive".into()));
    }
    let (estimators, _) = parse_estimators(&args.estimators, false)?;
    let opts = args.tolerances.options()?;
    let oracle = true_ate_oracle(&DgpSpec::standard(args.n, args.seed), args.oracle_draws)?;
    let config = StudyConfig {
        scenario,
        reps: args.reps,
        n: args.n,
        base_seed: args.seed,
        estimators,
        options: opts,
        truth: oracle.delta,
    };
    let result = run_study(&config)?;
    if let Some(p) = &args.log {
        let mut s = format!("{}\n", ReplicationRecord::TSV_HEADER);
        for r in &result.log {
            s.push_str(&r.tsv_row());
            s.push('\n');
        }
        std::fs::write(p, s)?;
    }
    let oc: &OperatingCharacteristics = &result.characteristics;
    let doc = json!({
        "schema": SCHEMA,
        "metadata": metadata("simulate", json!({
            "scenario": scenario,
            "reps": args.reps,
            "n": args.n,
            "seed": args.seed,
            "rng": RNG_NAME,
            "trimming": format!("symmetric, {} per tail of each estimator's estimates; coverage untrimmed", TRIM_PER_TAIL),
            "oracle": oracle,
            "formulas": scenario_model_specs(scenario),
            "tolerances": config.options,
        })),
        "operating_characteristics": oc,
    });
    let text = render(args.output.format, &doc, || {
        let mut s = format!("{}\n", OperatingCharacteristics::TSV_HEADER);
        for r in oc.tsv_rows() {
            s.push_str(&r);
            s.push('\n');
        }
        s
    })?;
    write_output(&args.output, &text)
}

#[derive(Serialize)]
struct StratumRow {
    a: u8,
    x: usize,
    x_value: Vec<f64>,
    rank: usize,
    solver: Option<String>,
    residual: Option<f64>,
    error: Option<String>,
}

/// `identify`: ranks, inferred |U|, bridge residuals and, for law fixtures, the oracle.
pub fn cmd_identify(args: &IdentifyArgs) -> Result<()> {
    if !(args.rank_tol > 0.0 && args.rank_tol < 1.0) {
        return Err(Error::Validation("--rank-tol must lie in (0, 1)".into()));
    }
    let (m, law, source): (ObservedLawMatrices, Option<DiscreteLaw>, Value) = match (&args.law, &args.data) {
        (Some(p), None) => {
            let text = std::fs::read_to_string(p)?;
            let law: DiscreteLaw = serde_json::from_str(&text)?;
            law.validate()?;
            (observed_matrices(&law), Some(law), json!({ "law": p }))
        }
        (None, Some(p)) => {
            let roles = args.roles.roles()?;
            let data = load_dataset(p, &roles)?;
            (empirical_matrices(&data)?, None, json!({ "data": p, "roles": roles }))
        }
        _ => return Err(Error::Validation("identify needs exactly one of --law or --data".into())),
    };
    let ranks = stratum_ranks(&m, args.rank_tol);
    let inferred = infer_latent_cardinality(&m, args.rank_tol)?;
    let mut warnings = Vec::new();
    if inferred == 1 {
        warnings.push("P(W | Z, a, x) has rank 1 in every stratum: the negative controls are uninformative".to_string());
    }
    let mut rows = Vec::new();
    let mut bridge_error = None;
    for s in &m.strata {
        let rank = ranks[2 * s.x + s.a as usize];
        let row = match solve_bridge(&m, s.a, s.x, args.rank_tol) {
            Ok(b) => StratumRow {
                a: s.a,
                x: s.x,
                x_value: m.x_values[s.x].clone(),
                rank,
                solver: Some(format!("{:?}", b.solver)),
                residual: Some(b.residual),
                error: None,
            },
            Err(e) => {
                bridge_error.get_or_insert_with(|| format!("stratum (a={}, x={}): {e}", s.a, s.x));
                StratumRow {
                    a: s.a,
                    x: s.x,
                    x_value: m.x_values[s.x].clone(),
                    rank,
                    solver: None,
                    residual: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    let identified = if bridge_error.is_none() {
        Some(ate_by_identification(&m, args.rank_tol)?)
    } else {
        None
    };
    let reparameterized = if m.n_z == m.n_w && bridge_error.is_none() {
        ate_by_reparameterization(&m).ok()
    } else {
        None
    };
    let latent = law.as_ref().map(DiscreteLaw::latent_ate);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let doc = json!({
        "schema": SCHEMA,
        "metadata": metadata("identify", json!({
            "source": source,
            "rank_tol": args.rank_tol,
            "seed": Value::Null,
        })),
        "strata": rows,
        "inferred_latent_cardinality": inferred,
        "identified_ate": identified.as_ref().map(|i| i.delta),
        "potential_means": identified.as_ref().map(|i| i.potential_means),
        "reparameterized_ate": reparameterized.map(|r| r.delta),
        "latent_ate": latent,
        "oracle_difference": match (identified.as_ref(), latent) {
            (Some(i), Some(l)) => Some((i.delta - l).abs()),
            _ => None,
        },
        "warnings": warnings,
    });
    let text = render(args.output.format, &doc, || {
        let mut s = String::from("a\tx\trank\tsolver\tresidual\terror\n");
        for r in &rows {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.a,
                r.x,
                r.rank,
                r.solver.as_deref().unwrap_or(""),
                r.residual.map_or(String::new(), |v| format!("{v:.3e}")),
                r.error.as_deref().unwrap_or("")
            ));
        }
        s.push_str(&format!("# inferred_latent_cardinality\t{inferred}\n"));
        if let Some(i) = &identified {
            s.push_str(&format!("# identified_ate\t{:.12e}\n", i.delta));
        }
        if let Some(l) = latent {
            s.push_str(&format!("# latent_ate\t{l:.12e}\n"));
        }
        s
    })?;
    write_output(&args.output, &text)?;
    match bridge_error {
        Some(e) => Err(Error::Numerical(format!("bridge equation has no solution in {e}"))),
        None => Ok(()),
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Identify(a) => cmd_identify(a),
    }
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::Validation("--threads must be positive".into())),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| dispatch(&cli))),
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Path of the bundled synthetic vaccine-style dataset inside the source tree.
pub fn bundled_vaccine_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/vaccine_synthetic.csv"))
}
