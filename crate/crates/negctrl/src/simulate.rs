//! Simulation study: the latent-confounder data-generating process, the five working-model
//! scenarios, replication orchestration and operating-characteristics aggregation.
//!
//! The process draws, in order,
//!
//! ```text
//! X_j ~ U[0, 1], j = 1..8
//! A | X       ~ Bern(expit(-0.01 + αᵀx))
//! Z | A, X    ~ Bern(expit(-0.01 - 0.2A + αᵀx))
//! U | Z, A, X ~ Bern(0.4Z + 0.4AZ)
//! W | U, X    ~ Bern(expit(-1 + βᵀx) + 0.5U)
//! Y | A, U, X ~ Bern(expit(-1 + βᵀx) + 0.25AU)
//! ```
//!
//! with `x = (X1, …, X8, X7·X8)`, `α = -0.01·(1, …, 1, -20)` and `β = -0.1·(1, …, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CategoricalCoding, Dataset, DesignedData, ExposureSpec, ModelSpec, ObservedSample};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorKind, EstimatorOptions};
use crate::identify::DiscreteLaw;
use crate::linalg::pairwise_sum;
use crate::nuisance::expit;

/// Name and version of the random number generator, recorded in study metadata.
pub const RNG_NAME: &str = "ChaCha20Rng (rand_chacha 0.9), seed_from_u64(base_seed + replication)";
/// Fraction trimmed from each tail of every estimator's replication distribution.
pub const TRIM_PER_TAIL: f64 = 0.005;
/// Largest tolerated replication failure rate.
pub const MAX_FAILURE_RATE: f64 = 0.02;
/// Smallest Monte Carlo size accepted by [`true_ate_oracle`].
pub const MIN_ORACLE_N: usize = 1_000_000;

/// Number of uniform covariates.
pub const N_COVARIATES: usize = 8;

/// Constants of the data-generating process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub seed: u64,
    /// Coefficients of `(X1, …, X8, X7·X8)` in the A and Z logits.
    pub alpha: Vec<f64>,
    /// Coefficients of `(X1, …, X8, X7·X8)` in the W and Y baselines.
    pub beta: Vec<f64>,
    pub a_intercept: f64,
    pub z_intercept: f64,
    /// Coefficient of A in the Z logit.
    pub z_treatment: f64,
    /// E[U | Z, A, X] = u_z·Z + u_az·A·Z.
    pub u_z: f64,
    pub u_az: f64,
    pub w_intercept: f64,
    /// E[W | U = 1, X] - E[W | U = 0, X].
    pub w_shift: f64,
    pub y_intercept: f64,
    /// E[Y | A, U, X] = expit(y_intercept + βᵀx) + y_a·A + y_u·U + y_au·A·U.
    pub y_a: f64,
    pub y_u: f64,
    pub y_au: f64,
}

impl DgpSpec {
    /// The published constants at sample size `n`.
    pub fn standard(n: usize, seed: u64) -> Self {
        let mut alpha = vec![-0.01; 9];
        alpha[8] = 0.2;
        Self {
            n,
            seed,
            alpha,
            beta: vec![-0.1; 9],
            a_intercept: -0.01,
            z_intercept: -0.01,
            z_treatment: -0.2,
            u_z: 0.4,
            u_az: 0.4,
            w_intercept: -1.0,
            w_shift: 0.5,
            y_intercept: -1.0,
            y_a: 0.0,
            y_u: 0.0,
            y_au: 0.25,
        }
    }

    fn index(coef: &[f64], x: &[f64]) -> f64 {
        coef[..N_COVARIATES].iter().zip(x).map(|(c, v)| c * v).sum::<f64>() + coef[N_COVARIATES] * x[6] * x[7]
    }

    /// P(A = 1 | x).
    pub fn p_a(&self, x: &[f64]) -> f64 {
        expit(self.a_intercept + Self::index(&self.alpha, x))
    }

    /// P(Z = 1 | a, x).
    pub fn p_z(&self, a: u8, x: &[f64]) -> f64 {
        expit(self.z_intercept + self.z_treatment * a as f64 + Self::index(&self.alpha, x))
    }

    /// P(U = 1 | z, a).
    pub fn p_u(&self, z: usize, a: u8) -> f64 {
        let z = z as f64;
        self.u_z * z + self.u_az * a as f64 * z
    }

    /// P(W = 1 | u, x).
    pub fn p_w(&self, u: u8, x: &[f64]) -> f64 {
        expit(self.w_intercept + Self::index(&self.beta, x)) + self.w_shift * u as f64
    }

    /// E[Y | a, u, x].
    pub fn mean_y(&self, a: u8, u: u8, x: &[f64]) -> f64 {
        let (a, u) = (a as f64, u as f64);
        expit(self.y_intercept + Self::index(&self.beta, x)) + self.y_a * a + self.y_u * u + self.y_au * a * u
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Validation("sample size must be positive".into()));
        }
        if self.alpha.len() != N_COVARIATES + 1 || self.beta.len() != N_COVARIATES + 1 {
            return Err(Error::Validation(format!(
                "alpha and beta need {} coefficients",
                N_COVARIATES + 1
            )));
        }
        Ok(())
    }

    /// Finite law on the covariate support `xs` (equal masses), with the latent structure
    /// of this process.
    pub fn discrete_law(&self, xs: &[Vec<f64>]) -> DiscreteLaw {
        let nx = xs.len();
        let p_az_given_x = xs
            .iter()
            .map(|x| {
                let pa = self.p_a(x);
                let mut cells = vec![0.0; 4];
                for a in 0..2u8 {
                    let fa = if a == 1 { pa } else { 1.0 - pa };
                    let pz = self.p_z(a, x);
                    cells[a as usize * 2] = fa * (1.0 - pz);
                    cells[a as usize * 2 + 1] = fa * pz;
                }
                cells
            })
            .collect();
        let p_u_given_azx = (0..nx)
            .map(|_| {
                (0..4)
                    .map(|c| {
                        let pu = self.p_u(c % 2, (c / 2) as u8);
                        vec![1.0 - pu, pu]
                    })
                    .collect()
            })
            .collect();
        let p_w_given_ux = xs
            .iter()
            .map(|x| {
                (0..2u8)
                    .map(|u| {
                        let pw = self.p_w(u, x);
                        vec![1.0 - pw, pw]
                    })
                    .collect()
            })
            .collect();
        let y_given_aux = xs
            .iter()
            .map(|x| (0..2u8).map(|u| [self.mean_y(0, u, x), self.mean_y(1, u, x)]).collect())
            .collect();
        DiscreteLaw {
            n_u: 2,
            n_x: nx,
            n_z: 2,
            n_w: 2,
            p_x: vec![1.0 / nx as f64; nx],
            p_az_given_x,
            p_u_given_azx,
            p_w_given_ux,
            y_given_aux,
        }
    }
}

/// The latent confounder of a simulated dataset, kept apart from the observed records.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentColumn(pub Vec<u8>);

/// Covariate names `X1`, …, `X8`.
pub fn covariate_names() -> Vec<String> {
    (1..=N_COVARIATES).map(|j| format!("X{j}")).collect()
}

fn probability(p: f64, what: &str) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Numerical(format!("{what} = {p} lies outside [0, 1]")));
    }
    Ok(p)
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> u8 {
    u8::from(rng.random::<f64>() < p)
}

/// Draw one dataset and its latent column; deterministic given `spec.seed`.
pub fn generate_dataset(spec: &DgpSpec) -> Result<(Dataset, LatentColumn)> {
    spec.check()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.n);
    let mut latent = Vec::with_capacity(spec.n);
    for _ in 0..spec.n {
        let x: Vec<f64> = (0..N_COVARIATES).map(|_| rng.random::<f64>()).collect();
        let a = bernoulli(&mut rng, spec.p_a(&x));
        let z = bernoulli(&mut rng, spec.p_z(a, &x));
        let u = bernoulli(&mut rng, probability(spec.p_u(z as usize, a), "P(U = 1 | Z, A)")?);
        let w = bernoulli(&mut rng, probability(spec.p_w(u, &x), "P(W = 1 | U, X)")?);
        let y = bernoulli(&mut rng, probability(spec.mean_y(a, u, &x), "P(Y = 1 | A, U, X)")?);
        samples.push(ObservedSample {
            y: y as f64,
            a,
            z: z as usize,
            w: w as usize,
            x,
        });
        latent.push(u);
    }
    let data = Dataset::new(samples, CategoricalCoding::binary(), CategoricalCoding::binary(), covariate_names())?;
    Ok((data, LatentColumn(latent)))
}

/// Monte Carlo value of the true ATE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleAte {
    pub delta: f64,
    pub mc_se: f64,
    pub draws: usize,
}

/// `E[Y(1) - Y(0)] = y_a + y_au·E[U]`, integrating `E[U | X]` exactly over A and Z and
/// by Monte Carlo over X.
pub fn true_ate_oracle(spec: &DgpSpec, precision_n: usize) -> Result<OracleAte> {
    spec.check()?;
    if precision_n < MIN_ORACLE_N {
        return Err(Error::Validation(format!(
            "oracle needs at least {MIN_ORACLE_N} draws, got {precision_n}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut x = [0.0; N_COVARIATES];
    let draws: Vec<f64> = (0..precision_n)
        .map(|_| {
            for v in &mut x {
                *v = rng.random::<f64>();
            }
            let pa = spec.p_a(&x);
            let eu: f64 = (0..2u8)
                .map(|a| {
                    let fa = if a == 1 { pa } else { 1.0 - pa };
                    fa * spec.p_z(a, &x) * spec.p_u(1, a)
                })
                .sum();
            spec.y_a + spec.y_au * eu
        })
        .collect();
    let m = precision_n as f64;
    let mean = pairwise_sum(&draws) / m;
    let dev: Vec<f64> = draws.iter().map(|d| (d - mean).powi(2)).collect();
    Ok(OracleAte {
        delta: mean,
        mc_se: (pairwise_sum(&dev) / (m - 1.0) / m).sqrt(),
        draws: precision_n,
    })
}

/// Working-model scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    AllCorrect,
    M1Only,
    M2Only,
    M3Only,
    AllWrong,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::AllCorrect,
        Scenario::M1Only,
        Scenario::M2Only,
        Scenario::M3Only,
        Scenario::AllWrong,
    ];

    /// Stable tag.
    pub fn tag(self) -> &'static str {
        match self {
            Scenario::AllCorrect => "all_correct",
            Scenario::M1Only => "m1_only",
            Scenario::M2Only => "m2_only",
            Scenario::M3Only => "m3_only",
            Scenario::AllWrong => "all_wrong",
        }
    }

    /// Parse a tag.
    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| Error::Validation(format!("unknown scenario `{s}`")))
    }
}

/// Working models of a scenario, shared by all estimators.
///
/// The faithful specification is: factorized exposure with `(X, X7·X8)` in the A model
/// and `(A, X, X7·X8)` in the Z model; outcome and NCO baselines on `(X, X7·X8)`
/// (`A` added to the outcome); constant δ(z0), ξ(0) and η; and `R(A) = β₀ + β₁A`.
pub fn scenario_model_specs(scenario: Scenario) -> ModelSpec {
    let x: Vec<String> = covariate_names();
    let mut xx = x.clone();
    xx.push("X7*X8".into());
    let with_a = |v: &[String]| -> Vec<String> { std::iter::once("A".to_string()).chain(v.iter().cloned()).collect() };
    let mut spec = ModelSpec {
        exposure: ExposureSpec::Factorized {
            treatment: xx.clone(),
            nce: with_a(&xx),
        },
        outcome: with_a(&xx),
        nco_baseline: xx.clone(),
        nco_treatment: Vec::new(),
        nco_exposure: Vec::new(),
        nco_interaction: Some(Vec::new()),
        ratio: vec!["A".into()],
    };
    match scenario {
        Scenario::AllCorrect => {}
        Scenario::M1Only => spec.nco_interaction = None,
        Scenario::M2Only => spec.ratio = Vec::new(),
        Scenario::M3Only => {
            spec.exposure = ExposureSpec::Factorized {
                treatment: xx.clone(),
                nce: with_a(&x),
            }
        }
        Scenario::AllWrong => {
            spec.exposure = ExposureSpec::Factorized {
                treatment: xx.clone(),
                nce: with_a(&x),
            };
            spec.outcome = with_a(&x);
        }
    }
    spec
}

/// Configuration of one scenario study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenario: Scenario,
    pub reps: usize,
    pub n: usize,
    pub base_seed: u64,
    pub estimators: Vec<EstimatorKind>,
    pub options: EstimatorOptions,
    /// True ATE used for bias and coverage.
    pub truth: f64,
}

/// One estimator on one replication.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub estimator: EstimatorKind,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub error: Option<String>,
}

impl ReplicationRecord {
    /// TSV header of the raw log.
    pub const TSV_HEADER: &'static str = "replication\testimator\testimate\tse\tcovered\tfailed";

    /// One raw-log row.
    pub fn tsv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.10e}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.replication,
            self.estimator.tag(),
            f(self.estimate),
            f(self.se),
            self.covered.map_or(String::new(), |c| u8::from(c).to_string()),
            u8::from(self.error.is_some())
        )
    }
}

/// Operating characteristics of one estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorKind,
    /// Mean bias of the trimmed estimates.
    pub bias: f64,
    /// Population variance of the trimmed estimates.
    pub variance: f64,
    /// Bias as a percentage of the true ATE.
    pub proportion_bias: f64,
    pub mse: f64,
    /// Share of successful replications whose interval covers the truth.
    pub coverage: f64,
    pub succeeded: usize,
    pub failed: usize,
    pub retained: usize,
}

/// Table of operating characteristics of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingCharacteristics {
    pub scenario: Scenario,
    pub reps: usize,
    pub n: usize,
    pub truth: f64,
    pub rows: Vec<EstimatorSummary>,
}

impl OperatingCharacteristics {
    /// TSV header; bias, variance and MSE are scaled by 10³.
    pub const TSV_HEADER: &'static str =
        "scenario\testimator\tbias_x1e3\tvar_x1e3\tproportion_bias_pct\tmse_x1e3\tcoverage\tsucceeded\tfailed\tretained";

    /// Rows in Table-1 units.
    pub fn tsv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| {
                format!(
                    "{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}",
                    self.scenario.tag(),
                    r.estimator.tag(),
                    r.bias * 1e3,
                    r.variance * 1e3,
                    r.proportion_bias,
                    r.mse * 1e3,
                    r.coverage,
                    r.succeeded,
                    r.failed,
                    r.retained
                )
            })
            .collect()
    }

    /// Row of one estimator.
    pub fn row(&self, kind: EstimatorKind) -> Option<&EstimatorSummary> {
        self.rows.iter().find(|r| r.estimator == kind)
    }
}

/// Aggregated table and raw per-replication log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub characteristics: OperatingCharacteristics,
    pub log: Vec<ReplicationRecord>,
}

/// Run every estimator on one replication.
pub fn run_replication(config: &StudyConfig, spec: &ModelSpec, replication: usize) -> Result<Vec<ReplicationRecord>> {
    let dgp = DgpSpec::standard(config.n, config.base_seed.wrapping_add(replication as u64));
    let (data, _latent) = generate_dataset(&dgp)?;
    let designed = DesignedData::new(&data, spec);
    Ok(config
        .estimators
        .iter()
        .map(|&kind| {
            let res = designed.as_ref().map_err(|e| e.to_string()).and_then(|d| {
                estimate(d, kind, &config.options)
                    .map_err(|e| e.to_string())
                    .and_then(|e| e.report.se.map(|se| (e.report.estimate, se, e.report.ci)).ok_or_else(|| "no SE".into()))
            });
            match res {
                Ok((est, se, ci)) => ReplicationRecord {
                    replication,
                    estimator: kind,
                    estimate: Some(est),
                    se: Some(se),
                    covered: ci.map(|(lo, hi)| lo <= config.truth && config.truth <= hi),
                    error: None,
                },
                Err(e) => ReplicationRecord {
                    replication,
                    estimator: kind,
                    estimate: None,
                    se: None,
                    covered: None,
                    error: Some(e),
                },
            }
        })
        .collect())
}

/// Aggregate a raw log: symmetric trimming for bias, variance and MSE; coverage on all
/// successful replications.
pub fn aggregate(config: &StudyConfig, log: &[ReplicationRecord]) -> Result<OperatingCharacteristics> {
    let mut rows = Vec::with_capacity(config.estimators.len());
    for &kind in &config.estimators {
        let recs: Vec<&ReplicationRecord> = log.iter().filter(|r| r.estimator == kind).collect();
        let failed = recs.iter().filter(|r| r.error.is_some()).count();
        if failed as f64 > MAX_FAILURE_RATE * config.reps as f64 {
            let first = recs.iter().find_map(|r| r.error.as_deref()).unwrap_or("");
            return Err(Error::Numerical(format!(
                "{} failed on {failed} of {} replications; first: {first}",
                kind.tag(),
                config.reps
            )));
        }
        let mut est: Vec<f64> = recs.iter().filter_map(|r| r.estimate).collect();
        let succeeded = est.len();
        if succeeded == 0 {
            return Err(Error::Numerical(format!("{} produced no estimates", kind.tag())));
        }
        let covered = recs.iter().filter(|r| r.covered == Some(true)).count();
        est.sort_by(f64::total_cmp);
        let cut = (TRIM_PER_TAIL * succeeded as f64).floor() as usize;
        let kept = &est[cut..succeeded - cut];
        let m = kept.len() as f64;
        let mean = pairwise_sum(kept) / m;
        let var = pairwise_sum(&kept.iter().map(|e| (e - mean).powi(2)).collect::<Vec<_>>()) / m;
        let bias = mean - config.truth;
        rows.push(EstimatorSummary {
            estimator: kind,
            bias,
            variance: var,
            proportion_bias: 100.0 * bias / config.truth,
            mse: pairwise_sum(&kept.iter().map(|e| (e - config.truth).powi(2)).collect::<Vec<_>>()) / m,
            coverage: covered as f64 / succeeded as f64,
            succeeded,
            failed,
            retained: kept.len(),
        });
    }
    Ok(OperatingCharacteristics {
        scenario: config.scenario,
        reps: config.reps,
        n: config.n,
        truth: config.truth,
        rows,
    })
}

/// Run a scenario study on the current rayon pool. Results do not depend on the number
/// of threads or on completion order.
pub fn run_study(config: &StudyConfig) -> Result<StudyResult> {
    if config.reps == 0 || config.n == 0 {
        return Err(Error::Validation("reps and n must be positive".into()));
    }
    if config.estimators.is_empty() {
        return Err(Error::Validation("no estimators selected".into()));
    }
    let spec = scenario_model_specs(config.scenario);
    let per_rep: Vec<Vec<ReplicationRecord>> = (0..config.reps)
        .into_par_iter()
        .map(|r| run_replication(config, &spec, r))
        .collect::<Result<_>>()?;
    let log: Vec<ReplicationRecord> = per_rep.into_iter().flatten().collect();
    let characteristics = aggregate(config, &log)?;
    Ok(StudyResult { characteristics, log })
}

/// Column names of the synthetic vaccine-style dataset.
pub const VACCINE_COLUMNS: [&str; 6] = ["influenza", "vaccinated", "ringworm", "injury", "elderly", "comorbid"];

/// Synthetic vaccine-style records: binary outcome, treatment, NCE and NCO, two binary
/// covariates and a binary latent frailty driving all four.
pub fn vaccine_dataset(n: usize, seed: u64) -> Result<(Dataset, LatentColumn)> {
    if n == 0 {
        return Err(Error::Validation("sample size must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    for _ in 0..n {
        let elderly = bernoulli(&mut rng, 0.4);
        let comorbid = bernoulli(&mut rng, 0.3 + 0.2 * elderly as f64);
        let (e, c) = (elderly as f64, comorbid as f64);
        let u = bernoulli(&mut rng, 0.3 + 0.2 * c);
        let uf = u as f64;
        let a = bernoulli(&mut rng, expit(-0.4 + 0.9 * e + 0.3 * c - 0.8 * uf));
        let z = bernoulli(&mut rng, expit(-1.5 + 0.2 * e + 2.5 * uf + 0.2 * a as f64));
        let w = bernoulli(&mut rng, 0.08 + 0.05 * e + 0.50 * uf);
        let y = bernoulli(&mut rng, 0.12 + 0.06 * e + 0.04 * c + 0.20 * uf - 0.05 * a as f64);
        samples.push(ObservedSample {
            y: y as f64,
            a,
            z: z as usize,
            w: w as usize,
            x: vec![e, c],
        });
        latent.push(u);
    }
    let data = Dataset::new(
        samples,
        CategoricalCoding::binary(),
        CategoricalCoding::binary(),
        VACCINE_COLUMNS[4..].iter().map(|s| s.to_string()).collect(),
    )?;
    Ok((data, LatentColumn(latent)))
}

/// Sample size and seed of the bundled vaccine-style file.
pub const VACCINE_N: usize = 4000;
pub const VACCINE_SEED: u64 = 20_240_501;
