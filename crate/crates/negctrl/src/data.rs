//! Datasets, categorical codings, covariate designs and CSV ingestion.
//!
//! A [`Dataset`] holds complete-case records `(Y, A, Z, W, X)` where `A` is a binary
//! treatment, `Z` the negative control exposure (NCE) and `W` the negative control
//! outcome (NCO). Working-model linear predictors are described by term lists
//! (`"X1"`, `"X1*X2"`, `"A*X3"`) compiled into a [`Design`]; the intercept is always
//! prepended.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved term token for the treatment indicator.
pub const TREATMENT_TOKEN: &str = "A";

/// Ordered level labels of a categorical variable plus its reference level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalCoding {
    pub levels: Vec<String>,
    pub reference: usize,
}

impl CategoricalCoding {
    /// Coding with explicit reference index.
    pub fn new(levels: Vec<String>, reference: usize) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Validation("coding has no levels".into()));
        }
        let distinct: BTreeSet<&String> = levels.iter().collect();
        if distinct.len() != levels.len() {
            return Err(Error::Validation("coding levels are not distinct".into()));
        }
        if reference >= levels.len() {
            return Err(Error::Validation(format!(
                "reference index {reference} out of range for {} levels",
                levels.len()
            )));
        }
        Ok(Self { levels, reference })
    }

    /// Binary coding `{"0","1"}` with reference `"0"`.
    pub fn binary() -> Self {
        Self {
            levels: vec!["0".into(), "1".into()],
            reference: 0,
        }
    }

    /// Number of levels.
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    /// Always false for a valid coding.
    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Number of non-reference levels (the `k` of the indicator vector).
    pub fn k(&self) -> usize {
        self.levels.len() - 1
    }

    /// Position of `level` inside the non-reference indicator vector, `None` for the reference.
    pub fn gamma_index(&self, level: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match level.cmp(&self.reference) {
            Less => Some(level),
            Equal => None,
            Greater => Some(level - 1),
        }
    }

    /// Level index of the `j`-th non-reference level.
    pub fn level_of_gamma(&self, j: usize) -> usize {
        if j < self.reference {
            j
        } else {
            j + 1
        }
    }

    /// Index of a label.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }

    /// Same levels with the reference moved to `label`.
    pub fn with_reference(&self, label: &str) -> Result<Self> {
        let reference = self
            .index_of(label)
            .ok_or_else(|| Error::Validation(format!("reference level `{label}` not observed")))?;
        Self::new(self.levels.clone(), reference)
    }
}

/// One observed record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservedSample {
    pub y: f64,
    pub a: u8,
    pub z: usize,
    pub w: usize,
    pub x: Vec<f64>,
}

/// An immutable collection of records sharing codings and covariate layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<ObservedSample>,
    pub z_coding: CategoricalCoding,
    pub w_coding: CategoricalCoding,
    pub covariate_names: Vec<String>,
}

impl Dataset {
    /// Validated constructor.
    pub fn new(
        samples: Vec<ObservedSample>,
        z_coding: CategoricalCoding,
        w_coding: CategoricalCoding,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("dataset is empty".into()));
        }
        let p = covariate_names.len();
        for (i, s) in samples.iter().enumerate() {
            if s.a > 1 {
                return Err(Error::Validation(format!("row {i}: non-binary treatment")));
            }
            if s.z >= z_coding.len() || s.w >= w_coding.len() {
                return Err(Error::Validation(format!("row {i}: level index out of range")));
            }
            if s.x.len() != p {
                return Err(Error::Validation(format!(
                    "row {i}: expected {p} covariates, found {}",
                    s.x.len()
                )));
            }
            if !s.y.is_finite() || s.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("row {i}: non-finite value")));
            }
        }
        Ok(Self {
            samples,
            z_coding,
            w_coding,
            covariate_names,
        })
    }

    /// Number of records.
    pub fn n(&self) -> usize {
        self.samples.len()
    }

    /// True when every outcome is 0 or 1.
    pub fn outcome_is_binary(&self) -> bool {
        self.samples.iter().all(|s| s.y == 0.0 || s.y == 1.0)
    }

    /// Same records with new reference levels; indices are unchanged, only contrasts move.
    pub fn with_references(&self, z_ref: Option<&str>, w_ref: Option<&str>) -> Result<Self> {
        let mut out = self.clone();
        if let Some(l) = z_ref {
            out.z_coding = self.z_coding.with_reference(l)?;
        }
        if let Some(l) = w_ref {
            out.w_coding = self.w_coding.with_reference(l)?;
        }
        Ok(out)
    }

    /// Subset of rows (used by the bootstrap).
    pub fn resample(&self, rows: &[usize]) -> Self {
        Self {
            samples: rows.iter().map(|&i| self.samples[i].clone()).collect(),
            z_coding: self.z_coding.clone(),
            w_coding: self.w_coding.clone(),
            covariate_names: self.covariate_names.clone(),
        }
    }
}

/// Column-role mapping for CSV ingestion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatment: String,
    pub nce: String,
    pub nco: String,
    pub covariates: Vec<String>,
    pub z_reference: Option<String>,
    pub w_reference: Option<String>,
}

impl ColumnRoles {
    /// Columns named `Y`, `A`, `Z`, `W` plus the given covariates.
    pub fn standard(covariates: &[&str]) -> Self {
        Self {
            outcome: "Y".into(),
            treatment: "A".into(),
            nce: "Z".into(),
            nco: "W".into(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            z_reference: None,
            w_reference: None,
        }
    }
}

/// Load a CSV file according to `roles`.
pub fn load_dataset(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_dataset(file, roles)
}

/// Parse CSV text from any reader. Levels of `Z` and `W` are ordered lexicographically and the
/// first level is the reference unless overridden in `roles`.
pub fn read_dataset<R: Read>(reader: R, roles: &ColumnRoles) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Validation(format!("missing column `{name}`")))
    };
    let iy = col(&roles.outcome)?;
    let ia = col(&roles.treatment)?;
    let iz = col(&roles.nce)?;
    let iw = col(&roles.nco)?;
    let ix: Vec<usize> = roles.covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;

    struct Raw {
        y: f64,
        a: u8,
        z: String,
        w: String,
        x: Vec<f64>,
    }
    let mut raw = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let cell = |i: usize| -> Result<&str> {
            let v = rec.get(i).map(str::trim).unwrap_or("");
            if v.is_empty() {
                Err(Error::Cell {
                    row,
                    column: header[i].clone(),
                    message: "missing value".into(),
                })
            } else {
                Ok(v)
            }
        };
        let num = |i: usize| -> Result<f64> {
            let v = cell(i)?;
            v.parse::<f64>().map_err(|_| Error::Cell {
                row,
                column: header[i].clone(),
                message: format!("cannot parse `{v}` as a number"),
            })
        };
        let y = num(iy)?;
        let a = match num(ia)? {
            v if v == 0.0 => 0,
            v if v == 1.0 => 1,
            v => {
                return Err(Error::Cell {
                    row,
                    column: header[ia].clone(),
                    message: format!("non-binary treatment value {v}"),
                })
            }
        };
        let z = cell(iz)?.to_string();
        let w = cell(iw)?.to_string();
        let x = ix.iter().map(|&i| num(i)).collect::<Result<Vec<f64>>>()?;
        raw.push(Raw { y, a, z, w, x });
    }
    if raw.is_empty() {
        return Err(Error::Validation("empty file".into()));
    }

    let coding = |values: Vec<&String>, reference: &Option<String>| -> Result<CategoricalCoding> {
        let levels: Vec<String> = values
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .cloned()
            .collect();
        let c = CategoricalCoding::new(levels, 0)?;
        match reference {
            Some(l) => c.with_reference(l),
            None => Ok(c),
        }
    };
    let z_coding = coding(raw.iter().map(|r| &r.z).collect(), &roles.z_reference)?;
    let w_coding = coding(raw.iter().map(|r| &r.w).collect(), &roles.w_reference)?;
    let samples = raw
        .into_iter()
        .map(|r| ObservedSample {
            y: r.y,
            a: r.a,
            z: z_coding.index_of(&r.z).expect("level collected above"),
            w: w_coding.index_of(&r.w).expect("level collected above"),
            x: r.x,
        })
        .collect();
    Dataset::new(samples, z_coding, w_coding, roles.covariates.clone())
}

/// Write a dataset as CSV with columns `Y,A,Z,W,<covariates>`; `Z` and `W` are written as labels.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let names: Vec<&str> = data.covariate_names.iter().map(String::as_str).collect();
    write_csv_with_roles(data, &ColumnRoles::standard(&names), writer)
}

/// Write a dataset as CSV with the column names of `roles`.
pub fn write_csv_with_roles<W: Write>(data: &Dataset, roles: &ColumnRoles, writer: W) -> Result<()> {
    if roles.covariates.len() != data.covariate_names.len() {
        return Err(Error::Validation("column roles do not match the dataset covariates".into()));
    }
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header = vec![
        roles.outcome.clone(),
        roles.treatment.clone(),
        roles.nce.clone(),
        roles.nco.clone(),
    ];
    header.extend(roles.covariates.iter().cloned());
    wtr.write_record(&header)?;
    for s in &data.samples {
        let mut rec = vec![
            format!("{}", s.y),
            format!("{}", s.a),
            data.z_coding.levels[s.z].clone(),
            data.w_coding.levels[s.w].clone(),
        ];
        rec.extend(s.x.iter().map(|v| format!("{v}")));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// One factor of a product term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    Covariate(usize),
    Treatment,
}

/// Compiled term list: `[1, t1(x,a), t2(x,a), ...]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub terms: Vec<String>,
    factors: Vec<Vec<Factor>>,
}

impl Design {
    /// Compile a term list against covariate names. `"A"` denotes the treatment indicator.
    pub fn compile(terms: &[String], covariate_names: &[String]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut factors = Vec::with_capacity(terms.len());
        for t in terms {
            let mut fs = Vec::new();
            for part in t.split('*') {
                let name = part.trim();
                if name.is_empty() {
                    return Err(Error::Validation(format!("malformed term `{t}`")));
                }
                if name == TREATMENT_TOKEN {
                    fs.push(Factor::Treatment);
                } else {
                    let j = covariate_names
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| Error::UnknownCovariate(name.to_string()))?;
                    fs.push(Factor::Covariate(j));
                }
            }
            let mut key: Vec<String> = t.split('*').map(|p| p.trim().to_string()).collect();
            key.sort();
            if !seen.insert(key) {
                return Err(Error::Validation(format!("duplicate term `{t}`")));
            }
            factors.push(fs);
        }
        Ok(Self {
            terms: terms.iter().map(|t| t.trim().to_string()).collect(),
            factors,
        })
    }

    /// Intercept-only design.
    pub fn intercept() -> Self {
        Self {
            terms: Vec::new(),
            factors: Vec::new(),
        }
    }

    /// Length of the design vector (intercept included).
    pub fn dim(&self) -> usize {
        1 + self.factors.len()
    }

    /// True when some term involves the treatment.
    pub fn uses_treatment(&self) -> bool {
        self.factors.iter().flatten().any(|f| *f == Factor::Treatment)
    }

    /// Column labels, `"(Intercept)"` first.
    pub fn column_names(&self) -> Vec<String> {
        std::iter::once("(Intercept)".to_string())
            .chain(self.terms.iter().cloned())
            .collect()
    }

    /// Write the design vector at `(x, a)` into `out` (length [`Design::dim`]).
    pub fn fill(&self, x: &[f64], a: f64, out: &mut [f64]) {
        out[0] = 1.0;
        for (slot, fs) in out[1..].iter_mut().zip(&self.factors) {
            *slot = fs
                .iter()
                .map(|f| match f {
                    Factor::Covariate(j) => x[*j],
                    Factor::Treatment => a,
                })
                .product();
        }
    }

    /// Design vector at `(x, a)`.
    pub fn row(&self, x: &[f64], a: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.fill(x, a, &mut out);
        out
    }
}

/// Design vector of `terms` for one record.
pub fn build_design(sample: &ObservedSample, terms: &[String], covariate_names: &[String]) -> Result<Vec<f64>> {
    Ok(Design::compile(terms, covariate_names)?.row(&sample.x, sample.a as f64))
}

/// Split a comma-separated term list. An empty string or `"1"` means intercept only.
pub fn parse_terms(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty() && *t != "1")
        .map(String::from)
        .collect()
}

/// Functional form of the joint exposure model f(A, Z | X).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ExposureSpec {
    /// One multinomial logit over the 2|Z| cells of (A, Z), reference cell (0, z0).
    Joint { terms: Vec<String> },
    /// Logistic A | X times multinomial Z | A, X; the `nce` terms may contain `A`.
    Factorized { treatment: Vec<String>, nce: Vec<String> },
}

/// Term lists of every working model.
///
/// The W-mean contrasts are split into three blocks: `nco_treatment` indexes
/// δ(z0, X), `nco_exposure` indexes ξ(0, X) and `nco_interaction` indexes η(X), so that
/// δ(z, X) = δ(z0, X) + η(X) z and ξ(a, X) = ξ(0, X) + η(X) a share the η block.
/// `None` for `nco_interaction` removes the interaction entirely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub exposure: ExposureSpec,
    /// E[Y | Z = z0, A, X]; must contain the treatment main effect `A`.
    pub outcome: Vec<String>,
    /// E[W | A = 0, Z = z0, X].
    pub nco_baseline: Vec<String>,
    pub nco_treatment: Vec<String>,
    pub nco_exposure: Vec<String>,
    pub nco_interaction: Option<Vec<String>>,
    /// R(A, X); may contain `A`.
    pub ratio: Vec<String>,
}

impl ModelSpec {
    /// Main effects of every covariate in every block, `A` added where allowed.
    pub fn main_effects(covariates: &[String]) -> Self {
        let x: Vec<String> = covariates.to_vec();
        let with_a: Vec<String> = std::iter::once(TREATMENT_TOKEN.to_string()).chain(x.iter().cloned()).collect();
        Self {
            exposure: ExposureSpec::Joint { terms: x.clone() },
            outcome: with_a.clone(),
            nco_baseline: x.clone(),
            nco_treatment: x.clone(),
            nco_exposure: x.clone(),
            nco_interaction: Some(x),
            ratio: with_a,
        }
    }

    /// Fully saturated working models for discrete covariates: every product of a subset
    /// of covariates in every block, crossed with `A` where allowed.
    pub fn saturated(covariates: &[String]) -> Self {
        let mut x: Vec<String> = Vec::new();
        for mask in 1..(1usize << covariates.len()) {
            let t: Vec<&str> = (0..covariates.len())
                .filter(|j| mask >> j & 1 == 1)
                .map(|j| covariates[j].as_str())
                .collect();
            x.push(t.join("*"));
        }
        let with_a: Vec<String> = std::iter::once(TREATMENT_TOKEN.to_string())
            .chain(x.iter().cloned())
            .chain(x.iter().map(|t| format!("{TREATMENT_TOKEN}*{t}")))
            .collect();
        Self {
            exposure: ExposureSpec::Joint { terms: x.clone() },
            outcome: with_a.clone(),
            nco_baseline: x.clone(),
            nco_treatment: x.clone(),
            nco_exposure: x.clone(),
            nco_interaction: Some(x),
            ratio: with_a,
        }
    }

    /// Compile every block, checking names and where the treatment may appear.
    pub fn compile(&self, covariate_names: &[String]) -> Result<CompiledSpec> {
        if covariate_names.iter().any(|c| c == TREATMENT_TOKEN) {
            return Err(Error::Validation(format!(
                "covariate name `{TREATMENT_TOKEN}` is reserved for the treatment"
            )));
        }
        let no_a = |terms: &[String], block: &str| -> Result<Design> {
            let d = Design::compile(terms, covariate_names)?;
            if d.uses_treatment() {
                return Err(Error::Validation(format!("block `{block}` may not contain `A`")));
            }
            Ok(d)
        };
        let exposure = match &self.exposure {
            ExposureSpec::Joint { terms } => CompiledExposure::Joint(no_a(terms, "exposure")?),
            ExposureSpec::Factorized { treatment, nce } => CompiledExposure::Factorized {
                treatment: no_a(treatment, "exposure treatment")?,
                nce: Design::compile(nce, covariate_names)?,
            },
        };
        if !self.outcome.iter().any(|t| t.trim() == TREATMENT_TOKEN) {
            return Err(Error::Validation(
                "outcome formula must contain the treatment main effect `A`".into(),
            ));
        }
        Ok(CompiledSpec {
            exposure,
            outcome: Design::compile(&self.outcome, covariate_names)?,
            nco_baseline: no_a(&self.nco_baseline, "nco baseline")?,
            nco_treatment: no_a(&self.nco_treatment, "nco treatment")?,
            nco_exposure: no_a(&self.nco_exposure, "nco exposure")?,
            nco_interaction: self
                .nco_interaction
                .as_ref()
                .map(|t| no_a(t, "nco interaction"))
                .transpose()?,
            ratio: Design::compile(&self.ratio, covariate_names)?,
        })
    }
}

/// Compiled exposure design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CompiledExposure {
    Joint(Design),
    Factorized { treatment: Design, nce: Design },
}

/// Compiled [`ModelSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompiledSpec {
    pub exposure: CompiledExposure,
    pub outcome: Design,
    pub nco_baseline: Design,
    pub nco_treatment: Design,
    pub nco_exposure: Design,
    pub nco_interaction: Option<Design>,
    pub ratio: Design,
}

/// Design vectors of one block for every record, at `a = 0` and `a = 1` when the block uses `A`.
#[derive(Clone, Debug)]
pub struct DesignMatrix {
    dim: usize,
    by_treatment: bool,
    rows: [Vec<f64>; 2],
}

impl DesignMatrix {
    /// Evaluate `design` on every record.
    pub fn new(design: &Design, data: &Dataset) -> Self {
        let dim = design.dim();
        let by_treatment = design.uses_treatment();
        let build = |a: f64| {
            let mut m = vec![0.0; dim * data.n()];
            for (s, chunk) in data.samples.iter().zip(m.chunks_mut(dim)) {
                design.fill(&s.x, a, chunk);
            }
            m
        };
        let rows = if by_treatment {
            [build(0.0), build(1.0)]
        } else {
            [build(0.0), Vec::new()]
        };
        Self { dim, by_treatment, rows }
    }

    /// Design length.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Row of record `i` evaluated at treatment `a`.
    #[inline]
    pub fn row(&self, i: usize, a: u8) -> &[f64] {
        let m = if self.by_treatment { &self.rows[a as usize] } else { &self.rows[0] };
        &m[i * self.dim..(i + 1) * self.dim]
    }
}

/// A dataset bundled with its compiled specification and cached design rows.
#[derive(Clone, Debug)]
pub struct DesignedData<'a> {
    pub data: &'a Dataset,
    pub spec: ModelSpec,
    pub compiled: CompiledSpec,
    pub exposure: ExposureRows,
    pub outcome: DesignMatrix,
    pub nco_baseline: DesignMatrix,
    pub nco_treatment: DesignMatrix,
    pub nco_exposure: DesignMatrix,
    pub nco_interaction: Option<DesignMatrix>,
    pub ratio: DesignMatrix,
    /// Non-reference indicator position of each record's Z (`None` = reference).
    pub gz: Vec<Option<usize>>,
    /// Non-reference indicator position of each record's W (`None` = reference).
    pub gw: Vec<Option<usize>>,
}

/// Cached exposure design rows.
#[derive(Clone, Debug)]
pub enum ExposureRows {
    Joint(DesignMatrix),
    Factorized { treatment: DesignMatrix, nce: DesignMatrix },
}

impl<'a> DesignedData<'a> {
    /// Compile `spec` and evaluate every design on `data`.
    pub fn new(data: &'a Dataset, spec: &ModelSpec) -> Result<Self> {
        let compiled = spec.compile(&data.covariate_names)?;
        let exposure = match &compiled.exposure {
            CompiledExposure::Joint(d) => ExposureRows::Joint(DesignMatrix::new(d, data)),
            CompiledExposure::Factorized { treatment, nce } => ExposureRows::Factorized {
                treatment: DesignMatrix::new(treatment, data),
                nce: DesignMatrix::new(nce, data),
            },
        };
        Ok(Self {
            data,
            spec: spec.clone(),
            exposure,
            outcome: DesignMatrix::new(&compiled.outcome, data),
            nco_baseline: DesignMatrix::new(&compiled.nco_baseline, data),
            nco_treatment: DesignMatrix::new(&compiled.nco_treatment, data),
            nco_exposure: DesignMatrix::new(&compiled.nco_exposure, data),
            nco_interaction: compiled.nco_interaction.as_ref().map(|d| DesignMatrix::new(d, data)),
            ratio: DesignMatrix::new(&compiled.ratio, data),
            gz: data.samples.iter().map(|s| data.z_coding.gamma_index(s.z)).collect(),
            gw: data.samples.iter().map(|s| data.w_coding.gamma_index(s.w)).collect(),
            compiled,
        })
    }

    /// Number of records.
    pub fn n(&self) -> usize {
        self.data.n()
    }

    /// Number of non-reference Z levels.
    pub fn kz(&self) -> usize {
        self.data.z_coding.k()
    }

    /// Number of non-reference W levels.
    pub fn kw(&self) -> usize {
        self.data.w_coding.k()
    }

    /// Record `i`.
    #[inline]
    pub fn sample(&self, i: usize) -> &ObservedSample {
        &self.data.samples[i]
    }
}
