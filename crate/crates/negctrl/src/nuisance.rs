//! Likelihood-based working models: the joint exposure law f(A, Z | X), the baseline
//! outcome mean E[Y | Z = z0, A, X] and the baseline NCO law P(W | A = 0, Z = z0, X).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{CompiledExposure, Design, DesignedData, ExposureRows};
use crate::error::{Error, Result};
use crate::glm::{least_squares, MultinomialLogit};
use crate::linalg::dot;

/// Fitted f(A, Z | X).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum JointExposureModel {
    /// Multinomial logit over cells `a·|Z| + z`; the reference cell is `(0, z0)`.
    Joint { design: Design, nz: usize, cells: MultinomialLogit },
    /// Logistic A | X times multinomial Z | A, X.
    Factorized {
        treatment_design: Design,
        nce_design: Design,
        nz: usize,
        treatment: MultinomialLogit,
        nce: MultinomialLogit,
    },
}

/// All exposure conditionals at one covariate value.
#[derive(Clone, Debug, PartialEq)]
pub struct ExposureTable {
    pub nz: usize,
    /// f(a, z | x) at index `a·nz + z`.
    pub joint: Vec<f64>,
    /// Lower bound on every density inverted in a weight; 0 leaves weights untruncated.
    pub weight_floor: f64,
}

impl ExposureTable {
    /// Table from joint cell masses.
    pub fn from_joint(nz: usize, joint: Vec<f64>) -> Self {
        debug_assert_eq!(joint.len(), 2 * nz);
        Self { nz, joint, weight_floor: 0.0 }
    }

    /// f(a, z | x).
    #[inline]
    pub fn joint(&self, a: u8, z: usize) -> f64 {
        self.joint[a as usize * self.nz + z]
    }

    /// f(a | x).
    #[inline]
    pub fn a_marginal(&self, a: u8) -> f64 {
        self.joint[a as usize * self.nz..(a as usize + 1) * self.nz].iter().sum()
    }

    /// f(a | z, x).
    #[inline]
    pub fn a_given_z(&self, a: u8, z: usize) -> f64 {
        self.joint(a, z) / (self.joint(0, z) + self.joint(1, z))
    }

    /// f(z | a, x).
    #[inline]
    pub fn z_given_a(&self, z: usize, a: u8) -> f64 {
        self.joint(a, z) / self.a_marginal(a)
    }

    /// 1 / f(a | z, x) with the density bounded below by `weight_floor`.
    #[inline]
    pub fn inv_a_given_z(&self, a: u8, z: usize) -> f64 {
        1.0 / self.a_given_z(a, z).max(self.weight_floor)
    }

    /// 1 / f(z | a, x) with the density bounded below by `weight_floor`.
    #[inline]
    pub fn inv_z_given_a(&self, z: usize, a: u8) -> f64 {
        1.0 / self.z_given_a(z, a).max(self.weight_floor)
    }

    /// 1 / f(a | x) with the density bounded below by `weight_floor`.
    #[inline]
    pub fn inv_a_marginal(&self, a: u8) -> f64 {
        1.0 / self.a_marginal(a).max(self.weight_floor)
    }

    /// Smallest cell mass.
    pub fn min_mass(&self) -> f64 {
        self.joint.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

impl JointExposureModel {
    /// Number of Z levels.
    pub fn nz(&self) -> usize {
        match self {
            Self::Joint { nz, .. } | Self::Factorized { nz, .. } => *nz,
        }
    }

    /// Stacked coefficient vector α.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Self::Joint { cells, .. } => cells.coef.clone(),
            Self::Factorized { treatment, nce, .. } => {
                treatment.coef.iter().chain(&nce.coef).copied().collect()
            }
        }
    }

    /// Number of coefficients.
    pub fn n_params(&self) -> usize {
        match self {
            Self::Joint { cells, .. } => cells.n_params(),
            Self::Factorized { treatment, nce, .. } => treatment.n_params() + nce.n_params(),
        }
    }

    /// Replace the coefficient vector.
    pub fn set_params(&mut self, p: &[f64]) {
        match self {
            Self::Joint { cells, .. } => cells.coef.copy_from_slice(p),
            Self::Factorized { treatment, nce, .. } => {
                let m = treatment.n_params();
                treatment.coef.copy_from_slice(&p[..m]);
                nce.coef.copy_from_slice(&p[m..]);
            }
        }
    }

    /// Untrained model with all-zero coefficients for a compiled design.
    pub fn zeros(compiled: &CompiledExposure, nz: usize, z_ref: usize) -> Self {
        match compiled {
            CompiledExposure::Joint(d) => Self::Joint {
                design: d.clone(),
                nz,
                cells: MultinomialLogit::zeros(2 * nz, z_ref, d.dim()),
            },
            CompiledExposure::Factorized { treatment, nce } => Self::Factorized {
                treatment_design: treatment.clone(),
                nce_design: nce.clone(),
                nz,
                treatment: MultinomialLogit::zeros(2, 0, treatment.dim()),
                nce: MultinomialLogit::zeros(nz, z_ref, nce.dim()),
            },
        }
    }

    /// Cell masses for record `i` of `d` at coefficients `p`, written into `out` (length 2|Z|).
    pub fn joint_into(&self, p: &[f64], d: &DesignedData, i: usize, out: &mut [f64]) {
        match (self, &d.exposure) {
            (Self::Joint { cells, .. }, ExposureRows::Joint(rows)) => {
                cells.probs_into(p, rows.row(i, 0), out)
            }
            (Self::Factorized { treatment, nce, nz, .. }, ExposureRows::Factorized { treatment: tr, nce: zr }) => {
                let m = treatment.n_params();
                let mut pa = [0.0; 2];
                treatment.probs_into(&p[..m], tr.row(i, 0), &mut pa);
                for a in 0..2u8 {
                    let (lo, hi) = out.split_at_mut(*nz);
                    let slot = if a == 0 { lo } else { hi };
                    nce.probs_into(&p[m..], zr.row(i, a), slot);
                    for v in slot.iter_mut() {
                        *v *= pa[a as usize];
                    }
                }
            }
            _ => unreachable!("exposure model and cached rows come from the same spec"),
        }
    }

    /// Cell masses for record `i` at the fitted coefficients, without allocating.
    pub fn fitted_joint_into(&self, d: &DesignedData, i: usize, out: &mut [f64]) {
        match (self, &d.exposure) {
            (Self::Joint { cells, .. }, ExposureRows::Joint(rows)) => {
                cells.probs_into(&cells.coef, rows.row(i, 0), out)
            }
            (Self::Factorized { treatment, nce, nz, .. }, ExposureRows::Factorized { treatment: tr, nce: zr }) => {
                let mut pa = [0.0; 2];
                treatment.probs_into(&treatment.coef, tr.row(i, 0), &mut pa);
                for a in 0..2u8 {
                    let (lo, hi) = out.split_at_mut(*nz);
                    let slot = if a == 0 { lo } else { hi };
                    nce.probs_into(&nce.coef, zr.row(i, a), slot);
                    for v in slot.iter_mut() {
                        *v *= pa[a as usize];
                    }
                }
            }
            _ => unreachable!("exposure model and cached rows come from the same spec"),
        }
    }

    /// Conditional table for record `i` at the fitted coefficients.
    pub fn table(&self, d: &DesignedData, i: usize) -> ExposureTable {
        let mut joint = vec![0.0; 2 * self.nz()];
        self.joint_into(&self.params(), d, i, &mut joint);
        ExposureTable::from_joint(self.nz(), joint)
    }

    /// Per-record score at coefficients `p` written into `out`.
    pub fn score_into(&self, p: &[f64], d: &DesignedData, i: usize, out: &mut [f64]) {
        let s = d.sample(i);
        match (self, &d.exposure) {
            (Self::Joint { cells, nz, .. }, ExposureRows::Joint(rows)) => {
                cells.score_into(p, rows.row(i, 0), s.a as usize * nz + s.z, out)
            }
            (Self::Factorized { treatment, nce, .. }, ExposureRows::Factorized { treatment: tr, nce: zr }) => {
                let m = treatment.n_params();
                let (o1, o2) = out.split_at_mut(m);
                treatment.score_into(&p[..m], tr.row(i, 0), s.a as usize, o1);
                nce.score_into(&p[m..], zr.row(i, s.a), s.z, o2);
            }
            _ => unreachable!("exposure model and cached rows come from the same spec"),
        }
    }

    /// Summed Fisher information (minus the Hessian of the log-likelihood).
    pub fn information(&self, d: &DesignedData) -> DMatrix<f64> {
        let n = d.n();
        match (self, &d.exposure) {
            (Self::Joint { cells, nz, .. }, ExposureRows::Joint(rows)) => cells.information(
                &cells.coef,
                (0..n).map(|i| (rows.row(i, 0), d.sample(i).a as usize * nz + d.sample(i).z)),
            ),
            (Self::Factorized { treatment, nce, .. }, ExposureRows::Factorized { treatment: tr, nce: zr }) => {
                let i1 = treatment.information(&treatment.coef, (0..n).map(|i| (tr.row(i, 0), 0)));
                let i2 = nce.information(&nce.coef, (0..n).map(|i| (zr.row(i, d.sample(i).a), 0)));
                block_diag(&[i1, i2])
            }
            _ => unreachable!("exposure model and cached rows come from the same spec"),
        }
    }

    /// Conditional table at an arbitrary covariate vector.
    pub fn table_at(&self, x: &[f64]) -> ExposureTable {
        let nz = self.nz();
        let mut joint = vec![0.0; 2 * nz];
        match self {
            Self::Joint { design, cells, .. } => cells.probs_into(&cells.coef, &design.row(x, 0.0), &mut joint),
            Self::Factorized { treatment_design, nce_design, treatment, nce, .. } => {
                let pa = treatment.probs(&treatment_design.row(x, 0.0));
                for a in 0..2 {
                    let pz = nce.probs(&nce_design.row(x, a as f64));
                    for z in 0..nz {
                        joint[a * nz + z] = pa[a] * pz[z];
                    }
                }
            }
        }
        ExposureTable::from_joint(nz, joint)
    }
}

/// Block-diagonal assembly.
pub(crate) fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        out.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        o += b.nrows();
    }
    out
}

/// Conditional exposure densities at covariate vector `x`.
pub fn exposure_densities(model: &JointExposureModel, x: &[f64]) -> Result<ExposureTable> {
    let t = model.table_at(x);
    if t.min_mass() < 1e-12 {
        return Err(Error::DensityFloor {
            floor: 1e-12,
            rows: vec![],
        });
    }
    Ok(t)
}

/// Maximum-likelihood fit of f(A, Z | X).
pub fn fit_joint_exposure(d: &DesignedData) -> Result<JointExposureModel> {
    let data = d.data;
    let nz = data.z_coding.len();
    let mut counts = vec![0usize; 2 * nz];
    for s in &data.samples {
        counts[s.a as usize * nz + s.z] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyCell(format!("({},{})", c / nz, data.z_coding.levels[c % nz])));
    }
    let mut model = JointExposureModel::zeros(&d.compiled.exposure, nz, data.z_coding.reference);
    match (&mut model, &d.exposure) {
        (JointExposureModel::Joint { design, cells, .. }, ExposureRows::Joint(rows)) => {
            let recs: Vec<(&[f64], usize)> = data
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| (rows.row(i, 0), s.a as usize * nz + s.z))
                .collect();
            cells.fit(&recs, "exposure model", &design.column_names())?;
        }
        (
            JointExposureModel::Factorized { treatment_design, nce_design, treatment, nce, .. },
            ExposureRows::Factorized { treatment: tr, nce: zr },
        ) => {
            let recs: Vec<(&[f64], usize)> =
                data.samples.iter().enumerate().map(|(i, s)| (tr.row(i, 0), s.a as usize)).collect();
            treatment.fit(&recs, "treatment model", &treatment_design.column_names())?;
            let recs: Vec<(&[f64], usize)> =
                data.samples.iter().enumerate().map(|(i, s)| (zr.row(i, s.a), s.z)).collect();
            nce.fit(&recs, "NCE model", &nce_design.column_names())?;
        }
        _ => unreachable!("exposure model and cached rows come from the same spec"),
    }
    Ok(model)
}

/// Link of the baseline outcome model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Logit,
    Identity,
}

impl Link {
    /// Mean from a linear predictor.
    #[inline]
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Logit => expit(eta),
            Link::Identity => eta,
        }
    }

    /// Derivative of the mean with respect to the linear predictor.
    #[inline]
    pub fn derivative(self, eta: f64) -> f64 {
        match self {
            Link::Logit => {
                let m = expit(eta);
                m * (1.0 - m)
            }
            Link::Identity => 1.0,
        }
    }
}

/// Logistic function.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fitted E[Y | Z = z0, A, X].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcomeModel {
    pub design: Design,
    pub link: Link,
    pub coef: Vec<f64>,
}

impl BaselineOutcomeModel {
    /// All-zero coefficients.
    pub fn zeros(design: &Design, link: Link) -> Self {
        Self {
            design: design.clone(),
            link,
            coef: vec![0.0; design.dim()],
        }
    }

    /// Mean at design row `row` with coefficients `p`.
    #[inline]
    pub fn mean_row(&self, p: &[f64], row: &[f64]) -> f64 {
        self.link.inverse(dot(p, row))
    }

    /// Mean at `(x, a)`.
    pub fn mean_at(&self, x: &[f64], a: u8) -> f64 {
        self.mean_row(&self.coef, &self.design.row(x, a as f64))
    }

    /// Restricted score `1(Z = z0)(y - μ) x`.
    pub fn score_into(&self, p: &[f64], d: &DesignedData, i: usize, out: &mut [f64]) {
        let s = d.sample(i);
        if d.gz[i].is_some() {
            out.fill(0.0);
            return;
        }
        let row = d.outcome.row(i, s.a);
        let r = s.y - self.mean_row(p, row);
        for (o, x) in out.iter_mut().zip(row) {
            *o = r * x;
        }
    }

    /// Summed information over the Z = z0 subsample.
    pub fn information(&self, d: &DesignedData) -> DMatrix<f64> {
        let q = self.coef.len();
        let mut info = DMatrix::zeros(q, q);
        for i in 0..d.n() {
            if d.gz[i].is_some() {
                continue;
            }
            let row = d.outcome.row(i, d.sample(i).a);
            let w = self.link.derivative(dot(&self.coef, row));
            for r in 0..q {
                for c in 0..q {
                    info[(r, c)] += w * row[r] * row[c];
                }
            }
        }
        info
    }
}

/// Restricted fit of E[Y | Z = z0, A, X]: logistic for binary Y, least squares otherwise.
pub fn fit_baseline_outcome(d: &DesignedData) -> Result<BaselineOutcomeModel> {
    let data = d.data;
    let idx: Vec<usize> = (0..d.n()).filter(|&i| d.gz[i].is_none()).collect();
    if idx.is_empty() {
        return Err(Error::EmptyCell("Z = z0 subsample for the outcome model".into()));
    }
    for a in 0..2u8 {
        if !idx.iter().any(|&i| data.samples[i].a == a) {
            return Err(Error::EmptyCell(format!("(A={a}, Z=z0) for the outcome model")));
        }
    }
    let design = &d.compiled.outcome;
    if data.outcome_is_binary() {
        let recs: Vec<(&[f64], usize)> = idx
            .iter()
            .map(|&i| (d.outcome.row(i, data.samples[i].a), data.samples[i].y as usize))
            .collect();
        let mut m = MultinomialLogit::zeros(2, 0, design.dim());
        m.fit(&recs, "baseline outcome model", &design.column_names())?;
        Ok(BaselineOutcomeModel {
            design: design.clone(),
            link: Link::Logit,
            coef: m.coef,
        })
    } else {
        let recs: Vec<(&[f64], f64)> = idx
            .iter()
            .map(|&i| (d.outcome.row(i, data.samples[i].a), data.samples[i].y))
            .collect();
        Ok(BaselineOutcomeModel {
            design: design.clone(),
            link: Link::Identity,
            coef: least_squares(&recs, design.dim(), "baseline outcome model")?,
        })
    }
}

/// Fitted P(W | A = 0, Z = z0, X) as a multinomial logit with reference w0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineNcoModel {
    pub design: Design,
    pub logit: MultinomialLogit,
}

impl BaselineNcoModel {
    /// All-zero coefficients.
    pub fn zeros(design: &Design, nw: usize, w_ref: usize) -> Self {
        Self {
            design: design.clone(),
            logit: MultinomialLogit::zeros(nw, w_ref, design.dim()),
        }
    }

    /// E[Γ_W | A = 0, Z = z0, X] (non-reference probabilities in level order) at row `row`.
    pub fn gamma_mean_into(&self, p: &[f64], row: &[f64], out: &mut [f64]) {
        let nw = self.logit.n_categories;
        let mut probs = [0.0f64; 32];
        let probs = if nw <= 32 { &mut probs[..nw] } else { return self.gamma_mean_slow(p, row, out) };
        self.logit.probs_into(p, row, probs);
        let mut j = 0;
        for (c, &pc) in probs.iter().enumerate() {
            if c != self.logit.reference {
                out[j] = pc;
                j += 1;
            }
        }
    }

    fn gamma_mean_slow(&self, p: &[f64], row: &[f64], out: &mut [f64]) {
        let mut probs = vec![0.0; self.logit.n_categories];
        self.logit.probs_into(p, row, &mut probs);
        let mut j = 0;
        for (c, &pc) in probs.iter().enumerate() {
            if c != self.logit.reference {
                out[j] = pc;
                j += 1;
            }
        }
    }

    /// Category probabilities at covariate vector `x`.
    pub fn probs_at(&self, x: &[f64]) -> Vec<f64> {
        self.logit.probs(&self.design.row(x, 0.0))
    }

    /// Restricted score `1(A = 0, Z = z0) (1(W = c) - p_c) x`.
    pub fn score_into(&self, p: &[f64], d: &DesignedData, i: usize, out: &mut [f64]) {
        let s = d.sample(i);
        if s.a != 0 || d.gz[i].is_some() {
            out.fill(0.0);
            return;
        }
        self.logit.score_into(p, d.nco_baseline.row(i, 0), s.w, out);
    }

    /// Summed information over the (A = 0, Z = z0) subsample.
    pub fn information(&self, d: &DesignedData) -> DMatrix<f64> {
        self.logit.information(
            &self.logit.coef,
            (0..d.n())
                .filter(|&i| d.sample(i).a == 0 && d.gz[i].is_none())
                .map(|i| (d.nco_baseline.row(i, 0), 0)),
        )
    }
}

/// Restricted multinomial-logit fit of P(W | A = 0, Z = z0, X).
pub fn fit_baseline_nco(d: &DesignedData) -> Result<BaselineNcoModel> {
    let data = d.data;
    let recs: Vec<(&[f64], usize)> = (0..d.n())
        .filter(|&i| data.samples[i].a == 0 && d.gz[i].is_none())
        .map(|i| (d.nco_baseline.row(i, 0), data.samples[i].w))
        .collect();
    if recs.is_empty() {
        return Err(Error::EmptyCell("(A=0, Z=z0) subsample for the NCO baseline model".into()));
    }
    let design = &d.compiled.nco_baseline;
    let mut m = BaselineNcoModel::zeros(design, data.w_coding.len(), data.w_coding.reference);
    m.logit.fit(&recs, "baseline NCO model", &design.column_names())?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conditionals_from_joint() {
        let t = ExposureTable::from_joint(2, vec![0.1, 0.2, 0.3, 0.4]);
        assert!((t.a_given_z(1, 0) - 0.75).abs() < 1e-15);
        assert!((t.a_marginal(1) - 0.7).abs() < 1e-15);
        assert!((t.z_given_a(1, 1) - 0.4 / 0.7).abs() < 1e-15);
    }

    #[test]
    fn expit_is_symmetric() {
        for x in [-40.0, -1.0, 0.0, 2.5, 40.0] {
            assert!((expit(x) + expit(-x) - 1.0).abs() < 1e-15);
        }
    }
}
