//! Contrast models of E[W | A, Z, X] and R(A, X) and the g-estimating equations that
//! fit them, plus the full maximum-likelihood fit of E[W | A, Z, X].
//!
//! With `Γ_W`, `Γ_Z` the non-reference indicator vectors,
//!
//! ```text
//! E[Γ_Wi | A, Z, X] = base_i(X) + δ_i(z0, X) A + Σ_j 1(Z = z_j) (ξ_ij(0, X) + A η_ij(X))
//! E[Y | Z, A, X]    = E[Y | Z = z0, A, X] + R(A, X) ξ(A, X) Γ_Z
//! ```
//!
//! Every contrast is linear in its coefficients, so each estimating equation is a
//! linear system solved exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{CompiledSpec, Design, DesignedData};
use crate::error::{Error, Result};
use crate::glm::{fit_mean_model, MeanModel, Response};
use crate::linalg::{dot, solve};
use crate::nuisance::{BaselineNcoModel, BaselineOutcomeModel, ExposureTable, JointExposureModel, Link};
use crate::point::PointNuisance;

/// Tolerance on the empirical moment at a returned solution.
pub const MOMENT_TOL: f64 = 1e-8;

/// Shapes of the contrast blocks and of the index functions.
///
/// The default index functions are the gradients of the contrast models at unit contrasts:
///
/// ```text
/// g0(a, z, x) = (a d_δ(x), 1(z = z_j) d_ξ(x) for each j, a 1(z = z_j) d_η(x) for each j)
/// g1(a, z, x) = d_R(a, x) ⊗ Γ_Z
/// ```
///
/// with `h2 = g0` and `h1 = h3 = g1`. One `g0` serves every W level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexFunctions {
    pub kz: usize,
    pub kw: usize,
    pub dim_treatment: usize,
    pub dim_exposure: usize,
    pub dim_interaction: Option<usize>,
    pub dim_ratio: usize,
}

impl IndexFunctions {
    /// Length of `g0` (per W level): dim δ + kz (dim ξ + dim η).
    pub fn g0_dim(&self) -> usize {
        self.dim_treatment + self.kz * (self.dim_exposure + self.dim_interaction.unwrap_or(0))
    }

    /// Length of `g1`: kz · dim R.
    pub fn g1_dim(&self) -> usize {
        self.kz * self.dim_ratio
    }

    /// Number of ratio coefficients: kw · dim R.
    pub fn ratio_params(&self) -> usize {
        self.kw * self.dim_ratio
    }

    /// `g0(a, z, x)` for record `i` written into `out`.
    pub fn g0_into(&self, d: &DesignedData, i: usize, a: u8, gz: Option<usize>, out: &mut [f64]) {
        out.fill(0.0);
        let pa = self.dim_treatment;
        let pz = self.dim_exposure;
        if a == 1 {
            out[..pa].copy_from_slice(d.nco_treatment.row(i, 0));
        }
        if let Some(j) = gz {
            out[pa + j * pz..pa + (j + 1) * pz].copy_from_slice(d.nco_exposure.row(i, 0));
            if let (Some(paz), Some(rows), 1) = (self.dim_interaction, &d.nco_interaction, a) {
                let o = pa + self.kz * pz + j * paz;
                out[o..o + paz].copy_from_slice(rows.row(i, 0));
            }
        }
    }

    /// E[g0(A, Z, X) | X = x_i] under exposure table `t`.
    pub fn g0_mean_into(&self, d: &DesignedData, i: usize, t: &ExposureTable, z_ref: usize, out: &mut [f64]) {
        let pa = self.dim_treatment;
        let pz = self.dim_exposure;
        let f1 = t.a_marginal(1);
        for (o, x) in out[..pa].iter_mut().zip(d.nco_treatment.row(i, 0)) {
            *o = f1 * x;
        }
        for j in 0..self.kz {
            let z = crate::point::level_of_position(j, z_ref);
            let fz = t.joint(0, z) + t.joint(1, z);
            for (o, x) in out[pa + j * pz..pa + (j + 1) * pz].iter_mut().zip(d.nco_exposure.row(i, 0)) {
                *o = fz * x;
            }
            if let (Some(paz), Some(rows)) = (self.dim_interaction, &d.nco_interaction) {
                let o0 = pa + self.kz * pz + j * paz;
                let f1z = t.joint(1, z);
                for (o, x) in out[o0..o0 + paz].iter_mut().zip(rows.row(i, 0)) {
                    *o = f1z * x;
                }
            }
        }
    }

    /// `g1(a, z, x) = d_R(a, x) ⊗ Γ_Z` for record `i`.
    pub fn g1_into(&self, d: &DesignedData, i: usize, a: u8, gz: Option<usize>, out: &mut [f64]) {
        out.fill(0.0);
        if let Some(j) = gz {
            let p = self.dim_ratio;
            out[j * p..(j + 1) * p].copy_from_slice(d.ratio.row(i, a));
        }
    }

    /// E[g1(A, Z, X) | A = a, X = x_i] under exposure table `t`.
    pub fn g1_mean_into(&self, d: &DesignedData, i: usize, a: u8, t: &ExposureTable, z_ref: usize, out: &mut [f64]) {
        let p = self.dim_ratio;
        let row = d.ratio.row(i, a);
        for j in 0..self.kz {
            let fz = t.z_given_a(crate::point::level_of_position(j, z_ref), a);
            for (o, x) in out[j * p..(j + 1) * p].iter_mut().zip(row) {
                *o = fz * x;
            }
        }
    }
}

/// Default (unit-contrast gradient) index functions for a compiled spec.
pub fn default_index_functions(spec: &CompiledSpec, kz: usize, kw: usize) -> Result<IndexFunctions> {
    if kz == 0 || kw == 0 {
        return Err(Error::Validation("the NCE and NCO each need at least two levels".into()));
    }
    let idx = IndexFunctions {
        kz,
        kw,
        dim_treatment: spec.nco_treatment.dim(),
        dim_exposure: spec.nco_exposure.dim(),
        dim_interaction: spec.nco_interaction.as_ref().map(Design::dim),
        dim_ratio: spec.ratio.dim(),
    };
    Ok(idx)
}

/// Fitted contrast coefficients with their designs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastSet {
    pub index: IndexFunctions,
    pub design_treatment: Design,
    pub design_exposure: Design,
    pub design_interaction: Option<Design>,
    pub design_ratio: Design,
    /// Row-major `kw × g0_dim`: per W level `[δ(z0) | ξ(0)_j for each j | η_j for each j]`.
    pub beta_w: Vec<f64>,
    /// Row-major `kw × dim R`.
    pub beta_r: Vec<f64>,
}

impl ContrastSet {
    /// All-zero contrasts for a compiled spec.
    pub fn zeros(spec: &CompiledSpec, index: IndexFunctions) -> Self {
        Self {
            beta_w: vec![0.0; index.kw * index.g0_dim()],
            beta_r: vec![0.0; index.ratio_params()],
            index,
            design_treatment: spec.nco_treatment.clone(),
            design_exposure: spec.nco_exposure.clone(),
            design_interaction: spec.nco_interaction.clone(),
            design_ratio: spec.ratio.clone(),
        }
    }

    /// δ(z0, X) coefficients of W level `i` (part of β^WA).
    pub fn beta_wa(&self, i: usize) -> &[f64] {
        let q = self.index.g0_dim();
        &self.beta_w[i * q..i * q + self.index.dim_treatment]
    }

    /// ξ(0, X) coefficients of W level `i`, Z level `j` (part of β^WZ).
    pub fn beta_wz(&self, i: usize, j: usize) -> &[f64] {
        let q = self.index.g0_dim();
        let o = i * q + self.index.dim_treatment + j * self.index.dim_exposure;
        &self.beta_w[o..o + self.index.dim_exposure]
    }

    /// η(X) coefficients of W level `i`, Z level `j` (the shared β^WAZ block).
    pub fn beta_waz(&self, i: usize, j: usize) -> Option<&[f64]> {
        let paz = self.index.dim_interaction?;
        let q = self.index.g0_dim();
        let o = i * q + self.index.dim_treatment + self.index.kz * self.index.dim_exposure + j * paz;
        Some(&self.beta_w[o..o + paz])
    }

    /// Write δ(z0), ξ(0), η and R at record `i` into `pn`, using coefficient vectors `bw`, `br`.
    pub fn fill_point(&self, bw: &[f64], br: &[f64], d: &DesignedData, i: usize, pn: &mut PointNuisance) {
        let ix = &self.index;
        let q = ix.g0_dim();
        let (pa, pz) = (ix.dim_treatment, ix.dim_exposure);
        let da = d.nco_treatment.row(i, 0);
        let dz = d.nco_exposure.row(i, 0);
        for l in 0..ix.kw {
            let b = &bw[l * q..(l + 1) * q];
            pn.delta0[l] = dot(&b[..pa], da);
            for j in 0..ix.kz {
                let c = l * ix.kz + j;
                pn.xi0[c] = dot(&b[pa + j * pz..pa + (j + 1) * pz], dz);
                pn.eta[c] = match (ix.dim_interaction, &d.nco_interaction) {
                    (Some(paz), Some(rows)) => {
                        let o = pa + ix.kz * pz + j * paz;
                        dot(&b[o..o + paz], rows.row(i, 0))
                    }
                    _ => 0.0,
                };
            }
        }
        let pr = ix.dim_ratio;
        for a in 0..2u8 {
            let row = d.ratio.row(i, a);
            for l in 0..ix.kw {
                pn.ratio[a as usize][l] = dot(&br[l * pr..(l + 1) * pr], row);
            }
        }
    }

    /// Contrasts at an arbitrary covariate vector.
    pub fn evaluate_at(&self, x: &[f64]) -> ContrastValues {
        let ix = &self.index;
        let q = ix.g0_dim();
        let (pa, pz) = (ix.dim_treatment, ix.dim_exposure);
        let da = self.design_treatment.row(x, 0.0);
        let dz = self.design_exposure.row(x, 0.0);
        let daz = self.design_interaction.as_ref().map(|d| d.row(x, 0.0));
        let mut v = ContrastValues {
            delta0: vec![0.0; ix.kw],
            xi0: vec![0.0; ix.kw * ix.kz],
            eta: vec![0.0; ix.kw * ix.kz],
            ratio: [vec![0.0; ix.kw], vec![0.0; ix.kw]],
        };
        for l in 0..ix.kw {
            let b = &self.beta_w[l * q..(l + 1) * q];
            v.delta0[l] = dot(&b[..pa], &da);
            for j in 0..ix.kz {
                let c = l * ix.kz + j;
                v.xi0[c] = dot(&b[pa + j * pz..pa + (j + 1) * pz], &dz);
                if let (Some(paz), Some(row)) = (ix.dim_interaction, &daz) {
                    let o = pa + ix.kz * pz + j * paz;
                    v.eta[c] = dot(&b[o..o + paz], row);
                }
            }
        }
        for a in 0..2 {
            let row = self.design_ratio.row(x, a as f64);
            for l in 0..ix.kw {
                v.ratio[a][l] = dot(&self.beta_r[l * ix.dim_ratio..(l + 1) * ix.dim_ratio], &row);
            }
        }
        v
    }
}

/// Contrast values at one covariate vector (same layout as [`PointNuisance`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastValues {
    pub delta0: Vec<f64>,
    pub xi0: Vec<f64>,
    pub eta: Vec<f64>,
    pub ratio: [Vec<f64>; 2],
}

impl ContrastValues {
    /// δ_i(z, x).
    pub fn delta(&self, i: usize, gz: Option<usize>, kz: usize) -> f64 {
        self.delta0[i] + gz.map_or(0.0, |j| self.eta[i * kz + j])
    }

    /// ξ_ij(a, x).
    pub fn xi(&self, a: u8, i: usize, j: usize, kz: usize) -> f64 {
        self.xi0[i * kz + j] + a as f64 * self.eta[i * kz + j]
    }

    /// η_ij(x).
    pub fn eta(&self, i: usize, j: usize, kz: usize) -> f64 {
        self.eta[i * kz + j]
    }
}

/// The stacked nuisance parameter θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceTheta {
    pub exposure: JointExposureModel,
    pub baseline_y: BaselineOutcomeModel,
    pub baseline_w: BaselineNcoModel,
    pub contrasts: ContrastSet,
}

impl NuisanceTheta {
    /// All-zero coefficients for the spec of `d`.
    pub fn zeros(d: &DesignedData) -> Result<Self> {
        let data = d.data;
        let index = default_index_functions(&d.compiled, d.kz(), d.kw())?;
        let link = if data.outcome_is_binary() { Link::Logit } else { Link::Identity };
        Ok(Self {
            exposure: JointExposureModel::zeros(&d.compiled.exposure, data.z_coding.len(), data.z_coding.reference),
            baseline_y: BaselineOutcomeModel::zeros(&d.compiled.outcome, link),
            baseline_w: BaselineNcoModel::zeros(&d.compiled.nco_baseline, data.w_coding.len(), data.w_coding.reference),
            contrasts: ContrastSet::zeros(&d.compiled, index),
        })
    }

    /// Empty point buffer shaped for `d`.
    pub fn point_buffer(&self, d: &DesignedData) -> PointNuisance {
        let nz = d.data.z_coding.len();
        PointNuisance::zeros(d.kz(), d.kw(), d.data.z_coding.reference, ExposureTable::from_joint(nz, vec![0.0; 2 * nz]))
    }

    /// Evaluate every working model at record `i` into `pn`.
    pub fn point_into(&self, d: &DesignedData, i: usize, pn: &mut PointNuisance) {
        self.exposure.fitted_joint_into(d, i, &mut pn.exposure.joint);
        for a in 0..2u8 {
            pn.y_base[a as usize] = self.baseline_y.mean_row(&self.baseline_y.coef, d.outcome.row(i, a));
        }
        self.baseline_w
            .gamma_mean_into(&self.baseline_w.logit.coef, d.nco_baseline.row(i, 0), &mut pn.w_base);
        self.contrasts
            .fill_point(&self.contrasts.beta_w, &self.contrasts.beta_r, d, i, pn);
    }

    /// Working models at record `i`.
    pub fn point(&self, d: &DesignedData, i: usize) -> PointNuisance {
        let mut pn = self.point_buffer(d);
        self.point_into(d, i, &mut pn);
        pn
    }
}

/// Which estimating equation identifies the W contrasts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WRoute {
    /// Centered at E[·|X], residual against the full W mean (baseline included).
    DoublyRobust,
    /// Centered at E[·|X], residual without baseline.
    ExposureOnly,
}

/// Which estimating equation identifies R.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RRoute {
    /// Centered at E[·|A,X], baseline residual.
    DoublyRobust,
    /// Centered at E[·|A,X], residual `Y - R Γ_W`.
    ExposureOnly,
    /// Uncentered, baseline residual.
    OutcomeOnly,
}

/// Per-record pieces of the W-contrast equation: centered index, regressor, and one
/// response per W level, so that the equation reads `gc · (resp_l - g0ᵀ β_l)`.
pub fn w_equation_terms(
    ix: &IndexFunctions,
    d: &DesignedData,
    i: usize,
    pn: &PointNuisance,
    route: WRoute,
    gc: &mut [f64],
    g: &mut [f64],
    resp: &mut [f64],
) {
    let s = d.sample(i);
    let z_ref = d.data.z_coding.reference;
    ix.g0_into(d, i, s.a, d.gz[i], g);
    ix.g0_mean_into(d, i, &pn.exposure, z_ref, gc);
    for (c, gv) in gc.iter_mut().zip(g.iter()) {
        *c = gv - *c;
    }
    for (l, r) in resp.iter_mut().enumerate() {
        let gamma = if d.gw[i] == Some(l) { 1.0 } else { 0.0 };
        *r = match route {
            WRoute::DoublyRobust => gamma - pn.w_base[l],
            WRoute::ExposureOnly => gamma,
        };
    }
}

/// Per-record pieces of the R equation: the equation reads `gc · (resp - regᵀ β^R)`.
pub fn r_equation_terms(
    ix: &IndexFunctions,
    d: &DesignedData,
    i: usize,
    pn: &PointNuisance,
    route: RRoute,
    gc: &mut [f64],
    reg: &mut [f64],
) -> f64 {
    let s = d.sample(i);
    let z_ref = d.data.z_coding.reference;
    ix.g1_into(d, i, s.a, d.gz[i], gc);
    if route != RRoute::OutcomeOnly {
        let mut m = vec![0.0; gc.len()];
        ix.g1_mean_into(d, i, s.a, &pn.exposure, z_ref, &mut m);
        for (c, mv) in gc.iter_mut().zip(&m) {
            *c -= mv;
        }
    }
    let p = ix.dim_ratio;
    let row = d.ratio.row(i, s.a);
    for l in 0..ix.kw {
        let gamma = if d.gw[i] == Some(l) { 1.0 } else { 0.0 };
        let v = match route {
            RRoute::ExposureOnly => gamma,
            _ => gamma - pn.w_base[l] - s.a as f64 * pn.delta0[l],
        };
        for (o, x) in reg[l * p..(l + 1) * p].iter_mut().zip(row) {
            *o = v * x;
        }
    }
    match route {
        RRoute::ExposureOnly => s.y,
        _ => s.y - pn.y_base[s.a as usize],
    }
}

fn solve_w(d: &DesignedData, theta: &NuisanceTheta, route: WRoute) -> Result<Vec<f64>> {
    let ix = &theta.contrasts.index;
    let q = ix.g0_dim();
    let kw = ix.kw;
    let n = d.n();
    let mut m = DMatrix::zeros(q, q);
    let mut b = DMatrix::zeros(q, kw);
    let (mut gc, mut g, mut resp) = (vec![0.0; q], vec![0.0; q], vec![0.0; kw]);
    let mut pn = theta.point_buffer(d);
    for i in 0..n {
        theta.point_into(d, i, &mut pn);
        w_equation_terms(ix, d, i, &pn, route, &mut gc, &mut g, &mut resp);
        for r in 0..q {
            if gc[r] == 0.0 {
                continue;
            }
            for c in 0..q {
                m[(r, c)] += gc[r] * g[c];
            }
            for l in 0..kw {
                b[(r, l)] += gc[r] * resp[l];
            }
        }
    }
    let mut beta = vec![0.0; kw * q];
    for l in 0..kw {
        let sol = solve(&m, &b.column(l).into_owned(), "W-contrast estimating equations")?;
        beta[l * q..(l + 1) * q].copy_from_slice(sol.as_slice());
        let resid = &b.column(l) - &m * &sol;
        if resid.amax() / n as f64 > MOMENT_TOL {
            return Err(Error::Numerical("W-contrast moment not solved to tolerance".into()));
        }
    }
    Ok(beta)
}

fn solve_r(d: &DesignedData, theta: &NuisanceTheta, route: RRoute) -> Result<Vec<f64>> {
    let ix = &theta.contrasts.index;
    if ix.kz != ix.kw {
        return Err(Error::Validation(format!(
            "R(A, X) requires |Z| = |W| (found {} and {}); coarsen the negative controls or use the plug-in estimator",
            ix.kz + 1,
            ix.kw + 1
        )));
    }
    let q = ix.ratio_params();
    let n = d.n();
    let mut m = DMatrix::zeros(q, q);
    let mut b = DVector::zeros(q);
    let (mut gc, mut reg) = (vec![0.0; q], vec![0.0; q]);
    let mut pn = theta.point_buffer(d);
    for i in 0..n {
        theta.point_into(d, i, &mut pn);
        let resp = r_equation_terms(ix, d, i, &pn, route, &mut gc, &mut reg);
        for r in 0..q {
            if gc[r] == 0.0 {
                continue;
            }
            for c in 0..q {
                m[(r, c)] += gc[r] * reg[c];
            }
            b[r] += gc[r] * resp;
        }
    }
    let sol = solve(&m, &b, "ratio estimating equations")?;
    if (&b - &m * &sol).amax() / n as f64 > MOMENT_TOL {
        return Err(Error::Numerical("ratio moment not solved to tolerance".into()));
    }
    Ok(sol.iter().copied().collect())
}

/// Doubly robust g-estimation of the W contrasts given α̂ and β̂^W0.
pub fn solve_w_contrasts(
    d: &DesignedData,
    exposure: &JointExposureModel,
    baseline_w: &BaselineNcoModel,
    index: &IndexFunctions,
) -> Result<ContrastSet> {
    let mut theta = NuisanceTheta::zeros(d)?;
    theta.exposure = exposure.clone();
    theta.baseline_w = baseline_w.clone();
    theta.contrasts.index = index.clone();
    theta.contrasts.beta_w = solve_w(d, &theta, WRoute::DoublyRobust)?;
    Ok(theta.contrasts)
}

/// Doubly robust g-estimation of R given α̂, β̂^Y, β̂^W0 and the W contrasts.
pub fn solve_r_contrast(
    d: &DesignedData,
    exposure: &JointExposureModel,
    baseline_y: &BaselineOutcomeModel,
    baseline_w: &BaselineNcoModel,
    w_contrasts: &ContrastSet,
) -> Result<Vec<f64>> {
    let theta = NuisanceTheta {
        exposure: exposure.clone(),
        baseline_y: baseline_y.clone(),
        baseline_w: baseline_w.clone(),
        contrasts: w_contrasts.clone(),
    };
    solve_r(d, &theta, RRoute::DoublyRobust)
}

/// R from the exposure-model route: residual `Y - R Γ_W`, centered at E[·|A, X].
pub fn gest_r_m1(d: &DesignedData, exposure: &JointExposureModel, index: &IndexFunctions) -> Result<Vec<f64>> {
    let mut theta = NuisanceTheta::zeros(d)?;
    theta.exposure = exposure.clone();
    theta.contrasts.index = index.clone();
    solve_r(d, &theta, RRoute::ExposureOnly)
}

/// W contrasts from the exposure-model route: residual without baseline, centered at E[·|X].
pub fn gest_w_m2(d: &DesignedData, exposure: &JointExposureModel, index: &IndexFunctions) -> Result<ContrastSet> {
    let mut theta = NuisanceTheta::zeros(d)?;
    theta.exposure = exposure.clone();
    theta.contrasts.index = index.clone();
    theta.contrasts.beta_w = solve_w(d, &theta, WRoute::ExposureOnly)?;
    Ok(theta.contrasts)
}

/// R from the outcome-model route: uncentered index, baseline residual.
pub fn gest_r_m3(
    d: &DesignedData,
    baseline_y: &BaselineOutcomeModel,
    baseline_w: &BaselineNcoModel,
    w_contrasts: &ContrastSet,
) -> Result<Vec<f64>> {
    let mut theta = NuisanceTheta::zeros(d)?;
    theta.baseline_y = baseline_y.clone();
    theta.baseline_w = baseline_w.clone();
    theta.contrasts = w_contrasts.clone();
    solve_r(d, &theta, RRoute::OutcomeOnly)
}

/// Full-likelihood W model: baseline multinomial logit plus linear contrasts.
pub struct NcoFullModel<'r, 'a> {
    pub d: &'r DesignedData<'a>,
    pub baseline: &'r BaselineNcoModel,
    pub index: &'r IndexFunctions,
}

impl NcoFullModel<'_, '_> {
    /// Number of baseline coefficients.
    pub fn n_base(&self) -> usize {
        self.baseline.logit.n_params()
    }
}

impl MeanModel for NcoFullModel<'_, '_> {
    fn n_params(&self) -> usize {
        self.n_base() + self.index.kw * self.index.g0_dim()
    }

    fn n_obs(&self) -> usize {
        self.d.n()
    }

    fn k(&self) -> usize {
        self.index.kw
    }

    fn response(&self, i: usize) -> Response {
        Response::Category(self.d.gw[i])
    }

    fn eval(&self, i: usize, theta: &[f64], mean: &mut [f64], jac: &mut [f64]) {
        let d = self.d;
        let s = d.sample(i);
        let kw = self.index.kw;
        let qb = self.n_base();
        let q = self.n_params();
        let q0 = self.index.g0_dim();
        let row = d.nco_baseline.row(i, 0);
        let dim = row.len();
        self.baseline.gamma_mean_into(&theta[..qb], row, mean);
        jac.fill(0.0);
        // Softmax derivative of the baseline probabilities.
        for l in 0..kw {
            for r in 0..kw {
                let w = if l == r { mean[l] * (1.0 - mean[l]) } else { -mean[l] * mean[r] };
                for (t, x) in row.iter().enumerate() {
                    jac[l * q + r * dim + t] = w * x;
                }
            }
        }
        let mut g = vec![0.0; q0];
        self.index.g0_into(d, i, s.a, d.gz[i], &mut g);
        for l in 0..kw {
            let b = &theta[qb + l * q0..qb + (l + 1) * q0];
            mean[l] += dot(b, &g);
            jac[l * q + qb + l * q0..l * q + qb + (l + 1) * q0].copy_from_slice(&g);
        }
    }
}

/// Maximum-likelihood fit of the full E[Γ_W | A, Z, X] model; returns the baseline
/// model and the contrast coefficients.
pub fn fit_nco_full(d: &DesignedData, index: &IndexFunctions) -> Result<(BaselineNcoModel, Vec<f64>)> {
    let start = crate::nuisance::fit_baseline_nco(d).unwrap_or_else(|_| {
        BaselineNcoModel::zeros(&d.compiled.nco_baseline, d.data.w_coding.len(), d.data.w_coding.reference)
    });
    let model = NcoFullModel {
        d,
        baseline: &start,
        index,
    };
    let mut theta = start.logit.coef.clone();
    theta.extend(std::iter::repeat(0.0).take(index.kw * index.g0_dim()));
    fit_mean_model(&model, &mut theta, "full NCO model")?;
    let qb = model.n_base();
    let mut base = start.clone();
    base.logit.coef.copy_from_slice(&theta[..qb]);
    Ok((base, theta[qb..].to_vec()))
}
