//! The five ATE estimators, the influence-function evaluators and their stacked
//! estimating equations.
//!
//! Every estimator is the difference `Δ̂ = Δ̂_confounded - Δ̂_bias` of two sample means of
//! per-record contributions evaluated at fitted working models:
//!
//! | kind     | nuisance blocks                                   |
//! |----------|---------------------------------------------------|
//! | `delta1` | f(A, Z \| X), R by g-estimation                   |
//! | `delta2` | f(A, Z \| X), W contrasts by g-estimation         |
//! | `delta3` | full E[W \| A, Z, X], E[Y \| z0, A, X], R          |
//! | `mle`    | f(A, Z \| X), full E[W \| A, Z, X], full E[Y \| Z, A, X] |
//! | `mr`     | all of the above, doubly robust g-estimation       |

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Design, DesignedData};
use crate::error::{Error, Result};
use crate::gestimation::{
    default_index_functions, fit_nco_full, gest_r_m1, gest_r_m3, gest_w_m2, r_equation_terms,
    solve_r_contrast, solve_w_contrasts, w_equation_terms, IndexFunctions, NcoFullModel, NuisanceTheta, RRoute,
    WRoute,
};
use crate::glm::{fit_mean_model, mean_score_into, MeanModel, Response};
use crate::identify::bridge_row;
use crate::inference::{sandwich_variance, wald_interval, wald_test, Sandwich, StackedSystem};
use crate::linalg::{dot, mean, singular_values, solve};
use crate::nuisance::{
    fit_baseline_nco, fit_baseline_outcome, fit_joint_exposure, BaselineOutcomeModel, Link,
};
use crate::point::{gamma_position, PointNuisance};

/// Default floor on every inverse-weighted density.
pub const DENSITY_FLOOR: f64 = 1e-6;
/// Default floor on the smallest singular value of ξ(a, x).
pub const XI_FLOOR: f64 = 1e-6;
/// Default relative rank tolerance of the bridge solver.
pub const RANK_TOL: f64 = 1e-8;
/// Tolerance of [`reduction_check`].
pub const REDUCTION_TOL: f64 = 1e-10;

/// Estimator selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Delta1,
    Delta2,
    Delta3,
    Mle,
    Mr,
}

impl EstimatorKind {
    /// Every estimator in report order.
    pub const ALL: [EstimatorKind; 5] = [Self::Delta1, Self::Delta2, Self::Delta3, Self::Mle, Self::Mr];

    /// Report tag.
    pub fn tag(self) -> &'static str {
        match self {
            Self::Delta1 => "delta1",
            Self::Delta2 => "delta2",
            Self::Delta3 => "delta3",
            Self::Mle => "mle",
            Self::Mr => "mr",
        }
    }

    /// Parse a report tag.
    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.tag() == s)
            .ok_or_else(|| Error::Validation(format!("unknown estimator `{s}`")))
    }

    /// Whether the estimator uses inverse probability weights.
    pub fn uses_weights(self) -> bool {
        matches!(self, Self::Delta1 | Self::Delta2 | Self::Mr)
    }
}

/// Numerical options shared by every estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub level: f64,
    pub density_floor: f64,
    pub xi_floor: f64,
    pub rank_tol: f64,
    /// Compute sandwich standard errors.
    pub sandwich: bool,
    /// Truncate inverse weights at this quantile of the fitted 1/f(A | Z, X); off when `None`.
    #[serde(default)]
    pub weight_truncation: Option<f64>,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            level: 0.95,
            density_floor: DENSITY_FLOOR,
            xi_floor: XI_FLOOR,
            rank_tol: RANK_TOL,
            sandwich: true,
            weight_truncation: None,
        }
    }
}

/// The observed values of one record in indicator coding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Record {
    pub y: f64,
    pub a: u8,
    /// Z level index.
    pub z: usize,
    /// Non-reference position of Z (`None` = z0).
    pub gz: Option<usize>,
    /// Non-reference position of W (`None` = w0).
    pub gw: Option<usize>,
}

impl Record {
    /// Record `i` of `d`.
    pub fn of(d: &DesignedData, i: usize) -> Self {
        let s = d.sample(i);
        Self {
            y: s.y,
            a: s.a,
            z: s.z,
            gz: d.gz[i],
            gw: d.gw[i],
        }
    }
}

#[inline]
fn indicator(g: Option<usize>, i: usize) -> f64 {
    if g == Some(i) {
        1.0
    } else {
        0.0
    }
}

/// Uncentered EIF of Δ_confounded:
/// `(2a-1)/f(a|z,x) (y - E[Y|a,z,x]) + E[Y|1,z,x] - E[Y|0,z,x]`.
pub fn eif_confounded(r: &Record, pn: &PointNuisance) -> f64 {
    let w = pn.exposure.inv_a_given_z(r.a, r.z);
    let sign = 2.0 * r.a as f64 - 1.0;
    sign * w * (r.y - pn.y_mean(r.a, r.gz)) + pn.y_mean(1, r.gz) - pn.y_mean(0, r.gz)
}

/// Uncentered EIF of Δ_bias, selecting the scalar form when |Z| = |W| = 2.
pub fn eif_bias(r: &Record, pn: &PointNuisance, xi_floor: f64) -> Result<f64> {
    if pn.kz == 1 && pn.kw == 1 {
        eif_bias_binary(r, pn, xi_floor)
    } else {
        eif_bias_general(r, pn, xi_floor)
    }
}

/// Scalar EIF of Δ_bias for binary Z and W, with the second term's residual taken
/// against the full mean E[Y | Z, A, X] minus R (W - E[W | A, Z, X]).
pub fn eif_bias_binary(r: &Record, pn: &PointNuisance, xi_floor: f64) -> Result<f64> {
    let t = &pn.exposure;
    let (a, z) = (r.a, r.z);
    let na = 1 - a;
    let w = if r.gw.is_some() { 1.0 } else { 0.0 };
    let zi = if r.gz.is_some() { 1.0 } else { 0.0 };
    let sign = 2.0 * a as f64 - 1.0;
    let ew = pn.w_mean_entry(a, r.gz, 0);
    let ey = pn.y_mean(a, r.gz);
    let r_given_z = t.a_given_z(0, z) * pn.ratio[1][0] + t.a_given_z(1, z) * pn.ratio[0][0];
    let delta_bar = delta_given_a_scalar(pn, na);
    let t1 = r_given_z * sign * t.inv_a_given_z(a, z) * (w - ew);
    let t2 = if delta_bar == 0.0 {
        0.0
    } else {
        let xi = pn.xi_entry(a, 0, 0);
        if xi.abs() < xi_floor {
            return Err(Error::WeakNegativeControls(xi.abs()));
        }
        (2.0 * zi - 1.0) * t.inv_z_given_a(z, a)
            * (r.y - ey - pn.ratio[a as usize][0] * (w - ew))
            * delta_bar
            / xi
            * t.a_marginal(na)
            * t.inv_a_marginal(a)
    };
    let t3 = pn.ratio[na as usize][0] * pn.delta_entry(r.gz, 0);
    Ok(t1 + t2 + t3)
}

fn delta_given_a_scalar(pn: &PointNuisance, a: u8) -> f64 {
    (0..=pn.kz)
        .map(|z| pn.delta_entry(gamma_position(z, pn.z_ref), 0) * pn.exposure.z_given_a(z, a))
        .sum()
}

/// Per-record pieces of the polytomous EIF of Δ_bias.
#[derive(Clone, Debug, PartialEq)]
pub struct EifTerms {
    pub confounded: f64,
    pub bias: f64,
    /// `confounded - bias`.
    pub delta: f64,
    /// E[R(1 - A, X) | Z = z, X].
    pub ratio_given_z: Vec<f64>,
    /// E[δ(Z, X) | A = 1 - a, X].
    pub delta_given_other_arm: Vec<f64>,
    /// Π(z | a, x): `1(z = z_j)/f(z_j|a,x) - 1(z = z0)/f(z0|a,x)`.
    pub pi: Vec<f64>,
    pub gamma_w: Vec<f64>,
    pub gamma_z: Vec<f64>,
}

/// Polytomous EIF of Δ_bias:
///
/// ```text
/// E[R(1-A)|z,x]ᵀ (Γ_W - E[Γ_W|a,z,x]) (2a-1)/f(a|z,x)
///   + Πᵀ ξ(a,x)⁻¹ E[δ|1-a,x] f(1-a|x)/f(a|x) (y - E[Y|z0,a,x] - R(a,x)(Γ_W - E[Γ_W|z0,a,x]))
///   + R(1-a,x) δ(z,x)
/// ```
pub fn eif_bias_general(r: &Record, pn: &PointNuisance, xi_floor: f64) -> Result<f64> {
    Ok(eif_general(r, pn, true, xi_floor)?.bias)
}

/// Polytomous EIF terms, with the inverse weights optionally replaced by zero.
pub fn eif_terms(r: &Record, pn: &PointNuisance, xi_floor: f64) -> Result<EifTerms> {
    eif_general(r, pn, true, xi_floor)
}

fn eif_general(r: &Record, pn: &PointNuisance, weights: bool, xi_floor: f64) -> Result<EifTerms> {
    let t = &pn.exposure;
    let (kz, kw) = (pn.kz, pn.kw);
    let (a, z) = (r.a, r.z);
    let na = 1 - a;
    let sign = 2.0 * a as f64 - 1.0;
    let ipw = if weights { sign * t.inv_a_given_z(a, z) } else { 0.0 };
    let confounded = ipw * (r.y - pn.y_mean(a, r.gz)) + pn.y_mean(1, r.gz) - pn.y_mean(0, r.gz);

    let gamma_w: Vec<f64> = (0..kw).map(|i| indicator(r.gw, i)).collect();
    let gamma_z: Vec<f64> = (0..kz).map(|j| indicator(r.gz, j)).collect();
    let ratio_given_z = pn.ratio_given_z(z);
    let mut t1 = 0.0;
    for i in 0..kw {
        t1 += ratio_given_z[i] * (gamma_w[i] - pn.w_mean_entry(a, r.gz, i));
    }
    t1 *= ipw;

    let pi: Vec<f64> = if weights {
        let ref_term = if r.gz.is_none() { t.inv_z_given_a(pn.z_ref, a) } else { 0.0 };
        (0..kz)
            .map(|j| {
                let zj = crate::point::level_of_position(j, pn.z_ref);
                indicator(r.gz, j) * t.inv_z_given_a(zj, a) - ref_term
            })
            .collect()
    } else {
        vec![0.0; kz]
    };
    let delta_bar = pn.delta_given_a(na);
    let t2 = if delta_bar.iter().all(|v| *v == 0.0) || pi.iter().all(|v| *v == 0.0) {
        0.0
    } else {
        if kz != kw {
            return Err(Error::Validation(format!(
                "the bias influence function needs |Z| = |W| (found {} and {})",
                kz + 1,
                kw + 1
            )));
        }
        let xi = pn.xi(a);
        let smin = singular_values(&xi).last().copied().unwrap_or(0.0);
        if smin < xi_floor {
            return Err(Error::WeakNegativeControls(smin));
        }
        let v = solve(&xi, &delta_bar, "ξ(a, x)")?;
        let ratio_a = &pn.ratio[a as usize];
        let mut res = r.y - pn.y_base[a as usize];
        for i in 0..kw {
            res -= ratio_a[i] * (gamma_w[i] - pn.w_base[i] - a as f64 * pn.delta0[i]);
        }
        let piv: f64 = pi.iter().zip(v.iter()).map(|(p, x)| p * x).sum();
        piv * t.a_marginal(na) * t.inv_a_marginal(a) * res
    };
    let mut t3 = 0.0;
    for i in 0..kw {
        t3 += pn.ratio[na as usize][i] * pn.delta_entry(r.gz, i);
    }
    let bias = t1 + t2 + t3;
    Ok(EifTerms {
        confounded,
        bias,
        delta: confounded - bias,
        ratio_given_z: ratio_given_z.iter().copied().collect(),
        delta_given_other_arm: delta_bar.iter().copied().collect(),
        pi,
        gamma_w,
        gamma_z,
    })
}

/// Components of the multiply robust contributions that can be set to zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Zeroing {
    /// E[Y | Z = z0, A, X].
    pub y_baseline: bool,
    /// The whole E[W | A, Z, X] (baseline and contrasts).
    pub w_mean: bool,
    /// E[W | A = 0, Z = z0, X] only.
    pub w_baseline: bool,
    /// R(A, X).
    pub ratio: bool,
    /// 1/f(A | Z, X) and 1/f(Z | A, X).
    pub inverse_weights: bool,
}

/// Multiply robust contributions `(confounded, bias)` with components zeroed.
pub fn zeroed_contributions(r: &Record, pn: &PointNuisance, zero: Zeroing, xi_floor: f64) -> Result<(f64, f64)> {
    let mut p = pn.clone();
    if zero.y_baseline {
        p.y_base = [0.0; 2];
    }
    if zero.w_mean {
        for v in p.w_base.iter_mut().chain(&mut p.delta0).chain(&mut p.xi0).chain(&mut p.eta) {
            *v = 0.0;
        }
    }
    if zero.w_baseline {
        p.w_base.fill(0.0);
    }
    if zero.ratio {
        p.ratio[0].fill(0.0);
        p.ratio[1].fill(0.0);
    }
    let e = eif_general(r, &p, !zero.inverse_weights, xi_floor)?;
    Ok((e.confounded, e.bias))
}

/// Δ̂₁ contributions: `(2a-1) y / f(a|z,x)` and `E[R(1-A)|z,x]ᵀ Γ_W (2a-1)/f(a|z,x)`.
pub fn delta1_contributions(r: &Record, pn: &PointNuisance) -> (f64, f64) {
    let w = (2.0 * r.a as f64 - 1.0) * pn.exposure.inv_a_given_z(r.a, r.z);
    let rz = pn.ratio_given_z(r.z);
    let bias = r.gw.map_or(0.0, |i| rz[i]) * w;
    (w * r.y, bias)
}

/// Δ̂₂ contributions: `(2a-1) y / f(a|z,x)` and
/// `Πᵀ ξ(a,x)⁻¹ E[δ|1-a,x] f(1-a|x)/f(a|x) y`.
pub fn delta2_contributions(r: &Record, pn: &PointNuisance, xi_floor: f64) -> Result<(f64, f64)> {
    let w = (2.0 * r.a as f64 - 1.0) * pn.exposure.inv_a_given_z(r.a, r.z);
    Ok((w * r.y, delta2_bias(r, pn, xi_floor)?))
}

/// Δ̂₃ contributions: `E[Y|1,z,x] - E[Y|0,z,x]` and `R(1-a,x) δ(z,x)`.
pub fn delta3_contributions(r: &Record, pn: &PointNuisance) -> (f64, f64) {
    let conf = pn.y_mean(1, r.gz) - pn.y_mean(0, r.gz);
    let na = (1 - r.a) as usize;
    let bias = (0..pn.kw).map(|i| pn.ratio[na][i] * pn.delta_entry(r.gz, i)).sum();
    (conf, bias)
}

/// Plug-in contributions at one `x`: `Σ_{a,z} f(a,z|x) (E[Y|1,z,x] - E[Y|0,z,x])` and that
/// value minus `[h(1,x) - h(0,x)] P(W|x)` with `h` solving the bridge equation on the
/// model-implied P(W | Z, a, x). `ey[a][z]` is indexed by Z level.
pub fn plugin_contributions(pn: &PointNuisance, ey: &[Vec<f64>; 2], rank_tol: f64) -> Result<(f64, f64)> {
    let t = &pn.exposure;
    let nz = pn.kz + 1;
    let nw = pn.kw + 1;
    let mut conf = 0.0;
    for z in 0..nz {
        conf += (t.joint(0, z) + t.joint(1, z)) * (ey[1][z] - ey[0][z]);
    }
    let mut p = [DMatrix::zeros(nw, nz), DMatrix::zeros(nw, nz)];
    let mut p_w = DVector::zeros(nw);
    for a in 0..2u8 {
        let pa = &mut p[a as usize];
        for z in 0..nz {
            let gz = gamma_position(z, pn.z_ref);
            let f = t.joint(a, z);
            let mut rest = 1.0;
            for i in 0..pn.kw {
                let v = pn.w_mean_entry(a, gz, i);
                pa[(i, z)] = v;
                rest -= v;
            }
            pa[(pn.kw, z)] = rest;
            for i in 0..nw {
                p_w[i] += pa[(i, z)] * f;
            }
        }
    }
    let mut delta = 0.0;
    for a in 0..2u8 {
        let h = bridge_row(&DVector::from_column_slice(&ey[a as usize]), &p[a as usize], rank_tol)?.0;
        let ya = h.dot(&p_w);
        delta += if a == 1 { ya } else { -ya };
    }
    Ok((conf, conf - delta))
}

/// Full outcome model E[Y | Z, A, X] = E[Y | z0, A, X] + Σ_j 1(Z = z_j) d_R(A, X)ᵀ b_j.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeFullModel {
    pub baseline: BaselineOutcomeModel,
    pub slope_design: Design,
    pub kz: usize,
    /// Baseline coefficients followed by `kz` slope blocks.
    pub coef: Vec<f64>,
}

impl OutcomeFullModel {
    fn n_base(&self) -> usize {
        self.baseline.coef.len()
    }

    /// E[Y | Z level at position `gz`, A = a] for record `i` at coefficients `p`.
    pub fn mean(&self, p: &[f64], d: &DesignedData, i: usize, a: u8, gz: Option<usize>) -> f64 {
        let qb = self.n_base();
        let pr = self.slope_design.dim();
        let base = self.baseline.mean_row(&p[..qb], d.outcome.row(i, a));
        base + gz.map_or(0.0, |j| dot(&p[qb + j * pr..qb + (j + 1) * pr], d.ratio.row(i, a)))
    }

    /// `ey[a][z]` for record `i`, indexed by Z level.
    pub fn table(&self, p: &[f64], d: &DesignedData, i: usize) -> [Vec<f64>; 2] {
        let z_ref = d.data.z_coding.reference;
        let nz = self.kz + 1;
        let row = |a: u8| (0..nz).map(|z| self.mean(p, d, i, a, gamma_position(z, z_ref))).collect();
        [row(0), row(1)]
    }
}

struct OutcomeFullFit<'r, 'a> {
    d: &'r DesignedData<'a>,
    model: &'r OutcomeFullModel,
    binary: bool,
}

impl MeanModel for OutcomeFullFit<'_, '_> {
    fn n_params(&self) -> usize {
        self.model.coef.len()
    }

    fn n_obs(&self) -> usize {
        self.d.n()
    }

    fn k(&self) -> usize {
        1
    }

    fn response(&self, i: usize) -> Response {
        let y = self.d.sample(i).y;
        if self.binary {
            Response::Category(if y == 1.0 { Some(0) } else { None })
        } else {
            Response::Real(y)
        }
    }

    fn eval(&self, i: usize, theta: &[f64], mean: &mut [f64], jac: &mut [f64]) {
        let d = self.d;
        let m = self.model;
        let s = d.sample(i);
        let qb = m.n_base();
        let pr = m.slope_design.dim();
        let row = d.outcome.row(i, s.a);
        let eta = dot(&theta[..qb], row);
        let deriv = m.baseline.link.derivative(eta);
        mean[0] = m.mean(theta, d, i, s.a, d.gz[i]);
        jac.fill(0.0);
        for (o, x) in jac[..qb].iter_mut().zip(row) {
            *o = deriv * x;
        }
        if let Some(j) = d.gz[i] {
            jac[qb + j * pr..qb + (j + 1) * pr].copy_from_slice(d.ratio.row(i, s.a));
        }
    }
}

/// Maximum-likelihood fit of the full outcome model (Bernoulli for binary Y, Gaussian otherwise).
pub fn fit_outcome_full(d: &DesignedData) -> Result<OutcomeFullModel> {
    let baseline = fit_baseline_outcome(d)?;
    let kz = d.kz();
    let slope_design = d.compiled.ratio.clone();
    let mut coef = baseline.coef.clone();
    coef.extend(std::iter::repeat(0.0).take(kz * slope_design.dim()));
    let mut model = OutcomeFullModel {
        baseline,
        slope_design,
        kz,
        coef,
    };
    let binary = model.baseline.link == Link::Logit;
    let mut theta = model.coef.clone();
    fit_mean_model(
        &OutcomeFullFit {
            d,
            model: &model,
            binary,
        },
        &mut theta,
        "full outcome model",
    )?;
    let qb = model.n_base();
    model.baseline.coef.copy_from_slice(&theta[..qb]);
    model.coef = theta;
    Ok(model)
}

/// Parameter blocks of a stacked estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Exposure,
    BaselineY,
    BaselineW,
    WContrasts(WRoute),
    NcoFull,
    Ratio(RRoute),
    OutcomeFull,
}

impl Block {
    /// Blocks fitted by maximum likelihood, whose Jacobian rows are analytic.
    pub fn is_likelihood(self) -> bool {
        matches!(self, Block::Exposure | Block::BaselineY | Block::BaselineW)
    }

    /// Whether the estimating equations of `self` involve the coefficients of `other`.
    pub fn depends_on(self, other: Block) -> bool {
        use Block::*;
        let other_tag = std::mem::discriminant(&other);
        let same = std::mem::discriminant(&self) == other_tag;
        match self {
            Exposure | BaselineY | BaselineW | NcoFull | OutcomeFull => same,
            WContrasts(_) => same || matches!(other, Exposure | BaselineW),
            Ratio(_) => true,
        }
    }
}

/// An estimator with all its working models fitted.
#[derive(Clone, Debug)]
pub struct FittedEstimator<'r, 'a> {
    pub kind: EstimatorKind,
    pub d: &'r DesignedData<'a>,
    pub theta: NuisanceTheta,
    pub outcome_full: Option<OutcomeFullModel>,
    pub options: EstimatorOptions,
    pub blocks: Vec<Block>,
    /// Density bound implied by `weight_truncation`, fixed at θ̂; 0 when off.
    pub weight_floor: f64,
}

/// Fitted models with their serialized coefficients, reproducing a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaSnapshot {
    pub nuisance: NuisanceTheta,
    pub outcome_full: Option<OutcomeFullModel>,
}

/// Fit every working model an estimator needs, in pipeline order.
pub fn fit_estimator<'r, 'a>(
    d: &'r DesignedData<'a>,
    kind: EstimatorKind,
    options: &EstimatorOptions,
) -> Result<FittedEstimator<'r, 'a>> {
    let index: IndexFunctions = default_index_functions(&d.compiled, d.kz(), d.kw())?;
    let mut theta = NuisanceTheta::zeros(d)?;
    theta.contrasts.index = index.clone();
    let mut outcome_full = None;
    let blocks = match kind {
        EstimatorKind::Delta1 => {
            theta.exposure = fit_joint_exposure(d)?;
            theta.contrasts.beta_r = gest_r_m1(d, &theta.exposure, &index)?;
            vec![Block::Exposure, Block::Ratio(RRoute::ExposureOnly)]
        }
        EstimatorKind::Delta2 => {
            theta.exposure = fit_joint_exposure(d)?;
            theta.contrasts = gest_w_m2(d, &theta.exposure, &index)?;
            vec![Block::Exposure, Block::WContrasts(WRoute::ExposureOnly)]
        }
        EstimatorKind::Delta3 => {
            let (base, beta_w) = fit_nco_full(d, &index)?;
            theta.baseline_w = base;
            theta.contrasts.beta_w = beta_w;
            theta.baseline_y = fit_baseline_outcome(d)?;
            theta.contrasts.beta_r = gest_r_m3(d, &theta.baseline_y, &theta.baseline_w, &theta.contrasts)?;
            vec![Block::NcoFull, Block::BaselineY, Block::Ratio(RRoute::OutcomeOnly)]
        }
        EstimatorKind::Mle => {
            theta.exposure = fit_joint_exposure(d)?;
            let (base, beta_w) = fit_nco_full(d, &index)?;
            theta.baseline_w = base;
            theta.contrasts.beta_w = beta_w;
            outcome_full = Some(fit_outcome_full(d)?);
            vec![Block::Exposure, Block::NcoFull, Block::OutcomeFull]
        }
        EstimatorKind::Mr => {
            theta.exposure = fit_joint_exposure(d)?;
            theta.baseline_y = fit_baseline_outcome(d)?;
            theta.baseline_w = fit_baseline_nco(d)?;
            theta.contrasts = solve_w_contrasts(d, &theta.exposure, &theta.baseline_w, &index)?;
            theta.contrasts.beta_r =
                solve_r_contrast(d, &theta.exposure, &theta.baseline_y, &theta.baseline_w, &theta.contrasts)?;
            vec![
                Block::Exposure,
                Block::BaselineY,
                Block::BaselineW,
                Block::WContrasts(WRoute::DoublyRobust),
                Block::Ratio(RRoute::DoublyRobust),
            ]
        }
    };
    let mut fitted = FittedEstimator {
        kind,
        d,
        theta,
        outcome_full,
        options: options.clone(),
        blocks,
        weight_floor: 0.0,
    };
    if kind.uses_weights() {
        fitted.check_density_floor()?;
    }
    if let Some(q) = options.weight_truncation {
        fitted.weight_floor = fitted.truncation_floor(q)?;
    }
    Ok(fitted)
}

impl FittedEstimator<'_, '_> {
    fn block_len(&self, b: Block) -> usize {
        match b {
            Block::Exposure => self.theta.exposure.n_params(),
            Block::BaselineY => self.theta.baseline_y.coef.len(),
            Block::BaselineW => self.theta.baseline_w.logit.coef.len(),
            Block::WContrasts(_) => self.theta.contrasts.beta_w.len(),
            Block::NcoFull => self.theta.baseline_w.logit.coef.len() + self.theta.contrasts.beta_w.len(),
            Block::Ratio(_) => self.theta.contrasts.beta_r.len(),
            Block::OutcomeFull => self.outcome_full.as_ref().map_or(0, |m| m.coef.len()),
        }
    }

    /// Stacked nuisance coefficients in block order.
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for &b in &self.blocks {
            match b {
                Block::Exposure => out.extend(self.theta.exposure.params()),
                Block::BaselineY => out.extend(&self.theta.baseline_y.coef),
                Block::BaselineW => out.extend(&self.theta.baseline_w.logit.coef),
                Block::WContrasts(_) => out.extend(&self.theta.contrasts.beta_w),
                Block::NcoFull => {
                    out.extend(&self.theta.baseline_w.logit.coef);
                    out.extend(&self.theta.contrasts.beta_w);
                }
                Block::Ratio(_) => out.extend(&self.theta.contrasts.beta_r),
                Block::OutcomeFull => out.extend(&self.outcome_full.as_ref().expect("fitted").coef),
            }
        }
        out
    }

    /// Copy of `self` with the stacked coefficients replaced by `p`.
    pub fn with_params(&self, p: &[f64]) -> Self {
        let mut out = self.clone();
        let mut o = 0;
        for &b in &self.blocks {
            let len = self.block_len(b);
            let v = &p[o..o + len];
            match b {
                Block::Exposure => out.theta.exposure.set_params(v),
                Block::BaselineY => out.theta.baseline_y.coef.copy_from_slice(v),
                Block::BaselineW => out.theta.baseline_w.logit.coef.copy_from_slice(v),
                Block::WContrasts(_) => out.theta.contrasts.beta_w.copy_from_slice(v),
                Block::NcoFull => {
                    let qb = out.theta.baseline_w.logit.coef.len();
                    out.theta.baseline_w.logit.coef.copy_from_slice(&v[..qb]);
                    out.theta.contrasts.beta_w.copy_from_slice(&v[qb..]);
                }
                Block::Ratio(_) => out.theta.contrasts.beta_r.copy_from_slice(v),
                Block::OutcomeFull => {
                    let m = out.outcome_full.as_mut().expect("fitted");
                    let qb = m.baseline.coef.len();
                    m.coef.copy_from_slice(v);
                    m.baseline.coef.copy_from_slice(&v[..qb]);
                }
            }
            o += len;
        }
        out
    }

    /// Serializable snapshot of the fitted models.
    pub fn snapshot(&self) -> ThetaSnapshot {
        ThetaSnapshot {
            nuisance: self.theta.clone(),
            outcome_full: self.outcome_full.clone(),
        }
    }

    /// Work buffer for per-record working-model values, carrying the weight floor.
    pub fn point_buffer(&self) -> PointNuisance {
        let mut pn = self.theta.point_buffer(self.d);
        pn.exposure.weight_floor = self.weight_floor;
        pn
    }

    /// The `1 - q` quantile of the fitted f(A_i | Z_i, X_i), so that no weight exceeds the
    /// `q` quantile of the fitted 1/f(A_i | Z_i, X_i).
    fn truncation_floor(&self, q: f64) -> Result<f64> {
        if !(q > 0.5 && q <= 1.0) {
            return Err(Error::Validation(format!("weight truncation quantile {q} must lie in (0.5, 1]")));
        }
        let d = self.d;
        let mut pn = self.theta.point_buffer(d);
        let mut f: Vec<f64> = (0..d.n())
            .map(|i| {
                self.theta.point_into(d, i, &mut pn);
                let s = d.sample(i);
                pn.exposure.a_given_z(s.a, s.z)
            })
            .collect();
        f.sort_by(f64::total_cmp);
        let k = ((1.0 - q) * (f.len() - 1) as f64).floor() as usize;
        Ok(f[k])
    }

    fn check_density_floor(&self) -> Result<()> {
        let d = self.d;
        let floor = self.options.density_floor;
        let mut pn = self.theta.point_buffer(d);
        let mut rows = Vec::new();
        for i in 0..d.n() {
            self.theta.point_into(d, i, &mut pn);
            let t = &pn.exposure;
            let low = (0..t.nz).any(|z| {
                (0..2u8).any(|a| t.a_given_z(a, z) < floor || t.z_given_a(z, a) < floor || t.a_marginal(a) < floor)
            });
            if low {
                rows.push(i);
            }
        }
        if rows.is_empty() {
            Ok(())
        } else {
            rows.truncate(20);
            Err(Error::DensityFloor { floor, rows })
        }
    }

    /// Per-record `(confounded, bias)` contributions at the fitted models.
    pub fn contributions(&self) -> Result<Vec<(f64, f64)>> {
        let d = self.d;
        let mut pn = self.point_buffer();
        (0..d.n())
            .map(|i| {
                self.theta.point_into(d, i, &mut pn);
                self.target_at(i, &pn)
            })
            .collect()
    }

    fn target_at(&self, i: usize, pn: &PointNuisance) -> Result<(f64, f64)> {
        let r = Record::of(self.d, i);
        let xf = self.options.xi_floor;
        match self.kind {
            EstimatorKind::Delta1 => Ok(delta1_contributions(&r, pn)),
            EstimatorKind::Delta2 => delta2_contributions(&r, pn, xf),
            EstimatorKind::Delta3 => Ok(delta3_contributions(&r, pn)),
            EstimatorKind::Mr => Ok((eif_confounded(&r, pn), eif_bias(&r, pn, xf)?)),
            EstimatorKind::Mle => {
                let m = self.outcome_full.as_ref().expect("fitted");
                plugin_contributions(pn, &m.table(&m.coef, self.d, i), self.options.rank_tol)
            }
        }
    }

    /// `(Δ̂_confounded, Δ̂_bias)`.
    pub fn point_estimates(&self) -> Result<(f64, f64)> {
        let c = self.contributions()?;
        let conf: Vec<f64> = c.iter().map(|v| v.0).collect();
        let bias: Vec<f64> = c.iter().map(|v| v.1).collect();
        Ok((mean(&conf), mean(&bias)))
    }
}

impl StackedSystem for FittedEstimator<'_, '_> {
    fn n_obs(&self) -> usize {
        self.d.n()
    }

    fn params(&self) -> Vec<f64> {
        self.param_vector()
    }

    fn n_targets(&self) -> usize {
        2
    }

    fn evaluate(&self, p: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
        self.evaluate_rows(p, &vec![true; self.blocks.len()], out)
    }

    fn evaluate_perturbed(&self, p: &[f64], j: usize, out: &mut DMatrix<f64>) -> Result<()> {
        let mut o = 0;
        let mut moved = self.blocks[0];
        for &b in &self.blocks {
            let len = self.block_len(b);
            if (o..o + len).contains(&j) {
                moved = b;
            }
            o += len;
        }
        let active: Vec<bool> = self
            .blocks
            .iter()
            .map(|&b| !b.is_likelihood() && b.depends_on(moved))
            .collect();
        self.evaluate_rows(p, &active, out)
    }

    fn analytic_blocks(&self) -> Vec<(usize, DMatrix<f64>)> {
        let d = self.d;
        let n = d.n() as f64;
        let mut out = Vec::new();
        let mut o = 0;
        for &b in &self.blocks {
            let info = match b {
                Block::Exposure => Some(self.theta.exposure.information(d)),
                Block::BaselineY => Some(self.theta.baseline_y.information(d)),
                Block::BaselineW => Some(self.theta.baseline_w.information(d)),
                _ => None,
            };
            if let Some(info) = info {
                out.push((o, -info / n));
            }
            o += self.block_len(b);
        }
        out
    }
}

impl FittedEstimator<'_, '_> {
    /// Stacked columns with the score rows of inactive blocks left untouched.
    fn evaluate_rows(&self, p: &[f64], active: &[bool], out: &mut DMatrix<f64>) -> Result<()> {
        let fe = self.with_params(p);
        let d = self.d;
        let th = &fe.theta;
        let ix = &th.contrasts.index;
        let q = p.len();
        let q0 = ix.g0_dim();
        let (mut gc, mut g, mut resp) = (vec![0.0; q0], vec![0.0; q0], vec![0.0; ix.kw]);
        let qr = ix.ratio_params();
        let (mut rc, mut reg) = (vec![0.0; qr], vec![0.0; qr]);
        let exposure_params = th.exposure.params();
        let mut pn = th.point_buffer(d);
        pn.exposure.weight_floor = fe.weight_floor;
        let mut col = vec![0.0; q];
        let nco_full_params: Vec<f64> =
            th.baseline_w.logit.coef.iter().chain(&th.contrasts.beta_w).copied().collect();
        let nco_model = NcoFullModel {
            d,
            baseline: &th.baseline_w,
            index: ix,
        };
        let mut nmean = vec![0.0; ix.kw];
        let mut njac = vec![0.0; ix.kw * nco_full_params.len()];
        let yfit = fe.outcome_full.as_ref().map(|m| OutcomeFullFit {
            d,
            model: m,
            binary: m.baseline.link == Link::Logit,
        });
        let mut ymean = [0.0];
        let mut yjac = vec![0.0; fe.outcome_full.as_ref().map_or(0, |m| m.coef.len())];
        for i in 0..d.n() {
            th.point_into(d, i, &mut pn);
            let mut o = 0;
            for (&b, &on) in fe.blocks.iter().zip(active) {
                let len = fe.block_len(b);
                if !on {
                    o += len;
                    continue;
                }
                let slot = &mut col[o..o + len];
                match b {
                    Block::Exposure => th.exposure.score_into(&exposure_params, d, i, slot),
                    Block::BaselineY => th.baseline_y.score_into(&th.baseline_y.coef, d, i, slot),
                    Block::BaselineW => th.baseline_w.score_into(&th.baseline_w.logit.coef, d, i, slot),
                    Block::WContrasts(route) => {
                        w_equation_terms(ix, d, i, &pn, route, &mut gc, &mut g, &mut resp);
                        for l in 0..ix.kw {
                            let e = resp[l] - dot(&g, &th.contrasts.beta_w[l * q0..(l + 1) * q0]);
                            for r in 0..q0 {
                                slot[l * q0 + r] = gc[r] * e;
                            }
                        }
                    }
                    Block::Ratio(route) => {
                        let y = r_equation_terms(ix, d, i, &pn, route, &mut rc, &mut reg);
                        let e = y - dot(&reg, &th.contrasts.beta_r);
                        for r in 0..qr {
                            slot[r] = rc[r] * e;
                        }
                    }
                    Block::NcoFull => {
                        mean_score_into(&nco_model, i, &nco_full_params, &mut nmean, &mut njac, slot)
                    }
                    Block::OutcomeFull => {
                        let m = fe.outcome_full.as_ref().expect("fitted");
                        mean_score_into(yfit.as_ref().expect("fitted"), i, &m.coef, &mut ymean, &mut yjac, slot)
                    }
                }
                o += len;
            }
            let (c, b) = fe.target_at(i, &pn)?;
            let mut o = 0;
            for (&blk, &on) in fe.blocks.iter().zip(active) {
                let len = fe.block_len(blk);
                if on {
                    for r in o..o + len {
                        out[(r, i)] = col[r];
                    }
                }
                o += len;
            }
            out[(q, i)] = c;
            out[(q + 1, i)] = b;
        }
        Ok(())
    }
}

/// An estimate with its decomposition and Wald inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    /// One of `delta1`, `delta2`, `delta3`, `mle`, `mr`, `gmm`.
    pub estimator: String,
    pub estimate: f64,
    pub confounded: Option<f64>,
    pub bias: Option<f64>,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
    pub confounded_se: Option<f64>,
    pub confounded_ci: Option<(f64, f64)>,
    pub bias_se: Option<f64>,
    pub bias_ci: Option<(f64, f64)>,
    pub level: f64,
    pub n: usize,
    /// Condition number of the sandwich bread matrix.
    pub condition: Option<f64>,
    /// Fitted working models.
    pub theta: Option<ThetaSnapshot>,
}

impl EstimateReport {
    /// TSV header matching [`EstimateReport::tsv_row`].
    pub fn tsv_header() -> &'static str {
        "estimator\testimate\tse\tci_lower\tci_upper\tp_value\tconfounded\tconfounded_ci_lower\tconfounded_ci_upper\tbias\tbias_ci_lower\tbias_ci_upper\tlevel\tn"
    }

    /// One TSV row; missing values are empty fields.
    pub fn tsv_row(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.10e}"));
        let lo = |v: Option<(f64, f64)>| f(v.map(|c| c.0));
        let hi = |v: Option<(f64, f64)>| f(v.map(|c| c.1));
        [
            self.estimator.clone(),
            f(Some(self.estimate)),
            f(self.se),
            lo(self.ci),
            hi(self.ci),
            f(self.p_value),
            f(self.confounded),
            lo(self.confounded_ci),
            hi(self.confounded_ci),
            f(self.bias),
            lo(self.bias_ci),
            hi(self.bias_ci),
            self.level.to_string(),
            self.n.to_string(),
        ]
        .join("\t")
    }
}

/// Output of [`estimate`]: the report, the sandwich (when requested) and the per-record
/// influence values of Δ̂.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub report: EstimateReport,
    pub sandwich: Option<Sandwich>,
    pub influence: Option<Vec<f64>>,
}

/// Fit and run one estimator.
pub fn estimate(d: &DesignedData, kind: EstimatorKind, options: &EstimatorOptions) -> Result<Estimate> {
    let fitted = fit_estimator(d, kind, options)?;
    let mut report = EstimateReport {
        estimator: kind.tag().to_string(),
        estimate: f64::NAN,
        confounded: None,
        bias: None,
        se: None,
        ci: None,
        p_value: None,
        confounded_se: None,
        confounded_ci: None,
        bias_se: None,
        bias_ci: None,
        level: options.level,
        n: d.n(),
        condition: None,
        theta: Some(fitted.snapshot()),
    };
    if !options.sandwich {
        let (c, b) = fitted.point_estimates()?;
        report.confounded = Some(c);
        report.bias = Some(b);
        report.estimate = c - b;
        return Ok(Estimate {
            report,
            sandwich: None,
            influence: None,
        });
    }
    let s = sandwich_variance(&fitted)?;
    let (c, b) = (s.targets[0], s.targets[1]);
    report.confounded = Some(c);
    report.bias = Some(b);
    report.estimate = c - b;
    report.condition = Some(s.condition);
    let diff = [1.0, -1.0];
    let se = s.contrast_se(&diff);
    report.se = Some(se);
    report.ci = wald_interval(report.estimate, se, options.level).ok();
    report.p_value = wald_test(report.estimate, se).ok();
    let cse = s.contrast_se(&[1.0, 0.0]);
    report.confounded_se = Some(cse);
    report.confounded_ci = wald_interval(c, cse, options.level).ok();
    let bse = s.contrast_se(&[0.0, 1.0]);
    report.bias_se = Some(bse);
    report.bias_ci = wald_interval(b, bse, options.level).ok();
    let influence = Some(s.contrast_influence(&diff));
    Ok(Estimate {
        report,
        sandwich: Some(s),
        influence,
    })
}

/// Δ̂₁: exposure model and R by the exposure-model route.
pub fn estimate_delta1(d: &DesignedData, options: &EstimatorOptions) -> Result<EstimateReport> {
    Ok(estimate(d, EstimatorKind::Delta1, options)?.report)
}

/// Δ̂₂: exposure model and W contrasts by the exposure-model route.
pub fn estimate_delta2(d: &DesignedData, options: &EstimatorOptions) -> Result<EstimateReport> {
    Ok(estimate(d, EstimatorKind::Delta2, options)?.report)
}

/// Δ̂₃: full W model, baseline outcome model and R by the outcome-model route.
pub fn estimate_delta3(d: &DesignedData, options: &EstimatorOptions) -> Result<EstimateReport> {
    Ok(estimate(d, EstimatorKind::Delta3, options)?.report)
}

/// Plug-in maximum likelihood through the bridge equation.
pub fn estimate_plugin_mle(d: &DesignedData, options: &EstimatorOptions) -> Result<EstimateReport> {
    Ok(estimate(d, EstimatorKind::Mle, options)?.report)
}

/// Multiply robust estimator: the sample mean of the uncentered influence function.
pub fn estimate_mr(d: &DesignedData, options: &EstimatorOptions) -> Result<EstimateReport> {
    Ok(estimate(d, EstimatorKind::Mr, options)?.report)
}

/// One zeroing reduction: the multiply robust contributions with components zeroed
/// against the direct single-model formula, both at the multiply robust θ̂.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub name: String,
    pub reduced: f64,
    pub direct: f64,
}

/// Result of [`reduction_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub mr: f64,
    pub reductions: Vec<Reduction>,
    pub max_abs_difference: f64,
}

/// Check that zeroing components of the multiply robust contributions reproduces the
/// three single-model estimators, all evaluated at the multiply robust θ̂.
pub fn reduction_check(d: &DesignedData, options: &EstimatorOptions) -> Result<ReductionReport> {
    let fitted = fit_estimator(d, EstimatorKind::Mr, options)?;
    let xf = options.xi_floor;
    let mut pn = fitted.point_buffer();
    let n = d.n();
    let mut acc = vec![Vec::with_capacity(n); 8];
    for i in 0..n {
        fitted.theta.point_into(d, i, &mut pn);
        let r = Record::of(d, i);
        let none = zeroed_contributions(&r, &pn, Zeroing::default(), xf)?;
        let z1 = zeroed_contributions(
            &r,
            &pn,
            Zeroing {
                y_baseline: true,
                w_mean: true,
                ..Zeroing::default()
            },
            xf,
        )?;
        let z2 = zeroed_contributions(
            &r,
            &pn,
            Zeroing {
                y_baseline: true,
                w_baseline: true,
                ratio: true,
                ..Zeroing::default()
            },
            xf,
        )?;
        let z3 = zeroed_contributions(
            &r,
            &pn,
            Zeroing {
                inverse_weights: true,
                ..Zeroing::default()
            },
            xf,
        )?;
        let d1 = delta1_contributions(&r, &pn);
        let w = (2.0 * r.a as f64 - 1.0) * pn.exposure.inv_a_given_z(r.a, r.z);
        let d2_bias = delta2_bias(&r, &pn, xf)?;
        let d3 = delta3_contributions(&r, &pn);
        let mr = (eif_confounded(&r, &pn), eif_bias(&r, &pn, xf)?);
        acc[0].push(mr.0 - mr.1);
        acc[1].push(none.0 - none.1);
        acc[2].push(z1.0 - z1.1);
        acc[3].push(d1.0 - d1.1);
        acc[4].push(z2.0 - z2.1);
        acc[5].push(w * r.y - d2_bias);
        acc[6].push(z3.0 - z3.1);
        acc[7].push(d3.0 - d3.1);
    }
    let m: Vec<f64> = acc.iter().map(|v| mean(v)).collect();
    let reductions = vec![
        Reduction {
            name: "nothing zeroed".into(),
            reduced: m[1],
            direct: m[0],
        },
        Reduction {
            name: "delta1".into(),
            reduced: m[2],
            direct: m[3],
        },
        Reduction {
            name: "delta2".into(),
            reduced: m[4],
            direct: m[5],
        },
        Reduction {
            name: "delta3".into(),
            reduced: m[6],
            direct: m[7],
        },
    ];
    let max_abs_difference = reductions.iter().map(|r| (r.reduced - r.direct).abs()).fold(0.0, f64::max);
    if max_abs_difference > REDUCTION_TOL {
        return Err(Error::Numerical(format!(
            "zeroing reductions disagree with the direct estimators by {max_abs_difference:.3e}"
        )));
    }
    Ok(ReductionReport {
        mr: m[0],
        reductions,
        max_abs_difference,
    })
}

/// `Πᵀ ξ(a,x)⁻¹ E[δ|1-a,x] f(1-a|x)/f(a|x) y`.
fn delta2_bias(r: &Record, pn: &PointNuisance, xi_floor: f64) -> Result<f64> {
    let t = &pn.exposure;
    let (a, na) = (r.a, 1 - r.a);
    let delta_bar = pn.delta_given_a(na);
    if delta_bar.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let xi = pn.xi(a);
    let smin = singular_values(&xi).last().copied().unwrap_or(0.0);
    if smin < xi_floor {
        return Err(Error::WeakNegativeControls(smin));
    }
    let v = solve(&xi, &delta_bar, "ξ(a, x)")?;
    let ref_term = if r.gz.is_none() { t.inv_z_given_a(pn.z_ref, a) } else { 0.0 };
    let mut piv = 0.0;
    for j in 0..pn.kz {
        let zj = crate::point::level_of_position(j, pn.z_ref);
        piv += (indicator(r.gz, j) * t.inv_z_given_a(zj, a) - ref_term) * v[j];
    }
    Ok(piv * t.a_marginal(na) * t.inv_a_marginal(a) * r.y)
}
