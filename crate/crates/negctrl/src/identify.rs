//! Exact identification on finite laws and saturated empirical laws.
//!
//! For each stratum `(a, x)` the observed law gives the `|W| × |Z|` matrix
//! `P(W | Z, a, x)` and the row `E[Y | Z, a, x]`. The bridge row `h(a, x)` solves
//!
//! ```text
//! E[Y | Z, a, x] = h(a, x) P(W | Z, a, x)
//! ```
//!
//! and `E[Y(a)] = Σ_x h(a, x) P(W | x) P(x)`. The same ATE is also the difference of
//! Δ_confounded = E[δ^Y(Z, X)] and Δ_bias = E[R(1 - A, X) δ^W(Z, X)].

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CategoricalCoding, Dataset, DesignedData, ModelSpec, ObservedSample};
use crate::error::{Error, Result};
use crate::estimators::{eif_bias, eif_bias_binary, eif_bias_general, eif_confounded, estimate, EstimatorKind, EstimatorOptions, Record};
use crate::linalg::{numerical_rank, pinv, solve, solve_spd};
use crate::nuisance::ExposureTable;
use crate::point::{gamma_position, PointNuisance};

/// Residual tolerance of the bridge solver.
pub const BRIDGE_TOL: f64 = 1e-8;
/// Ridge added to a singular GMM weight matrix.
pub const GMM_RIDGE: f64 = 1e-10;

/// Exact finite law of `(U, X, A, Z, W, Y)` with `W ⫫ (A, Z) | (U, X)` and
/// `E[Y | A, Z, U, X] = E[Y | A, U, X]`. Level 0 of Z and W is the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLaw {
    pub n_u: usize,
    pub n_x: usize,
    pub n_z: usize,
    pub n_w: usize,
    /// P(x).
    pub p_x: Vec<f64>,
    /// P(a, z | x) at `[x][a·n_z + z]`.
    pub p_az_given_x: Vec<Vec<f64>>,
    /// P(u | a, z, x) at `[x][a·n_z + z][u]`.
    pub p_u_given_azx: Vec<Vec<Vec<f64>>>,
    /// P(w | u, x) at `[x][u][w]`.
    pub p_w_given_ux: Vec<Vec<Vec<f64>>>,
    /// E[Y | a, u, x] at `[x][u][a]`.
    pub y_given_aux: Vec<Vec<[f64; 2]>>,
}

fn random_simplex<R: Rng + ?Sized>(rng: &mut R, k: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    let free = 1.0 - k as f64 * floor;
    raw.iter().map(|v| floor + free * v / s).collect()
}

fn check_simplex(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|p| !(0.0..=1.0).contains(p)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("{what} is not a probability vector")));
    }
    Ok(())
}

impl DiscreteLaw {
    /// Check shapes and normalization.
    pub fn validate(&self) -> Result<()> {
        let (nu, nx, nz, nw) = (self.n_u, self.n_x, self.n_z, self.n_w);
        if nu == 0 || nx == 0 || nz < 2 || nw < 2 {
            return Err(Error::Validation("law needs |U|, |X| ≥ 1 and |Z|, |W| ≥ 2".into()));
        }
        let shape_err = |what: &str| Error::Validation(format!("law table `{what}` has the wrong shape"));
        if self.p_x.len() != nx
            || self.p_az_given_x.len() != nx
            || self.p_u_given_azx.len() != nx
            || self.p_w_given_ux.len() != nx
            || self.y_given_aux.len() != nx
        {
            return Err(shape_err("x"));
        }
        check_simplex(&self.p_x, "P(x)")?;
        for x in 0..nx {
            if self.p_az_given_x[x].len() != 2 * nz {
                return Err(shape_err("p_az_given_x"));
            }
            check_simplex(&self.p_az_given_x[x], "P(a, z | x)")?;
            if self.p_u_given_azx[x].len() != 2 * nz || self.p_u_given_azx[x].iter().any(|v| v.len() != nu) {
                return Err(shape_err("p_u_given_azx"));
            }
            for v in &self.p_u_given_azx[x] {
                check_simplex(v, "P(u | a, z, x)")?;
            }
            if self.p_w_given_ux[x].len() != nu || self.p_w_given_ux[x].iter().any(|v| v.len() != nw) {
                return Err(shape_err("p_w_given_ux"));
            }
            for v in &self.p_w_given_ux[x] {
                check_simplex(v, "P(w | u, x)")?;
            }
            if self.y_given_aux[x].len() != nu || self.y_given_aux[x].iter().flatten().any(|y| !y.is_finite()) {
                return Err(shape_err("y_given_aux"));
            }
        }
        Ok(())
    }

    /// Random law with every probability at least `floor`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_u: usize, n_x: usize, n_z: usize, n_w: usize, floor: f64) -> Self {
        let p_x = random_simplex(rng, n_x, floor);
        let p_az_given_x = (0..n_x).map(|_| random_simplex(rng, 2 * n_z, floor)).collect();
        let p_u_given_azx = (0..n_x)
            .map(|_| (0..2 * n_z).map(|_| random_simplex(rng, n_u, floor)).collect())
            .collect();
        let p_w_given_ux = (0..n_x)
            .map(|_| (0..n_u).map(|_| random_simplex(rng, n_w, floor)).collect())
            .collect();
        let y_given_aux = (0..n_x)
            .map(|_| (0..n_u).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect())
            .collect();
        Self {
            n_u,
            n_x,
            n_z,
            n_w,
            p_x,
            p_az_given_x,
            p_u_given_azx,
            p_w_given_ux,
            y_given_aux,
        }
    }

    /// Random law whose factors `P(W | U, x)` and `P(U | Z, a, x)` have condition number
    /// at most `max_condition`.
    pub fn random_well_conditioned<R: Rng + ?Sized>(
        rng: &mut R,
        n_u: usize,
        n_x: usize,
        n_z: usize,
        n_w: usize,
        floor: f64,
        max_condition: f64,
    ) -> Self {
        loop {
            let law = Self::random(rng, n_u, n_x, n_z, n_w, floor);
            if law.factor_condition() <= max_condition {
                return law;
            }
        }
    }

    /// Largest condition number of the factors `P(W | U, x)` and `P(U | Z, a, x)`.
    pub fn factor_condition(&self) -> f64 {
        let mut worst = 0.0f64;
        for x in 0..self.n_x {
            let pw = DMatrix::from_fn(self.n_w, self.n_u, |w, u| self.p_w_given_ux[x][u][w]);
            worst = worst.max(rank_condition(&pw));
            for a in 0..2 {
                let pu = DMatrix::from_fn(self.n_u, self.n_z, |u, z| self.p_u_given_azx[x][a * self.n_z + z][u]);
                worst = worst.max(rank_condition(&pu));
            }
        }
        worst
    }

    /// The law with no unmeasured confounding: P(u | a, z, x) replaced by P(u | x).
    pub fn unconfounded(&self) -> Self {
        let mut out = self.clone();
        for x in 0..self.n_x {
            let pu = self.p_u_given_x(x);
            for c in 0..2 * self.n_z {
                out.p_u_given_azx[x][c] = pu.clone();
            }
        }
        out
    }

    /// P(u | x).
    pub fn p_u_given_x(&self, x: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_u];
        for c in 0..2 * self.n_z {
            for u in 0..self.n_u {
                out[u] += self.p_az_given_x[x][c] * self.p_u_given_azx[x][c][u];
            }
        }
        out
    }

    /// The latent-law ATE `Σ_{x,u} (E[Y|1,u,x] - E[Y|0,u,x]) P(u|x) P(x)`.
    pub fn latent_ate(&self) -> f64 {
        let mut out = 0.0;
        for x in 0..self.n_x {
            let pu = self.p_u_given_x(x);
            for u in 0..self.n_u {
                let y = self.y_given_aux[x][u];
                out += self.p_x[x] * pu[u] * (y[1] - y[0]);
            }
        }
        out
    }

    /// P(u | a, z, w, x).
    fn p_u_given_azwx(&self, x: usize, a: usize, z: usize, w: usize) -> Vec<f64> {
        let c = a * self.n_z + z;
        let mut out: Vec<f64> = (0..self.n_u)
            .map(|u| self.p_u_given_azx[x][c][u] * self.p_w_given_ux[x][u][w])
            .collect();
        let s: f64 = out.iter().sum();
        for v in &mut out {
            *v /= s;
        }
        out
    }

    /// E[Y | a, z, w, x] under `Y ⫫ W | (A, U, X)`.
    pub fn y_given_azwx(&self, x: usize, a: usize, z: usize, w: usize) -> f64 {
        let pu = self.p_u_given_azwx(x, a, z, w);
        (0..self.n_u).map(|u| pu[u] * self.y_given_aux[x][u][a]).sum()
    }

    /// P(w | a, z, x).
    pub fn p_w_given_azx(&self, x: usize, a: usize, z: usize) -> Vec<f64> {
        let c = a * self.n_z + z;
        let mut out = vec![0.0; self.n_w];
        for u in 0..self.n_u {
            for w in 0..self.n_w {
                out[w] += self.p_u_given_azx[x][c][u] * self.p_w_given_ux[x][u][w];
            }
        }
        out
    }
}

fn rank_condition(m: &DMatrix<f64>) -> f64 {
    let s = crate::linalg::singular_values(m);
    let r = m.nrows().min(m.ncols());
    match (s.first(), s.get(r - 1)) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// The observed-law matrices of one `(a, x)` stratum.
#[derive(Clone, Debug, PartialEq)]
pub struct Stratum {
    pub a: u8,
    pub x: usize,
    /// P(W | Z, a, x), `|W| × |Z|`.
    pub p_w_given_z: DMatrix<f64>,
    /// E[Y | Z, a, x].
    pub y_given_z: DVector<f64>,
}

/// Observed-law matrices for every `(a, x)`, plus the exposure and covariate laws.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedLawMatrices {
    pub n_x: usize,
    pub n_z: usize,
    pub n_w: usize,
    pub p_x: Vec<f64>,
    /// P(a, z | x) at `[x][a·n_z + z]`.
    pub p_az_given_x: Vec<Vec<f64>>,
    /// Strata at index `2x + a`.
    pub strata: Vec<Stratum>,
    /// Covariate values of each stratum when built from data.
    pub x_values: Vec<Vec<f64>>,
}

impl ObservedLawMatrices {
    /// Stratum `(a, x)`.
    pub fn stratum(&self, a: u8, x: usize) -> &Stratum {
        &self.strata[2 * x + a as usize]
    }

    /// P(W | x) = Σ_{a,z} P(W | z, a, x) P(a, z | x).
    pub fn p_w_given_x(&self, x: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_w);
        for a in 0..2u8 {
            let s = self.stratum(a, x);
            for z in 0..self.n_z {
                out += s.p_w_given_z.column(z) * self.p_az_given_x[x][a as usize * self.n_z + z];
            }
        }
        out
    }
}

/// Observed-law matrices of a finite law by exact marginalization over U.
pub fn observed_matrices(law: &DiscreteLaw) -> ObservedLawMatrices {
    let (nz, nw) = (law.n_z, law.n_w);
    let mut strata = Vec::with_capacity(2 * law.n_x);
    for x in 0..law.n_x {
        for a in 0..2usize {
            let mut p = DMatrix::zeros(nw, nz);
            let mut y = DVector::zeros(nz);
            for z in 0..nz {
                let c = a * nz + z;
                let pu = &law.p_u_given_azx[x][c];
                for u in 0..law.n_u {
                    y[z] += pu[u] * law.y_given_aux[x][u][a];
                    for w in 0..nw {
                        p[(w, z)] += law.p_w_given_ux[x][u][w] * pu[u];
                    }
                }
            }
            strata.push(Stratum {
                a: a as u8,
                x,
                p_w_given_z: p,
                y_given_z: y,
            });
        }
    }
    ObservedLawMatrices {
        n_x: law.n_x,
        n_z: nz,
        n_w: nw,
        p_x: law.p_x.clone(),
        p_az_given_x: law.p_az_given_x.clone(),
        strata,
        x_values: (0..law.n_x).map(|x| vec![x as f64]).collect(),
    }
}

/// Saturated empirical law of a dataset with discrete covariates; Z and W levels are
/// reordered so that the reference levels come first.
pub fn empirical_matrices(data: &Dataset) -> Result<ObservedLawMatrices> {
    let nz = data.z_coding.len();
    let nw = data.w_coding.len();
    let zpos = |z: usize| gamma_position(z, data.z_coding.reference).map_or(0, |j| j + 1);
    let wpos = |w: usize| gamma_position(w, data.w_coding.reference).map_or(0, |j| j + 1);
    let mut cells: BTreeMap<Vec<u64>, Vec<&ObservedSample>> = BTreeMap::new();
    for s in &data.samples {
        cells.entry(s.x.iter().map(|v| v.to_bits()).collect()).or_default().push(s);
    }
    let n = data.n() as f64;
    let mut p_x = Vec::new();
    let mut p_az_given_x = Vec::new();
    let mut strata = Vec::new();
    let mut x_values = Vec::new();
    for (xi, (key, rows)) in cells.iter().enumerate() {
        let nxc = rows.len() as f64;
        p_x.push(nxc / n);
        x_values.push(key.iter().map(|b| f64::from_bits(*b)).collect());
        let mut counts = vec![0.0; 2 * nz];
        let mut wcount = vec![vec![0.0; nw * nz]; 2];
        let mut ysum = vec![vec![0.0; nz]; 2];
        for s in rows {
            let (a, z, w) = (s.a as usize, zpos(s.z), wpos(s.w));
            counts[a * nz + z] += 1.0;
            wcount[a][w * nz + z] += 1.0;
            ysum[a][z] += s.y;
        }
        if let Some(c) = counts.iter().position(|&c| c == 0.0) {
            return Err(Error::EmptyCell(format!(
                "(a={}, z position {}) in covariate stratum {xi}",
                c / nz,
                c % nz
            )));
        }
        p_az_given_x.push(counts.iter().map(|c| c / nxc).collect());
        for a in 0..2usize {
            let p = DMatrix::from_fn(nw, nz, |w, z| wcount[a][w * nz + z] / counts[a * nz + z]);
            let y = DVector::from_fn(nz, |z, _| ysum[a][z] / counts[a * nz + z]);
            strata.push(Stratum {
                a: a as u8,
                x: xi,
                p_w_given_z: p,
                y_given_z: y,
            });
        }
    }
    Ok(ObservedLawMatrices {
        n_x: p_x.len(),
        n_z: nz,
        n_w: nw,
        p_x,
        p_az_given_x,
        strata,
        x_values,
    })
}

/// Numerical rank of P(W | Z, a, x), maximized over strata.
pub fn infer_latent_cardinality(m: &ObservedLawMatrices, tol: f64) -> Result<usize> {
    let r = m.strata.iter().map(|s| numerical_rank(&s.p_w_given_z, tol)).max().unwrap_or(0);
    if r == 0 {
        return Err(Error::Validation("every P(W | Z, a, x) matrix is zero".into()));
    }
    Ok(r)
}

/// Per-stratum ranks.
pub fn stratum_ranks(m: &ObservedLawMatrices, tol: f64) -> Vec<usize> {
    m.strata.iter().map(|s| numerical_rank(&s.p_w_given_z, tol)).collect()
}

/// How a bridge row was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BridgeSolver {
    ExactInverse,
    Pseudoinverse,
    Coarsened,
}

/// Bridge row `h(a, x)` with its residual and provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeVector {
    pub a: u8,
    pub x: usize,
    pub h: Vec<f64>,
    pub solver: BridgeSolver,
    pub residual: f64,
}

/// Solve `y = h P` for the row `h`: exact when `P` is square and full rank, minimum-norm
/// otherwise; fails when the residual exceeds [`BRIDGE_TOL`].
pub fn bridge_row(y: &DVector<f64>, p: &DMatrix<f64>, rank_tol: f64) -> Result<(DVector<f64>, BridgeSolver, f64)> {
    let square = p.nrows() == p.ncols();
    let (h, solver) = match square.then(|| certified_inverse(p, rank_tol)).flatten() {
        Some(inv) => (inv.transpose() * y, BridgeSolver::ExactInverse),
        None if square && numerical_rank(p, rank_tol) == p.nrows() => {
            (solve(&p.transpose(), y, "bridge equation")?, BridgeSolver::ExactInverse)
        }
        None => ((y.transpose() * pinv(p, rank_tol)).transpose(), BridgeSolver::Pseudoinverse),
    };
    let residual = (y - p.transpose() * &h).amax();
    if !(residual <= BRIDGE_TOL * y.amax().max(1.0)) {
        return Err(Error::Numerical(format!(
            "bridge equation is inconsistent (residual {residual:.3e}); the observed law violates the latent structure"
        )));
    }
    Ok((h, solver, residual))
}

/// Inverse of a square matrix whose full numerical rank is certified by
/// `σ_max / σ_min ≤ n ‖P‖₁ ‖P⁻¹‖₁ < 1 / rank_tol`; `None` when the bound is inconclusive.
fn certified_inverse(p: &DMatrix<f64>, rank_tol: f64) -> Option<DMatrix<f64>> {
    let inv = p.clone().try_inverse()?;
    let norm1 = |m: &DMatrix<f64>| m.column_iter().map(|c| c.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let bound = p.nrows() as f64 * norm1(p) * norm1(&inv);
    (bound.is_finite() && bound * rank_tol < 1.0).then_some(inv)
}

/// Bridge row of stratum `(a, x)`.
pub fn solve_bridge(m: &ObservedLawMatrices, a: u8, x: usize, rank_tol: f64) -> Result<BridgeVector> {
    let s = m.stratum(a, x);
    let (h, solver, residual) = bridge_row(&s.y_given_z, &s.p_w_given_z, rank_tol)?;
    Ok(BridgeVector {
        a,
        x,
        h: h.iter().copied().collect(),
        solver,
        residual,
    })
}

/// ATE by the bridge functional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentifiedAte {
    pub delta: f64,
    /// E[Y(0)], E[Y(1)].
    pub potential_means: [f64; 2],
    pub bridges: Vec<BridgeVector>,
}

/// `E[Y(a)] = Σ_x h(a, x) P(W | x) P(x)` and `Δ = E[Y(1)] - E[Y(0)]`.
pub fn ate_by_identification(m: &ObservedLawMatrices, rank_tol: f64) -> Result<IdentifiedAte> {
    let mut means = [0.0; 2];
    let mut bridges = Vec::new();
    for x in 0..m.n_x {
        let pw = m.p_w_given_x(x);
        for a in 0..2u8 {
            let b = solve_bridge(m, a, x, rank_tol)?;
            means[a as usize] += m.p_x[x] * b.h.iter().zip(pw.iter()).map(|(h, p)| h * p).sum::<f64>();
            bridges.push(b);
        }
    }
    Ok(IdentifiedAte {
        delta: means[1] - means[0],
        potential_means: means,
        bridges,
    })
}

/// ATE by the reparameterized functional.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReparameterizedAte {
    pub delta: f64,
    pub confounded: f64,
    pub bias: f64,
}

/// The working-model quantities implied by stratum `x` of an observed law, with the
/// first Z and W levels as references.
pub fn law_point_nuisance(m: &ObservedLawMatrices, x: usize) -> PointNuisance {
    let (nz, nw) = (m.n_z, m.n_w);
    let (kz, kw) = (nz - 1, nw - 1);
    let table = ExposureTable::from_joint(nz, m.p_az_given_x[x].clone());
    let mut pn = PointNuisance::zeros(kz, kw, 0, table);
    let s0 = m.stratum(0, x);
    let s1 = m.stratum(1, x);
    pn.y_base = [s0.y_given_z[0], s1.y_given_z[0]];
    for i in 0..kw {
        pn.w_base[i] = s0.p_w_given_z[(i + 1, 0)];
        pn.delta0[i] = s1.p_w_given_z[(i + 1, 0)] - s0.p_w_given_z[(i + 1, 0)];
        for j in 0..kz {
            let xi0 = s0.p_w_given_z[(i + 1, j + 1)] - s0.p_w_given_z[(i + 1, 0)];
            let xi1 = s1.p_w_given_z[(i + 1, j + 1)] - s1.p_w_given_z[(i + 1, 0)];
            pn.xi0[i * kz + j] = xi0;
            pn.eta[i * kz + j] = xi1 - xi0;
        }
    }
    pn
}

/// R(a, x) = ξ^Y(a, x)ᵀ ξ^W(a, x)⁻¹ from stratum `x`, written into `pn.ratio`.
fn fill_law_ratio(m: &ObservedLawMatrices, x: usize, pn: &mut PointNuisance) -> Result<()> {
    if pn.kz != pn.kw {
        return Err(Error::Validation(format!(
            "the reparameterized functional needs |Z| = |W| (found {} and {})",
            pn.kz + 1,
            pn.kw + 1
        )));
    }
    for a in 0..2u8 {
        let s = m.stratum(a, x);
        let xi_y = DVector::from_fn(pn.kz, |j, _| s.y_given_z[j + 1] - s.y_given_z[0]);
        let xi = pn.xi(a);
        let smin = crate::linalg::singular_values(&xi).last().copied().unwrap_or(0.0);
        if smin < 1e-12 {
            return Err(Error::WeakNegativeControls(smin));
        }
        let r = solve(&xi.transpose(), &xi_y, "ξ(a, x)")?;
        pn.ratio[a as usize] = r.iter().copied().collect();
    }
    Ok(())
}

/// The true working-model quantities of stratum `x`, R included.
pub fn law_point_nuisance_full(m: &ObservedLawMatrices, x: usize) -> Result<PointNuisance> {
    let mut pn = law_point_nuisance(m, x);
    fill_law_ratio(m, x, &mut pn)?;
    Ok(pn)
}

/// `Δ = E[δ^Y(Z, X)] - E[R(1 - A, X) δ^W(Z, X)]`.
pub fn ate_by_reparameterization(m: &ObservedLawMatrices) -> Result<ReparameterizedAte> {
    let mut conf = 0.0;
    let mut bias = 0.0;
    for x in 0..m.n_x {
        let pn = law_point_nuisance_full(m, x)?;
        let (s0, s1) = (m.stratum(0, x), m.stratum(1, x));
        for a in 0..2u8 {
            for z in 0..m.n_z {
                let f = m.p_x[x] * m.p_az_given_x[x][a as usize * m.n_z + z];
                conf += f * (s1.y_given_z[z] - s0.y_given_z[z]);
                let gz = gamma_position(z, 0);
                let na = (1 - a) as usize;
                bias += f * (0..pn.kw).map(|i| pn.ratio[na][i] * pn.delta_entry(gz, i)).sum::<f64>();
            }
        }
    }
    Ok(ReparameterizedAte {
        delta: conf - bias,
        confounded: conf,
        bias,
    })
}

/// Exact expectations of the uncentered influence functions at the true law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EifExpectation {
    pub confounded_mean: f64,
    pub bias_mean: f64,
    pub truth: ReparameterizedAte,
    /// Largest per-cell gap between the scalar and general bias paths (binary laws only).
    pub path_gap: Option<f64>,
}

/// Exact expectation of the influence functions over every cell `(x, a, z, w)` of a law,
/// with the outcome replaced by E[Y | a, z, w, x].
pub fn law_eif_expectation(law: &DiscreteLaw, xi_floor: f64) -> Result<EifExpectation> {
    let m = observed_matrices(law);
    let truth = ate_by_reparameterization(&m)?;
    let binary = law.n_z == 2 && law.n_w == 2;
    let mut conf = 0.0;
    let mut bias = 0.0;
    let mut gap: f64 = 0.0;
    for x in 0..law.n_x {
        let pn = law_point_nuisance_full(&m, x)?;
        for a in 0..2usize {
            for z in 0..law.n_z {
                let pw = law.p_w_given_azx(x, a, z);
                for w in 0..law.n_w {
                    let mass = law.p_x[x] * law.p_az_given_x[x][a * law.n_z + z] * pw[w];
                    let r = Record {
                        y: law.y_given_azwx(x, a, z, w),
                        a: a as u8,
                        z,
                        gz: gamma_position(z, 0),
                        gw: gamma_position(w, 0),
                    };
                    conf += mass * eif_confounded(&r, &pn);
                    bias += mass * eif_bias(&r, &pn, xi_floor)?;
                    if binary {
                        for y in [r.y, 0.0, 1.0] {
                            let rr = Record { y, ..r };
                            let g = eif_bias_binary(&rr, &pn, xi_floor)? - eif_bias_general(&rr, &pn, xi_floor)?;
                            gap = gap.max(g.abs());
                        }
                    }
                }
            }
        }
    }
    Ok(EifExpectation {
        confounded_mean: conf,
        bias_mean: bias,
        truth,
        path_gap: binary.then_some(gap),
    })
}

/// A pair of level maps coarsening Z and W: `map[level] = block`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coarsening {
    pub z_map: Vec<usize>,
    pub w_map: Vec<usize>,
}

/// Every partition of `n` labelled items into exactly `k` blocks, as restricted growth
/// strings in lexicographic order.
pub fn set_partitions(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, k: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == n {
            if max == k {
                out.push(cur.clone());
            }
            return;
        }
        if k - max > n - i {
            return;
        }
        for b in 0..=max.min(k - 1) {
            cur.push(b);
            rec(i + 1, n, k, max.max(b + 1), cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    rec(0, n, k, 0, &mut Vec::with_capacity(n), &mut out);
    out
}

/// All pairs of Z and W partitions into `target` blocks, Z-major.
pub fn enumerate_coarsenings(
    z_coding: &CategoricalCoding,
    w_coding: &CategoricalCoding,
    target: usize,
) -> Result<Vec<Coarsening>> {
    if target < 2 || target > z_coding.len().min(w_coding.len()) {
        return Err(Error::Validation(format!(
            "coarsening target {target} must lie between 2 and min(|Z|, |W|) = {}",
            z_coding.len().min(w_coding.len())
        )));
    }
    let zs = set_partitions(z_coding.len(), target);
    let ws = set_partitions(w_coding.len(), target);
    let mut out = Vec::with_capacity(zs.len() * ws.len());
    for z in &zs {
        for w in &ws {
            out.push(Coarsening {
                z_map: z.clone(),
                w_map: w.clone(),
            });
        }
    }
    Ok(out)
}

fn coarsen_coding(coding: &CategoricalCoding, map: &[usize]) -> Result<CategoricalCoding> {
    let k = map.iter().max().map_or(0, |m| m + 1);
    let levels: Vec<String> = (0..k)
        .map(|b| {
            coding
                .levels
                .iter()
                .zip(map)
                .filter(|(_, &m)| m == b)
                .map(|(l, _)| l.as_str())
                .collect::<Vec<_>>()
                .join("+")
        })
        .collect();
    CategoricalCoding::new(levels, map[coding.reference])
}

/// Apply a coarsening to a dataset.
pub fn coarsen_dataset(data: &Dataset, c: &Coarsening) -> Result<Dataset> {
    if c.z_map.len() != data.z_coding.len() || c.w_map.len() != data.w_coding.len() {
        return Err(Error::Validation("coarsening does not match the dataset codings".into()));
    }
    let samples = data
        .samples
        .iter()
        .map(|s| ObservedSample {
            z: c.z_map[s.z],
            w: c.w_map[s.w],
            ..s.clone()
        })
        .collect();
    Dataset::new(
        samples,
        coarsen_coding(&data.z_coding, &c.z_map)?,
        coarsen_coding(&data.w_coding, &c.w_map)?,
        data.covariate_names.clone(),
    )
}

/// Two-step GMM combination of several coarsened estimates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmResult {
    pub estimate: f64,
    pub se: f64,
    pub first_step: f64,
    pub per_coarsening: Vec<f64>,
    pub weights: Vec<f64>,
    pub ridge_applied: bool,
    pub n: usize,
}

/// Combine one estimator across coarsenings by two-step GMM on the linearized moments
/// `g_k(Δ) = Δ̂_k + IF_k - Δ`.
pub fn gmm_combine(
    data: &Dataset,
    spec: &ModelSpec,
    coarsenings: &[Coarsening],
    kind: EstimatorKind,
    options: &EstimatorOptions,
) -> Result<GmmResult> {
    if coarsenings.is_empty() {
        return Err(Error::Validation("GMM needs at least one coarsening".into()));
    }
    let opts = EstimatorOptions {
        sandwich: true,
        ..options.clone()
    };
    let n = data.n();
    let mut est = Vec::new();
    let mut infl = Vec::new();
    for (k, c) in coarsenings.iter().enumerate() {
        let cd = coarsen_dataset(data, c)?;
        let run = DesignedData::new(&cd, spec).and_then(|d| estimate(&d, kind, &opts));
        let e = run.map_err(|e| Error::Numerical(format!("coarsening {k} ({:?} / {:?}): {e}", c.z_map, c.w_map)))?;
        est.push(e.report.estimate);
        infl.push(e.influence.expect("sandwich requested"));
    }
    let m = est.len();
    let first = est.iter().sum::<f64>() / m as f64;
    let mut omega = DMatrix::zeros(m, m);
    for i in 0..n {
        let g: Vec<f64> = (0..m).map(|k| est[k] - first + infl[k][i]).collect();
        for r in 0..m {
            for c in 0..m {
                omega[(r, c)] += g[r] * g[c] / n as f64;
            }
        }
    }
    let ones = DVector::from_element(m, 1.0);
    let (wones, ridge_applied) = match solve_spd(&omega, &ones, "GMM weight matrix") {
        Ok(v) => (v, false),
        Err(_) => {
            let reg = &omega + DMatrix::identity(m, m) * GMM_RIDGE;
            (solve(&reg, &ones, "GMM weight matrix")?, true)
        }
    };
    let denom = ones.dot(&wones);
    let weights: Vec<f64> = wones.iter().map(|v| v / denom).collect();
    let estimate = weights.iter().zip(&est).map(|(w, e)| w * e).sum();
    let se = (1.0 / (denom * n as f64)).sqrt();
    Ok(GmmResult {
        estimate,
        se,
        first_step: first,
        per_coarsening: est,
        weights,
        ridge_applied,
        n,
    })
}
