//! Working-model quantities evaluated at a single covariate value.
//!
//! Every estimator, estimating equation and influence function in the crate is written
//! in terms of a [`PointNuisance`], so the same code runs on fitted parametric models and
//! on exact finite laws.

use nalgebra::{DMatrix, DVector};

use crate::nuisance::ExposureTable;

/// Nuisance values at one `x`: exposure conditionals, baselines and contrasts.
///
/// `kw = |W| - 1` and `kz = |Z| - 1`. Matrices are row-major with W levels on rows and
/// Z levels on columns, both indexed by non-reference position.
#[derive(Clone, Debug, PartialEq)]
pub struct PointNuisance {
    pub kz: usize,
    pub kw: usize,
    /// Level index of the reference NCE level z0.
    pub z_ref: usize,
    pub exposure: ExposureTable,
    /// E[Y | Z = z0, A = a, x] for a = 0, 1.
    pub y_base: [f64; 2],
    /// E[Γ_W | A = 0, Z = z0, x].
    pub w_base: Vec<f64>,
    /// δ(z0, x): the A-contrast of E[Γ_W | A, Z = z0, x].
    pub delta0: Vec<f64>,
    /// ξ(0, x): the Z-contrasts of E[Γ_W | A = 0, Z, x].
    pub xi0: Vec<f64>,
    /// η(x): the A×Z interaction.
    pub eta: Vec<f64>,
    /// R(a, x) for a = 0, 1.
    pub ratio: [Vec<f64>; 2],
}

impl PointNuisance {
    /// All-zero values with the given shapes and exposure table.
    pub fn zeros(kz: usize, kw: usize, z_ref: usize, exposure: ExposureTable) -> Self {
        Self {
            kz,
            kw,
            z_ref,
            exposure,
            y_base: [0.0; 2],
            w_base: vec![0.0; kw],
            delta0: vec![0.0; kw],
            xi0: vec![0.0; kw * kz],
            eta: vec![0.0; kw * kz],
            ratio: [vec![0.0; kw], vec![0.0; kw]],
        }
    }

    /// ξ_ij(a, x).
    #[inline]
    pub fn xi_entry(&self, a: u8, i: usize, j: usize) -> f64 {
        let c = i * self.kz + j;
        self.xi0[c] + a as f64 * self.eta[c]
    }

    /// ξ(a, x) as a `kw × kz` matrix.
    pub fn xi(&self, a: u8) -> DMatrix<f64> {
        DMatrix::from_fn(self.kw, self.kz, |i, j| self.xi_entry(a, i, j))
    }

    /// δ_i(z, x) for a Z level given by its non-reference position.
    #[inline]
    pub fn delta_entry(&self, gz: Option<usize>, i: usize) -> f64 {
        self.delta0[i] + gz.map_or(0.0, |j| self.eta[i * self.kz + j])
    }

    /// δ(z, x) as a vector.
    pub fn delta(&self, gz: Option<usize>) -> DVector<f64> {
        DVector::from_fn(self.kw, |i, _| self.delta_entry(gz, i))
    }

    /// E[Γ_Wi | A = a, Z = z, x].
    #[inline]
    pub fn w_mean_entry(&self, a: u8, gz: Option<usize>, i: usize) -> f64 {
        self.w_base[i] + a as f64 * self.delta0[i] + gz.map_or(0.0, |j| self.xi_entry(a, i, j))
    }

    /// E[Γ_W | A = a, Z = z, x].
    pub fn w_mean(&self, a: u8, gz: Option<usize>) -> DVector<f64> {
        DVector::from_fn(self.kw, |i, _| self.w_mean_entry(a, gz, i))
    }

    /// E[Y | A = a, Z = z, x] = E[Y | z0, a, x] + R(a, x) ξ(a, x) Γ_Z.
    #[inline]
    pub fn y_mean(&self, a: u8, gz: Option<usize>) -> f64 {
        let r = &self.ratio[a as usize];
        self.y_base[a as usize]
            + gz.map_or(0.0, |j| (0..self.kw).map(|i| r[i] * self.xi_entry(a, i, j)).sum())
    }

    /// ξ^Y_j(a, x) = E[Y | z_j, a, x] - E[Y | z0, a, x].
    pub fn xi_y(&self, a: u8) -> DVector<f64> {
        DVector::from_fn(self.kz, |j, _| self.y_mean(a, Some(j)) - self.y_base[a as usize])
    }

    /// E[R(1 - A, x) | Z = z, x] as a vector.
    pub fn ratio_given_z(&self, z: usize) -> DVector<f64> {
        let t = &self.exposure;
        let w1 = t.a_given_z(1, z);
        DVector::from_fn(self.kw, |i, _| (1.0 - w1) * self.ratio[1][i] + w1 * self.ratio[0][i])
    }

    /// E[δ(Z, x) | A = a, x].
    pub fn delta_given_a(&self, a: u8) -> DVector<f64> {
        let t = &self.exposure;
        let mut out = DVector::zeros(self.kw);
        for z in 0..=self.kz {
            let gz = gamma_position(z, self.z_ref);
            out += self.delta(gz) * t.z_given_a(z, a);
        }
        out
    }
}

/// Non-reference position of level `z` given the reference index.
#[inline]
pub fn gamma_position(z: usize, z_ref: usize) -> Option<usize> {
    use std::cmp::Ordering::*;
    match z.cmp(&z_ref) {
        Less => Some(z),
        Equal => None,
        Greater => Some(z - 1),
    }
}

/// Level index of non-reference position `j`.
#[inline]
pub fn level_of_position(j: usize, z_ref: usize) -> usize {
    if j < z_ref {
        j
    } else {
        j + 1
    }
}
