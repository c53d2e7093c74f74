//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Pairwise (cascade) summation; deterministic and accurate for long sums.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if v.len() <= BLOCK {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}

/// Pairwise mean; zero for an empty slice.
pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        pairwise_sum(v) / v.len() as f64
    }
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Numerical rank: singular values above `rel_tol × σ_max`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&v| v > rel_tol * smax).count(),
        _ => 0,
    }
}

/// 2-norm condition number (infinite when singular).
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Moore-Penrose pseudoinverse with singular values below `rel_tol × σ_max` dropped.
pub fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rel_tol * smax;
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut out = DMatrix::zeros(m.ncols(), m.nrows());
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            out += (vt.row(j).transpose() * u.column(j).transpose()) / s;
        }
    }
    out
}

/// Solve the square system `m x = b` by LU, failing when `m` is numerically singular.
pub fn solve(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::RankDeficient(what.to_string()));
    }
    let lu = m.clone().lu();
    let x = lu
        .solve(b)
        .ok_or_else(|| Error::RankDeficient(what.to_string()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient(what.to_string()));
    }
    let u_diag_min = lu.u().diagonal().iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if u_diag_min <= 1e-13 * scale {
        return Err(Error::RankDeficient(what.to_string()));
    }
    Ok(x)
}

/// Solve a symmetric positive-definite system by Cholesky, falling back to LU.
pub fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    match m.clone().cholesky() {
        Some(ch) => {
            let diag_max = m.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let l_min = ch.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
            if l_min * l_min <= 1e-14 * diag_max {
                return Err(Error::RankDeficient(what.to_string()));
            }
            Ok(ch.solve(b))
        }
        None => solve(m, b, what),
    }
}

/// Invert a small square matrix, failing when it is singular.
pub fn inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        out.set_column(j, &solve(m, &e, what)?);
    }
    Ok(out)
}

/// `a · b` for equal-length slices.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_short_input() {
        let v: Vec<f64> = (1..=200).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 20100.0);
        assert_eq!(mean(&[]), 0.0);
    }

    #[test]
    fn pinv_of_invertible_is_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let p = pinv(&m, 1e-12);
        let i = &m * &p;
        assert!((i - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn rank_of_outer_product_is_one() {
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &u * u.transpose();
        assert_eq!(numerical_rank(&m, 1e-8), 1);
    }

    #[test]
    fn solve_rejects_singular() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(solve(&m, &DVector::from_vec(vec![1.0, 1.0]), "t").is_err());
    }
}
