//! Likelihood fitters: multinomial logit by Newton-Raphson and general categorical or
//! Gaussian mean models by Fisher scoring, both with step-halving.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, solve_spd};

/// Convergence tolerance on the max-abs mean score.
pub const SCORE_TOL: f64 = 1e-8;
/// Iteration cap for every fitter.
pub const MAX_ITER: usize = 100;
/// Coefficient magnitude on the logit scale treated as divergence.
pub const SEPARATION_BOUND: f64 = 30.0;

const POLISH_TOL: f64 = 1e-13;
const MAX_HALVINGS: usize = 40;

/// Multinomial logit over `n_categories` with one coefficient row per non-reference category.
///
/// Binary logistic regression is the two-category case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultinomialLogit {
    pub n_categories: usize,
    pub reference: usize,
    pub dim: usize,
    /// Row-major `(n_categories - 1) × dim`, rows in level order skipping the reference.
    pub coef: Vec<f64>,
}

impl MultinomialLogit {
    /// All-zero coefficients (uniform probabilities).
    pub fn zeros(n_categories: usize, reference: usize, dim: usize) -> Self {
        Self {
            n_categories,
            reference,
            dim,
            coef: vec![0.0; (n_categories - 1) * dim],
        }
    }

    /// Number of free parameters.
    pub fn n_params(&self) -> usize {
        self.coef.len()
    }

    #[inline]
    fn slot(&self, category: usize) -> Option<usize> {
        use std::cmp::Ordering::*;
        match category.cmp(&self.reference) {
            Less => Some(category),
            Equal => None,
            Greater => Some(category - 1),
        }
    }

    /// Category probabilities at design row `x` written into `out` (length `n_categories`).
    pub fn probs_into(&self, coef: &[f64], x: &[f64], out: &mut [f64]) {
        let mut max = 0.0f64;
        for (c, o) in out.iter_mut().enumerate() {
            *o = match self.slot(c) {
                None => 0.0,
                Some(r) => dot(&coef[r * self.dim..(r + 1) * self.dim], x),
            };
            max = max.max(*o);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    /// Category probabilities at the current coefficients.
    pub fn probs(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_categories];
        self.probs_into(&self.coef, x, &mut out);
        out
    }

    /// Per-record score `(1(y = c) - p_c) x` stacked over non-reference categories.
    pub fn score_into(&self, coef: &[f64], x: &[f64], y: usize, out: &mut [f64]) {
        let mut p = vec![0.0; self.n_categories];
        self.probs_into(coef, x, &mut p);
        for c in 0..self.n_categories {
            if let Some(r) = self.slot(c) {
                let resid = if y == c { 1.0 } else { 0.0 } - p[c];
                for (o, xj) in out[r * self.dim..(r + 1) * self.dim].iter_mut().zip(x) {
                    *o = resid * xj;
                }
            }
        }
    }

    /// Add the per-record Fisher information `(diag(p) - p pᵀ) ⊗ x xᵀ` into `info`.
    fn add_information(&self, p: &[f64], x: &[f64], info: &mut DMatrix<f64>) {
        let d = self.dim;
        for c1 in 0..self.n_categories {
            let Some(r1) = self.slot(c1) else { continue };
            for c2 in 0..self.n_categories {
                let Some(r2) = self.slot(c2) else { continue };
                let w = if c1 == c2 { p[c1] * (1.0 - p[c1]) } else { -p[c1] * p[c2] };
                for i in 0..d {
                    let wi = w * x[i];
                    for j in 0..d {
                        info[(r1 * d + i, r2 * d + j)] += wi * x[j];
                    }
                }
            }
        }
    }

    /// Sum over `records` of the Fisher information (equal to minus the Hessian for this link).
    pub fn information<'a>(
        &self,
        coef: &[f64],
        records: impl Iterator<Item = (&'a [f64], usize)>,
    ) -> DMatrix<f64> {
        let q = self.n_params();
        let mut info = DMatrix::zeros(q, q);
        let mut p = vec![0.0; self.n_categories];
        for (x, _) in records {
            self.probs_into(coef, x, &mut p);
            self.add_information(&p, x, &mut info);
        }
        info
    }

    /// Maximum-likelihood fit over `records` (design row, category) by Newton-Raphson.
    pub fn fit<'a>(
        &mut self,
        records: &[(&'a [f64], usize)],
        model: &str,
        column_names: &[String],
    ) -> Result<()> {
        let q = self.n_params();
        let m = records.len() as f64;
        let loglik = |coef: &[f64]| -> f64 {
            let mut p = vec![0.0; self.n_categories];
            records
                .iter()
                .map(|(x, y)| {
                    self.probs_into(coef, x, &mut p);
                    p[*y].max(1e-300).ln()
                })
                .sum()
        };
        let grad_info = |coef: &[f64]| -> (DVector<f64>, DMatrix<f64>) {
            let mut g = DVector::zeros(q);
            let mut info = DMatrix::zeros(q, q);
            let mut p = vec![0.0; self.n_categories];
            for (x, y) in records {
                self.probs_into(coef, x, &mut p);
                for c in 0..self.n_categories {
                    if let Some(r) = self.slot(c) {
                        let resid = if *y == c { 1.0 } else { 0.0 } - p[c];
                        for (j, xj) in x.iter().enumerate() {
                            g[r * self.dim + j] += resid * xj;
                        }
                    }
                }
                self.add_information(&p, x, &mut info);
            }
            (g, info)
        };
        let mut coef = self.coef.clone();
        let mut ll = loglik(&coef);
        let mut last_score = f64::INFINITY;
        for _ in 0..MAX_ITER {
            let (g, info) = grad_info(&coef);
            last_score = g.amax() / m;
            if last_score < POLISH_TOL {
                break;
            }
            let step = solve_spd(&info, &g, model)?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_HALVINGS {
                let cand: Vec<f64> = coef.iter().zip(step.iter()).map(|(c, s)| c + t * s).collect();
                let ll_c = loglik(&cand);
                if ll_c.is_finite() && ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                    coef = cand;
                    ll = ll_c;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            check_separation(&coef, self.dim, model, column_names)?;
            if !accepted || t * step.amax() < 1e-15 {
                let (g, _) = grad_info(&coef);
                last_score = g.amax() / m;
                break;
            }
        }
        if last_score >= SCORE_TOL {
            let (g, _) = grad_info(&coef);
            last_score = g.amax() / m;
        }
        if last_score >= SCORE_TOL || !last_score.is_finite() {
            return Err(Error::NonConvergence {
                model: model.to_string(),
                iterations: MAX_ITER,
                score: last_score,
            });
        }
        self.coef = coef;
        Ok(())
    }
}

fn check_separation(coef: &[f64], dim: usize, model: &str, column_names: &[String]) -> Result<()> {
    if let Some(j) = coef.iter().position(|c| c.abs() > SEPARATION_BOUND || !c.is_finite()) {
        return Err(Error::Separation {
            model: model.to_string(),
            term: column_names.get(j % dim).cloned().unwrap_or_else(|| format!("#{j}")),
        });
    }
    Ok(())
}

/// Ordinary least squares over `records` (design row, response).
pub fn least_squares(records: &[(&[f64], f64)], dim: usize, model: &str) -> Result<Vec<f64>> {
    let mut xtx = DMatrix::zeros(dim, dim);
    let mut xty = DVector::zeros(dim);
    for (x, y) in records {
        for i in 0..dim {
            xty[i] += x[i] * y;
            for j in 0..dim {
                xtx[(i, j)] += x[i] * x[j];
            }
        }
    }
    Ok(solve_spd(&xtx, &xty, model)?.iter().copied().collect())
}

/// Response of a general mean model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Response {
    /// Categorical outcome: non-reference indicator position, `None` for the reference level.
    Category(Option<usize>),
    /// Real outcome with a Gaussian working likelihood.
    Real(f64),
}

/// A mean model `μ_i(θ)` with `k` components and Jacobian `∂μ_i/∂θ` (row-major `k × q`).
pub trait MeanModel {
    fn n_params(&self) -> usize;
    fn n_obs(&self) -> usize;
    fn k(&self) -> usize;
    fn response(&self, i: usize) -> Response;
    fn eval(&self, i: usize, theta: &[f64], mean: &mut [f64], jac: &mut [f64]);
}

/// Per-record log-likelihood, or `None` outside the parameter space.
fn mean_loglik(resp: Response, mean: &[f64]) -> Option<f64> {
    match resp {
        Response::Real(y) => Some(-0.5 * (y - mean[0]).powi(2)),
        Response::Category(c) => {
            let p0 = 1.0 - mean.iter().sum::<f64>();
            if p0 <= 0.0 || mean.iter().any(|&p| p <= 0.0) {
                return None;
            }
            Some(match c {
                None => p0.ln(),
                Some(j) => mean[j].ln(),
            })
        }
    }
}

/// Per-record score `Jᵀ s` of a mean model written into `out`.
pub fn mean_score_into<M: MeanModel + ?Sized>(
    model: &M,
    i: usize,
    theta: &[f64],
    mean: &mut [f64],
    jac: &mut [f64],
    out: &mut [f64],
) {
    let k = model.k();
    let q = model.n_params();
    model.eval(i, theta, mean, jac);
    let mut s = vec![0.0f64; k];
    match model.response(i) {
        Response::Real(y) => s[0] = y - mean[0],
        Response::Category(c) => {
            let p0 = 1.0 - mean.iter().sum::<f64>();
            for (j, sj) in s.iter_mut().enumerate() {
                *sj = if c == Some(j) { 1.0 / mean[j] } else { 0.0 } - if c.is_none() { 1.0 / p0 } else { 0.0 };
            }
        }
    }
    for (t, o) in out.iter_mut().enumerate().take(q) {
        *o = (0..k).map(|j| jac[j * q + t] * s[j]).sum();
    }
}

/// Fisher-scoring maximum likelihood for a [`MeanModel`], starting at `theta`.
pub fn fit_mean_model<M: MeanModel + ?Sized>(model: &M, theta: &mut Vec<f64>, name: &str) -> Result<()> {
    let q = model.n_params();
    let k = model.k();
    let n = model.n_obs();
    let mut mean = vec![0.0; k];
    let mut jac = vec![0.0; k * q];
    let loglik = |th: &[f64], mean: &mut [f64], jac: &mut [f64]| -> Option<f64> {
        let mut ll = 0.0;
        for i in 0..n {
            model.eval(i, th, mean, jac);
            ll += mean_loglik(model.response(i), mean)?;
        }
        Some(ll)
    };
    let mut grad_info = |th: &[f64]| -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(q);
        let mut info = DMatrix::zeros(q, q);
        let mut sc = vec![0.0; q];
        for i in 0..n {
            mean_score_into(model, i, th, &mut mean, &mut jac, &mut sc);
            for t in 0..q {
                g[t] += sc[t];
            }
            // Weight matrix: identity (Gaussian) or diag(1/p) + 11ᵀ/p0 (categorical).
            let (diag, common): (Vec<f64>, f64) = match model.response(i) {
                Response::Real(_) => (vec![1.0; k], 0.0),
                Response::Category(_) => {
                    let p0 = 1.0 - mean.iter().sum::<f64>();
                    (mean.iter().map(|p| 1.0 / p).collect(), 1.0 / p0)
                }
            };
            let colsum: Vec<f64> = (0..q).map(|t| (0..k).map(|j| jac[j * q + t]).sum()).collect();
            for t in 0..q {
                for u in t..q {
                    let mut v = common * colsum[t] * colsum[u];
                    for j in 0..k {
                        v += diag[j] * jac[j * q + t] * jac[j * q + u];
                    }
                    info[(t, u)] += v;
                }
            }
        }
        for t in 0..q {
            for u in 0..t {
                info[(t, u)] = info[(u, t)];
            }
        }
        (g, info)
    };
    let mut m2 = vec![0.0; k];
    let mut j2 = vec![0.0; k * q];
    let mut ll = loglik(theta, &mut m2, &mut j2).ok_or_else(|| {
        Error::Numerical(format!("{name}: starting values outside the parameter space"))
    })?;
    let mut last_score = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let (g, info) = grad_info(theta);
        last_score = g.amax() / n as f64;
        if last_score < POLISH_TOL {
            break;
        }
        let step = solve_spd(&info, &g, name)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(c, s)| c + t * s).collect();
            if let Some(ll_c) = loglik(&cand, &mut m2, &mut j2) {
                if ll_c >= ll - 1e-12 * ll.abs().max(1.0) {
                    *theta = cand;
                    ll = ll_c;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted || t * step.amax() < 1e-15 {
            let (g, _) = grad_info(theta);
            last_score = g.amax() / n as f64;
            break;
        }
    }
    if last_score >= SCORE_TOL {
        let (g, _) = grad_info(theta);
        last_score = g.amax() / n as f64;
    }
    if last_score >= SCORE_TOL || !last_score.is_finite() {
        return Err(Error::NonConvergence {
            model: name.to_string(),
            iterations: MAX_ITER,
            score: last_score,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_logistic_recovers_frequency() {
        let x = [1.0];
        let mut recs = Vec::new();
        for i in 0..10 {
            recs.push((&x[..], usize::from(i < 3)));
        }
        let mut m = MultinomialLogit::zeros(2, 0, 1);
        m.fit(&recs, "t", &["(Intercept)".into()]).unwrap();
        assert!((m.probs(&x)[1] - 0.3).abs() < 1e-10);
    }

    #[test]
    fn separation_is_reported() {
        let rows: Vec<[f64; 2]> = (0..20).map(|i| [1.0, i as f64]).collect();
        let recs: Vec<(&[f64], usize)> = rows.iter().map(|r| (&r[..], usize::from(r[1] > 9.5))).collect();
        let mut m = MultinomialLogit::zeros(2, 0, 2);
        let err = m.fit(&recs, "t", &["(Intercept)".into(), "X".into()]).unwrap_err();
        assert!(matches!(err, Error::Separation { .. } | Error::NonConvergence { .. }), "{err}");
    }

    #[test]
    fn least_squares_fits_line() {
        let rows: Vec<[f64; 2]> = (0..5).map(|i| [1.0, i as f64]).collect();
        let recs: Vec<(&[f64], f64)> = rows.iter().map(|r| (&r[..], 2.0 + 3.0 * r[1])).collect();
        let b = least_squares(&recs, 2, "t").unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12 && (b[1] - 3.0).abs() < 1e-12);
    }
}
