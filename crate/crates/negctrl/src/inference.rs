//! Stacked M-estimation: sandwich covariance, Wald intervals and tests, and the
//! nonparametric bootstrap.
//!
//! A [`StackedSystem`] supplies per-record estimating functions
//! `ψ_i(γ) = (U_i(θ), t_i(θ) - τ)` where `U` stacks the nuisance scores and `t` are the
//! uncentered target contributions whose means are the targets `τ`. Then
//!
//! ```text
//! A_n = -P_n ∂ψ/∂γᵀ,   B_n = P_n ψψᵀ,   V = A_n⁻¹ B_n A_n⁻ᵀ / n
//! ```

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{Dataset, DesignedData, ModelSpec};
use crate::error::{Error, Result};
use crate::estimators::{fit_estimator, EstimatorKind, EstimatorOptions};
use crate::linalg::{condition_number, pairwise_sum};

/// Largest condition number of `A_n` accepted by [`sandwich_variance`].
pub const MAX_CONDITION: f64 = 1e12;
/// Minimum number of bootstrap resamples.
pub const MIN_RESAMPLES: usize = 50;
/// Largest tolerated share of failed bootstrap resamples.
pub const MAX_BOOTSTRAP_FAILURE: f64 = 0.05;

/// A system of stacked per-record estimating functions.
pub trait StackedSystem {
    /// Number of records.
    fn n_obs(&self) -> usize;

    /// Nuisance parameter θ̂ at which the system is linearized.
    fn params(&self) -> Vec<f64>;

    /// Number of target coordinates.
    fn n_targets(&self) -> usize;

    /// Write per-record columns `(U_i(p), t_i(p))` into `out` (`(q + targets) × n`).
    fn evaluate(&self, p: &[f64], out: &mut DMatrix<f64>) -> Result<()>;

    /// Like [`StackedSystem::evaluate`] with only coordinate `j` of `p` moved from θ̂. Rows
    /// that cannot depend on `j`, and rows of analytic blocks, may be left untouched.
    fn evaluate_perturbed(&self, p: &[f64], _j: usize, out: &mut DMatrix<f64>) -> Result<()> {
        self.evaluate(p, out)
    }

    /// Analytic `P_n ∂U/∂θᵀ` blocks as `(offset, block)`: the rows and columns
    /// `offset..offset + block.nrows()`, with every other entry of those rows zero.
    fn analytic_blocks(&self) -> Vec<(usize, DMatrix<f64>)> {
        Vec::new()
    }
}

/// Sandwich covariance of a stacked system.
#[derive(Clone, Debug)]
pub struct Sandwich {
    /// Target estimates τ̂ (means of the target contributions at θ̂).
    pub targets: Vec<f64>,
    /// Full `V̂ = A⁻¹ B A⁻ᵀ / n` over `(θ, τ)`.
    pub covariance: DMatrix<f64>,
    /// Per-record influence values of the targets (`targets × n`), rows of `A⁻¹ ψ_i`.
    pub influence: DMatrix<f64>,
    /// Condition number of `A_n`.
    pub condition: f64,
}

impl Sandwich {
    /// Number of nuisance parameters.
    pub fn n_nuisance(&self) -> usize {
        self.covariance.nrows() - self.targets.len()
    }

    /// `cᵀ τ̂`.
    pub fn contrast(&self, c: &[f64]) -> f64 {
        c.iter().zip(&self.targets).map(|(a, b)| a * b).sum()
    }

    /// Standard error of `cᵀ τ̂`.
    pub fn contrast_se(&self, c: &[f64]) -> f64 {
        let q = self.n_nuisance();
        let mut v = 0.0;
        for (r, cr) in c.iter().enumerate() {
            for (s, cs) in c.iter().enumerate() {
                v += cr * cs * self.covariance[(q + r, q + s)];
            }
        }
        v.max(0.0).sqrt()
    }

    /// Per-record influence values of `cᵀ τ̂`.
    pub fn contrast_influence(&self, c: &[f64]) -> Vec<f64> {
        (0..self.influence.ncols())
            .map(|i| c.iter().enumerate().map(|(r, cr)| cr * self.influence[(r, i)]).sum())
            .collect()
    }
}

fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.ncols();
    let mut buf = vec![0.0; n];
    DVector::from_fn(m.nrows(), |r, _| {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = m[(r, i)];
        }
        pairwise_sum(&buf) / n as f64
    })
}

/// Empirical sandwich covariance at the system's θ̂.
///
/// The Jacobian uses central differences with step `1e-6 (1 + |γ_j|)` except on the
/// analytic blocks; the target rows have slope `-1` in their own coordinate.
pub fn sandwich_variance(sys: &dyn StackedSystem) -> Result<Sandwich> {
    let theta = sys.params();
    let q = theta.len();
    let t = sys.n_targets();
    let m = q + t;
    let n = sys.n_obs();
    let mut psi = DMatrix::zeros(m, n);
    sys.evaluate(&theta, &mut psi)?;
    if psi.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite estimating function at the estimate".into()));
    }
    let means = column_means(&psi);
    let targets: Vec<f64> = (0..t).map(|r| means[q + r]).collect();
    for r in 0..t {
        for i in 0..n {
            psi[(q + r, i)] -= targets[r];
        }
    }

    let mut jac = DMatrix::zeros(m, m);
    let mut buf = DMatrix::zeros(m, n);
    let mut p = theta.clone();
    for j in 0..q {
        let h = 1e-6 * (1.0 + theta[j].abs());
        p[j] = theta[j] + h;
        sys.evaluate_perturbed(&p, j, &mut buf)?;
        let up = column_means(&buf);
        p[j] = theta[j] - h;
        sys.evaluate_perturbed(&p, j, &mut buf)?;
        let down = column_means(&buf);
        p[j] = theta[j];
        for r in 0..m {
            jac[(r, j)] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    for (offset, block) in sys.analytic_blocks() {
        for r in 0..block.nrows() {
            for c in 0..m {
                jac[(offset + r, c)] = 0.0;
            }
            for c in 0..block.ncols() {
                jac[(offset + r, offset + c)] = block[(r, c)];
            }
        }
    }
    for r in 0..t {
        jac[(q + r, q + r)] = -1.0;
    }
    let a = -jac;
    let condition = condition_number(&a);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Numerical(format!(
            "sandwich bread matrix is ill-conditioned (condition number {condition:.3e})"
        )));
    }
    let a_inv = crate::linalg::inverse(&a, "sandwich bread matrix")?;
    let infl_all = &a_inv * &psi;
    let covariance = (&infl_all * infl_all.transpose()) / (n as f64 * n as f64);
    let influence = infl_all.rows(q, t).into_owned();
    Ok(Sandwich {
        targets,
        covariance,
        influence,
        condition,
    })
}

/// Two-sided Wald interval `estimate ± z_{(1+level)/2} se`.
pub fn wald_interval(estimate: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("confidence level must lie in (0, 1), got {level}")));
    }
    if !(se > 0.0 && se.is_finite()) {
        return Err(Error::Validation(format!("standard error must be positive and finite, got {se}")));
    }
    let z = normal_quantile((1.0 + level) / 2.0);
    Ok((estimate - z * se, estimate + z * se))
}

/// Two-sided Wald p-value of `H0: Δ = 0`.
pub fn wald_test(estimate: f64, se: f64) -> Result<f64> {
    if !(se > 0.0 && se.is_finite()) {
        return Err(Error::Validation(format!("standard error must be positive and finite, got {se}")));
    }
    let z = (estimate / se).abs();
    Ok((2.0 * (1.0 - standard_normal().cdf(z))).clamp(0.0, 1.0))
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal parameters are valid")
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    standard_normal().inverse_cdf(p)
}

/// Outcome of a bootstrap run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub se: f64,
    pub resamples: usize,
    pub failures: usize,
    pub estimates: Vec<f64>,
    /// Messages of the failed resamples.
    pub failure_log: Vec<String>,
}

/// Nonparametric bootstrap SE of an estimator, deterministic given `seed`.
pub fn bootstrap_se(
    data: &Dataset,
    spec: &ModelSpec,
    kind: EstimatorKind,
    options: &EstimatorOptions,
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if resamples < MIN_RESAMPLES {
        return Err(Error::Validation(format!(
            "bootstrap needs at least {MIN_RESAMPLES} resamples, got {resamples}"
        )));
    }
    let n = data.n();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut estimates = Vec::with_capacity(resamples);
    let mut failure_log = Vec::new();
    let opts = EstimatorOptions {
        sandwich: false,
        ..options.clone()
    };
    for b in 0..resamples {
        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let boot = data.resample(&rows);
        let res = DesignedData::new(&boot, spec)
            .and_then(|d| fit_estimator(&d, kind, &opts).and_then(|f| f.point_estimates()));
        match res {
            Ok((c, bias)) => estimates.push(c - bias),
            Err(e) => failure_log.push(format!("resample {b}: {e}")),
        }
    }
    let failures = failure_log.len();
    if failures as f64 > MAX_BOOTSTRAP_FAILURE * resamples as f64 {
        return Err(Error::Numerical(format!(
            "bootstrap failed on {failures} of {resamples} resamples; first: {}",
            failure_log.first().map(String::as_str).unwrap_or("")
        )));
    }
    let m = estimates.len() as f64;
    let mean = pairwise_sum(&estimates) / m;
    let dev: Vec<f64> = estimates.iter().map(|e| (e - mean).powi(2)).collect();
    let se = (pairwise_sum(&dev) / (m - 1.0)).sqrt();
    Ok(BootstrapResult {
        se,
        resamples,
        failures,
        estimates,
        failure_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct MeanSystem(Vec<f64>);

    impl StackedSystem for MeanSystem {
        fn n_obs(&self) -> usize {
            self.0.len()
        }
        fn params(&self) -> Vec<f64> {
            Vec::new()
        }
        fn n_targets(&self) -> usize {
            1
        }
        fn evaluate(&self, _p: &[f64], out: &mut DMatrix<f64>) -> Result<()> {
            for (i, x) in self.0.iter().enumerate() {
                out[(0, i)] = *x;
            }
            Ok(())
        }
    }

    #[test]
    fn sandwich_of_a_mean_is_the_classical_se() {
        let xs = vec![1.0, 4.0, 2.0, 8.0, 5.0, 7.0];
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let s = sandwich_variance(&MeanSystem(xs)).unwrap();
        assert!((s.targets[0] - mean).abs() < 1e-12);
        assert!((s.contrast_se(&[1.0]) - (var / n).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn wald_interval_uses_the_normal_quantile() {
        let (lo, hi) = wald_interval(0.0, 1.0, 0.95).unwrap();
        assert!((hi - 1.959963984540054).abs() < 1e-9 && (lo + hi).abs() < 1e-15);
        assert!(wald_interval(0.0, 0.0, 0.95).is_err());
        assert!(wald_interval(0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn wald_test_reference_values() {
        assert!((wald_test(0.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((wald_test(1.959963984540054, 1.0).unwrap() - 0.05).abs() < 1e-9);
        assert!((wald_test(1.19, 1.0).unwrap() - 0.234).abs() < 1e-3);
    }
}
