//! Average treatment effects under unmeasured confounding with a double negative control:
//! a negative control exposure `Z` that does not affect the outcome and a negative control
//! outcome `W` that is not affected by the treatment or by `Z`.
//!
//! The crate covers
//!
//! * exact identification on finite laws through the bridge equation
//!   `E[Y | Z, a, x] = h(a, x) P(W | Z, a, x)`, rank diagnostics and coarsening
//!   ([`identify`]);
//! * working models for the exposure, outcome and NCO laws ([`nuisance`]) and
//!   g-estimation of the contrast models ([`gestimation`]);
//! * the estimators Δ̂₁, Δ̂₂, Δ̂₃, the plug-in MLE and the multiply robust Δ̂_mr
//!   ([`estimators`]) with stacked sandwich and bootstrap inference ([`inference`]);
//! * the simulation study of the operating characteristics ([`simulate`]) and a
//!   command-line front end ([`cli`]).
//!
//! ```
//! use negctrl::{estimate, DesignedData, EstimatorKind, EstimatorOptions, ModelSpec};
//! use negctrl::simulate::vaccine_dataset;
//!
//! let (data, _latent) = vaccine_dataset(2000, 1).unwrap();
//! let spec = ModelSpec::saturated(&data.covariate_names);
//! let d = DesignedData::new(&data, &spec).unwrap();
//! let mr = estimate(&d, EstimatorKind::Mr, &EstimatorOptions::default()).unwrap();
//! assert!(mr.report.se.unwrap() > 0.0);
//! ```

pub mod cli;
pub mod data;
pub mod error;
pub mod estimators;
pub mod gestimation;
pub mod glm;
pub mod identify;
pub mod inference;
pub mod linalg;
pub mod nuisance;
pub mod point;
pub mod simulate;

pub use data::{load_dataset, read_dataset, CategoricalCoding, ColumnRoles, Dataset, DesignedData, ExposureSpec, ModelSpec};
pub use error::{Error, Result};
pub use estimators::{estimate, reduction_check, EstimateReport, EstimatorKind, EstimatorOptions};
pub use identify::{ate_by_identification, ate_by_reparameterization, infer_latent_cardinality, DiscreteLaw};
pub use inference::{bootstrap_se, sandwich_variance, wald_interval, wald_test};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/identification.md")]
    mod identification {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/inference.md")]
    mod inference {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
