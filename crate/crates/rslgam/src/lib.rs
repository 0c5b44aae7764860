//! Bayesian decomposition of relative sea-level (RSL) records.
//!
//! The crate fits a hierarchical additive model to noisy, bivariate-error
//! observations of relative sea level gathered from geological proxy records
//! and tide gauges. The mean process at site location `x` and time `t` is
//!
//! ```text
//! f(x, t) = r(t) + g(site) * t + h(site) + l(x, t)
//! ```
//!
//! where `r` is a cubic B-spline shared by every site (the regional signal),
//! `g` and `h` are site-level random slopes and vertical offsets, and `l` is a
//! quadratic tensor-product spline over longitude, latitude and time that
//! absorbs residual site-specific structure. Age uncertainty is handled with a
//! two-stage noisy-input fit: a reduced model is fitted first, the derivative
//! of its posterior mean converts age noise into an extra output variance, and
//! the full model is refitted with that corrective term and with priors
//! informed by the first stage.
//!
//! Modules follow the pipeline order: [`ingest`] loads and normalizes data,
//! [`basis`] builds spline bases, [`model`] assembles designs and priors,
//! [`sampler`] draws from the posterior by blocked Gibbs with slice-sampled
//! scale parameters, [`noisy_input`] orchestrates the two-stage fit,
//! [`posterior`] summarizes component decompositions and rates, [`validate`]
//! runs k-fold cross-validation, and [`synth`] generates ground-truth
//! datasets for calibration tests.

pub mod basis;
pub mod ingest;
pub mod model;
pub mod noisy_input;
pub mod posterior;
pub mod sampler;
pub mod synth;
mod util;
pub mod validate;

pub use basis::{BasisError, BasisKind, BasisMatrix, KnotGrid, TensorGrids};
pub use ingest::{IngestError, Observation, SiteRegistry, Source};
pub use model::{DesignSet, McmcConfig, ModelConfig, ModelError, ModelSpec, Stage};
pub use noisy_input::{CorrectiveVariance, FitError, FitResult, StageOnePosterior};
pub use posterior::{Component, DecompositionSummary, PredictionGrid, RateKind};
pub use sampler::{Diagnostics, PosteriorSamples, SamplerError};
pub use validate::{CvError, CvReport};
