//! Model assembly: design structures, prior configuration, and the joint
//! log posterior.
//!
//! The mean process is `f = B_r beta_r + t beta_g[site] + beta_h[site] +
//! B_l beta_l`, observed with variance `sigma^2 + s_y^2 + s_t^2` per datum.
//! Ages in the slope term are standardized internally (the raw scale, years
//! CE in the thousands, conditions the slope/offset blocks poorly); slope
//! priors are transformed consistently and draws are reported back in m/yr.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{bspline_basis, tensor_basis, BasisError, BasisMatrix, KnotGrid, TensorGrids};
use crate::ingest::{Observation, SiteRegistry};

#[derive(Error, Debug)]
pub enum ModelError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("observations outside the {what} span: rows {rows:?}")]
    OutOfSpan {
        what: &'static str,
        rows: Vec<usize>,
    },
    #[error("invalid MCMC config: {0}")]
    InvalidMcmc(String),
    #[error("stage Two needs a corrective variance of length {expected}, got {got}")]
    CorrectiveMismatch { expected: usize, got: usize },
    #[error("no observations supplied")]
    Empty,
    #[error("observation row {row} references site {site_id}, registry has {n_sites}")]
    UnknownSite {
        row: usize,
        site_id: usize,
        n_sites: usize,
    },
}

/// MCMC run settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub chains: usize,
    pub seed: u64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            burn_in: 1000,
            thin: 5,
            chains: 2,
            seed: 4242,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.burn_in >= self.iterations {
            return Err(ModelError::InvalidMcmc(format!(
                "burn_in ({}) must be below iterations ({})",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 {
            return Err(ModelError::InvalidMcmc("thin must be >= 1".into()));
        }
        if self.chains == 0 {
            return Err(ModelError::InvalidMcmc("chains must be >= 1".into()));
        }
        Ok(())
    }

    /// Retained draws per chain: `(iterations - burn_in) / thin`, counting
    /// iterations `burn_in, burn_in + thin, ...`.
    pub fn retained_per_chain(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// Knot counts for the spline terms. The basis counts are artifact defaults
/// (24 cubic functions for the regional term; 4 x 4 x 8 quadratic functions
/// for the local tensor) and are configurable here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnotConfig {
    pub regional_basis: usize,
    pub local_lon_basis: usize,
    pub local_lat_basis: usize,
    pub local_time_basis: usize,
    /// Regional/local time spans are padded by this many years beyond the
    /// observed age range.
    pub span_pad_yr: f64,
    /// Pin the time span (years CE) instead of deriving it from the data;
    /// observations outside it are rejected. Useful for holding grids fixed
    /// across runs.
    pub time_span_ce: Option<[f64; 2]>,
}

impl Default for KnotConfig {
    fn default() -> Self {
        Self {
            regional_basis: 24,
            local_lon_basis: 4,
            local_lat_basis: 4,
            local_time_basis: 8,
            span_pad_yr: 10.0,
            time_span_ce: None,
        }
    }
}

/// Hyperprior scales. Coefficient-scale parameters get truncated Cauchy
/// priors; the offset scale is centred away from zero because vertical
/// shifts of a few meters between sites are plausible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub offset_scale_location_m: f64,
    pub offset_scale_scale_m: f64,
    pub smoothness_scale: f64,
    pub error_scale: f64,
    pub rsl_sd_floor_m: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            offset_scale_location_m: 2.5,
            offset_scale_scale_m: 2.0,
            smoothness_scale: 1.0,
            error_scale: 1.0,
            rsl_sd_floor_m: 0.01,
        }
    }
}

/// User-facing configuration, read from JSON. A top-level `seed` overrides
/// `mcmc.seed` when present.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub knots: KnotConfig,
    pub priors: PriorConfig,
    pub mcmc: McmcConfig,
    pub seed: Option<u64>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn effective_mcmc(&self) -> McmcConfig {
        let mut mcmc = self.mcmc;
        if let Some(seed) = self.seed {
            mcmc.seed = seed;
        }
        mcmc
    }
}

/// Truncated Cauchy prior for a positive scale parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalePrior {
    pub location: f64,
    pub scale: f64,
}

impl ScalePrior {
    pub fn half_cauchy(scale: f64) -> Self {
        Self {
            location: 0.0,
            scale,
        }
    }

    /// Log density up to an additive constant; negative infinity outside the
    /// positive half line.
    pub fn log_density(&self, x: f64) -> f64 {
        if x <= 0.0 || !x.is_finite() {
            return f64::NEG_INFINITY;
        }
        let z = (x - self.location) / self.scale;
        -(1.0 + z * z).ln()
    }
}

/// Linear transform taking raw ages (years CE) to the standardized scale
/// used by the slope design column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeScaling {
    pub mean: f64,
    pub sd: f64,
}

impl AgeScaling {
    pub fn from_ages(ages: &[f64]) -> Self {
        let mean = crate::util::mean(ages);
        let sd = crate::util::sample_sd(ages);
        Self {
            mean,
            sd: if sd > 0.0 { sd } else { 1.0 },
        }
    }

    pub fn standardize(&self, age: f64) -> f64 {
        (age - self.mean) / self.sd
    }

    /// Slope in m per standardized unit -> m/yr.
    pub fn slope_to_reported(&self, internal: f64) -> f64 {
        internal / self.sd
    }

    /// Slope in m/yr -> m per standardized unit.
    pub fn slope_to_internal(&self, reported: f64) -> f64 {
        reported * self.sd
    }
}

/// Fully resolved model specification: grids anchored to the data spans,
/// per-site slope priors (m/yr), hyperprior scales, and MCMC settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub regional_grid: KnotGrid,
    pub local_grids: TensorGrids,
    pub slope_prior_mean: Vec<f64>,
    pub slope_prior_sd: Vec<f64>,
    pub offset_scale_prior: ScalePrior,
    pub smoothness_prior: ScalePrior,
    pub error_prior: ScalePrior,
    pub age_scaling: AgeScaling,
    pub mcmc: McmcConfig,
    pub n_sites: usize,
}

impl ModelSpec {
    /// Resolve a configuration against the data: grid spans cover the
    /// observed ages (padded) and site coordinates, slope priors come from
    /// the registry.
    pub fn from_data(
        config: &ModelConfig,
        observations: &[Observation],
        registry: &SiteRegistry,
    ) -> Result<Self, ModelError> {
        if observations.is_empty() {
            return Err(ModelError::Empty);
        }
        let mcmc = config.effective_mcmc();
        mcmc.validate()?;
        let ages: Vec<f64> = observations.iter().map(|o| o.age).collect();
        let (time_lo, time_hi) = match config.knots.time_span_ce {
            Some([lo, hi]) => (lo, hi),
            None => {
                let (age_lo, age_hi) = min_max(&ages);
                let pad = config.knots.span_pad_yr;
                (age_lo - pad, age_hi + pad)
            }
        };
        let regional_grid = KnotGrid::cubic(time_lo, time_hi, config.knots.regional_basis)?;

        let lons: Vec<f64> = registry.iter().map(|s| s.lon).collect();
        let lats: Vec<f64> = registry.iter().map(|s| s.lat).collect();
        let (lon_lo, lon_hi) = padded_coord_span(&lons);
        let (lat_lo, lat_hi) = padded_coord_span(&lats);
        let local_grids = TensorGrids {
            lon: KnotGrid::quadratic(lon_lo, lon_hi, config.knots.local_lon_basis)?,
            lat: KnotGrid::quadratic(lat_lo, lat_hi, config.knots.local_lat_basis)?,
            time: KnotGrid::quadratic(time_lo, time_hi, config.knots.local_time_basis)?,
        };

        Ok(Self {
            regional_grid,
            local_grids,
            slope_prior_mean: registry.iter().map(|s| s.slope_prior_mean).collect(),
            slope_prior_sd: registry.iter().map(|s| s.slope_prior_sd).collect(),
            offset_scale_prior: ScalePrior {
                location: config.priors.offset_scale_location_m,
                scale: config.priors.offset_scale_scale_m,
            },
            smoothness_prior: ScalePrior::half_cauchy(config.priors.smoothness_scale),
            error_prior: ScalePrior::half_cauchy(config.priors.error_scale),
            age_scaling: AgeScaling::from_ages(&ages),
            mcmc,
            n_sites: registry.len(),
        })
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn padded_coord_span(values: &[f64]) -> (f64, f64) {
    let (lo, hi) = min_max(values);
    let pad = (0.025 * (hi - lo)).max(0.25);
    (lo - pad, hi + pad)
}

/// Which model is being fitted: stage One omits the local tensor term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

/// Evaluated design structure shared by the sampler and the summaries.
#[derive(Debug, Clone)]
pub struct DesignSet {
    pub stage: Stage,
    /// Observed RSL (meters).
    pub y: DVector<f64>,
    /// Regional basis at the observation ages.
    pub regional: BasisMatrix,
    /// Standardized ages, the slope design column.
    pub ages_std: DVector<f64>,
    /// Site index per observation (one-hot incidence rows).
    pub site_index: Vec<usize>,
    /// Local tensor basis; present only in stage Two.
    pub local: Option<BasisMatrix>,
    /// Known per-observation variance: `s_y^2` plus, in stage Two, the
    /// noisy-input corrective `s_t^2`.
    pub obs_var_known: DVector<f64>,
    pub n_sites: usize,
    pub age_scaling: AgeScaling,
}

impl DesignSet {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    /// Dense one-hot incidence matrix, mainly for tests and oracles.
    pub fn incidence_matrix(&self) -> nalgebra::DMatrix<f64> {
        let mut z = nalgebra::DMatrix::zeros(self.site_index.len(), self.n_sites);
        for (row, &site) in self.site_index.iter().enumerate() {
            z[(row, site)] = 1.0;
        }
        z
    }
}

/// Build the design set for one stage. Stage Two requires the corrective
/// variance vector from the stage-one derivative (pass zeros for the
/// noiseless-age case).
pub fn build_designs(
    observations: &[Observation],
    registry: &SiteRegistry,
    spec: &ModelSpec,
    stage: Stage,
    corrective_var: Option<&[f64]>,
) -> Result<DesignSet, ModelError> {
    if observations.is_empty() {
        return Err(ModelError::Empty);
    }
    for (row, obs) in observations.iter().enumerate() {
        if obs.site_id >= registry.len() {
            return Err(ModelError::UnknownSite {
                row,
                site_id: obs.site_id,
                n_sites: registry.len(),
            });
        }
    }
    let bad_ages: Vec<usize> = observations
        .iter()
        .enumerate()
        .filter(|(_, o)| !spec.regional_grid.contains(o.age))
        .map(|(i, _)| i)
        .collect();
    if !bad_ages.is_empty() {
        return Err(ModelError::OutOfSpan {
            what: "age",
            rows: bad_ages,
        });
    }

    let ages: Vec<f64> = observations.iter().map(|o| o.age).collect();
    let regional = bspline_basis(&ages, &spec.regional_grid)?;
    let ages_std = DVector::from_iterator(
        ages.len(),
        ages.iter().map(|&a| spec.age_scaling.standardize(a)),
    );
    let site_index: Vec<usize> = observations.iter().map(|o| o.site_id).collect();
    let y = DVector::from_iterator(observations.len(), observations.iter().map(|o| o.rsl));

    let local = match stage {
        Stage::One => None,
        Stage::Two => {
            let lons: Vec<f64> = site_index.iter().map(|&j| registry.get(j).lon).collect();
            let lats: Vec<f64> = site_index.iter().map(|&j| registry.get(j).lat).collect();
            let bad_coords: Vec<usize> = (0..lons.len())
                .filter(|&i| {
                    !spec.local_grids.lon.contains(lons[i])
                        || !spec.local_grids.lat.contains(lats[i])
                })
                .collect();
            if !bad_coords.is_empty() {
                return Err(ModelError::OutOfSpan {
                    what: "site coordinate",
                    rows: bad_coords,
                });
            }
            Some(tensor_basis(&lons, &lats, &ages, &spec.local_grids)?)
        }
    };

    let mut obs_var_known = DVector::from_iterator(
        observations.len(),
        observations.iter().map(|o| o.rsl_sd * o.rsl_sd),
    );
    match (stage, corrective_var) {
        (Stage::One, _) => {}
        (Stage::Two, Some(cv)) => {
            if cv.len() != observations.len() {
                return Err(ModelError::CorrectiveMismatch {
                    expected: observations.len(),
                    got: cv.len(),
                });
            }
            for (i, &v) in cv.iter().enumerate() {
                obs_var_known[i] += v;
            }
        }
        (Stage::Two, None) => {
            return Err(ModelError::CorrectiveMismatch {
                expected: observations.len(),
                got: 0,
            });
        }
    }

    Ok(DesignSet {
        stage,
        y,
        regional,
        ages_std,
        site_index,
        local,
        obs_var_known,
        n_sites: registry.len(),
        age_scaling: spec.age_scaling,
    })
}

/// Prior for one coefficient block: either exchangeable normals with a
/// sampled scale, or fixed per-coefficient normals (the informed stage-two
/// priors).
#[derive(Debug, Clone)]
pub enum BlockPriorKind {
    Hierarchical { scale_prior: ScalePrior, init: f64 },
    Fixed { sd: DVector<f64> },
}

#[derive(Debug, Clone)]
pub struct BlockPrior {
    pub mean: DVector<f64>,
    pub kind: BlockPriorKind,
}

impl BlockPrior {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Prior for the observation-error scale: sampled with a truncated Cauchy
/// prior in production fits, or held fixed (useful for conjugate reference
/// runs).
#[derive(Debug, Clone, Copy)]
pub enum ErrorScalePrior {
    Sampled(ScalePrior),
    Fixed(f64),
}

/// Block priors for one fitting stage plus the observation-error scale prior.
#[derive(Debug, Clone)]
pub struct StagePriors {
    pub regional: BlockPrior,
    pub slope: BlockPrior,
    pub offset: BlockPrior,
    pub local: Option<BlockPrior>,
    pub error: ErrorScalePrior,
}

/// Stage one: zero-mean hierarchical priors on the regional and offset
/// blocks, fixed empirical/physical priors on the slopes, no local term.
pub fn stage_one_priors(spec: &ModelSpec) -> StagePriors {
    StagePriors {
        regional: BlockPrior {
            mean: DVector::zeros(spec.regional_grid.n_basis()),
            kind: BlockPriorKind::Hierarchical {
                scale_prior: spec.smoothness_prior,
                init: 0.1,
            },
        },
        slope: slope_prior(spec),
        offset: BlockPrior {
            mean: DVector::zeros(spec.n_sites),
            kind: BlockPriorKind::Hierarchical {
                scale_prior: spec.offset_scale_prior,
                init: 2.5,
            },
        },
        local: None,
        error: ErrorScalePrior::Sampled(spec.error_prior),
    }
}

/// Stage two: regional and offset priors are fixed at the stage-one
/// posterior summaries; the local tensor block enters with a sampled scale.
pub fn stage_two_priors(
    spec: &ModelSpec,
    regional_mean: DVector<f64>,
    regional_sd: DVector<f64>,
    offset_mean: DVector<f64>,
    offset_sd: DVector<f64>,
) -> StagePriors {
    StagePriors {
        regional: BlockPrior {
            mean: regional_mean,
            kind: BlockPriorKind::Fixed { sd: regional_sd },
        },
        slope: slope_prior(spec),
        offset: BlockPrior {
            mean: offset_mean,
            kind: BlockPriorKind::Fixed { sd: offset_sd },
        },
        local: Some(BlockPrior {
            mean: DVector::zeros(spec.local_grids.n_basis()),
            kind: BlockPriorKind::Hierarchical {
                scale_prior: spec.smoothness_prior,
                init: 0.1,
            },
        }),
        error: ErrorScalePrior::Sampled(spec.error_prior),
    }
}

fn slope_prior(spec: &ModelSpec) -> BlockPrior {
    let mean = DVector::from_iterator(
        spec.n_sites,
        spec.slope_prior_mean
            .iter()
            .map(|&m| spec.age_scaling.slope_to_internal(m)),
    );
    let sd = DVector::from_iterator(
        spec.n_sites,
        spec.slope_prior_sd
            .iter()
            .map(|&s| spec.age_scaling.slope_to_internal(s)),
    );
    BlockPrior {
        mean,
        kind: BlockPriorKind::Fixed { sd },
    }
}

/// Sampler state on the internal (standardized-age) parameterization.
#[derive(Debug, Clone)]
pub struct ParameterState {
    pub beta_r: DVector<f64>,
    pub beta_g: DVector<f64>,
    pub beta_h: DVector<f64>,
    pub beta_l: Option<DVector<f64>>,
    pub sigma_r: Option<f64>,
    pub sigma_h: Option<f64>,
    pub sigma_l: Option<f64>,
    pub sigma: f64,
}

/// Mean process at every observation.
pub fn fitted_values(state: &ParameterState, designs: &DesignSet) -> DVector<f64> {
    let n = designs.n_obs();
    let mut f = &designs.regional.values * &state.beta_r;
    for i in 0..n {
        let j = designs.site_index[i];
        f[i] += designs.ages_std[i] * state.beta_g[j] + state.beta_h[j];
    }
    if let (Some(local), Some(beta_l)) = (&designs.local, &state.beta_l) {
        f += &local.values * beta_l;
    }
    f
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + d * d / var)
}

fn block_log_prior(beta: &DVector<f64>, prior: &BlockPrior, scale: Option<f64>) -> f64 {
    match (&prior.kind, scale) {
        (BlockPriorKind::Hierarchical { scale_prior, .. }, Some(sigma_b)) => {
            if sigma_b <= 0.0 {
                return f64::NEG_INFINITY;
            }
            let var = sigma_b * sigma_b;
            beta.iter()
                .zip(prior.mean.iter())
                .map(|(&b, &m)| log_normal_pdf(b, m, var))
                .sum::<f64>()
                + scale_prior.log_density(sigma_b)
        }
        (BlockPriorKind::Fixed { sd }, _) => beta
            .iter()
            .zip(prior.mean.iter())
            .zip(sd.iter())
            .map(|((&b, &m), &s)| log_normal_pdf(b, m, s * s))
            .sum(),
        (BlockPriorKind::Hierarchical { .. }, None) => f64::NEG_INFINITY,
    }
}

/// Joint log posterior (likelihood times all priors) up to an additive
/// constant. Non-positive scale parameters yield negative infinity rather
/// than an error, so rejection-style samplers and optimizers can probe
/// freely.
pub fn log_posterior(state: &ParameterState, designs: &DesignSet, priors: &StagePriors) -> f64 {
    if state.sigma <= 0.0 || !state.sigma.is_finite() {
        return f64::NEG_INFINITY;
    }
    let f = fitted_values(state, designs);
    let s2 = state.sigma * state.sigma;
    let mut lp = 0.0;
    for i in 0..designs.n_obs() {
        let v = s2 + designs.obs_var_known[i];
        lp += log_normal_pdf(designs.y[i], f[i], v);
    }
    lp += block_log_prior(&state.beta_r, &priors.regional, state.sigma_r);
    lp += block_log_prior(&state.beta_g, &priors.slope, None);
    lp += block_log_prior(&state.beta_h, &priors.offset, state.sigma_h);
    if let (Some(beta_l), Some(local_prior)) = (&state.beta_l, &priors.local) {
        lp += block_log_prior(beta_l, local_prior, state.sigma_l);
    }
    match priors.error {
        ErrorScalePrior::Sampled(prior) => lp += prior.log_density(state.sigma),
        ErrorScalePrior::Fixed(_) => {}
    }
    lp
}
