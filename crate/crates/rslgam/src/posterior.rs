//! Posterior summaries: component decompositions, total fits, and rates of
//! change on per-site prediction grids.
//!
//! Every summary is computed draw-wise first (the total is the exact sum of
//! the components within each draw) and only then reduced to pointwise means
//! and equal-tailed quantiles, pooling chains.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::basis::{
    bspline_basis, bspline_derivative_basis, tensor_basis, tensor_time_derivative_basis, BasisError,
};
use crate::ingest::SiteRegistry;
use crate::model::ModelSpec;
use crate::sampler::PosteriorSamples;
use crate::util::quantile;

#[derive(Error, Debug)]
pub enum SummaryError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("no posterior draws supplied")]
    EmptySamples,
    #[error("site {site_id} not present in the registry (len {len})")]
    UnknownSite { site_id: usize, len: usize },
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Decomposition components. `LinearLocal` bundles the site slope term with
/// the vertical offset (they are reported together).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Regional,
    LinearLocal,
    NonLinearLocal,
    Total,
}

impl Component {
    pub fn label(&self) -> &'static str {
        match self {
            Component::Regional => "regional",
            Component::LinearLocal => "linear_local",
            Component::NonLinearLocal => "nonlinear_local",
            Component::Total => "total",
        }
    }
}

/// Which rate to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    Total,
    Regional,
}

impl RateKind {
    pub fn label(&self) -> &'static str {
        match self {
            RateKind::Total => "total",
            RateKind::Regional => "regional",
        }
    }
}

/// Pointwise posterior summary of one quantity at one site and time.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub site_id: usize,
    pub time: f64,
    pub component: &'static str,
    pub mean: f64,
    pub p2_5: f64,
    pub p25: f64,
    pub p75: f64,
    pub p97_5: f64,
}

/// Rows of a decomposition or rate summary, in (site, component, time)
/// order.
#[derive(Debug, Clone, Default)]
pub struct DecompositionSummary {
    pub rows: Vec<SummaryRow>,
}

impl DecompositionSummary {
    pub fn rows_for(&self, site_id: usize, component: &str) -> Vec<&SummaryRow> {
        self.rows
            .iter()
            .filter(|r| r.site_id == site_id && r.component == component)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SummaryError> {
        use std::io::Write;
        let io_err = |source: std::io::Error| SummaryError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(out, "site_id,time_ce,component,mean,p2.5,p25,p75,p97.5").map_err(io_err)?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.site_id, r.time, r.component, r.mean, r.p2_5, r.p25, r.p75, r.p97_5
            )
            .map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

/// Per-site evaluation times.
#[derive(Debug, Clone, Default)]
pub struct PredictionGrid {
    pub per_site: Vec<(usize, Vec<f64>)>,
}

impl PredictionGrid {
    /// Default grid: `step`-year spacing over each site's observed age span
    /// (end point included).
    pub fn from_observations(observations: &[crate::ingest::Observation], step: f64) -> Self {
        let mut spans: std::collections::BTreeMap<usize, (f64, f64)> =
            std::collections::BTreeMap::new();
        for obs in observations {
            let e = spans.entry(obs.site_id).or_insert((obs.age, obs.age));
            e.0 = e.0.min(obs.age);
            e.1 = e.1.max(obs.age);
        }
        let per_site = spans
            .into_iter()
            .map(|(site_id, (lo, hi))| {
                let mut times = Vec::new();
                let mut t = lo;
                while t < hi {
                    times.push(t);
                    t += step;
                }
                times.push(hi);
                (site_id, times)
            })
            .collect();
        Self { per_site }
    }
}

/// Draws of every model component for one site on a time grid. Row = draw,
/// column = grid time. The total is the draw-wise sum of the three
/// components.
pub struct ComponentDraws {
    pub regional: DMatrix<f64>,
    pub linear_local: DMatrix<f64>,
    pub nonlinear_local: DMatrix<f64>,
    pub total: DMatrix<f64>,
}

/// Evaluate per-draw component values for one site at the given times.
pub fn component_draws(
    samples: &PosteriorSamples,
    registry: &SiteRegistry,
    spec: &ModelSpec,
    site_id: usize,
    times: &[f64],
) -> Result<ComponentDraws, SummaryError> {
    if samples.total_draws() == 0 {
        return Err(SummaryError::EmptySamples);
    }
    if site_id >= registry.len() {
        return Err(SummaryError::UnknownSite {
            site_id,
            len: registry.len(),
        });
    }
    let site = registry.get(site_id);
    let regional_basis = bspline_basis(times, &spec.regional_grid)?;
    let has_local = samples.layout.k_local.is_some();
    let local_basis = if has_local {
        let lons = vec![site.lon; times.len()];
        let lats = vec![site.lat; times.len()];
        Some(tensor_basis(&lons, &lats, times, &spec.local_grids)?)
    } else {
        None
    };

    let n_draws = samples.total_draws();
    let n_times = times.len();
    let mut regional = DMatrix::zeros(n_draws, n_times);
    let mut linear_local = DMatrix::zeros(n_draws, n_times);
    let mut nonlinear_local = DMatrix::zeros(n_draws, n_times);
    let mut total = DMatrix::zeros(n_draws, n_times);

    let mut row = 0;
    for chain in &samples.chains {
        for draw in 0..chain.sigma.len() {
            let r = &regional_basis.values * &chain.beta_r[draw];
            let slope = chain.beta_g[draw][site_id];
            let offset = chain.beta_h[draw][site_id];
            let l: Option<DVector<f64>> = local_basis
                .as_ref()
                .map(|b| &b.values * &chain.beta_l[draw]);
            for (ti, &t) in times.iter().enumerate() {
                let lin = slope * (t - spec.age_scaling.mean) + offset;
                let loc = l.as_ref().map_or(0.0, |v| v[ti]);
                regional[(row, ti)] = r[ti];
                linear_local[(row, ti)] = lin;
                nonlinear_local[(row, ti)] = loc;
                total[(row, ti)] = r[ti] + lin + loc;
            }
            row += 1;
        }
    }
    Ok(ComponentDraws {
        regional,
        linear_local,
        nonlinear_local,
        total,
    })
}

/// Draws of the total mean process for one site (rows = draws, columns =
/// times); the shared evaluator behind prediction and validation.
pub fn process_draws(
    samples: &PosteriorSamples,
    registry: &SiteRegistry,
    spec: &ModelSpec,
    site_id: usize,
    times: &[f64],
) -> Result<DMatrix<f64>, SummaryError> {
    Ok(component_draws(samples, registry, spec, site_id, times)?.total)
}

fn summarize_matrix(
    rows: &mut Vec<SummaryRow>,
    draws: &DMatrix<f64>,
    site_id: usize,
    times: &[f64],
    component: &'static str,
    unit_factor: f64,
) {
    for (ti, &t) in times.iter().enumerate() {
        let col: Vec<f64> = (0..draws.nrows())
            .map(|d| draws[(d, ti)] * unit_factor)
            .collect();
        rows.push(SummaryRow {
            site_id,
            time: t,
            component,
            mean: crate::util::mean(&col),
            p2_5: quantile(&col, 0.025),
            p25: quantile(&col, 0.25),
            p75: quantile(&col, 0.75),
            p97_5: quantile(&col, 0.975),
        });
    }
}

/// Summarize the decomposition (all four quantities) on the grid.
pub fn decompose(
    samples: &PosteriorSamples,
    registry: &SiteRegistry,
    spec: &ModelSpec,
    grid: &PredictionGrid,
) -> Result<DecompositionSummary, SummaryError> {
    let mut rows = Vec::new();
    for (site_id, times) in &grid.per_site {
        let draws = component_draws(samples, registry, spec, *site_id, times)?;
        summarize_matrix(
            &mut rows,
            &draws.regional,
            *site_id,
            times,
            Component::Regional.label(),
            1.0,
        );
        summarize_matrix(
            &mut rows,
            &draws.linear_local,
            *site_id,
            times,
            Component::LinearLocal.label(),
            1.0,
        );
        summarize_matrix(
            &mut rows,
            &draws.nonlinear_local,
            *site_id,
            times,
            Component::NonLinearLocal.label(),
            1.0,
        );
        summarize_matrix(
            &mut rows,
            &draws.total,
            *site_id,
            times,
            Component::Total.label(),
            1.0,
        );
    }
    Ok(DecompositionSummary { rows })
}

/// Per-draw instantaneous rates (mm/yr) at one site: regional derivative
/// plus, for the total rate, the site slope and the local field's time
/// derivative.
pub fn rate_draws(
    samples: &PosteriorSamples,
    registry: &SiteRegistry,
    spec: &ModelSpec,
    site_id: usize,
    times: &[f64],
    which: RateKind,
) -> Result<DMatrix<f64>, SummaryError> {
    if samples.total_draws() == 0 {
        return Err(SummaryError::EmptySamples);
    }
    if site_id >= registry.len() {
        return Err(SummaryError::UnknownSite {
            site_id,
            len: registry.len(),
        });
    }
    let site = registry.get(site_id);
    let regional_deriv = bspline_derivative_basis(times, &spec.regional_grid)?;
    let local_deriv = if which == RateKind::Total && samples.layout.k_local.is_some() {
        let lons = vec![site.lon; times.len()];
        let lats = vec![site.lat; times.len()];
        Some(tensor_time_derivative_basis(
            &lons,
            &lats,
            times,
            &spec.local_grids,
        )?)
    } else {
        None
    };

    let mut rates = DMatrix::zeros(samples.total_draws(), times.len());
    let mut row = 0;
    for chain in &samples.chains {
        for draw in 0..chain.sigma.len() {
            let dr = &regional_deriv.values * &chain.beta_r[draw];
            let slope = chain.beta_g[draw][site_id];
            let dl: Option<DVector<f64>> = local_deriv
                .as_ref()
                .map(|b| &b.values * &chain.beta_l[draw]);
            for ti in 0..times.len() {
                let rate_m_per_yr = match which {
                    RateKind::Regional => dr[ti],
                    RateKind::Total => dr[ti] + slope + dl.as_ref().map_or(0.0, |v| v[ti]),
                };
                rates[(row, ti)] = rate_m_per_yr;
            }
            row += 1;
        }
    }
    Ok(rates)
}

/// Summarize instantaneous rates of change in mm/yr on the grid.
pub fn rate_of_change(
    samples: &PosteriorSamples,
    registry: &SiteRegistry,
    spec: &ModelSpec,
    grid: &PredictionGrid,
    which: RateKind,
) -> Result<DecompositionSummary, SummaryError> {
    let mut rows = Vec::new();
    for (site_id, times) in &grid.per_site {
        let draws = rate_draws(samples, registry, spec, *site_id, times, which)?;
        summarize_matrix(&mut rows, &draws, *site_id, times, which.label(), 1000.0);
    }
    Ok(DecompositionSummary { rows })
}
