//! Cross-validation: k-fold splits over proxy observations, posterior
//! predictive intervals with the full error structure, and coverage / PI
//! width / RMSE scoring.
//!
//! Tide gauges never enter held-out folds (their short records carry little
//! validation information); they stay in every training set. Each fold
//! reruns the full two-stage fit, and held-out corrective variances use the
//! training fit's derivative evaluated at the held-out covariates.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{Observation, SiteRegistry, Source};
use crate::model::{ModelConfig, ModelSpec};
use crate::noisy_input::{corrective_variance, fit_two_stage, posterior_mean_derivative, FitError};
use crate::posterior::{process_draws, SummaryError};
use crate::sampler::PosteriorSamples;
use crate::util::{mean, quantile_sorted};

#[derive(Error, Debug)]
pub enum CvError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Summary(#[from] SummaryError),
    #[error("k must be at least 2, got {0}")]
    BadK(usize),
    #[error("no proxy observations to cross-validate")]
    NoProxies,
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Fold assignment over the observation list: `Some(fold)` for proxy rows,
/// `None` for tide gauges (always in training).
#[derive(Debug, Clone)]
pub struct FoldAssignment {
    pub fold_of: Vec<Option<usize>>,
    pub k: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl FoldAssignment {
    pub fn heldout_indices(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, f)| **f == Some(fold))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Random partition of the proxy observations into `k` folds, stratified by
/// site: each site's observations are dealt round-robin from a shuffled
/// order with a random starting fold, so every fold receives a nearly equal
/// share per site and at least one observation from every site with at
/// least `k` observations. Sites with fewer than `k` observations fall back
/// to unstratified assignment (with a warning).
pub fn kfold_split(
    observations: &[Observation],
    k: usize,
    seed: u64,
) -> Result<FoldAssignment, CvError> {
    if k < 2 {
        return Err(CvError::BadK(k));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xF01D);
    let mut fold_of = vec![None; observations.len()];
    let mut by_site: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut n_proxy = 0;
    for (i, obs) in observations.iter().enumerate() {
        if obs.source == Source::Proxy {
            by_site.entry(obs.site_id).or_default().push(i);
            n_proxy += 1;
        }
    }
    if n_proxy == 0 {
        return Err(CvError::NoProxies);
    }
    let mut warnings = Vec::new();
    for (site_id, mut indices) in by_site {
        indices.shuffle(&mut rng);
        if indices.len() < k {
            warnings.push(format!(
                "site {site_id} has {} proxy observations (< k = {k}); unstratified assignment",
                indices.len()
            ));
            for i in indices {
                fold_of[i] = Some(rng.random_range(0..k));
            }
        } else {
            let start = rng.random_range(0..k);
            for (pos, i) in indices.into_iter().enumerate() {
                fold_of[i] = Some((start + pos) % k);
            }
        }
    }
    Ok(FoldAssignment {
        fold_of,
        k,
        seed,
        warnings,
    })
}

/// One posterior predictive interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictiveInterval {
    pub lo: f64,
    pub hi: f64,
    pub point: f64,
}

/// Posterior predictive intervals for held-out observations at several
/// levels simultaneously (the same simulated draws feed every level, so
/// wider levels always contain narrower ones).
///
/// Per retained draw, `sims_per_draw` outcomes are simulated as
/// `f(draw) + N(0, sigma(draw)^2 + s_y^2 + s_t^2)`; intervals are
/// equal-tailed quantiles of the simulations and the point estimate is their
/// mean.
#[allow(clippy::too_many_arguments)]
pub fn predictive_intervals(
    samples: &PosteriorSamples,
    registry: &SiteRegistry,
    spec: &ModelSpec,
    heldout: &[Observation],
    heldout_st2: &[f64],
    levels: &[f64],
    sims_per_draw: usize,
    seed: u64,
) -> Result<Vec<Vec<PredictiveInterval>>, CvError> {
    assert_eq!(heldout.len(), heldout_st2.len());
    let sigma_draws: Vec<f64> = samples
        .chains
        .iter()
        .flat_map(|c| c.sigma.iter().copied())
        .collect();

    // Group held-out observations by site so each site's process draws are
    // evaluated in one pass.
    let mut by_site: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, obs) in heldout.iter().enumerate() {
        by_site.entry(obs.site_id).or_default().push(i);
    }

    let mut out = vec![
        vec![
            PredictiveInterval {
                lo: 0.0,
                hi: 0.0,
                point: 0.0
            };
            heldout.len()
        ];
        levels.len()
    ];
    for (site_id, indices) in by_site {
        let times: Vec<f64> = indices.iter().map(|&i| heldout[i].age).collect();
        let f_draws = process_draws(samples, registry, spec, site_id, &times)?;
        for (col, &obs_idx) in indices.iter().enumerate() {
            let obs = &heldout[obs_idx];
            let known_var = obs.rsl_sd * obs.rsl_sd + heldout_st2[obs_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0x51D5 ^ obs_idx as u64);
            let mut sims = Vec::with_capacity(sigma_draws.len() * sims_per_draw);
            for (d, &sigma) in sigma_draws.iter().enumerate() {
                let sd = (sigma * sigma + known_var).sqrt();
                let f = f_draws[(d, col)];
                for _ in 0..sims_per_draw {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sims.push(f + sd * z);
                }
            }
            sims.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let point = mean(&sims);
            for (li, &level) in levels.iter().enumerate() {
                let tail = (1.0 - level) / 2.0;
                out[li][obs_idx] = PredictiveInterval {
                    lo: quantile_sorted(&sims, tail),
                    hi: quantile_sorted(&sims, 1.0 - tail),
                    point,
                };
            }
        }
    }
    Ok(out)
}

/// Coverage / width / RMSE for one site (or the overall pool).
#[derive(Debug, Clone, PartialEq)]
pub struct SiteScore {
    pub site_id: Option<usize>,
    pub site_name: String,
    pub n: usize,
    pub coverage95: f64,
    pub width95: f64,
    pub coverage50: f64,
    pub width50: f64,
    pub rmse_m: f64,
}

/// Full cross-validation report.
#[derive(Debug, Clone)]
pub struct CvReport {
    pub per_site: Vec<SiteScore>,
    pub overall: SiteScore,
    pub folds: FoldAssignment,
    pub seed: u64,
}

impl CvReport {
    /// cv_report.csv: one row per site plus an overall row.
    pub fn write_csv(&self, path: &Path) -> Result<(), CvError> {
        use std::io::Write;
        let io_err = |source: std::io::Error| CvError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(out, "site,n,coverage95,width95,coverage50,width50,rmse_m").map_err(io_err)?;
        for s in self.per_site.iter().chain(std::iter::once(&self.overall)) {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.site_name, s.n, s.coverage95, s.width95, s.coverage50, s.width50, s.rmse_m
            )
            .map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn write_folds_csv(&self, path: &Path) -> Result<(), CvError> {
        use std::io::Write;
        let io_err = |source: std::io::Error| CvError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
        writeln!(out, "obs_index,fold").map_err(io_err)?;
        for (i, fold) in self.folds.fold_of.iter().enumerate() {
            match fold {
                Some(f) => writeln!(out, "{i},{f}").map_err(io_err)?,
                None => writeln!(out, "{i},train_only").map_err(io_err)?,
            }
        }
        out.flush().map_err(io_err)
    }
}

/// Aligned per-observation prediction record.
#[derive(Debug, Clone, Copy)]
pub struct PredictionRecord {
    pub site_id: usize,
    pub truth: f64,
    pub interval95: PredictiveInterval,
    pub interval50: PredictiveInterval,
}

/// Aggregate prediction records into per-site and overall scores.
pub fn score(records: &[PredictionRecord], registry: &SiteRegistry) -> (Vec<SiteScore>, SiteScore) {
    let score_pool = |pool: &[&PredictionRecord], name: String, site_id: Option<usize>| {
        let n = pool.len();
        let nf = n as f64;
        let inside95 = pool
            .iter()
            .filter(|r| r.truth >= r.interval95.lo && r.truth <= r.interval95.hi)
            .count() as f64;
        let inside50 = pool
            .iter()
            .filter(|r| r.truth >= r.interval50.lo && r.truth <= r.interval50.hi)
            .count() as f64;
        let width95 = pool
            .iter()
            .map(|r| r.interval95.hi - r.interval95.lo)
            .sum::<f64>()
            / nf;
        let width50 = pool
            .iter()
            .map(|r| r.interval50.hi - r.interval50.lo)
            .sum::<f64>()
            / nf;
        let rmse = (pool
            .iter()
            .map(|r| (r.truth - r.interval95.point) * (r.truth - r.interval95.point))
            .sum::<f64>()
            / nf)
            .sqrt();
        SiteScore {
            site_id,
            site_name: name,
            n,
            coverage95: inside95 / nf,
            width95,
            coverage50: inside50 / nf,
            width50,
            rmse_m: rmse,
        }
    };

    let mut per_site = Vec::new();
    let mut site_ids: Vec<usize> = records.iter().map(|r| r.site_id).collect();
    site_ids.sort_unstable();
    site_ids.dedup();
    for site_id in site_ids {
        let pool: Vec<&PredictionRecord> =
            records.iter().filter(|r| r.site_id == site_id).collect();
        per_site.push(score_pool(
            &pool,
            registry.get(site_id).name.clone(),
            Some(site_id),
        ));
    }
    let all: Vec<&PredictionRecord> = records.iter().collect();
    let overall = score_pool(&all, "OVERALL".into(), None);
    (per_site, overall)
}

/// Number of predictive simulations per retained draw; with the default 400
/// retained draws this gives 10^4 simulated outcomes per held-out point.
pub const SIMS_PER_DRAW: usize = 25;

/// Run k-fold cross-validation over the proxy observations: each fold
/// retrains the full two-stage model on the remaining data (tide gauges
/// always included) and predicts the held-out rows with the full error
/// structure.
pub fn run_cv(
    observations: &[Observation],
    registry: &SiteRegistry,
    config: &ModelConfig,
    k: usize,
    seed: u64,
) -> Result<CvReport, CvError> {
    let folds = kfold_split(observations, k, seed)?;
    // Grids span the full dataset so held-out covariates stay in range.
    let spec = ModelSpec::from_data(config, observations, registry).map_err(FitError::from)?;

    let fold_results: Vec<Result<Vec<PredictionRecord>, CvError>> = (0..k)
        .into_par_iter()
        .map(|fold| {
            let heldout_idx = folds.heldout_indices(fold);
            if heldout_idx.is_empty() {
                return Ok(Vec::new());
            }
            let train: Vec<Observation> = observations
                .iter()
                .enumerate()
                .filter(|(i, _)| folds.fold_of[*i] != Some(fold))
                .map(|(_, o)| o.clone())
                .collect();
            let heldout: Vec<Observation> = heldout_idx
                .iter()
                .map(|&i| observations[i].clone())
                .collect();
            let fit = fit_two_stage(&train, registry, &spec)?;
            let deriv = posterior_mean_derivative(&fit.stage1, &heldout, &spec)?;
            let heldout_cv = corrective_variance(&deriv, &heldout);
            let intervals = predictive_intervals(
                &fit.samples,
                registry,
                &spec,
                &heldout,
                &heldout_cv.s_t2,
                &[0.95, 0.50],
                SIMS_PER_DRAW,
                seed ^ (fold as u64),
            )?;
            Ok(heldout
                .iter()
                .enumerate()
                .map(|(i, obs)| PredictionRecord {
                    site_id: obs.site_id,
                    truth: obs.rsl,
                    interval95: intervals[0][i],
                    interval50: intervals[1][i],
                })
                .collect())
        })
        .collect();

    let mut records = Vec::new();
    for r in fold_results {
        records.extend(r?);
    }
    let (per_site, overall) = score(&records, registry);
    Ok(CvReport {
        per_site,
        overall,
        folds,
        seed,
    })
}
