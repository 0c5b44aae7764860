//! The two-stage noisy-input fit.
//!
//! Age noise enters the model as extra output variance: a reduced model
//! (regional + slope + offset, no local term) is fitted first, the
//! derivative of its posterior mean is evaluated at each observation, and
//! the corrective variance `s_t^2 = age_sd^2 * derivative^2` joins the known
//! observation variance for the full second-stage fit. Stage two also
//! replaces the regional and offset priors with independent normals at the
//! stage-one posterior summaries, which breaks the confounding between the
//! regional spline and the local tensor field.

use std::path::Path;

use nalgebra::DVector;
use thiserror::Error;

use crate::basis::{bspline_derivative_basis, BasisError};
use crate::ingest::{Observation, SiteRegistry};
use crate::model::{
    build_designs, stage_one_priors, stage_two_priors, ModelError, ModelSpec, Stage,
};
use crate::sampler::{run_chains, Block, Diagnostics, PosteriorSamples, SamplerError};

#[derive(Error, Debug)]
pub enum FitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Stage-one posterior: marginal summaries of the regional and offset
/// blocks (the informed stage-two priors), the slope posterior means used
/// by the derivative, and the full draws.
#[derive(Debug, Clone)]
pub struct StageOnePosterior {
    pub samples: PosteriorSamples,
    pub diagnostics: Diagnostics,
    pub regional_mean: DVector<f64>,
    pub regional_sd: DVector<f64>,
    pub offset_mean: DVector<f64>,
    pub offset_sd: DVector<f64>,
    /// Posterior mean slope per site, m/yr.
    pub slope_mean: DVector<f64>,
}

/// Per-observation corrective variance from the noisy-input expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectiveVariance {
    /// Derivative of the stage-one posterior mean at each observation, m/yr.
    pub derivative_m_per_yr: Vec<f64>,
    /// `s_t^2 = age_sd^2 * derivative^2`, in m^2.
    pub s_t2: Vec<f64>,
}

impl CorrectiveVariance {
    pub fn zeros(n: usize) -> Self {
        Self {
            derivative_m_per_yr: vec![0.0; n],
            s_t2: vec![0.0; n],
        }
    }
}

/// Output of the full two-stage pipeline.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub stage1: StageOnePosterior,
    pub corrective: CorrectiveVariance,
    pub samples: PosteriorSamples,
    pub diagnostics: Diagnostics,
}

/// Fit the reduced stage-one model `f* = r + g + h` with the original
/// priors and observation variance `sigma^2 + s_y^2`.
pub fn stage_one_fit(
    observations: &[Observation],
    registry: &SiteRegistry,
    spec: &ModelSpec,
) -> Result<StageOnePosterior, FitError> {
    let designs = build_designs(observations, registry, spec, Stage::One, None)?;
    let priors = stage_one_priors(spec);
    let (samples, diagnostics) = run_chains(&designs, &priors, &spec.mcmc)?;
    Ok(summarize_stage_one(samples, diagnostics))
}

fn summarize_stage_one(samples: PosteriorSamples, diagnostics: Diagnostics) -> StageOnePosterior {
    let regional_mean = samples.block_mean(Block::Regional);
    let regional_sd = samples.block_sd(Block::Regional).map(|s| s.max(1e-12));
    let offset_mean = samples.block_mean(Block::Offset);
    let offset_sd = samples.block_sd(Block::Offset).map(|s| s.max(1e-12));
    let slope_mean = samples.block_mean(Block::Slope);
    StageOnePosterior {
        samples,
        diagnostics,
        regional_mean,
        regional_sd,
        offset_mean,
        offset_sd,
        slope_mean,
    }
}

/// Derivative of the stage-one posterior mean process at each observation:
/// the regional derivative basis times the mean regional coefficients plus
/// the site's mean slope. The offset contributes nothing. Returned in m/yr.
pub fn posterior_mean_derivative(
    stage1: &StageOnePosterior,
    observations: &[Observation],
    spec: &ModelSpec,
) -> Result<Vec<f64>, FitError> {
    let ages: Vec<f64> = observations.iter().map(|o| o.age).collect();
    let deriv_basis = bspline_derivative_basis(&ages, &spec.regional_grid)?;
    let regional_rate = &deriv_basis.values * &stage1.regional_mean;
    Ok(observations
        .iter()
        .enumerate()
        .map(|(i, obs)| regional_rate[i] + stage1.slope_mean[obs.site_id])
        .collect())
}

/// Convert age sds into output variance through the squared derivative.
pub fn corrective_variance(
    derivative_m_per_yr: &[f64],
    observations: &[Observation],
) -> CorrectiveVariance {
    let s_t2 = derivative_m_per_yr
        .iter()
        .zip(observations.iter())
        .map(|(&d, obs)| (obs.age_sd * d) * (obs.age_sd * d))
        .collect();
    CorrectiveVariance {
        derivative_m_per_yr: derivative_m_per_yr.to_vec(),
        s_t2,
    }
}

/// Fit the full model with the corrective variance added to the known
/// observation variance and informed priors on the regional and offset
/// blocks.
pub fn stage_two_fit(
    observations: &[Observation],
    registry: &SiteRegistry,
    spec: &ModelSpec,
    stage1: &StageOnePosterior,
    corrective: &CorrectiveVariance,
) -> Result<(PosteriorSamples, Diagnostics), FitError> {
    let designs = build_designs(
        observations,
        registry,
        spec,
        Stage::Two,
        Some(&corrective.s_t2),
    )?;
    let priors = stage_two_priors(
        spec,
        stage1.regional_mean.clone(),
        stage1.regional_sd.clone(),
        stage1.offset_mean.clone(),
        stage1.offset_sd.clone(),
    );
    Ok(run_chains(&designs, &priors, &spec.mcmc)?)
}

/// Run the complete pipeline: stage one, derivative, corrective variance,
/// stage two.
pub fn fit_two_stage(
    observations: &[Observation],
    registry: &SiteRegistry,
    spec: &ModelSpec,
) -> Result<FitResult, FitError> {
    let stage1 = stage_one_fit(observations, registry, spec)?;
    let derivative = posterior_mean_derivative(&stage1, observations, spec)?;
    let corrective = corrective_variance(&derivative, observations);
    let (samples, diagnostics) = stage_two_fit(observations, registry, spec, &stage1, &corrective)?;
    Ok(FitResult {
        spec: spec.clone(),
        stage1,
        corrective,
        samples,
        diagnostics,
    })
}

/// Persist the stage-one coefficient summaries (coefficient, mean, sd).
pub fn write_stage1_summary(path: &Path, stage1: &StageOnePosterior) -> Result<(), FitError> {
    use std::io::Write;
    let io_err = |source: std::io::Error| FitError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(out, "coefficient,mean,sd").map_err(io_err)?;
    for s in 0..stage1.regional_mean.len() {
        writeln!(
            out,
            "beta_r[{s}],{},{}",
            stage1.regional_mean[s], stage1.regional_sd[s]
        )
        .map_err(io_err)?;
    }
    for j in 0..stage1.offset_mean.len() {
        writeln!(
            out,
            "beta_h[{j}],{},{}",
            stage1.offset_mean[j], stage1.offset_sd[j]
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Persist the corrective variance (obs index, derivative, s_t in meters).
pub fn write_corrective_variance(
    path: &Path,
    corrective: &CorrectiveVariance,
) -> Result<(), FitError> {
    use std::io::Write;
    let io_err = |source: std::io::Error| FitError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    writeln!(out, "obs_index,derivative_m_per_yr,s_t_m").map_err(io_err)?;
    for (i, (d, s2)) in corrective
        .derivative_m_per_yr
        .iter()
        .zip(corrective.s_t2.iter())
        .enumerate()
    {
        writeln!(out, "{i},{d},{}", s2.sqrt()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::sampler::SampleLayout;
    use crate::synth::{generate, SynthTruth};

    fn quick_mcmc(config: &mut ModelConfig) {
        config.mcmc.iterations = 600;
        config.mcmc.burn_in = 200;
        config.mcmc.thin = 2;
        config.mcmc.chains = 2;
        config.mcmc.seed = 31;
    }

    fn fake_stage_one(
        spec: &ModelSpec,
        regional_mean: DVector<f64>,
        slope_mean: DVector<f64>,
    ) -> StageOnePosterior {
        let k = regional_mean.len();
        let m = slope_mean.len();
        let chain = crate::sampler::ChainDraws {
            beta_r: vec![regional_mean.clone()],
            beta_g: vec![slope_mean.clone()],
            beta_h: vec![DVector::zeros(m)],
            beta_l: vec![],
            sigma_r: vec![0.1],
            sigma_h: vec![2.5],
            sigma_l: vec![],
            sigma: vec![0.1],
        };
        let samples = PosteriorSamples {
            layout: SampleLayout {
                k_regional: k,
                n_sites: m,
                k_local: None,
                has_sigma_r: true,
                has_sigma_h: true,
                has_sigma_l: false,
            },
            chains: vec![chain],
        };
        let _ = spec;
        StageOnePosterior {
            samples,
            diagnostics: Diagnostics {
                per_parameter: vec![],
                acceptance: vec![],
            },
            regional_mean,
            regional_sd: DVector::from_element(k, 0.05),
            offset_mean: DVector::zeros(m),
            offset_sd: DVector::from_element(m, 0.1),
            slope_mean,
        }
    }

    fn toy_setup() -> (Vec<Observation>, SiteRegistry, ModelSpec) {
        let truth = SynthTruth::field_scale(3, 11);
        let data = generate(&truth, 30);
        let mut config = ModelConfig::default();
        quick_mcmc(&mut config);
        let spec = ModelSpec::from_data(&config, &data.observations, &data.registry).unwrap();
        (data.observations, data.registry, spec)
    }

    #[test]
    fn derivative_zero_regional_pure_slope() {
        let (obs, _registry, spec) = toy_setup();
        let stage1 = fake_stage_one(
            &spec,
            DVector::zeros(spec.regional_grid.n_basis()),
            DVector::from_element(spec.n_sites, 0.001),
        );
        let deriv = posterior_mean_derivative(&stage1, &obs, &spec).unwrap();
        assert!(deriv.iter().all(|d| (d - 0.001).abs() < 1e-12));
    }

    #[test]
    fn derivative_linear_regional_reproduction() {
        let (obs, _registry, spec) = toy_setup();
        // Greville coefficients encode r(t) = 0.002 t, so dr/dt = 0.002.
        let greville = spec.regional_grid.greville_abscissae();
        let beta = DVector::from_iterator(greville.len(), greville.iter().map(|g| 0.002 * g));
        let stage1 = fake_stage_one(&spec, beta, DVector::zeros(spec.n_sites));
        let deriv = posterior_mean_derivative(&stage1, &obs, &spec).unwrap();
        assert!(deriv.iter().all(|d| (d - 0.002).abs() < 1e-9));
    }

    #[test]
    fn derivative_matches_finite_differences_of_mean_curve() {
        use rand::Rng;
        use rand::SeedableRng;
        let (obs, _registry, spec) = toy_setup();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let beta = DVector::from_fn(spec.regional_grid.n_basis(), |_, _| {
            rng.random_range(-0.1..0.1)
        });
        let slope = DVector::from_fn(spec.n_sites, |_, _| rng.random_range(-0.002..0.002));
        let stage1 = fake_stage_one(&spec, beta.clone(), slope.clone());
        let deriv = posterior_mean_derivative(&stage1, &obs, &spec).unwrap();
        let h = 1e-5 * (spec.regional_grid.hi() - spec.regional_grid.lo());
        let scale = deriv.iter().fold(1e-4_f64, |acc, d| acc.max(d.abs()));
        for (i, obs_i) in obs.iter().enumerate() {
            let t = obs_i.age.clamp(
                spec.regional_grid.lo() + 2.0 * h,
                spec.regional_grid.hi() - 2.0 * h,
            );
            let basis = crate::basis::bspline_basis(&[t - h, t + h], &spec.regional_grid).unwrap();
            let lo: f64 = (0..beta.len())
                .map(|s| basis.values[(0, s)] * beta[s])
                .sum();
            let hi: f64 = (0..beta.len())
                .map(|s| basis.values[(1, s)] * beta[s])
                .sum();
            let fd = (hi - lo) / (2.0 * h) + slope[obs_i.site_id];
            let deriv_at_t = if (t - obs_i.age).abs() > 0.0 {
                // Clamped near the boundary; recompute analytically at t.
                let db = crate::basis::bspline_derivative_basis(&[t], &spec.regional_grid).unwrap();
                (0..beta.len())
                    .map(|s| db.values[(0, s)] * beta[s])
                    .sum::<f64>()
                    + slope[obs_i.site_id]
            } else {
                deriv[i]
            };
            assert!(
                (deriv_at_t - fd).abs() <= 1e-5 * scale.max(1.0),
                "obs {i}: analytic {deriv_at_t} vs fd {fd}"
            );
        }
    }

    #[test]
    fn corrective_variance_products() {
        let (mut obs, _registry, _spec) = toy_setup();
        obs.truncate(3);
        obs[0].age_sd = 0.0;
        obs[1].age_sd = 50.0;
        obs[2].age_sd = 5.0;
        let deriv = vec![0.004, 0.002, 0.0018];
        let cv = corrective_variance(&deriv, &obs);
        assert_eq!(cv.s_t2[0], 0.0);
        assert!((cv.s_t2[1].sqrt() - 0.1).abs() < 1e-12);
        assert!((cv.s_t2[2].sqrt() - 0.009).abs() < 1e-12);
    }

    #[test]
    fn stage_one_recovers_slopes_on_reduced_truth() {
        // Data generated from r + g + h exactly (no local field, no age
        // noise): slope posterior means within 2 posterior sd at 90% of
        // sites.
        let mut truth = SynthTruth::field_scale(6, 23);
        truth.age_sd_range = (0.0, 0.0);
        truth.local = crate::synth::LocalField::Zero;
        let data = generate(&truth, 40);
        let mut config = ModelConfig::default();
        quick_mcmc(&mut config);
        let spec = ModelSpec::from_data(&config, &data.observations, &data.registry).unwrap();
        let stage1 = stage_one_fit(&data.observations, &data.registry, &spec).unwrap();
        let sd = stage1.samples.block_sd(Block::Slope);
        let mut hits = 0;
        for (j, site) in data.registry.iter().enumerate() {
            let err = (stage1.slope_mean[j] - site.slope_prior_mean).abs();
            if err < 2.0 * sd[j].max(1e-9) {
                hits += 1;
            }
        }
        assert!(hits >= 5, "only {hits}/6 slopes within 2 sd");
    }

    #[test]
    fn stage_one_null_regional_stays_within_envelope() {
        let mut truth = SynthTruth::field_scale(4, 29);
        truth.regional.amplitude_m = 0.0;
        truth.regional.ramp_m_per_yr = 0.0;
        truth.age_sd_range = (0.0, 0.0);
        let data = generate(&truth, 35);
        let mut config = ModelConfig::default();
        quick_mcmc(&mut config);
        let spec = ModelSpec::from_data(&config, &data.observations, &data.registry).unwrap();
        let stage1 = stage_one_fit(&data.observations, &data.registry, &spec).unwrap();
        // Evaluate the regional curve on a grid; its posterior mean must sit
        // inside twice its own pointwise sd envelope.
        let times: Vec<f64> = (0..60)
            .map(|i| {
                let w = i as f64 / 59.0;
                spec.regional_grid.lo() * (1.0 - w) + spec.regional_grid.hi() * w
            })
            .collect();
        let basis = crate::basis::bspline_basis(&times, &spec.regional_grid).unwrap();
        let draws = stage1.samples.pooled_block(Block::Regional);
        let mut violations = 0;
        for (ti, _) in times.iter().enumerate() {
            let values: Vec<f64> = draws
                .iter()
                .map(|beta| {
                    (0..beta.len())
                        .map(|s| basis.values[(ti, s)] * beta[(s, 0)])
                        .sum::<f64>()
                })
                .collect();
            let mean = crate::util::mean(&values);
            let sd = crate::util::sample_sd(&values);
            if mean.abs() > 2.0 * sd.max(1e-6) {
                violations += 1;
            }
        }
        assert!(
            violations <= 6,
            "{violations}/60 grid points outside envelope"
        );
    }

    #[test]
    fn stage_two_with_zero_age_noise_equals_direct_fit() {
        let (obs, registry, spec) = toy_setup();
        let stage1 = stage_one_fit(&obs, &registry, &spec).unwrap();
        let cv = CorrectiveVariance::zeros(obs.len());
        let (a, _) = stage_two_fit(&obs, &registry, &spec, &stage1, &cv).unwrap();

        // Direct fit of the full model with the same informed priors.
        let designs = build_designs(&obs, &registry, &spec, Stage::Two, Some(&cv.s_t2)).unwrap();
        let priors = crate::model::stage_two_priors(
            &spec,
            stage1.regional_mean.clone(),
            stage1.regional_sd.clone(),
            stage1.offset_mean.clone(),
            stage1.offset_sd.clone(),
        );
        let (b, _) = run_chains(&designs, &priors, &spec.mcmc).unwrap();
        for (ca, cb) in a.chains.iter().zip(b.chains.iter()) {
            assert_eq!(ca.sigma, cb.sigma);
            for (da, db) in ca.beta_l.iter().zip(cb.beta_l.iter()) {
                assert_eq!(da, db);
            }
        }
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (obs, registry, spec) = toy_setup();
        let a = fit_two_stage(&obs, &registry, &spec).unwrap();
        let b = fit_two_stage(&obs, &registry, &spec).unwrap();
        assert_eq!(a.corrective, b.corrective);
        for (ca, cb) in a.samples.chains.iter().zip(b.samples.chains.iter()) {
            assert_eq!(ca.sigma, cb.sigma);
            for (da, db) in ca.beta_r.iter().zip(cb.beta_r.iter()) {
                assert_eq!(da, db);
            }
        }
    }

    #[test]
    fn stage_two_regional_stays_near_informed_prior() {
        let (obs, registry, spec) = toy_setup();
        let result = fit_two_stage(&obs, &registry, &spec).unwrap();
        let mean2 = result.samples.block_mean(Block::Regional);
        let mut within = 0;
        for s in 0..mean2.len() {
            let shift = (mean2[s] - result.stage1.regional_mean[s]).abs();
            if shift < 3.0 * result.stage1.regional_sd[s] {
                within += 1;
            }
        }
        // The informed priors should dominate: at least 95% of coefficients.
        assert!(
            within as f64 >= 0.95 * mean2.len() as f64,
            "only {within}/{} coefficients near the informed prior",
            mean2.len()
        );
    }

    #[test]
    fn summary_files_write() {
        let (obs, registry, spec) = toy_setup();
        let stage1 = stage_one_fit(&obs, &registry, &spec).unwrap();
        let deriv = posterior_mean_derivative(&stage1, &obs, &spec).unwrap();
        let cv = corrective_variance(&deriv, &obs);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("stage1_summary.csv");
        let p2 = dir.path().join("corrective_variance.csv");
        write_stage1_summary(&p1, &stage1).unwrap();
        write_corrective_variance(&p2, &cv).unwrap();
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.starts_with("coefficient,mean,sd"));
        assert_eq!(
            text.lines().count(),
            1 + spec.regional_grid.n_basis() + spec.n_sites
        );
        let text = std::fs::read_to_string(&p2).unwrap();
        assert_eq!(text.lines().count(), 1 + obs.len());
    }
}
