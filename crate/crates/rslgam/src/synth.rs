//! Synthetic data with known ground truth, mirroring the bivariate error
//! structure of the real records: latent ages are observed with Gaussian
//! noise and RSL carries both measurement and residual noise.
//!
//! This is the oracle used by recovery and calibration tests: every
//! component (regional curve, site slopes and offsets, local field) is an
//! analytic function that the fitted model can be compared against.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ingest::{Observation, Site, SiteRegistry, Source};

/// Shared regional signal: a sinusoid plus a linear ramp, anchored at a
/// reference year.
#[derive(Debug, Clone, Copy)]
pub struct RegionalCurve {
    pub amplitude_m: f64,
    pub period_yr: f64,
    pub ramp_m_per_yr: f64,
    pub reference_yr: f64,
}

impl RegionalCurve {
    pub fn value(&self, t: f64) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * (t - self.reference_yr) / self.period_yr;
        self.amplitude_m * phase.sin() + self.ramp_m_per_yr * (t - self.reference_yr)
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI / self.period_yr;
        let phase = omega * (t - self.reference_yr);
        self.amplitude_m * omega * phase.cos() + self.ramp_m_per_yr
    }
}

/// Residual site-specific field.
#[derive(Debug, Clone, Copy)]
pub enum LocalField {
    Zero,
    /// Separable `amplitude * cos(pi (lon - lon0)/lon_scale) *
    /// cos(pi (lat - lat0)/lat_scale) * sin(2 pi (t - t0)/period)`.
    Separable {
        amplitude_m: f64,
        lon0: f64,
        lon_scale: f64,
        lat0: f64,
        lat_scale: f64,
        period_yr: f64,
        reference_yr: f64,
    },
}

impl LocalField {
    pub fn value(&self, lon: f64, lat: f64, t: f64) -> f64 {
        match *self {
            LocalField::Zero => 0.0,
            LocalField::Separable {
                amplitude_m,
                lon0,
                lon_scale,
                lat0,
                lat_scale,
                period_yr,
                reference_yr,
            } => {
                let u = (std::f64::consts::PI * (lon - lon0) / lon_scale).cos();
                let v = (std::f64::consts::PI * (lat - lat0) / lat_scale).cos();
                let w = (2.0 * std::f64::consts::PI * (t - reference_yr) / period_yr).sin();
                amplitude_m * u * v * w
            }
        }
    }

    pub fn time_derivative(&self, lon: f64, lat: f64, t: f64) -> f64 {
        match *self {
            LocalField::Zero => 0.0,
            LocalField::Separable {
                amplitude_m,
                lon0,
                lon_scale,
                lat0,
                lat_scale,
                period_yr,
                reference_yr,
            } => {
                let u = (std::f64::consts::PI * (lon - lon0) / lon_scale).cos();
                let v = (std::f64::consts::PI * (lat - lat0) / lat_scale).cos();
                let omega = 2.0 * std::f64::consts::PI / period_yr;
                amplitude_m * u * v * omega * (omega * (t - reference_yr)).cos()
            }
        }
    }
}

/// One synthetic site: location, observation window, and its true linear
/// trend and vertical offset.
#[derive(Debug, Clone)]
pub struct SynthSite {
    pub name: String,
    pub lon: f64,
    pub lat: f64,
    pub t_lo: f64,
    pub t_hi: f64,
    pub slope_m_per_yr: f64,
    pub offset_m: f64,
}

/// Full generative truth. RSL sds and age sds are drawn uniformly from the
/// given ranges per observation (set both ends equal for a constant).
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub regional: RegionalCurve,
    pub sites: Vec<SynthSite>,
    pub local: LocalField,
    /// Residual process noise sd (meters).
    pub sigma: f64,
    pub rsl_sd_range: (f64, f64),
    pub age_sd_range: (f64, f64),
    /// Slope-prior sd written into the registry (m/yr); prior means are the
    /// true slopes.
    pub slope_prior_sd: f64,
    pub seed: u64,
}

impl SynthTruth {
    /// Truth at the scale of the North American Atlantic records: regional
    /// range about 0.15 m over 3000 years, site slopes 0.2-1.7 mm/yr, RSL
    /// sds 0.02-0.1 m, age sds 20-70 years.
    pub fn field_scale(n_sites: usize, seed: u64) -> Self {
        let sites = (0..n_sites)
            .map(|j| {
                let frac = j as f64 / n_sites.max(2) as f64;
                SynthSite {
                    name: format!("Synth Site {j:02}"),
                    lon: -80.0 + 26.0 * frac,
                    lat: 26.0 + 20.0 * frac,
                    t_lo: -950.0,
                    t_hi: 2010.0,
                    slope_m_per_yr: (0.2 + 1.5 * frac) / 1000.0,
                    offset_m: 0.4 * (2.0 * std::f64::consts::PI * frac).sin(),
                }
            })
            .collect();
        Self {
            regional: RegionalCurve {
                amplitude_m: 0.04,
                period_yr: 1700.0,
                ramp_m_per_yr: 2.0e-5,
                reference_yr: 1000.0,
            },
            sites,
            local: LocalField::Zero,
            sigma: 0.01,
            rsl_sd_range: (0.02, 0.1),
            age_sd_range: (20.0, 70.0),
            slope_prior_sd: 0.3e-3,
            seed,
        }
    }

    /// Noise-free mean process at a site's location and a latent time.
    pub fn process(&self, site_idx: usize, t: f64) -> f64 {
        let site = &self.sites[site_idx];
        self.regional.value(t)
            + site.slope_m_per_yr * t
            + site.offset_m
            + self.local.value(site.lon, site.lat, t)
    }

    /// Time derivative of the mean process (m/yr).
    pub fn process_derivative(&self, site_idx: usize, t: f64) -> f64 {
        let site = &self.sites[site_idx];
        self.regional.derivative(t)
            + site.slope_m_per_yr
            + self.local.time_derivative(site.lon, site.lat, t)
    }

    pub fn registry(&self) -> SiteRegistry {
        SiteRegistry::new(
            self.sites
                .iter()
                .map(|s| Site {
                    name: s.name.clone(),
                    lon: s.lon,
                    lat: s.lat,
                    source: Source::Proxy,
                    slope_prior_mean: s.slope_m_per_yr,
                    slope_prior_sd: self.slope_prior_sd,
                })
                .collect(),
        )
        .expect("synthetic sites are valid")
    }
}

/// Generated dataset plus the latent (noise-free) ages, kept for oracle
/// checks against the truth process.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub observations: Vec<Observation>,
    pub registry: SiteRegistry,
    /// Latent true age per observation (same order as `observations`).
    pub latent_ages: Vec<f64>,
}

/// Draw `n_per_site` observations per site: latent times uniform on each
/// site's window, observed times Gaussian around them, RSL observed at the
/// latent time with process plus measurement noise.
pub fn generate(truth: &SynthTruth, n_per_site: usize) -> SynthData {
    let mut rng = ChaCha8Rng::seed_from_u64(truth.seed);
    let registry = truth.registry();
    let mut observations = Vec::with_capacity(truth.sites.len() * n_per_site);
    let mut latent_ages = Vec::with_capacity(observations.capacity());
    // Site ids follow registry (name-sorted) order.
    for (idx, site) in truth.sites.iter().enumerate() {
        let site_id = registry.id_of(&site.name).expect("site registered");
        for _ in 0..n_per_site {
            let t_latent = rng.random_range(site.t_lo..site.t_hi);
            let age_sd = sample_range(&mut rng, truth.age_sd_range);
            let rsl_sd = sample_range(&mut rng, truth.rsl_sd_range);
            let z_t: f64 = StandardNormal.sample(&mut rng);
            let z_y: f64 = StandardNormal.sample(&mut rng);
            let age = t_latent + age_sd * z_t;
            let noise_sd = (truth.sigma * truth.sigma + rsl_sd * rsl_sd).sqrt();
            let rsl = truth.process(idx, t_latent) + noise_sd * z_y;
            observations.push(Observation {
                site_id,
                age,
                age_sd,
                rsl,
                rsl_sd,
                source: Source::Proxy,
            });
            latent_ages.push(t_latent);
        }
    }
    SynthData {
        observations,
        registry,
        latent_ages,
    }
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Write generated observations in the proxy CSV schema that ingest
/// consumes, including the true-slope-centred prior columns.
pub fn write_proxy_csv(
    path: &std::path::Path,
    data: &SynthData,
) -> Result<(), crate::ingest::IngestError> {
    let io_err = |source: csv::Error| crate::ingest::IngestError::Csv {
        file: path.display().to_string(),
        source,
    };
    let mut writer = csv::Writer::from_path(path).map_err(io_err)?;
    writer
        .write_record([
            "site_name",
            "lon",
            "lat",
            "age_ce",
            "age_sd_yr",
            "rsl_m",
            "rsl_sd_m",
            "slope_prior_mean_mm_yr",
            "slope_prior_sd_mm_yr",
        ])
        .map_err(io_err)?;
    for obs in &data.observations {
        let site = data.registry.get(obs.site_id);
        writer
            .write_record([
                site.name.clone(),
                site.lon.to_string(),
                site.lat.to_string(),
                obs.age.to_string(),
                obs.age_sd.to_string(),
                obs.rsl.to_string(),
                obs.rsl_sd.to_string(),
                (site.slope_prior_mean * 1000.0).to_string(),
                (site.slope_prior_sd * 1000.0).to_string(),
            ])
            .map_err(io_err)?;
    }
    writer
        .flush()
        .map_err(|source| crate::ingest::IngestError::Io {
            path: path.display().to_string(),
            source,
        })?;
    Ok(())
}
