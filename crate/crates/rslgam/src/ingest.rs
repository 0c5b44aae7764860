//! Loading and preprocessing of proxy-record and tide-gauge data.
//!
//! Proxy records arrive as dated RSL estimates with vertical and temporal
//! standard deviations. Tide gauges arrive as annual mean series; they are
//! filtered by record length and proximity to proxy sites, re-expressed
//! relative to their own 2000-2018 CE mean, and averaged by calendar decade
//! (age sd fixed at 5 years, RSL sd the within-decade sample sd). Both feed a
//! single observation table indexed against a deduplicated site registry.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{mean, sample_sd};

/// Years (inclusive) of the tide-gauge datum window.
pub const DATUM_WINDOW: (i32, i32) = (2000, 2018);
/// Age standard deviation assigned to decadally averaged gauge data.
pub const GAUGE_AGE_SD_YR: f64 = 5.0;
/// Replacement RSL sd for decades whose sample sd is zero (single value or
/// constant values); avoids zero-variance likelihood terms.
pub const DEFAULT_RSL_SD_FLOOR_M: f64 = 0.01;
/// Observations older than this year feed the empirical slope prior.
pub const PRE_INDUSTRIAL_CUTOFF_CE: f64 = 1800.0;
/// Default slope-prior sd for tide gauges when the input CSV does not carry
/// one (mm/yr).
pub const GAUGE_SLOPE_PRIOR_SD_MM_YR: f64 = 0.3;

#[derive(Error, Debug)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {file}: {source}")]
    Csv {
        file: String,
        #[source]
        source: csv::Error,
    },
    #[error("{file}: missing required column '{column}'")]
    MissingColumn { file: String, column: &'static str },
    #[error("{file}:{line}: column '{column}': {reason}")]
    MalformedField {
        file: String,
        line: u64,
        column: &'static str,
        reason: String,
    },
    #[error(
        "site '{name}' appears with conflicting coordinates \
         ({lon_a}, {lat_a}) vs ({lon_b}, {lat_b})"
    )]
    ConflictingCoordinates {
        name: String,
        lon_a: f64,
        lat_a: f64,
        lon_b: f64,
        lat_b: f64,
    },
    #[error("station '{station}' has no data in the {}-{} CE datum window", DATUM_WINDOW.0, DATUM_WINDOW.1)]
    NoDatumOverlap { station: String },
    #[error(
        "site '{name}': {n} observations before 1800 CE, need at least 3 to estimate a \
         slope prior; supply slope_prior_mean_mm_yr and slope_prior_sd_mm_yr in the proxy CSV"
    )]
    SlopePriorUnavailable { name: String, n: usize },
    #[error("site '{name}': ages before 1800 CE are all equal; slope prior is undefined")]
    DegenerateSlopePrior { name: String },
}

/// Where an observation came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Proxy,
    TideGauge,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Proxy => write!(f, "proxy"),
            Source::TideGauge => write!(f, "tide_gauge"),
        }
    }
}

/// One relative sea-level datum.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Index into the [`SiteRegistry`].
    pub site_id: usize,
    /// Years CE.
    pub age: f64,
    /// Age standard deviation in years.
    pub age_sd: f64,
    /// Relative sea level in meters.
    pub rsl: f64,
    /// RSL standard deviation in meters.
    pub rsl_sd: f64,
    pub source: Source,
}

/// A data site with its slope-prior hyperparameters (m/yr).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub name: String,
    pub lon: f64,
    pub lat: f64,
    pub source: Source,
    pub slope_prior_mean: f64,
    pub slope_prior_sd: f64,
}

/// Sites indexed by contiguous ids `0..len`, ordered lexicographically by
/// name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteRegistry {
    sites: Vec<Site>,
}

impl SiteRegistry {
    pub fn new(mut sites: Vec<Site>) -> Result<Self, IngestError> {
        sites.sort_by(|a, b| a.name.cmp(&b.name));
        for site in &sites {
            validate_coords(&site.name, site.lon, site.lat)?;
            if !site.slope_prior_sd.is_finite() || site.slope_prior_sd <= 0.0 {
                return Err(IngestError::MalformedField {
                    file: "<registry>".into(),
                    line: 0,
                    column: "slope_prior_sd",
                    reason: format!(
                        "site '{}': slope prior sd must be positive, got {}",
                        site.name, site.slope_prior_sd
                    ),
                });
            }
        }
        Ok(Self { sites })
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn get(&self, site_id: usize) -> &Site {
        &self.sites[site_id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Site> {
        self.sites.iter()
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.name == name)
    }
}

fn validate_coords(name: &str, lon: f64, lat: f64) -> Result<(), IngestError> {
    if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
        return Err(IngestError::MalformedField {
            file: "<registry>".into(),
            line: 0,
            column: "lon/lat",
            reason: format!("site '{name}': coordinates ({lon}, {lat}) out of range"),
        });
    }
    Ok(())
}

/// Annual tide-gauge series, sorted by year.
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeSeries {
    pub station: String,
    pub lon: f64,
    pub lat: f64,
    /// (year CE, annual mean in meters) pairs.
    pub annual: Vec<(i32, f64)>,
    /// Slope prior (mean, optional sd) in mm/yr if supplied in the input CSV.
    pub slope_prior_mm_yr: Option<(f64, Option<f64>)>,
}

impl GaugeSeries {
    pub fn span_years(&self) -> f64 {
        match (self.annual.first(), self.annual.last()) {
            (Some((lo, _)), Some((hi, _))) => (hi - lo) as f64,
            _ => 0.0,
        }
    }
}

/// Great-circle distance between two lon/lat points, in degrees of arc
/// (haversine formula).
pub fn great_circle_deg(lon_a: f64, lat_a: f64, lon_b: f64, lat_b: f64) -> f64 {
    let (la, lb) = (lat_a.to_radians(), lat_b.to_radians());
    let dlat = (lat_b - lat_a).to_radians();
    let dlon = (lon_b - lon_a).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la.cos() * lb.cos() * (dlon / 2.0).sin().powi(2);
    (2.0 * h.sqrt().min(1.0).asin()).to_degrees()
}

/// Result of [`load_observations`].
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub observations: Vec<Observation>,
    pub registry: SiteRegistry,
    pub warnings: Vec<String>,
}

/// Keep a gauge series iff it is long (span > 150 yr), or the nearest gauge
/// to some proxy site, or within 1 degree of a proxy site with span > 20 yr.
/// Empty series are dropped with a warning. Nearest-gauge ties break by
/// station name.
pub fn filter_tide_gauges(
    series: &[GaugeSeries],
    proxy_sites: &[(String, f64, f64)],
) -> (Vec<GaugeSeries>, Vec<String>) {
    let mut warnings = Vec::new();
    let usable: Vec<&GaugeSeries> = series
        .iter()
        .filter(|s| {
            if s.annual.is_empty() {
                warnings.push(format!(
                    "station '{}' has no data points; dropped",
                    s.station
                ));
                false
            } else {
                true
            }
        })
        .collect();

    let mut nearest: Vec<&str> = Vec::new();
    for (_, plon, plat) in proxy_sites {
        let best = usable
            .iter()
            .map(|s| {
                (
                    great_circle_deg(s.lon, s.lat, *plon, *plat),
                    s.station.as_str(),
                )
            })
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(b.1)));
        if let Some((_, name)) = best {
            nearest.push(name);
        }
    }

    let kept = usable
        .into_iter()
        .filter(|s| {
            if s.span_years() > 150.0 {
                return true;
            }
            if nearest.contains(&s.station.as_str()) {
                return true;
            }
            s.span_years() > 20.0
                && proxy_sites
                    .iter()
                    .any(|(_, plon, plat)| great_circle_deg(s.lon, s.lat, *plon, *plat) <= 1.0)
        })
        .cloned()
        .collect();
    (kept, warnings)
}

/// Subtract the series' own mean over the 2000-2018 CE window.
pub fn reference_to_datum(series: &GaugeSeries) -> Result<GaugeSeries, IngestError> {
    let window: Vec<f64> = series
        .annual
        .iter()
        .filter(|(y, _)| *y >= DATUM_WINDOW.0 && *y <= DATUM_WINDOW.1)
        .map(|(_, v)| *v)
        .collect();
    if window.is_empty() {
        return Err(IngestError::NoDatumOverlap {
            station: series.station.clone(),
        });
    }
    let datum = mean(&window);
    let mut out = series.clone();
    for (_, v) in &mut out.annual {
        *v -= datum;
    }
    Ok(out)
}

/// Average a datum-referenced series by calendar decade `[d0, d0+10)`.
/// Each non-empty decade yields one observation at the decade midpoint with
/// age sd 5 yr; the RSL sd is the within-decade sample sd, floored at
/// `rsl_sd_floor` when zero.
pub fn decadal_average(
    series: &GaugeSeries,
    site_id: usize,
    rsl_sd_floor: f64,
) -> Vec<Observation> {
    let mut decades: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for (year, value) in &series.annual {
        decades
            .entry(year.div_euclid(10) * 10)
            .or_default()
            .push(*value);
    }
    decades
        .into_iter()
        .map(|(decade, values)| {
            let sd = sample_sd(&values);
            // Constant decades give sd 0 up to roundoff; floor those.
            let effectively_zero = sd < 1e-12 * mean(&values).abs().max(1.0);
            Observation {
                site_id,
                age: decade as f64 + 5.0,
                age_sd: GAUGE_AGE_SD_YR,
                rsl: mean(&values),
                rsl_sd: if effectively_zero { rsl_sd_floor } else { sd },
                source: Source::TideGauge,
            }
        })
        .collect()
}

/// Unweighted OLS slope and its standard error over pre-1800 CE points
/// `(age, rsl)`. Returns (slope, slope sd) in m/yr.
pub fn empirical_slope_prior(
    site_name: &str,
    obs: &[(f64, f64)],
) -> Result<(f64, f64), IngestError> {
    let early: Vec<(f64, f64)> = obs
        .iter()
        .filter(|(age, _)| *age < PRE_INDUSTRIAL_CUTOFF_CE)
        .copied()
        .collect();
    if early.len() < 3 {
        return Err(IngestError::SlopePriorUnavailable {
            name: site_name.to_string(),
            n: early.len(),
        });
    }
    let n = early.len() as f64;
    let mean_t = early.iter().map(|(t, _)| t).sum::<f64>() / n;
    let mean_y = early.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = early.iter().map(|(t, _)| (t - mean_t) * (t - mean_t)).sum();
    if sxx <= 0.0 {
        return Err(IngestError::DegenerateSlopePrior {
            name: site_name.to_string(),
        });
    }
    let sxy: f64 = early.iter().map(|(t, y)| (t - mean_t) * (y - mean_y)).sum();
    let slope = sxy / sxx;
    let rss: f64 = early
        .iter()
        .map(|(t, y)| {
            let fitted = mean_y + slope * (t - mean_t);
            (y - fitted) * (y - fitted)
        })
        .sum();
    let se = (rss / (n - 2.0) / sxx).sqrt().max(1e-10);
    Ok((slope, se))
}

struct ProxyRow {
    site: String,
    lon: f64,
    lat: f64,
    age: f64,
    age_sd: f64,
    rsl: f64,
    rsl_sd: f64,
    prior_mean_mm: Option<f64>,
    prior_sd_mm: Option<f64>,
}

struct Columns {
    file: String,
    by_name: BTreeMap<String, usize>,
}

impl Columns {
    fn from_headers(file: &str, headers: &csv::StringRecord) -> Self {
        let by_name = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        Self {
            file: file.to_string(),
            by_name,
        }
    }

    fn require(&self, column: &'static str) -> Result<usize, IngestError> {
        self.by_name
            .get(column)
            .copied()
            .ok_or(IngestError::MissingColumn {
                file: self.file.clone(),
                column,
            })
    }

    fn optional(&self, column: &str) -> Option<usize> {
        self.by_name.get(column).copied()
    }
}

fn field_f64(
    file: &str,
    record: &csv::StringRecord,
    idx: usize,
    column: &'static str,
) -> Result<f64, IngestError> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    let raw = record.get(idx).ok_or_else(|| IngestError::MalformedField {
        file: file.to_string(),
        line,
        column,
        reason: "missing field".into(),
    })?;
    let value = raw
        .trim()
        .parse::<f64>()
        .map_err(|e| IngestError::MalformedField {
            file: file.to_string(),
            line,
            column,
            reason: format!("'{raw}': {e}"),
        })?;
    if !value.is_finite() {
        return Err(IngestError::MalformedField {
            file: file.to_string(),
            line,
            column,
            reason: format!("'{raw}': not a finite number"),
        });
    }
    Ok(value)
}

fn field_opt_f64(
    file: &str,
    record: &csv::StringRecord,
    idx: Option<usize>,
    column: &'static str,
) -> Result<Option<f64>, IngestError> {
    match idx.and_then(|i| record.get(i)) {
        None => Ok(None),
        Some(raw) if raw.trim().is_empty() => Ok(None),
        Some(_) => field_f64(file, record, idx.unwrap(), column).map(Some),
    }
}

fn open_reader(path: &Path) -> Result<Option<csv::Reader<std::fs::File>>, IngestError> {
    let meta = std::fs::metadata(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if meta.len() == 0 {
        return Ok(None);
    }
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(Some(
        csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(file),
    ))
}

fn read_proxy_rows(path: &Path) -> Result<Vec<ProxyRow>, IngestError> {
    let file = path.display().to_string();
    let Some(mut reader) = open_reader(path)? else {
        return Ok(Vec::new());
    };
    let headers = reader
        .headers()
        .map_err(|source| IngestError::Csv {
            file: file.clone(),
            source,
        })?
        .clone();
    let cols = Columns::from_headers(&file, &headers);
    let c_site = cols.require("site_name")?;
    let c_lon = cols.require("lon")?;
    let c_lat = cols.require("lat")?;
    let c_age = cols.require("age_ce")?;
    let c_age_sd = cols.require("age_sd_yr")?;
    let c_rsl = cols.require("rsl_m")?;
    let c_rsl_sd = cols.require("rsl_sd_m")?;
    let c_pm = cols.optional("slope_prior_mean_mm_yr");
    let c_ps = cols.optional("slope_prior_sd_mm_yr");

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            file: file.clone(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let site = record.get(c_site).unwrap_or("").trim().to_string();
        if site.is_empty() {
            return Err(IngestError::MalformedField {
                file: file.clone(),
                line,
                column: "site_name",
                reason: "empty site name".into(),
            });
        }
        let row = ProxyRow {
            site,
            lon: field_f64(&file, &record, c_lon, "lon")?,
            lat: field_f64(&file, &record, c_lat, "lat")?,
            age: field_f64(&file, &record, c_age, "age_ce")?,
            age_sd: field_f64(&file, &record, c_age_sd, "age_sd_yr")?,
            rsl: field_f64(&file, &record, c_rsl, "rsl_m")?,
            rsl_sd: field_f64(&file, &record, c_rsl_sd, "rsl_sd_m")?,
            prior_mean_mm: field_opt_f64(&file, &record, c_pm, "slope_prior_mean_mm_yr")?,
            prior_sd_mm: field_opt_f64(&file, &record, c_ps, "slope_prior_sd_mm_yr")?,
        };
        if row.age_sd < 0.0 {
            return Err(IngestError::MalformedField {
                file: file.clone(),
                line,
                column: "age_sd_yr",
                reason: format!("negative age sd {}", row.age_sd),
            });
        }
        if row.rsl_sd < 0.0 {
            return Err(IngestError::MalformedField {
                file: file.clone(),
                line,
                column: "rsl_sd_m",
                reason: format!("negative RSL sd {}", row.rsl_sd),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Read annual gauge series from CSV, deduplicating stations by name and
/// checking coordinate consistency.
pub fn read_gauge_series(path: &Path) -> Result<Vec<GaugeSeries>, IngestError> {
    let file = path.display().to_string();
    let Some(mut reader) = open_reader(path)? else {
        return Ok(Vec::new());
    };
    let headers = reader
        .headers()
        .map_err(|source| IngestError::Csv {
            file: file.clone(),
            source,
        })?
        .clone();
    let cols = Columns::from_headers(&file, &headers);
    let c_station = cols.require("station_name")?;
    let c_lon = cols.require("lon")?;
    let c_lat = cols.require("lat")?;
    let c_year = cols.require("year_ce")?;
    let c_value = cols.require("annual_mean_m")?;
    let c_pm = cols.optional("slope_prior_mean_mm_yr");
    let c_ps = cols.optional("slope_prior_sd_mm_yr");

    let mut stations: BTreeMap<String, GaugeSeries> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            file: file.clone(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let station = record.get(c_station).unwrap_or("").trim().to_string();
        if station.is_empty() {
            return Err(IngestError::MalformedField {
                file: file.clone(),
                line,
                column: "station_name",
                reason: "empty station name".into(),
            });
        }
        let lon = field_f64(&file, &record, c_lon, "lon")?;
        let lat = field_f64(&file, &record, c_lat, "lat")?;
        let year = field_f64(&file, &record, c_year, "year_ce")? as i32;
        let value = field_f64(&file, &record, c_value, "annual_mean_m")?;
        let prior_mean = field_opt_f64(&file, &record, c_pm, "slope_prior_mean_mm_yr")?;
        let prior_sd = field_opt_f64(&file, &record, c_ps, "slope_prior_sd_mm_yr")?;
        match stations.get_mut(&station) {
            Some(series) => {
                if series.lon != lon || series.lat != lat {
                    return Err(IngestError::ConflictingCoordinates {
                        name: station,
                        lon_a: series.lon,
                        lat_a: series.lat,
                        lon_b: lon,
                        lat_b: lat,
                    });
                }
                series.annual.push((year, value));
            }
            None => {
                stations.insert(
                    station.clone(),
                    GaugeSeries {
                        station,
                        lon,
                        lat,
                        annual: vec![(year, value)],
                        slope_prior_mm_yr: prior_mean.map(|m| (m, prior_sd)),
                    },
                );
            }
        }
    }
    let mut series: Vec<GaugeSeries> = stations.into_values().collect();
    for s in &mut series {
        s.annual.sort_by_key(|(y, _)| *y);
    }
    Ok(series)
}

/// Load proxy and gauge CSVs into a unified observation table and site
/// registry. Sites are deduplicated by name (conflicting coordinates are an
/// error) and ordered lexicographically by name.
pub fn load_observations(proxy_csv: &Path, gauge_csv: &Path) -> Result<LoadedData, IngestError> {
    load_observations_with_floor(proxy_csv, gauge_csv, DEFAULT_RSL_SD_FLOOR_M)
}

pub fn load_observations_with_floor(
    proxy_csv: &Path,
    gauge_csv: &Path,
    rsl_sd_floor: f64,
) -> Result<LoadedData, IngestError> {
    let proxy_rows = read_proxy_rows(proxy_csv)?;
    let gauge_series = read_gauge_series(gauge_csv)?;
    let mut warnings = Vec::new();

    // Deduplicate proxy sites, checking coordinate agreement.
    let mut proxy_sites: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    let mut proxy_priors: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
    for row in &proxy_rows {
        match proxy_sites.get(&row.site) {
            Some(&(lon, lat)) => {
                if lon != row.lon || lat != row.lat {
                    return Err(IngestError::ConflictingCoordinates {
                        name: row.site.clone(),
                        lon_a: lon,
                        lat_a: lat,
                        lon_b: row.lon,
                        lat_b: row.lat,
                    });
                }
            }
            None => {
                proxy_sites.insert(row.site.clone(), (row.lon, row.lat));
            }
        }
        let entry = proxy_priors.entry(row.site.clone()).or_insert((None, None));
        if entry.0.is_none() {
            entry.0 = row.prior_mean_mm;
        }
        if entry.1.is_none() {
            entry.1 = row.prior_sd_mm;
        }
    }

    let proxy_coords: Vec<(String, f64, f64)> = proxy_sites
        .iter()
        .map(|(name, &(lon, lat))| (name.clone(), lon, lat))
        .collect();
    let (kept_gauges, mut gauge_warnings) = filter_tide_gauges(&gauge_series, &proxy_coords);
    warnings.append(&mut gauge_warnings);

    // Assemble the registry: union of proxy sites and kept gauges.
    let mut sites = Vec::new();
    for (name, &(lon, lat)) in &proxy_sites {
        let pre1800: Vec<(f64, f64)> = proxy_rows
            .iter()
            .filter(|r| &r.site == name)
            .map(|r| (r.age, r.rsl))
            .collect();
        let (prior_mean_mm, prior_sd_mm) = proxy_priors[name];
        let (mean_m, sd_m) = match (prior_mean_mm, prior_sd_mm) {
            (Some(m), Some(s)) => (m / 1000.0, s / 1000.0),
            (Some(m), None) => {
                let (_, se) = empirical_slope_prior(name, &pre1800)?;
                (m / 1000.0, se)
            }
            (None, _) => empirical_slope_prior(name, &pre1800)?,
        };
        sites.push(Site {
            name: name.clone(),
            lon,
            lat,
            source: Source::Proxy,
            slope_prior_mean: mean_m,
            slope_prior_sd: sd_m,
        });
    }
    for gauge in &kept_gauges {
        let (mean_mm, sd_mm) = match gauge.slope_prior_mm_yr {
            Some((m, Some(s))) => (m, s),
            Some((m, None)) => (m, GAUGE_SLOPE_PRIOR_SD_MM_YR),
            None => {
                warnings.push(format!(
                    "station '{}' has no slope_prior_mean_mm_yr; using weak default 0 ± 1 mm/yr",
                    gauge.station
                ));
                (0.0, 1.0)
            }
        };
        sites.push(Site {
            name: gauge.station.clone(),
            lon: gauge.lon,
            lat: gauge.lat,
            source: Source::TideGauge,
            slope_prior_mean: mean_mm / 1000.0,
            slope_prior_sd: sd_mm / 1000.0,
        });
    }
    let registry = SiteRegistry::new(sites)?;

    let mut observations = Vec::new();
    for row in &proxy_rows {
        let site_id = registry.id_of(&row.site).expect("proxy site registered");
        observations.push(Observation {
            site_id,
            age: row.age,
            age_sd: row.age_sd,
            rsl: row.rsl,
            rsl_sd: row.rsl_sd,
            source: Source::Proxy,
        });
    }
    for gauge in &kept_gauges {
        let site_id = registry.id_of(&gauge.station).expect("gauge registered");
        let referenced = reference_to_datum(gauge)?;
        observations.extend(decadal_average(&referenced, site_id, rsl_sd_floor));
    }

    Ok(LoadedData {
        observations,
        registry,
        warnings,
    })
}

/// Write the unified observation table.
pub fn write_observation_table(
    path: &Path,
    observations: &[Observation],
    registry: &SiteRegistry,
) -> Result<(), IngestError> {
    let mut writer = csv::Writer::from_path(path).map_err(|source| IngestError::Csv {
        file: path.display().to_string(),
        source,
    })?;
    let io_err = |source: csv::Error| IngestError::Csv {
        file: path.display().to_string(),
        source,
    };
    writer
        .write_record([
            "site_id",
            "site_name",
            "lon",
            "lat",
            "source",
            "age_ce",
            "age_sd_yr",
            "rsl_m",
            "rsl_sd_m",
        ])
        .map_err(io_err)?;
    for obs in observations {
        let site = registry.get(obs.site_id);
        writer
            .write_record([
                obs.site_id.to_string(),
                site.name.clone(),
                site.lon.to_string(),
                site.lat.to_string(),
                obs.source.to_string(),
                obs.age.to_string(),
                obs.age_sd.to_string(),
                obs.rsl.to_string(),
                obs.rsl_sd.to_string(),
            ])
            .map_err(io_err)?;
    }
    writer.flush().map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Read back a table written by [`write_observation_table`]. Slope priors are
/// not part of the table, so registry entries carry a weak placeholder.
pub fn read_observation_table(path: &Path) -> Result<LoadedData, IngestError> {
    let file = path.display().to_string();
    let Some(mut reader) = open_reader(path)? else {
        return Ok(LoadedData {
            observations: Vec::new(),
            registry: SiteRegistry::default(),
            warnings: Vec::new(),
        });
    };
    let headers = reader
        .headers()
        .map_err(|source| IngestError::Csv {
            file: file.clone(),
            source,
        })?
        .clone();
    let cols = Columns::from_headers(&file, &headers);
    let c_name = cols.require("site_name")?;
    let c_lon = cols.require("lon")?;
    let c_lat = cols.require("lat")?;
    let c_source = cols.require("source")?;
    let c_age = cols.require("age_ce")?;
    let c_age_sd = cols.require("age_sd_yr")?;
    let c_rsl = cols.require("rsl_m")?;
    let c_rsl_sd = cols.require("rsl_sd_m")?;

    let mut rows = Vec::new();
    let mut site_info: BTreeMap<String, (f64, f64, Source)> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|source| IngestError::Csv {
            file: file.clone(),
            source,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let name = record.get(c_name).unwrap_or("").trim().to_string();
        let source = match record.get(c_source).unwrap_or("").trim() {
            "proxy" => Source::Proxy,
            "tide_gauge" => Source::TideGauge,
            other => {
                return Err(IngestError::MalformedField {
                    file: file.clone(),
                    line,
                    column: "source",
                    reason: format!("unknown source '{other}'"),
                })
            }
        };
        let lon = field_f64(&file, &record, c_lon, "lon")?;
        let lat = field_f64(&file, &record, c_lat, "lat")?;
        site_info.entry(name.clone()).or_insert((lon, lat, source));
        rows.push((
            name,
            source,
            field_f64(&file, &record, c_age, "age_ce")?,
            field_f64(&file, &record, c_age_sd, "age_sd_yr")?,
            field_f64(&file, &record, c_rsl, "rsl_m")?,
            field_f64(&file, &record, c_rsl_sd, "rsl_sd_m")?,
        ));
    }
    let sites: Vec<Site> = site_info
        .iter()
        .map(|(name, &(lon, lat, source))| Site {
            name: name.clone(),
            lon,
            lat,
            source,
            slope_prior_mean: 0.0,
            slope_prior_sd: 1.0e-3,
        })
        .collect();
    let registry = SiteRegistry::new(sites)?;
    let observations = rows
        .into_iter()
        .map(|(name, source, age, age_sd, rsl, rsl_sd)| Observation {
            site_id: registry.id_of(&name).expect("site registered"),
            age,
            age_sd,
            rsl,
            rsl_sd,
            source,
        })
        .collect();
    Ok(LoadedData {
        observations,
        registry,
        warnings: Vec::new(),
    })
}
