//! Command-line pipeline: ingest -> two-stage fit -> decompose/rates ->
//! cross-validate, plus synthetic data generation.
//!
//! Exit codes: 0 success, 1 internal error, 2 input validation error.
//! Failures print a single `error: ...` line to stderr. Parameters whose
//! split R-hat exceeds the warning threshold are reported on stdout as
//! `RHAT_EXCEEDED <parameter>` lines without failing the run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use rslgam::ingest::{self, LoadedData};
use rslgam::model::{ModelConfig, ModelSpec};
use rslgam::noisy_input::{
    fit_two_stage, write_corrective_variance, write_stage1_summary, FitError,
};
use rslgam::posterior::{decompose, rate_of_change, PredictionGrid, RateKind};
use rslgam::sampler::{Diagnostics, PosteriorSamples, SamplerError};
use rslgam::synth::{generate, write_proxy_csv, SynthTruth};
use rslgam::validate::run_cv;
use rslgam::{CvError, IngestError, ModelError};

mod manifest;

/// Split R-hat above this value triggers an RHAT_EXCEEDED warning.
const RHAT_WARN_THRESHOLD: f64 = 1.1;

#[derive(Parser)]
#[command(
    name = "rslgam",
    version,
    about = "Bayesian decomposition of relative sea-level records"
)]
struct Cli {
    /// Cap the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the two-stage fit and write all posterior artifacts.
    Fit {
        /// JSON model configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Proxy-record CSV.
        #[arg(long)]
        proxy: PathBuf,
        /// Annual tide-gauge CSV (may be empty).
        #[arg(long)]
        gauges: PathBuf,
        /// Output directory (created if missing).
        #[arg(long)]
        out: PathBuf,
        /// Override the RNG seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the chain count from the config.
        #[arg(long)]
        chains: Option<usize>,
    },
    /// Summarize fitted components on per-site grids (needs a fit directory).
    Decompose {
        /// Directory produced by `fit`.
        #[arg(long)]
        out: PathBuf,
        /// Grid spacing in years.
        #[arg(long, default_value_t = 10.0)]
        grid_step: f64,
    },
    /// Summarize instantaneous rates of change (needs a fit directory).
    Rates {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        grid_step: f64,
    },
    /// k-fold cross-validation over the proxy observations.
    Cv {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        proxy: PathBuf,
        #[arg(long)]
        gauges: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of folds.
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic dataset in the ingest CSV schema.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        sites: usize,
        #[arg(long, default_value_t = 80)]
        per_site: usize,
        #[arg(long, default_value_t = 20260411)]
        seed: u64,
    },
}

struct CliError {
    code: i32,
    message: String,
}

impl CliError {
    fn internal(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::invalid(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::invalid(e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Model(m) => m.into(),
            _ => CliError::internal(e.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Model(m) => m.into(),
            FitError::Sampler(s) => s.into(),
            FitError::Basis(b) => CliError::invalid(b.to_string()),
            FitError::Io { .. } => CliError::internal(e.to_string()),
        }
    }
}

impl From<CvError> for CliError {
    fn from(e: CvError) -> Self {
        match e {
            CvError::Fit(f) => f.into(),
            CvError::BadK(_) | CvError::NoProxies => CliError::invalid(e.to_string()),
            CvError::Summary(s) => CliError::internal(s.to_string()),
            CvError::Io { .. } => CliError::internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::internal(e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Ignore failure if a pool was already installed.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli.command) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message.replace('\n', " "));
            std::process::exit(e.code);
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ModelConfig, CliError> {
    match path {
        None => Ok(ModelConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                CliError::invalid(format!("cannot read config {}: {e}", p.display()))
            })?;
            ModelConfig::from_json(&text)
                .map_err(|e| CliError::invalid(format!("config {}: {e}", p.display())))
        }
    }
}

fn load_inputs(proxy: &Path, gauges: &Path, rsl_sd_floor: f64) -> Result<LoadedData, CliError> {
    let loaded = ingest::load_observations_with_floor(proxy, gauges, rsl_sd_floor)?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }
    if loaded.observations.is_empty() {
        return Err(CliError::invalid("no observations after ingest"));
    }
    Ok(loaded)
}

fn report_rhat(diagnostics: &Diagnostics) {
    for name in diagnostics.exceeding(RHAT_WARN_THRESHOLD) {
        println!("RHAT_EXCEEDED {name}");
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Fit {
            config,
            proxy,
            gauges,
            out,
            seed,
            chains,
        } => cmd_fit(config, proxy, gauges, out, seed, chains),
        Command::Decompose { out, grid_step } => cmd_decompose(out, grid_step),
        Command::Rates { out, grid_step } => cmd_rates(out, grid_step),
        Command::Cv {
            config,
            proxy,
            gauges,
            out,
            folds,
            seed,
        } => cmd_cv(config, proxy, gauges, out, folds, seed),
        Command::Simulate {
            out,
            sites,
            per_site,
            seed,
        } => cmd_simulate(out, sites, per_site, seed),
    }
}

fn cmd_fit(
    config_path: Option<PathBuf>,
    proxy: PathBuf,
    gauges: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    chains: Option<usize>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config = load_config(&config_path)?;
    if let Some(seed) = seed {
        config.seed = Some(seed);
    }
    if let Some(chains) = chains {
        config.mcmc.chains = chains;
    }
    std::fs::create_dir_all(&out)?;

    let t_ingest = Instant::now();
    let loaded = load_inputs(&proxy, &gauges, config.priors.rsl_sd_floor_m)?;
    let ingest_s = t_ingest.elapsed().as_secs_f64();

    let spec = ModelSpec::from_data(&config, &loaded.observations, &loaded.registry)?;
    ingest::write_observation_table(
        &out.join("observations.csv"),
        &loaded.observations,
        &loaded.registry,
    )?;
    std::fs::write(
        out.join("model.json"),
        serde_json::to_string_pretty(&spec).map_err(|e| CliError::internal(e.to_string()))?,
    )?;

    let t_fit = Instant::now();
    let result = fit_two_stage(&loaded.observations, &loaded.registry, &spec)?;
    let fit_s = t_fit.elapsed().as_secs_f64();

    write_stage1_summary(&out.join("stage1_summary.csv"), &result.stage1)?;
    write_corrective_variance(&out.join("corrective_variance.csv"), &result.corrective)?;
    result.samples.write_csv(&out.join("samples.csv"))?;
    result.diagnostics.write_csv(&out.join("diagnostics.csv"))?;
    result
        .stage1
        .diagnostics
        .write_csv(&out.join("diagnostics_stage1.csv"))?;

    report_rhat(&result.stage1.diagnostics);
    report_rhat(&result.diagnostics);

    manifest::write(
        &out.join("run_manifest.json"),
        &manifest::RunManifest::new("fit", &config, spec.mcmc.seed)
            .with_input("proxy", &proxy)?
            .with_input("gauges", &gauges)?
            .with_timing("ingest_s", ingest_s)
            .with_timing("fit_s", fit_s)
            .with_timing("total_s", started.elapsed().as_secs_f64()),
    )?;
    println!(
        "fit complete: {} observations, {} sites, {} retained draws",
        loaded.observations.len(),
        loaded.registry.len(),
        result.samples.total_draws()
    );
    Ok(())
}

/// Shared loader for the artifacts a `fit` directory holds.
fn load_fit_dir(out: &Path) -> Result<(LoadedData, ModelSpec, PosteriorSamples), CliError> {
    let spec_text = std::fs::read_to_string(out.join("model.json"))
        .map_err(|e| CliError::invalid(format!("missing model.json in {}: {e}", out.display())))?;
    let spec: ModelSpec = serde_json::from_str(&spec_text)
        .map_err(|e| CliError::invalid(format!("model.json: {e}")))?;
    let loaded = ingest::read_observation_table(&out.join("observations.csv"))?;
    let samples = PosteriorSamples::read_csv(&out.join("samples.csv"))?;
    Ok((loaded, spec, samples))
}

fn cmd_decompose(out: PathBuf, grid_step: f64) -> Result<(), CliError> {
    let (loaded, spec, samples) = load_fit_dir(&out)?;
    let grid = PredictionGrid::from_observations(&loaded.observations, grid_step);
    let summary = decompose(&samples, &loaded.registry, &spec, &grid)
        .map_err(|e| CliError::internal(e.to_string()))?;
    summary
        .write_csv(&out.join("decomposition.csv"))
        .map_err(|e| CliError::internal(e.to_string()))?;
    println!("decomposition written: {} rows", summary.rows.len());
    Ok(())
}

fn cmd_rates(out: PathBuf, grid_step: f64) -> Result<(), CliError> {
    let (loaded, spec, samples) = load_fit_dir(&out)?;
    let grid = PredictionGrid::from_observations(&loaded.observations, grid_step);
    let mut summary = rate_of_change(&samples, &loaded.registry, &spec, &grid, RateKind::Total)
        .map_err(|e| CliError::internal(e.to_string()))?;
    let regional = rate_of_change(&samples, &loaded.registry, &spec, &grid, RateKind::Regional)
        .map_err(|e| CliError::internal(e.to_string()))?;
    summary.rows.extend(regional.rows);
    summary
        .write_csv(&out.join("rates.csv"))
        .map_err(|e| CliError::internal(e.to_string()))?;
    println!("rates written: {} rows", summary.rows.len());
    Ok(())
}

fn cmd_cv(
    config_path: Option<PathBuf>,
    proxy: PathBuf,
    gauges: PathBuf,
    out: PathBuf,
    folds: usize,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config = load_config(&config_path)?;
    if let Some(seed) = seed {
        config.seed = Some(seed);
    }
    std::fs::create_dir_all(&out)?;
    let loaded = load_inputs(&proxy, &gauges, config.priors.rsl_sd_floor_m)?;
    let cv_seed = config.effective_mcmc().seed;
    let report = run_cv(
        &loaded.observations,
        &loaded.registry,
        &config,
        folds,
        cv_seed,
    )?;
    for warning in &report.folds.warnings {
        eprintln!("warning: {warning}");
    }
    report
        .write_csv(&out.join("cv_report.csv"))
        .map_err(|e| CliError::internal(e.to_string()))?;
    report
        .write_folds_csv(&out.join("cv_folds.csv"))
        .map_err(|e| CliError::internal(e.to_string()))?;
    manifest::write(
        &out.join("cv_manifest.json"),
        &manifest::RunManifest::new("cv", &config, cv_seed)
            .with_input("proxy", &proxy)?
            .with_input("gauges", &gauges)?
            .with_timing("total_s", started.elapsed().as_secs_f64()),
    )?;
    println!(
        "cv complete: coverage95 {:.3}, coverage50 {:.3}, rmse {:.4} m over {} held-out points",
        report.overall.coverage95,
        report.overall.coverage50,
        report.overall.rmse_m,
        report.overall.n
    );
    Ok(())
}

fn cmd_simulate(out: PathBuf, sites: usize, per_site: usize, seed: u64) -> Result<(), CliError> {
    if sites == 0 || per_site == 0 {
        return Err(CliError::invalid("sites and per-site must be positive"));
    }
    std::fs::create_dir_all(&out)?;
    let truth = SynthTruth::field_scale(sites, seed);
    let data = generate(&truth, per_site);
    write_proxy_csv(&out.join("proxy_synth.csv"), &data)?;
    // Empty gauge file so the pair feeds straight into `fit`.
    std::fs::write(out.join("gauges_synth.csv"), "")?;
    let truth_rows: Vec<serde_json::Value> = truth
        .sites
        .iter()
        .map(|s| {
            serde_json::json!({
                "name": s.name,
                "lon": s.lon,
                "lat": s.lat,
                "slope_m_per_yr": s.slope_m_per_yr,
                "offset_m": s.offset_m,
            })
        })
        .collect();
    let truth_json = serde_json::json!({
        "seed": seed,
        "sigma_m": truth.sigma,
        "regional": {
            "amplitude_m": truth.regional.amplitude_m,
            "period_yr": truth.regional.period_yr,
            "ramp_m_per_yr": truth.regional.ramp_m_per_yr,
            "reference_yr": truth.regional.reference_yr,
        },
        "sites": truth_rows,
    });
    std::fs::write(
        out.join("truth.json"),
        serde_json::to_string_pretty(&truth_json).map_err(|e| CliError::internal(e.to_string()))?,
    )?;
    println!(
        "simulated {} observations across {} sites",
        data.observations.len(),
        sites
    );
    Ok(())
}
