//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities (run with `--nocapture` to see them on success).
//!
//! Criteria 1-6 and 8 are self-contained. Criterion 7 compares against
//! published case-study numbers and only runs when the corresponding dataset
//! is supplied via `RSLGAM_REFERENCE_DATA`; without it that test prints a SKIP
//! line and passes vacuously.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rslgam::basis::{bspline_basis, bspline_derivative_basis, KnotGrid};
use rslgam::model::{ModelConfig, ModelSpec, ScalePrior};
use rslgam::noisy_input::fit_two_stage;
use rslgam::posterior::{decompose, PredictionGrid};
use rslgam::sampler::{ess, gibbs_coefficient_block, scale_update, Block, SparseDesign};
use rslgam::synth::{generate, SynthTruth};
use rslgam::validate::run_cv;

/// Criterion 1: cubic basis rows sum to one within 1e-10 and the analytic
/// derivative matches central finite differences within 1e-5 relative over
/// 100 random points on 5 random grids, in under a second.
#[test]
fn criterion_1_basis_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut max_sum_err = 0.0_f64;
    let mut max_fd_err = 0.0_f64;
    for _ in 0..5 {
        let lo = rng.random_range(-2000.0..500.0);
        let hi = lo + rng.random_range(200.0..3500.0);
        let grid = KnotGrid::new(lo, hi, rng.random_range(3..28), 3).unwrap();
        let beta = DVector::from_fn(grid.n_basis(), |_, _| rng.random_range(-1.0..1.0));
        let h = 1e-5 * (hi - lo);
        let times: Vec<f64> = (0..100)
            .map(|_| rng.random_range((lo + 2.0 * h)..(hi - 2.0 * h)))
            .collect();
        let basis = bspline_basis(&times, &grid).unwrap();
        let deriv = bspline_derivative_basis(&times, &grid).unwrap();
        let dot = |m: &DMatrix<f64>, row: usize| -> f64 {
            (0..beta.len()).map(|s| m[(row, s)] * beta[s]).sum()
        };
        let scale = (0..times.len())
            .map(|r| dot(&deriv.values, r).abs())
            .fold(1.0_f64, f64::max);
        for (row, &t) in times.iter().enumerate() {
            let sum: f64 = basis.values.row(row).iter().sum();
            max_sum_err = max_sum_err.max((sum - 1.0).abs());
            let flank = bspline_basis(&[t - h, t + h], &grid).unwrap();
            let fd = (dot(&flank.values, 1) - dot(&flank.values, 0)) / (2.0 * h);
            let rel = (dot(&deriv.values, row) - fd).abs() / scale;
            max_fd_err = max_fd_err.max(rel);
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        max_sum_err < 1e-10,
        "partition of unity error {max_sum_err}"
    );
    assert!(max_fd_err < 1e-5, "derivative mismatch {max_fd_err}");
    assert!(elapsed < 1.0, "took {elapsed:.2}s, budget 1s");
    println!(
        "PASS criterion 1 (basis): row-sum err {max_sum_err:.2e}, FD err {max_fd_err:.2e}, {elapsed:.2}s"
    );
}

/// Criterion 2: blocked Gibbs on a fixed-variance Gaussian linear toy
/// (n = 20, 3 coefficients) matches the closed-form GLS posterior mean and
/// covariance within 3 Monte-Carlo standard errors at 10^4 retained draws,
/// in under 10 seconds.
#[test]
fn criterion_2_sampler_matches_gls() {
    let started = Instant::now();
    let n = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let x = DMatrix::<f64>::from_fn(n, 3, |i, j| match j {
        0 => 1.0,
        1 => (i as f64 / n as f64) - 0.5,
        _ => (i as f64 * 0.7).sin(),
    });
    let var = DVector::<f64>::from_fn(n, |i, _| 0.2 + 0.1 * (i % 3) as f64);
    let truth = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let y = &x * &truth
        + DVector::from_fn(n, |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * var[i].sqrt()
        });
    let prior_mean = DVector::zeros(3);
    let prior_sd = DVector::from_element(3, 3.0);

    // Closed-form GLS posterior.
    let mut lambda = DMatrix::<f64>::zeros(3, 3);
    let mut rhs = DVector::<f64>::zeros(3);
    for i in 0..n {
        let w = 1.0 / var[i];
        for a in 0..3 {
            rhs[a] += w * x[(i, a)] * y[i];
            for b in 0..3 {
                lambda[(a, b)] += w * x[(i, a)] * x[(i, b)];
            }
        }
    }
    for a in 0..3 {
        lambda[(a, a)] += 1.0 / 9.0;
    }
    let chol = nalgebra::linalg::Cholesky::new(lambda).unwrap();
    let gls_mean = chol.solve(&rhs);
    let gls_cov = chol.inverse();

    // Blocked Gibbs {0,1} then {2} using the production block update.
    let design_a = SparseDesign::from_dense(&x.columns(0, 2).into_owned());
    let design_b = SparseDesign::from_dense(&x.columns(2, 1).into_owned());
    let keep = 10_000;
    let burn = 200;
    let mut beta = DVector::<f64>::zeros(3);
    let mut draws = Vec::with_capacity(keep);
    for it in 0..(keep + burn) {
        let res_a = DVector::from_fn(n, |i, _| y[i] - x[(i, 2)] * beta[2]);
        let new_a = gibbs_coefficient_block(
            "a",
            &design_a,
            &res_a,
            &var,
            &prior_mean.rows(0, 2).into_owned(),
            &prior_sd.rows(0, 2).into_owned(),
            &mut rng,
        )
        .unwrap();
        beta[0] = new_a[0];
        beta[1] = new_a[1];
        let res_b = DVector::from_fn(n, |i, _| y[i] - x[(i, 0)] * beta[0] - x[(i, 1)] * beta[1]);
        let new_b = gibbs_coefficient_block(
            "b",
            &design_b,
            &res_b,
            &var,
            &prior_mean.rows(2, 1).into_owned(),
            &prior_sd.rows(2, 1).into_owned(),
            &mut rng,
        )
        .unwrap();
        beta[2] = new_b[0];
        if it >= burn {
            draws.push(beta.clone());
        }
    }
    let mut mean = DVector::<f64>::zeros(3);
    for d in &draws {
        mean += d;
    }
    mean /= draws.len() as f64;
    let mut cov = DMatrix::<f64>::zeros(3, 3);
    for d in &draws {
        let dev = d - &mean;
        cov += &dev * dev.transpose();
    }
    cov /= draws.len() as f64 - 1.0;

    let mut max_z = 0.0_f64;
    for a in 0..3 {
        let series: Vec<Vec<f64>> = vec![draws.iter().map(|d| d[a]).collect()];
        let eff = ess(&series);
        let se_mean = (gls_cov[(a, a)] / eff).sqrt();
        let z_mean = (mean[a] - gls_mean[a]).abs() / se_mean;
        assert!(z_mean < 3.0, "mean[{a}]: z = {z_mean:.2}");
        let se_var = gls_cov[(a, a)] * (2.0 / eff).sqrt();
        let z_var = (cov[(a, a)] - gls_cov[(a, a)]).abs() / se_var;
        assert!(z_var < 3.0, "cov[{a},{a}]: z = {z_var:.2}");
        max_z = max_z.max(z_mean).max(z_var);
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "took {elapsed:.2}s, budget 10s");
    println!("PASS criterion 2 (Gibbs vs GLS): max |z| = {max_z:.2} over means and variances, {elapsed:.2}s");
}

/// Criterion 3: the slice-sampled scale update reproduces the sigma_r full
/// conditional; Kolmogorov distance to the quadrature CDF below 0.02 at
/// 10^5 draws. (The conditional needs ||beta||^2 > 0 to be normalizable, so
/// the reference uses a non-zero coefficient vector.)
#[test]
fn criterion_3_scale_update_vs_quadrature() {
    let started = Instant::now();
    let k = 24.0;
    let ss = 24.0 * 0.04; // coefficient vector with rms 0.2
    let prior = ScalePrior::half_cauchy(1.0);
    let loglik = |s: f64| -k * s.ln() - ss / (2.0 * s * s);

    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut sigma = 0.2_f64;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        sigma = scale_update(sigma, &prior, loglik, &mut rng);
        samples.push(sigma);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let log_density = |s: f64| loglik(s) + prior.log_density(s);
    let upper = 2.0;
    let grid_n = 80_001;
    let h = upper / (grid_n - 1) as f64;
    let dens: Vec<f64> = (0..grid_n)
        .map(|i| log_density((i as f64 * h).max(1e-12)).exp())
        .collect();
    let mut cdf = vec![0.0; grid_n];
    for i in 1..grid_n {
        cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i - 1] + dens[i]);
    }
    let total = cdf[grid_n - 1];
    let cdf_at = |s: f64| -> f64 {
        if s <= 0.0 {
            0.0
        } else if s >= upper {
            1.0
        } else {
            let pos = s / h;
            let i = pos.floor() as usize;
            let w = pos - i as f64;
            (cdf[i] * (1.0 - w) + cdf[(i + 1).min(grid_n - 1)] * w) / total
        }
    };
    let mut ks = 0.0_f64;
    for (i, s) in samples.iter().enumerate() {
        let f = cdf_at(*s);
        ks = ks.max((f - i as f64 / n as f64).abs());
        ks = ks.max((f - (i + 1) as f64 / n as f64).abs());
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(ks < 0.02, "Kolmogorov distance {ks:.4}");
    println!(
        "PASS criterion 3 (scale update): Kolmogorov distance {ks:.4} at 1e5 draws, {elapsed:.2}s"
    );
}

/// Criterion 4: noisy-input variance identity. On pure-slope synthetic data
/// (slope 2 mm/yr, age sd 50 yr, sigma = s_y = 0.01 m) the corrective term
/// must contribute sd 0.1 m: the stage-two mean posterior predictive
/// variance equals sigma_hat^2 + s_y^2 + (0.05 * 0.002 * 1000)^2 within 15%
/// relative, in under 2 minutes.
#[test]
fn criterion_4_noisy_input_variance_identity() {
    let started = Instant::now();
    let mut truth = SynthTruth::field_scale(4, 404);
    truth.regional.amplitude_m = 0.0;
    truth.regional.ramp_m_per_yr = 0.0;
    for site in &mut truth.sites {
        site.slope_m_per_yr = 0.002;
        site.offset_m *= 0.5;
    }
    truth.sigma = 0.01;
    truth.rsl_sd_range = (0.01, 0.01);
    truth.age_sd_range = (50.0, 50.0);
    let data = generate(&truth, 60);

    let mut config = ModelConfig::default();
    config.mcmc.seed = 4040;
    let spec = ModelSpec::from_data(&config, &data.observations, &data.registry).unwrap();
    let fit = fit_two_stage(&data.observations, &data.registry, &spec).unwrap();

    let n = data.observations.len() as f64;
    let mean_st2: f64 = fit.corrective.s_t2.iter().sum::<f64>() / n;
    let forced = (0.05_f64 * 0.002 * 1000.0).powi(2); // 0.01 m^2
    let rel_err = (mean_st2 - forced).abs() / forced;
    assert!(
        rel_err < 0.15,
        "mean corrective variance {mean_st2:.5} vs forced {forced:.5} ({:.1}%)",
        100.0 * rel_err
    );

    // Literal check on the total: mean predictive variance over draws and
    // observations vs the same expression with the fitted sigma.
    let sigma2_mean: f64 = {
        let pooled = fit.samples.pooled_sigma();
        pooled.iter().map(|s| s * s).sum::<f64>() / pooled.len() as f64
    };
    let mean_sy2: f64 = data
        .observations
        .iter()
        .map(|o| o.rsl_sd * o.rsl_sd)
        .sum::<f64>()
        / n;
    let lhs = sigma2_mean + mean_sy2 + mean_st2;
    let rhs = sigma2_mean + mean_sy2 + forced;
    let total_rel = (lhs - rhs).abs() / rhs;
    assert!(
        total_rel < 0.15,
        "total predictive variance off by {total_rel:.3}"
    );

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "took {elapsed:.1}s, budget 120s");
    println!(
        "PASS criterion 4 (noisy-input variance): mean s_t^2 {mean_st2:.5} vs 0.01 ({:.1}% off), {elapsed:.1}s",
        100.0 * rel_err
    );
}

/// Criterion 5: recovery on field-scale synthetic truth (8 sites x 80
/// observations) under the production MCMC settings (2000 iterations,
/// burn-in 1000, thinning 5, 2 chains): the regional 95% band covers the
/// true curve at >= 90% of grid points, site slopes are within 2 posterior
/// sd at >= 90% of sites, and every scale parameter's split R-hat is below
/// 1.1. Budget 10 minutes.
#[test]
fn criterion_5_synthetic_recovery() {
    let started = Instant::now();
    let truth = SynthTruth::field_scale(8, 505);
    let data = generate(&truth, 80);
    let mut config = ModelConfig::default();
    config.mcmc.seed = 5050;
    let spec = ModelSpec::from_data(&config, &data.observations, &data.registry).unwrap();
    let fit = fit_two_stage(&data.observations, &data.registry, &spec).unwrap();

    // Regional band coverage over the span the truth generated data on
    // (outside it the spline extrapolates and recovery is not claimable).
    let (age_lo, age_hi) = truth
        .sites
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), s| {
            (lo.min(s.t_lo), hi.max(s.t_hi))
        });
    let times: Vec<f64> = (0..100)
        .map(|i| {
            let w = i as f64 / 99.0;
            age_lo * (1.0 - w) + age_hi * w
        })
        .collect();
    let grid = PredictionGrid {
        per_site: vec![(0, times.clone())],
    };
    let summary = decompose(&fit.samples, &data.registry, &spec, &grid).unwrap();
    let rows = summary.rows_for(0, "regional");
    let mut covered = 0;
    for (ti, t) in times.iter().enumerate() {
        let r_truth = truth.regional.value(*t);
        if r_truth >= rows[ti].p2_5 && r_truth <= rows[ti].p97_5 {
            covered += 1;
        }
    }
    let coverage = covered as f64 / times.len() as f64;
    assert!(
        coverage >= 0.90,
        "regional band covers truth at only {covered}/100 grid points"
    );

    // Slope recovery.
    let slope_mean = fit.samples.block_mean(Block::Slope);
    let slope_sd = fit.samples.block_sd(Block::Slope);
    let mut hits = 0;
    for (j, site) in data.registry.iter().enumerate() {
        if (slope_mean[j] - site.slope_prior_mean).abs() <= 2.0 * slope_sd[j] {
            hits += 1;
        }
    }
    let slope_frac = hits as f64 / data.registry.len() as f64;
    assert!(
        slope_frac >= 0.90,
        "slopes within 2 sd at only {hits}/{} sites",
        data.registry.len()
    );

    // Scale-parameter convergence in both stages.
    let mut worst: (String, f64) = (String::new(), 0.0);
    for diag in [&fit.stage1.diagnostics, &fit.diagnostics] {
        for (name, rhat, _) in &diag.per_parameter {
            if name.starts_with("sigma") {
                assert!(*rhat < 1.1, "R-hat for {name} is {rhat:.3}");
                if *rhat > worst.1 {
                    worst = (name.clone(), *rhat);
                }
            }
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 600.0, "took {elapsed:.1}s, budget 600s");
    println!(
        "PASS criterion 5 (recovery): regional coverage {coverage:.2}, slopes {hits}/8, worst scale R-hat {} = {:.3}, {elapsed:.1}s",
        worst.0, worst.1
    );
}

/// Criterion 6: cross-validation calibration on a well-specified synthetic
/// model (no age error, so the likelihood matches the generative process):
/// over >= 500 held-out points, 95% empirical coverage in [0.92, 0.98] and
/// 50% coverage in [0.44, 0.56].
#[test]
fn criterion_6_cv_calibration() {
    let started = Instant::now();
    let mut truth = SynthTruth::field_scale(8, 606);
    truth.age_sd_range = (0.0, 0.0);
    truth.sigma = 0.01;
    let data = generate(&truth, 80);
    let mut config = ModelConfig::default();
    config.mcmc.seed = 6060;
    let report = run_cv(&data.observations, &data.registry, &config, 10, 6061).unwrap();
    assert!(
        report.overall.n >= 500,
        "only {} held-out points",
        report.overall.n
    );
    assert!(
        (0.92..=0.98).contains(&report.overall.coverage95),
        "95% coverage {:.3}",
        report.overall.coverage95
    );
    assert!(
        (0.44..=0.56).contains(&report.overall.coverage50),
        "50% coverage {:.3}",
        report.overall.coverage50
    );
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "PASS criterion 6 (CV calibration): coverage95 {:.3}, coverage50 {:.3}, n {}, rmse {:.4} m, {elapsed:.1}s",
        report.overall.coverage95, report.overall.coverage50, report.overall.n, report.overall.rmse_m
    );
}

/// Criterion 7: dataset-dependent reproduction of published validation
/// numbers. Runs only when RSLGAM_REFERENCE_DATA points at a directory holding
/// proxy.csv and gauges.csv in the ingest schema; otherwise prints SKIP.
#[test]
fn criterion_7_dataset_reproduction() {
    let Some(dir) = std::env::var_os("RSLGAM_REFERENCE_DATA") else {
        println!("SKIP criterion 7 (reference dataset not supplied; set RSLGAM_REFERENCE_DATA)");
        return;
    };
    let dir = std::path::PathBuf::from(dir);
    let loaded = rslgam::ingest::load_observations(&dir.join("proxy.csv"), &dir.join("gauges.csv"))
        .expect("reference dataset loads");
    let config = ModelConfig::default();
    let report = run_cv(&loaded.observations, &loaded.registry, &config, 10, 7070).unwrap();
    assert!(
        (report.overall.coverage95 - 0.991).abs() <= 0.03,
        "95% coverage {:.3} vs published 0.991",
        report.overall.coverage95
    );
    assert!(
        (report.overall.coverage50 - 0.786).abs() <= 0.05,
        "50% coverage {:.3} vs published 0.786",
        report.overall.coverage50
    );
    assert!(
        (report.overall.rmse_m - 0.14).abs() <= 0.03,
        "RMSE {:.3} vs published 0.14",
        report.overall.rmse_m
    );
    println!(
        "PASS criterion 7 (dataset reproduction): coverage95 {:.3}, coverage50 {:.3}, rmse {:.3}",
        report.overall.coverage95, report.overall.coverage50, report.overall.rmse_m
    );
}

/// Criterion 8: two `fit` runs with the same seed produce byte-identical
/// samples.csv.
#[test]
fn criterion_8_fit_determinism() {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_rslgam"))
        .args([
            "simulate",
            "--out",
            sim.to_str().unwrap(),
            "--sites",
            "3",
            "--per-site",
            "25",
            "--seed",
            "808",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let config = dir.path().join("config.json");
    std::fs::write(
        &config,
        r#"{"mcmc": {"iterations": 400, "burn_in": 150, "thin": 2, "chains": 2, "seed": 99}}"#,
    )
    .unwrap();
    let run_fit = |out: &std::path::Path| {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_rslgam"))
            .args([
                "fit",
                "--config",
                config.to_str().unwrap(),
                "--proxy",
                sim.join("proxy_synth.csv").to_str().unwrap(),
                "--gauges",
                sim.join("gauges_synth.csv").to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--seed",
                "424242",
            ])
            .status()
            .unwrap();
        assert!(status.success());
    };
    let fit_a = dir.path().join("a");
    let fit_b = dir.path().join("b");
    run_fit(&fit_a);
    run_fit(&fit_b);
    let a = std::fs::read(fit_a.join("samples.csv")).unwrap();
    let b = std::fs::read(fit_b.join("samples.csv")).unwrap();
    assert_eq!(a, b, "samples.csv differs between identical-seed runs");
    let elapsed = started.elapsed().as_secs_f64();
    println!(
        "PASS criterion 8 (determinism): samples.csv byte-identical ({} bytes), {elapsed:.1}s",
        a.len()
    );
}
