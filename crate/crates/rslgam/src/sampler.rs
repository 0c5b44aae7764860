//! Blocked Gibbs sampler with slice-sampled scale hyperparameters.
//!
//! Coefficient blocks have Gaussian priors and a Gaussian likelihood with
//! known diagonal variance, so each block's full conditional is multivariate
//! normal with precision `Lambda = X' V^-1 X + P` and mean
//! `Lambda^-1 (X' V^-1 r + P mu0)`; blocks are drawn exactly via Cholesky.
//! Scale parameters (sigma_r, sigma_h, sigma_l, sigma) get univariate slice
//! updates on the log scale, which are rejection-free and tuning-free and
//! leave the same stationary distribution invariant.
//!
//! Chains are independent ChaCha streams from one seed, so runs are
//! bit-reproducible for a fixed seed and chain count.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{
    BlockPriorKind, DesignSet, ErrorScalePrior, McmcConfig, ModelError, ParameterState, ScalePrior,
    StagePriors,
};

#[derive(Error, Debug)]
pub enum SamplerError {
    #[error("conditional precision for block '{block}' is not positive definite")]
    NonPositiveDefinite { block: &'static str },
    #[error("non-finite state at iteration {iteration} in parameter '{parameter}'")]
    NonFinite { iteration: usize, parameter: String },
    #[error("samples file {file}: {reason}")]
    BadSamplesFile { file: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Row-sparse design matrix: each row stores its non-zero (column, value)
/// pairs. B-spline rows have at most degree+1 non-zeros per factor, so the
/// normal-equation accumulation is far cheaper than a dense product.
#[derive(Debug, Clone)]
pub struct SparseDesign {
    pub ncols: usize,
    pub rows: Vec<Vec<(u32, f64)>>,
}

impl SparseDesign {
    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let rows = (0..dense.nrows())
            .map(|i| {
                (0..dense.ncols())
                    .filter_map(|j| {
                        let v = dense[(i, j)];
                        (v != 0.0).then_some((j as u32, v))
                    })
                    .collect()
            })
            .collect();
        Self {
            ncols: dense.ncols(),
            rows,
        }
    }

    /// One non-zero per row in the site's column: `value[i]` (slope design)
    /// or 1.0 (offset design).
    pub fn from_site_column(
        site_index: &[usize],
        values: Option<&DVector<f64>>,
        ncols: usize,
    ) -> Self {
        let rows = site_index
            .iter()
            .enumerate()
            .map(|(i, &j)| vec![(j as u32, values.map_or(1.0, |v| v[i]))])
            .collect();
        Self { ncols, rows }
    }

    pub fn matvec(&self, beta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|row| {
                row.iter()
                    .map(|&(col, val)| val * beta[col as usize])
                    .sum::<f64>()
            }),
        )
    }
}

/// Precision and precision-weighted mean of a block's Gaussian full
/// conditional: `Lambda = X' V^-1 X + P`, `rhs = X' V^-1 r + P mu0`.
pub fn gaussian_block_moments(
    design: &SparseDesign,
    residual: &DVector<f64>,
    total_var: &DVector<f64>,
    prior_mean: &DVector<f64>,
    prior_sd: &DVector<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let k = design.ncols;
    let mut lambda = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (i, row) in design.rows.iter().enumerate() {
        let w = 1.0 / total_var[i];
        let wr = w * residual[i];
        for &(a, va) in row {
            rhs[a as usize] += va * wr;
            let wa = w * va;
            for &(b, vb) in row {
                if b >= a {
                    lambda[(a as usize, b as usize)] += wa * vb;
                }
            }
        }
    }
    for a in 0..k {
        for b in (a + 1)..k {
            lambda[(b, a)] = lambda[(a, b)];
        }
    }
    for s in 0..k {
        let p = 1.0 / (prior_sd[s] * prior_sd[s]);
        lambda[(s, s)] += p;
        rhs[s] += p * prior_mean[s];
    }
    (lambda, rhs)
}

/// Exact draw from the multivariate-normal full conditional of one
/// coefficient block.
pub fn gibbs_coefficient_block(
    block: &'static str,
    design: &SparseDesign,
    residual: &DVector<f64>,
    total_var: &DVector<f64>,
    prior_mean: &DVector<f64>,
    prior_sd: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>, SamplerError> {
    let (lambda, rhs) = gaussian_block_moments(design, residual, total_var, prior_mean, prior_sd);
    let chol = nalgebra::linalg::Cholesky::new(lambda)
        .ok_or(SamplerError::NonPositiveDefinite { block })?;
    let mean = chol.solve(&rhs);
    let z = DVector::from_iterator(
        design.ncols,
        (0..design.ncols).map(|_| StandardNormal.sample(rng)),
    );
    // With Lambda = L L', the conditional covariance is L^-T L^-1, so
    // mean + L^-T z has the right law.
    let spread = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or(SamplerError::NonPositiveDefinite { block })?;
    Ok(mean + spread)
}

/// Univariate slice sampler (stepping out + shrinkage) for a log density.
/// Always returns a state with `log_density` at least the sliced level, so
/// the update is rejection-free.
pub fn slice_sample(
    log_density: impl Fn(f64) -> f64,
    x0: f64,
    width: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    const MAX_STEPS: usize = 200;
    let f0 = log_density(x0);
    if !f0.is_finite() {
        return x0;
    }
    let level = f0 + rng.random::<f64>().ln();

    let u: f64 = rng.random();
    let mut left = x0 - width * u;
    let mut right = left + width;
    let mut steps = 0;
    while steps < MAX_STEPS && log_density(left) > level {
        left -= width;
        steps += 1;
    }
    steps = 0;
    while steps < MAX_STEPS && log_density(right) > level {
        right += width;
        steps += 1;
    }

    for _ in 0..1000 {
        let x1 = left + rng.random::<f64>() * (right - left);
        if log_density(x1) > level {
            return x1;
        }
        if x1 < x0 {
            left = x1;
        } else {
            right = x1;
        }
    }
    x0
}

/// Slice update for a positive scale parameter, on the log scale. The
/// target is `log_likelihood(sigma) + log prior(sigma) + log sigma`
/// (Jacobian of the transform).
pub fn scale_update(
    current: f64,
    prior: &ScalePrior,
    log_likelihood: impl Fn(f64) -> f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let target = |x: f64| {
        let sigma = x.exp();
        if sigma <= 0.0 || !sigma.is_finite() {
            return f64::NEG_INFINITY;
        }
        log_likelihood(sigma) + prior.log_density(sigma) + x
    };
    slice_sample(target, current.ln(), 1.0, rng).exp()
}

/// Identifies one coefficient block of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Regional,
    Slope,
    Offset,
    Local,
}

/// Retained draws for one chain. Slope draws are reported in m/yr (the
/// sampler works on standardized ages internally).
#[derive(Debug, Clone, Default)]
pub struct ChainDraws {
    pub beta_r: Vec<DVector<f64>>,
    pub beta_g: Vec<DVector<f64>>,
    pub beta_h: Vec<DVector<f64>>,
    pub beta_l: Vec<DVector<f64>>,
    pub sigma_r: Vec<f64>,
    pub sigma_h: Vec<f64>,
    pub sigma_l: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Shape of a sample set: block dimensions and which scales were sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleLayout {
    pub k_regional: usize,
    pub n_sites: usize,
    pub k_local: Option<usize>,
    pub has_sigma_r: bool,
    pub has_sigma_h: bool,
    pub has_sigma_l: bool,
}

/// Posterior draws of every sampled parameter, per chain.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    pub layout: SampleLayout,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorSamples {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn retained_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.sigma.len())
    }

    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.sigma.len()).sum()
    }

    /// Pooled draws (all chains, retained order) of one coefficient block.
    pub fn pooled_block(&self, block: Block) -> Vec<&DVector<f64>> {
        self.chains
            .iter()
            .flat_map(|c| match block {
                Block::Regional => c.beta_r.iter(),
                Block::Slope => c.beta_g.iter(),
                Block::Offset => c.beta_h.iter(),
                Block::Local => c.beta_l.iter(),
            })
            .collect()
    }

    pub fn pooled_sigma(&self) -> Vec<f64> {
        self.chains
            .iter()
            .flat_map(|c| c.sigma.iter().copied())
            .collect()
    }

    /// Pointwise posterior mean of a block.
    pub fn block_mean(&self, block: Block) -> DVector<f64> {
        let draws = self.pooled_block(block);
        let mut mean = DVector::zeros(draws[0].len());
        for d in &draws {
            mean += *d;
        }
        mean / draws.len() as f64
    }

    /// Pointwise posterior standard deviation of a block.
    pub fn block_sd(&self, block: Block) -> DVector<f64> {
        let draws = self.pooled_block(block);
        let mean = self.block_mean(block);
        let mut ss = DVector::zeros(mean.len());
        for d in &draws {
            let dev = *d - &mean;
            ss += dev.component_mul(&dev);
        }
        (ss / (draws.len() as f64 - 1.0)).map(f64::sqrt)
    }

    /// Ordered names of every scalar parameter in this layout.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for s in 0..self.layout.k_regional {
            names.push(format!("beta_r[{s}]"));
        }
        for j in 0..self.layout.n_sites {
            names.push(format!("beta_g[{j}]"));
        }
        for j in 0..self.layout.n_sites {
            names.push(format!("beta_h[{j}]"));
        }
        if let Some(k) = self.layout.k_local {
            for s in 0..k {
                names.push(format!("beta_l[{s}]"));
            }
        }
        if self.layout.has_sigma_r {
            names.push("sigma_r".into());
        }
        if self.layout.has_sigma_h {
            names.push("sigma_h".into());
        }
        if self.layout.has_sigma_l {
            names.push("sigma_l".into());
        }
        names.push("sigma".into());
        names
    }

    /// Per-chain series of one scalar parameter, by name.
    pub fn scalar_series(&self, name: &str) -> Vec<Vec<f64>> {
        let get = |c: &ChainDraws| -> Vec<f64> {
            if let Some(idx) = parse_indexed(name, "beta_r") {
                c.beta_r.iter().map(|v| v[idx]).collect()
            } else if let Some(idx) = parse_indexed(name, "beta_g") {
                c.beta_g.iter().map(|v| v[idx]).collect()
            } else if let Some(idx) = parse_indexed(name, "beta_h") {
                c.beta_h.iter().map(|v| v[idx]).collect()
            } else if let Some(idx) = parse_indexed(name, "beta_l") {
                c.beta_l.iter().map(|v| v[idx]).collect()
            } else {
                match name {
                    "sigma_r" => c.sigma_r.clone(),
                    "sigma_h" => c.sigma_h.clone(),
                    "sigma_l" => c.sigma_l.clone(),
                    "sigma" => c.sigma.clone(),
                    _ => Vec::new(),
                }
            }
        };
        self.chains.iter().map(get).collect()
    }

    /// Write draws as long-format CSV: chain, draw, parameter, value.
    pub fn write_csv(&self, path: &Path) -> Result<(), std::io::Error> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "chain,draw,parameter,value")?;
        let names = self.parameter_names();
        for (chain_idx, chain) in self.chains.iter().enumerate() {
            for draw in 0..chain.sigma.len() {
                let mut col = 0;
                let mut write_val = |name: &str, v: f64| -> Result<(), std::io::Error> {
                    writeln!(out, "{chain_idx},{draw},{name},{v}")
                };
                for s in 0..self.layout.k_regional {
                    write_val(&names[col], chain.beta_r[draw][s])?;
                    col += 1;
                }
                for j in 0..self.layout.n_sites {
                    write_val(&names[col], chain.beta_g[draw][j])?;
                    col += 1;
                }
                for j in 0..self.layout.n_sites {
                    write_val(&names[col], chain.beta_h[draw][j])?;
                    col += 1;
                }
                if let Some(k) = self.layout.k_local {
                    for s in 0..k {
                        write_val(&names[col], chain.beta_l[draw][s])?;
                        col += 1;
                    }
                }
                if self.layout.has_sigma_r {
                    write_val(&names[col], chain.sigma_r[draw])?;
                    col += 1;
                }
                if self.layout.has_sigma_h {
                    write_val(&names[col], chain.sigma_h[draw])?;
                    col += 1;
                }
                if self.layout.has_sigma_l {
                    write_val(&names[col], chain.sigma_l[draw])?;
                    col += 1;
                }
                write_val(&names[col], chain.sigma[draw])?;
            }
        }
        out.flush()
    }

    /// Read a CSV written by [`Self::write_csv`], inferring the layout from the
    /// parameter names present.
    pub fn read_csv(path: &Path) -> Result<Self, SamplerError> {
        let file = path.display().to_string();
        let bad = |reason: String| SamplerError::BadSamplesFile {
            file: file.clone(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("chain,draw,parameter,value") => {}
            other => return Err(bad(format!("unexpected header {other:?}"))),
        }
        // (chain, draw) -> parameter -> value
        let mut cells: BTreeMap<(usize, usize), BTreeMap<String, f64>> = BTreeMap::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.splitn(4, ',').collect();
            if fields.len() != 4 {
                return Err(bad(format!("line {}: too few fields", lineno + 2)));
            }
            let chain: usize = fields[0]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?;
            let draw: usize = fields[1]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?;
            let name = fields[2].to_string();
            let value: f64 = fields[3]
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?;
            cells.entry((chain, draw)).or_default().insert(name, value);
        }
        if cells.is_empty() {
            return Err(bad("no draws".into()));
        }
        let first = cells.values().next().unwrap();
        let dim_of = |prefix: &str| -> usize {
            first
                .keys()
                .filter_map(|n| parse_indexed(n, prefix))
                .max()
                .map_or(0, |m| m + 1)
        };
        let layout = SampleLayout {
            k_regional: dim_of("beta_r"),
            n_sites: dim_of("beta_g"),
            k_local: (dim_of("beta_l") > 0).then(|| dim_of("beta_l")),
            has_sigma_r: first.contains_key("sigma_r"),
            has_sigma_h: first.contains_key("sigma_h"),
            has_sigma_l: first.contains_key("sigma_l"),
        };
        let n_chains = cells.keys().map(|&(c, _)| c).max().unwrap() + 1;
        let mut chains = vec![ChainDraws::default(); n_chains];
        for ((chain, _draw), params) in &cells {
            let c = &mut chains[*chain];
            let gather = |prefix: &str, dim: usize| -> Result<DVector<f64>, SamplerError> {
                let mut v = DVector::zeros(dim);
                for s in 0..dim {
                    v[s] = *params
                        .get(&format!("{prefix}[{s}]"))
                        .ok_or_else(|| bad(format!("missing {prefix}[{s}]")))?;
                }
                Ok(v)
            };
            c.beta_r.push(gather("beta_r", layout.k_regional)?);
            c.beta_g.push(gather("beta_g", layout.n_sites)?);
            c.beta_h.push(gather("beta_h", layout.n_sites)?);
            if let Some(k) = layout.k_local {
                c.beta_l.push(gather("beta_l", k)?);
            }
            if layout.has_sigma_r {
                c.sigma_r.push(params["sigma_r"]);
            }
            if layout.has_sigma_h {
                c.sigma_h.push(params["sigma_h"]);
            }
            if layout.has_sigma_l {
                c.sigma_l.push(params["sigma_l"]);
            }
            c.sigma.push(
                *params
                    .get("sigma")
                    .ok_or_else(|| bad("missing sigma".into()))?,
            );
        }
        Ok(Self { layout, chains })
    }
}

fn parse_indexed(name: &str, prefix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?
        .strip_prefix('[')?
        .strip_suffix(']')?
        .parse()
        .ok()
}

/// Convergence summaries per scalar parameter, plus acceptance rates for the
/// non-conjugate updates (slice sampling accepts by construction).
#[derive(Debug, Clone)]
pub struct Diagnostics {
    /// (parameter, split R-hat, effective sample size).
    pub per_parameter: Vec<(String, f64, f64)>,
    /// (parameter, acceptance rate) for slice-updated scales.
    pub acceptance: Vec<(String, f64)>,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.per_parameter
            .iter()
            .map(|(_, r, _)| *r)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn exceeding(&self, threshold: f64) -> Vec<&str> {
        self.per_parameter
            .iter()
            .filter(|(_, r, _)| *r > threshold)
            .map(|(n, _, _)| n.as_str())
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), std::io::Error> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "parameter,rhat,ess")?;
        for (name, rhat, ess) in &self.per_parameter {
            writeln!(out, "{name},{rhat},{ess}")?;
        }
        out.flush()
    }
}

/// Split-chain potential scale reduction factor. Chains of constant or
/// zero-variance draws return 1.0 by convention.
pub fn rhat(chains: &[Vec<f64>]) -> f64 {
    let halves = split_halves(chains);
    if halves.len() < 2 {
        return 1.0;
    }
    let h = halves[0].len();
    if h < 2 {
        return 1.0;
    }
    let means: Vec<f64> = halves.iter().map(|c| crate::util::mean(c)).collect();
    let vars: Vec<f64> = halves
        .iter()
        .map(|c| {
            let sd = crate::util::sample_sd(c);
            sd * sd
        })
        .collect();
    let w = crate::util::mean(&vars);
    if w <= 0.0 {
        return 1.0;
    }
    let grand = crate::util::mean(&means);
    let b_over_n =
        means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (means.len() as f64 - 1.0);
    let var_plus = (h as f64 - 1.0) / h as f64 * w + b_over_n;
    (var_plus / w).sqrt()
}

fn split_halves(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut halves = Vec::with_capacity(chains.len() * 2);
    for chain in chains {
        let h = chain.len() / 2;
        if h == 0 {
            continue;
        }
        halves.push(chain[..h].to_vec());
        halves.push(chain[chain.len() - h..].to_vec());
    }
    halves
}

/// Effective sample size across chains, following the split-chain
/// autocorrelation estimator with Geyer's initial positive sequence.
/// Clamped to (0, total draws].
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    if m == 0 {
        return 0.0;
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let total = (m * n) as f64;
    if n < 4 {
        return total.max(1.0);
    }
    let means: Vec<f64> = chains.iter().map(|c| crate::util::mean(&c[..n])).collect();
    let vars: Vec<f64> = chains
        .iter()
        .map(|c| {
            let sd = crate::util::sample_sd(&c[..n]);
            sd * sd
        })
        .collect();
    let w = crate::util::mean(&vars);
    if w <= 0.0 {
        return total;
    }
    let grand = crate::util::mean(&means);
    let b_over_n = if m > 1 {
        means
            .iter()
            .map(|mu| (mu - grand) * (mu - grand))
            .sum::<f64>()
            / (m as f64 - 1.0)
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;

    // Mean autocovariance across chains at each lag (biased by 1/n).
    let acov = |lag: usize| -> f64 {
        let mut total_cov = 0.0;
        for (chain, mu) in chains.iter().zip(means.iter()) {
            let mut s = 0.0;
            for t in 0..(n - lag) {
                s += (chain[t] - mu) * (chain[t + lag] - mu);
            }
            total_cov += s / n as f64;
        }
        total_cov / m as f64
    };

    let rho = |lag: usize| 1.0 - (w - acov(lag)) / var_plus;
    let mut tau = 1.0;
    let mut lag = 1;
    let mut prev_pair = f64::MAX;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair.min(prev_pair); // enforce monotone decrease
        prev_pair = pair;
        lag += 2;
    }
    (total / tau).clamp(1e-12, total)
}

struct BlockState {
    design: SparseDesign,
    beta: DVector<f64>,
    fitted: DVector<f64>,
    prior_mean: DVector<f64>,
    /// Fixed per-coefficient prior sd, or None when hierarchical (sd is the
    /// current scale draw).
    fixed_sd: Option<DVector<f64>>,
    scale_prior: Option<ScalePrior>,
    scale: f64,
    name: &'static str,
}

impl BlockState {
    fn prior_sd_vector(&self) -> DVector<f64> {
        match &self.fixed_sd {
            Some(sd) => sd.clone(),
            None => DVector::from_element(self.beta.len(), self.scale),
        }
    }
}

fn init_block(
    name: &'static str,
    design: SparseDesign,
    prior: &crate::model::BlockPrior,
) -> BlockState {
    let (fixed_sd, scale_prior, scale) = match &prior.kind {
        BlockPriorKind::Fixed { sd } => (Some(sd.clone()), None, 0.0),
        BlockPriorKind::Hierarchical { scale_prior, init } => (None, Some(*scale_prior), *init),
    };
    let beta = prior.mean.clone();
    let fitted = design.matvec(&beta);
    BlockState {
        design,
        beta,
        fitted,
        prior_mean: prior.mean.clone(),
        fixed_sd,
        scale_prior,
        scale,
        name,
    }
}

/// Run the requested number of chains and compute diagnostics over the
/// retained draws. Chains are embarrassingly parallel; each draws from its
/// own ChaCha stream, so the output is reproducible for a fixed seed.
pub fn run_chains(
    designs: &DesignSet,
    priors: &StagePriors,
    mcmc: &McmcConfig,
) -> Result<(PosteriorSamples, Diagnostics), SamplerError> {
    mcmc.validate()?;
    let results: Vec<Result<ChainDraws, SamplerError>> = (0..mcmc.chains)
        .into_par_iter()
        .map(|chain_idx| run_single_chain(designs, priors, mcmc, chain_idx as u64))
        .collect();
    let mut chains = Vec::with_capacity(mcmc.chains);
    for r in results {
        chains.push(r?);
    }
    let layout = SampleLayout {
        k_regional: designs.regional.n_basis(),
        n_sites: designs.n_sites,
        k_local: designs.local.as_ref().map(|l| l.n_basis()),
        has_sigma_r: matches!(priors.regional.kind, BlockPriorKind::Hierarchical { .. }),
        has_sigma_h: matches!(priors.offset.kind, BlockPriorKind::Hierarchical { .. }),
        has_sigma_l: priors
            .local
            .as_ref()
            .is_some_and(|p| matches!(p.kind, BlockPriorKind::Hierarchical { .. })),
    };
    let samples = PosteriorSamples { layout, chains };
    let diagnostics = compute_diagnostics(&samples);
    Ok((samples, diagnostics))
}

fn run_single_chain(
    designs: &DesignSet,
    priors: &StagePriors,
    mcmc: &McmcConfig,
    chain_idx: u64,
) -> Result<ChainDraws, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mcmc.seed);
    rng.set_stream(chain_idx);

    let n = designs.n_obs();
    let mut blocks = vec![
        init_block(
            "beta_r",
            SparseDesign::from_dense(&designs.regional.values),
            &priors.regional,
        ),
        init_block(
            "beta_g",
            SparseDesign::from_site_column(
                &designs.site_index,
                Some(&designs.ages_std),
                designs.n_sites,
            ),
            &priors.slope,
        ),
        init_block(
            "beta_h",
            SparseDesign::from_site_column(&designs.site_index, None, designs.n_sites),
            &priors.offset,
        ),
    ];
    if let (Some(local), Some(local_prior)) = (&designs.local, &priors.local) {
        blocks.push(init_block(
            "beta_l",
            SparseDesign::from_dense(&local.values),
            local_prior,
        ));
    }

    let mut sigma = match priors.error {
        ErrorScalePrior::Sampled(_) => 0.1,
        ErrorScalePrior::Fixed(v) => v,
    };

    let mut draws = ChainDraws::default();
    for iteration in 0..mcmc.iterations {
        let total_fit: DVector<f64> = blocks
            .iter()
            .fold(DVector::zeros(n), |acc, b| acc + &b.fitted);
        let mut residual_all = &designs.y - &total_fit;

        // Conjugate block updates.
        for block in blocks.iter_mut() {
            let partial = &residual_all + &block.fitted;
            let total_var = DVector::from_fn(n, |i, _| sigma * sigma + designs.obs_var_known[i]);
            let prior_sd = block.prior_sd_vector();
            let new_beta = gibbs_coefficient_block(
                block.name,
                &block.design,
                &partial,
                &total_var,
                &block.prior_mean,
                &prior_sd,
                &mut rng,
            )?;
            if new_beta.iter().any(|v| !v.is_finite()) {
                return Err(SamplerError::NonFinite {
                    iteration,
                    parameter: block.name.to_string(),
                });
            }
            let new_fit = block.design.matvec(&new_beta);
            residual_all += &block.fitted - &new_fit;
            block.beta = new_beta;
            block.fitted = new_fit;
        }

        // Scale updates for hierarchical blocks: the sufficient-
        // parameterization conditional first, then an interweaved update in
        // the ancillary parameterization beta = mu + scale * eta (eta held
        // fixed), which rescales the whole block and breaks the funnel
        // between a scale and its coefficients. Both steps target the same
        // joint posterior.
        for b in blocks.iter_mut() {
            if let Some(scale_prior) = b.scale_prior {
                let k = b.beta.len() as f64;
                let ss: f64 = b
                    .beta
                    .iter()
                    .zip(b.prior_mean.iter())
                    .map(|(&x, &m)| (x - m) * (x - m))
                    .sum();
                let loglik = |s: f64| -k * s.ln() - ss / (2.0 * s * s);
                b.scale = scale_update(b.scale, &scale_prior, loglik, &mut rng);
                if !b.scale.is_finite() || b.scale <= 0.0 {
                    return Err(SamplerError::NonFinite {
                        iteration,
                        parameter: format!("scale({})", b.name),
                    });
                }

                // Interweaving: in (eta, scale) coordinates the prior powers
                // of the scale cancel, leaving the Cauchy prior times the
                // likelihood of the rescaled block.
                let eta = (&b.beta - &b.prior_mean) / b.scale;
                let u = b.design.matvec(&eta);
                let mean_fit = b.design.matvec(&b.prior_mean);
                // Residual with this block replaced by its prior-mean fit.
                let base = &residual_all + &b.fitted - &mean_fit;
                let s2v = sigma * sigma;
                let loglik = |s: f64| {
                    let mut lp = 0.0;
                    for i in 0..n {
                        let r = base[i] - s * u[i];
                        lp -= 0.5 * r * r / (s2v + designs.obs_var_known[i]);
                    }
                    lp
                };
                let new_scale = scale_update(b.scale, &scale_prior, loglik, &mut rng);
                if !new_scale.is_finite() || new_scale <= 0.0 {
                    return Err(SamplerError::NonFinite {
                        iteration,
                        parameter: format!("scale({})", b.name),
                    });
                }
                b.beta = &b.prior_mean + new_scale * &eta;
                b.scale = new_scale;
                let new_fit = b.design.matvec(&b.beta);
                residual_all += &b.fitted - &new_fit;
                b.fitted = new_fit;
            }
        }

        // Observation-error scale.
        if let ErrorScalePrior::Sampled(prior) = priors.error {
            let res2: Vec<f64> = residual_all.iter().map(|r| r * r).collect();
            let known = &designs.obs_var_known;
            let loglik = |s: f64| {
                let s2 = s * s;
                let mut lp = 0.0;
                for i in 0..n {
                    let v = s2 + known[i];
                    lp -= 0.5 * (v.ln() + res2[i] / v);
                }
                lp
            };
            sigma = scale_update(sigma, &prior, loglik, &mut rng);
            if !sigma.is_finite() || sigma <= 0.0 {
                return Err(SamplerError::NonFinite {
                    iteration,
                    parameter: "sigma".into(),
                });
            }
        }

        let retained =
            iteration >= mcmc.burn_in && (iteration - mcmc.burn_in).is_multiple_of(mcmc.thin);
        if retained {
            draws.beta_r.push(blocks[0].beta.clone());
            draws.beta_g.push(
                blocks[1]
                    .beta
                    .map(|b| designs.age_scaling.slope_to_reported(b)),
            );
            draws.beta_h.push(blocks[2].beta.clone());
            if blocks.len() > 3 {
                draws.beta_l.push(blocks[3].beta.clone());
            }
            if blocks[0].scale_prior.is_some() {
                draws.sigma_r.push(blocks[0].scale);
            }
            if blocks[2].scale_prior.is_some() {
                draws.sigma_h.push(blocks[2].scale);
            }
            if blocks.len() > 3 && blocks[3].scale_prior.is_some() {
                draws.sigma_l.push(blocks[3].scale);
            }
            draws.sigma.push(sigma);
        }
    }
    Ok(draws)
}

fn compute_diagnostics(samples: &PosteriorSamples) -> Diagnostics {
    let names = samples.parameter_names();
    let per_parameter = names
        .iter()
        .map(|name| {
            let series = samples.scalar_series(name);
            (name.clone(), rhat(&series), ess(&series))
        })
        .collect();
    let acceptance = names
        .iter()
        .filter(|n| n.starts_with("sigma"))
        .map(|n| (n.clone(), 1.0))
        .collect();
    Diagnostics {
        per_parameter,
        acceptance,
    }
}

/// Extract the current parameter state from the last draw of a chain; used
/// by tests that need a concrete [`ParameterState`].
pub fn state_from_draw(samples: &PosteriorSamples, chain: usize, draw: usize) -> ParameterState {
    let c = &samples.chains[chain];
    ParameterState {
        beta_r: c.beta_r[draw].clone(),
        beta_g: c.beta_g[draw].clone(),
        beta_h: c.beta_h[draw].clone(),
        beta_l: c.beta_l.get(draw).cloned(),
        sigma_r: c.sigma_r.get(draw).copied(),
        sigma_h: c.sigma_h.get(draw).copied(),
        sigma_l: c.sigma_l.get(draw).copied(),
        sigma: c.sigma[draw],
    }
}
