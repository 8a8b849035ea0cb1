//! Multi-objective Bayesian optimization baseline: one Gaussian-process
//! surrogate per normalized objective over signed configuration encodings,
//! with Monte-Carlo expected-hypervolume-improvement acquisition over a
//! random candidate pool.

use std::collections::HashSet;
use std::io;

use rand_chacha::ChaCha12Rng;

use crate::design_space::{csv_error, Configuration, DesignSpace};
use crate::error::{Error, Result};
use crate::oracle::QoREvaluator;
use crate::pareto::{ehvi_mc, ParetoArchive, QoRVector};
use crate::tensor::Tensor2D;

pub const NOISE_FLOOR: f64 = 1e-6;
pub const NOISE_CEILING: f64 = 1e-2;

/// Hyperparameter grid searched by log marginal likelihood.
pub const LENGTH_SCALE_GRID: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const SIGNAL_STDDEV_GRID: [f64; 3] = [0.25, 0.5, 1.0];

const DEFAULT_LENGTH_SCALE: f64 = 8.0;
const DEFAULT_SIGNAL_STDDEV: f64 = 0.5;

/// Exact GP regression with a squared-exponential kernel and zero prior
/// mean, backed by a cached Cholesky factorization.
#[derive(Debug, Clone)]
pub struct GPModel {
    inputs: Tensor2D,
    pub signal_variance: f64,
    pub length_scale: f64,
    /// Noise actually used; the floor unless escalation was needed.
    pub noise_variance: f64,
    pub log_marginal_likelihood: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(signal_variance: f64, length_scale: f64, a: &[f64], b: &[f64]) -> f64 {
    signal_variance * (-sq_dist(a, b) / (2.0 * length_scale * length_scale)).exp()
}

/// In-place lower Cholesky factor of a symmetric matrix in row-major order.
/// Fails on a non-positive pivot, which is how ill-conditioning surfaces.
fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::FactorizationFailed { noise: f64::NAN });
        }
        let d = diag.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / d;
        }
        for k in (j + 1)..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

fn solve_lower(chol: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= chol[i * n + k] * x[k];
        }
        x[i] /= chol[i * n + i];
    }
    x
}

fn solve_upper_from_lower(chol: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    // Solves Lᵀ x = b.
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            x[i] -= chol[k * n + i] * x[k];
        }
        x[i] /= chol[i * n + i];
    }
    x
}

/// Fit at fixed hyperparameters, escalating the noise tenfold on
/// factorization failure up to the ceiling.
pub fn gp_fit_with(
    inputs: Tensor2D,
    targets: &[f64],
    signal_variance: f64,
    length_scale: f64,
) -> Result<GPModel> {
    let n = inputs.rows();
    if n < 2 {
        return Err(Error::Degenerate(
            "GP regression needs at least two points".into(),
        ));
    }
    if targets.len() != n {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} targets"),
            got: format!("{}", targets.len()),
        });
    }
    if targets.iter().any(|t| !t.is_finite()) {
        return Err(Error::Degenerate("non-finite GP target".into()));
    }
    let mut base = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let k = kernel(signal_variance, length_scale, inputs.row(i), inputs.row(j));
            base[i * n + j] = k;
            base[j * n + i] = k;
        }
    }
    let mut noise = NOISE_FLOOR;
    loop {
        let mut k = base.clone();
        for i in 0..n {
            k[i * n + i] += noise;
        }
        if cholesky(&mut k, n).is_ok() {
            let alpha_half = solve_lower(&k, n, targets);
            let alpha = solve_upper_from_lower(&k, n, &alpha_half);
            let data_fit: f64 = targets.iter().zip(&alpha).map(|(y, a)| y * a).sum();
            let log_det: f64 = (0..n).map(|i| k[i * n + i].ln()).sum();
            let lml = -0.5 * data_fit
                - log_det
                - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            return Ok(GPModel {
                inputs,
                signal_variance,
                length_scale,
                noise_variance: noise,
                log_marginal_likelihood: lml,
                chol: k,
                alpha,
            });
        }
        if noise >= NOISE_CEILING {
            return Err(Error::FactorizationFailed { noise });
        }
        noise = (noise * 10.0).min(NOISE_CEILING);
    }
}

/// Fit a GP; with `hyper_opt` the (σ, ℓ) grid is searched by log marginal
/// likelihood, otherwise mid-grid defaults are used.
pub fn gp_fit(inputs: Tensor2D, targets: &[f64], hyper_opt: bool) -> Result<GPModel> {
    if !hyper_opt {
        return gp_fit_with(
            inputs,
            targets,
            DEFAULT_SIGNAL_STDDEV * DEFAULT_SIGNAL_STDDEV,
            DEFAULT_LENGTH_SCALE,
        );
    }
    let mut best: Option<GPModel> = None;
    for &sigma in &SIGNAL_STDDEV_GRID {
        for &ell in &LENGTH_SCALE_GRID {
            let model = gp_fit_with(inputs.clone(), targets, sigma * sigma, ell)?;
            if best
                .as_ref()
                .map_or(true, |b| model.log_marginal_likelihood > b.log_marginal_likelihood)
            {
                best = Some(model);
            }
        }
    }
    Ok(best.expect("grid is non-empty"))
}

impl GPModel {
    pub fn n_points(&self) -> usize {
        self.inputs.rows()
    }

    /// Exact posterior (mean, stddev) of the latent function at x.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let n = self.inputs.rows();
        let mut k_star = vec![0.0; n];
        for i in 0..n {
            k_star[i] = kernel(self.signal_variance, self.length_scale, self.inputs.row(i), x);
        }
        let mean: f64 = k_star.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = solve_lower(&self.chol, n, &k_star);
        let var = self.signal_variance - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(0.0).sqrt())
    }
}

/// Standard exact-GP posterior wrapper matching the operation vocabulary.
pub fn gp_posterior(model: &GPModel, x: &[f64]) -> (f64, f64) {
    model.posterior(x)
}

#[derive(Debug, Clone)]
pub struct MOBOConfig {
    /// Random candidates drawn per step before deduplication.
    pub pool_size: usize,
    /// Monte-Carlo samples per EHVI score.
    pub ehvi_samples: usize,
    /// Re-run the hyperparameter grid after this many new points;
    /// in-between refits reuse the cached hyperparameters.
    pub hyper_refit_interval: usize,
    pub hyper_opt: bool,
}

impl Default for MOBOConfig {
    fn default() -> Self {
        MOBOConfig {
            pool_size: 1024,
            ehvi_samples: 128,
            hyper_refit_interval: 16,
            hyper_opt: true,
        }
    }
}

/// Surrogates (one per objective), the archive they are trained on, and the
/// acquisition bookkeeping.
pub struct MOBOState {
    space: DesignSpace,
    pub archive: ParetoArchive,
    cfg: MOBOConfig,
    gps: [GPModel; 3],
    points_since_hyperfit: usize,
    iteration: u64,
}

/// What one step decided and observed.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub iteration: u64,
    pub config: Configuration,
    pub ehvi: f64,
    pub ehvi_se: f64,
    pub means: [f64; 3],
    pub stddevs: [f64; 3],
    pub qor: QoRVector,
    pub hypervolume: f64,
}

fn fit_objective_gps(
    space: &DesignSpace,
    archive: &ParetoArchive,
    hyper_opt: bool,
    cached: Option<&[GPModel; 3]>,
) -> Result<[GPModel; 3]> {
    let n = archive.len();
    let width = space.flat_width();
    let mut inputs = Tensor2D::zeros(n, width);
    for (row, rec) in archive.records().iter().enumerate() {
        inputs
            .row_mut(row)
            .copy_from_slice(&space.encode_signed_flat(&rec.config));
    }
    let mut out = Vec::with_capacity(3);
    for k in 0..3 {
        let targets: Vec<f64> = archive.records().iter().map(|r| r.norm.0[k]).collect();
        let model = match (hyper_opt, cached) {
            (true, _) | (false, None) => gp_fit(inputs.clone(), &targets, hyper_opt)?,
            (false, Some(prev)) => gp_fit_with(
                inputs.clone(),
                &targets,
                prev[k].signal_variance,
                prev[k].length_scale,
            )?,
        };
        out.push(model);
    }
    Ok(out.try_into().map_err(|_| ()).expect("exactly three objectives"))
}

impl MOBOState {
    /// Fit surrogates on the seeded archive.
    pub fn new(space: &DesignSpace, archive: ParetoArchive, cfg: MOBOConfig) -> Result<MOBOState> {
        let gps = fit_objective_gps(space, &archive, cfg.hyper_opt, None)?;
        Ok(MOBOState {
            space: space.clone(),
            archive,
            cfg,
            gps,
            points_since_hyperfit: 0,
            iteration: 0,
        })
    }

    pub fn gps(&self) -> &[GPModel; 3] {
        &self.gps
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }
}

/// Posterior-EHVI score for every candidate; returns (ehvi, se, means,
/// stddevs) per candidate in order.
pub fn score_pool(
    gps: &[GPModel; 3],
    archive: &ParetoArchive,
    pool: &[Vec<f64>],
    samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<(f64, f64, [f64; 3], [f64; 3])>> {
    let mut out = Vec::with_capacity(pool.len());
    for x in pool {
        let mut means = [0.0; 3];
        let mut stds = [0.0; 3];
        for k in 0..3 {
            let (m, s) = gps[k].posterior(x);
            means[k] = m;
            stds[k] = s;
        }
        let (ehvi, se) = ehvi_mc(means, stds, archive, samples, rng)?;
        out.push((ehvi, se, means, stds));
    }
    Ok(out)
}

/// One acquisition round: pool → posterior EHVI → evaluate the argmax →
/// archive append → surrogate refit. Deterministic for a fixed rng stream.
pub fn mobo_step(
    state: &mut MOBOState,
    oracle: &dyn QoREvaluator,
    rng: &mut ChaCha12Rng,
) -> Result<StepTrace> {
    let known: HashSet<&Configuration> =
        state.archive.records().iter().map(|r| &r.config).collect();
    let mut pool: Vec<Configuration> = Vec::with_capacity(state.cfg.pool_size);
    let mut draw = |count: usize, pool: &mut Vec<Configuration>| {
        let mut fresh: HashSet<Configuration> = HashSet::new();
        for _ in 0..count {
            let cfg = state.space.legalize(&state.space.random_config(rng));
            if !known.contains(&cfg) && fresh.insert(cfg.clone()) {
                pool.push(cfg);
            }
        }
    };
    draw(state.cfg.pool_size, &mut pool);
    if pool.is_empty() {
        // One escalated attempt before giving up on the space.
        draw(state.cfg.pool_size * 4, &mut pool);
        if pool.is_empty() {
            return Err(Error::Degenerate(
                "candidate pool empty after deduplication, even at 4x size".into(),
            ));
        }
    }

    let encoded: Vec<Vec<f64>> = pool
        .iter()
        .map(|c| state.space.encode_signed_flat(c))
        .collect();
    let scores = score_pool(&state.gps, &state.archive, &encoded, state.cfg.ehvi_samples, rng)?;
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| {
            a.1 .0
                .partial_cmp(&b.1 .0)
                .expect("EHVI scores are comparable")
                // max_by keeps the later of equal elements; force earliest.
                .then(std::cmp::Ordering::Greater)
        })
        .map(|(i, _)| i)
        .expect("pool is non-empty");

    let config = pool[best].clone();
    let (ehvi, ehvi_se, means, stddevs) = scores[best];
    let qor = oracle.evaluate(&config)?;
    state.iteration += 1;
    state.archive.insert(config.clone(), qor, state.iteration)?;

    state.points_since_hyperfit += 1;
    let full = state.cfg.hyper_opt && state.points_since_hyperfit >= state.cfg.hyper_refit_interval;
    state.gps = fit_objective_gps(&state.space, &state.archive, full, Some(&state.gps))?;
    if full {
        state.points_since_hyperfit = 0;
    }

    Ok(StepTrace {
        iteration: state.iteration,
        config,
        ehvi,
        ehvi_se,
        means,
        stddevs,
        qor,
        hypervolume: state.archive.hypervolume(),
    })
}

/// Trace CSV: iteration, the configuration literals, acquisition score and
/// posterior, realized QoR, and archive hypervolume after insertion.
pub fn write_mobo_trace<W: io::Write>(
    space: &DesignSpace,
    trace: &[StepTrace],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec!["iteration".into()];
    header.extend(space.params().iter().map(|p| p.name.clone()));
    header.extend(
        [
            "ehvi",
            "ehvi_se",
            "mean_neg_perf",
            "mean_power",
            "mean_area",
            "std_neg_perf",
            "std_power",
            "std_area",
            "performance",
            "power_w",
            "area_um2",
            "hypervolume",
        ]
        .map(String::from),
    );
    w.write_record(&header).map_err(csv_error)?;
    for t in trace {
        let mut row = vec![t.iteration.to_string()];
        row.extend(
            space
                .params()
                .iter()
                .zip(t.config.choices())
                .map(|(p, &c)| p.candidates[c].literal()),
        );
        row.push(format!("{:?}", t.ehvi));
        row.push(format!("{:?}", t.ehvi_se));
        for k in 0..3 {
            row.push(format!("{:?}", t.means[k]));
        }
        for k in 0..3 {
            row.push(format!("{:?}", t.stddevs[k]));
        }
        row.push(format!("{:?}", t.qor.performance));
        row.push(format!("{:?}", t.qor.power));
        row.push(format!("{:?}", t.qor.area));
        row.push(format!("{:?}", t.hypervolume));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
