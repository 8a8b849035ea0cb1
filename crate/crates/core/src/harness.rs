//! End-to-end orchestration: dataset preparation, offline pretraining, the
//! guided online exploration loop, the paired MOBO baseline, and the
//! artifacts (manifest, CSVs, checkpoints) each phase leaves behind.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::design_space::{csv_error, Configuration, DesignSpace};
use crate::diffusion::{ddim_sample, train, DenoiserModel, NoiseSchedule, SamplerConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::guidance::{
    retrain, train_predictor_bounded, GuidanceConfig, GuidedSampler, PredictorTrainConfig,
    QoRPredictor,
};
use crate::mobo::{mobo_step, write_mobo_trace, MOBOConfig, MOBOState, StepTrace};
use crate::net::Activation;
use crate::oracle::{
    load_table_rows, save_table, QoREvaluator, SyntheticOracle, SyntheticOracleParams,
    TableOracle, DEFAULT_BUDGET,
};
use crate::pareto::{select_target, Bounds, ConditionSelectorConfig, ParetoArchive, QoRVector};
use crate::rng::rng_for;

/// Margin added beyond the worst seeded objective when freezing the
/// hypervolume reference point.
pub const REFERENCE_MARGIN: f64 = 0.1;

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Synthetic,
    Table,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub kind: OracleKind,
    pub seed: u64,
    pub noise_amplitude: f64,
    /// Label table for `kind = "table"`.
    pub table_path: Option<PathBuf>,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            kind: OracleKind::Synthetic,
            seed: 7,
            noise_amplitude: SyntheticOracleParams::default().noise_amplitude,
            table_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Random valid configurations drawn for diffusion training.
    pub unlabeled: usize,
    /// How many of them get oracle labels (budget-exempt).
    pub labeled: usize,
    /// Mutants generated per unlabeled configuration.
    pub augment_multiplier: usize,
    /// Per-slot resample probability used by augmentation and the online
    /// duplicate fallback.
    pub mutation_rate: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            unlabeled: 10_000,
            labeled: 1_000,
            augment_multiplier: 2,
            mutation_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub t_total: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub embed_width: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            t_total: 1000,
            hidden: 256,
            blocks: 2,
            embed_width: 32,
            activation: Activation::Relu,
            epochs: 40,
            batch_size: 128,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Reverse steps S.
    pub steps: usize,
    pub clamp_x0: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            steps: 50,
            clamp_x0: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    /// Guidance constant c in s(t) = c·√(1 − ᾱ_t).
    pub strength: f64,
    pub weights: [f64; 3],
    pub exact_gradient: bool,
    /// ℓ∞ radius δ of the target search around front points.
    pub delta: f64,
    pub candidates_per_point: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let g = GuidanceConfig::default();
        let s = ConditionSelectorConfig::default();
        GuidanceSection {
            strength: g.strength,
            weights: g.weights,
            exact_gradient: g.exact_gradient,
            delta: s.delta,
            candidates_per_point: s.candidates_per_point,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub hidden: usize,
    pub blocks: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    /// Warm-start epochs run after every online iteration.
    pub retrain_epochs: usize,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let p = PredictorTrainConfig::default();
        PredictorSection {
            hidden: p.hidden,
            blocks: p.blocks,
            activation: p.activation,
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            holdout_fraction: p.holdout_fraction,
            retrain_epochs: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineSection {
    /// Metered oracle budget B.
    pub budget: u64,
    /// Evaluations per selected target before the next target is chosen.
    pub batch_size: usize,
    /// Fresh Gaussian restarts tried when a sample duplicates the archive.
    pub resample_limit: usize,
}

impl Default for OnlineSection {
    fn default() -> Self {
        OnlineSection {
            budget: DEFAULT_BUDGET,
            batch_size: 1,
            resample_limit: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoboSection {
    pub pool_size: usize,
    pub ehvi_samples: usize,
    pub hyper_refit_interval: usize,
    #[serde(default = "default_true")]
    pub hyper_opt: bool,
}

impl Default for MoboSection {
    fn default() -> Self {
        let m = MOBOConfig::default();
        MoboSection {
            pool_size: m.pool_size,
            ehvi_samples: m.ehvi_samples,
            hyper_refit_interval: m.hyper_refit_interval,
            hyper_opt: m.hyper_opt,
        }
    }
}

/// The whole experiment, one file. Unknown keys are rejected so typos fail
/// loudly instead of silently running defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of every derived random stream.
    pub seed: u64,
    pub outdir: PathBuf,
    /// Code version stamped into manifests; ignored on load.
    pub version: Option<String>,
    pub oracle: OracleSection,
    pub data: DataSection,
    pub diffusion: DiffusionSection,
    pub sampler: SamplerSection,
    pub guidance: GuidanceSection,
    pub predictor: PredictorSection,
    pub online: OnlineSection,
    pub mobo: MoboSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            outdir: PathBuf::from("runs/default"),
            version: None,
            oracle: OracleSection::default(),
            data: DataSection::default(),
            diffusion: DiffusionSection::default(),
            sampler: SamplerSection::default(),
            guidance: GuidanceSection::default(),
            predictor: PredictorSection::default(),
            online: OnlineSection::default(),
            mobo: MoboSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::ExperimentConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path)?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ExperimentConfig(msg));
        if self.data.labeled > self.data.unlabeled {
            return fail(format!(
                "labeled ({}) cannot exceed unlabeled ({})",
                self.data.labeled, self.data.unlabeled
            ));
        }
        if self.data.labeled < 2 {
            return fail("need at least two labeled points".into());
        }
        if self.online.budget < 1 {
            return fail("online budget must be at least 1".into());
        }
        if self.online.batch_size < 1 {
            return fail("online batch size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.data.mutation_rate) {
            return fail(format!(
                "mutation rate {} outside [0, 1]",
                self.data.mutation_rate
            ));
        }
        if self.guidance.delta < 0.0 || !self.guidance.delta.is_finite() {
            return fail(format!("delta {} must be non-negative", self.guidance.delta));
        }
        if self.sampler.steps < 1 || self.sampler.steps > self.diffusion.t_total {
            return fail(format!(
                "sampler steps {} outside 1..={}",
                self.sampler.steps, self.diffusion.t_total
            ));
        }
        if self.oracle.kind == OracleKind::Table && self.oracle.table_path.is_none() {
            return fail("table oracle needs table_path".into());
        }
        GuidanceConfig {
            strength: self.guidance.strength,
            weights: self.guidance.weights,
            exact_gradient: self.guidance.exact_gradient,
        }
        .validate()?;
        Ok(())
    }

    /// A copy with the current code version stamped in, ready to persist as
    /// the run manifest.
    pub fn stamped(&self) -> ExperimentConfig {
        let mut out = self.clone();
        out.version = Some(env!("CARGO_PKG_VERSION").to_string());
        out
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            strength: self.guidance.strength,
            weights: self.guidance.weights,
            exact_gradient: self.guidance.exact_gradient,
        }
    }

    pub fn selector_config(&self) -> ConditionSelectorConfig {
        ConditionSelectorConfig {
            delta: self.guidance.delta,
            candidates_per_point: self.guidance.candidates_per_point,
        }
    }

    pub fn predictor_config(&self) -> PredictorTrainConfig {
        PredictorTrainConfig {
            hidden: self.predictor.hidden,
            blocks: self.predictor.blocks,
            activation: self.predictor.activation,
            epochs: self.predictor.epochs,
            batch_size: self.predictor.batch_size,
            learning_rate: self.predictor.learning_rate,
            holdout_fraction: self.predictor.holdout_fraction,
        }
    }

    pub fn retrain_config(&self) -> PredictorTrainConfig {
        PredictorTrainConfig {
            epochs: self.predictor.retrain_epochs,
            ..self.predictor_config()
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            clamp_x0: self.sampler.clamp_x0,
        }
    }

    pub fn mobo_config(&self) -> MOBOConfig {
        MOBOConfig {
            pool_size: self.mobo.pool_size,
            ehvi_samples: self.mobo.ehvi_samples,
            hyper_refit_interval: self.mobo.hyper_refit_interval,
            hyper_opt: self.mobo.hyper_opt,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.outdir.join("data")
    }
    pub fn offline_dir(&self) -> PathBuf {
        self.outdir.join("offline")
    }
    pub fn online_dir(&self) -> PathBuf {
        self.outdir.join("online")
    }
    pub fn mobo_dir(&self) -> PathBuf {
        self.outdir.join("mobo")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.outdir.join("report")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.outdir.join("manifest.toml")
    }
}

/// Build the configured oracle with a fresh meter of the given budget.
pub fn build_oracle(
    space: &DesignSpace,
    cfg: &ExperimentConfig,
    budget: u64,
) -> Result<Box<dyn QoREvaluator>> {
    match cfg.oracle.kind {
        OracleKind::Synthetic => {
            let params = SyntheticOracleParams {
                seed: cfg.oracle.seed,
                noise_amplitude: cfg.oracle.noise_amplitude,
                ..SyntheticOracleParams::default()
            };
            Ok(Box::new(SyntheticOracle::new(params, budget)))
        }
        OracleKind::Table => {
            let path = cfg
                .oracle
                .table_path
                .as_ref()
                .expect("validated: table oracle has a path");
            Ok(Box::new(TableOracle::load_from_path(space, path, budget)?))
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub unlabeled: Vec<Configuration>,
    pub labeled: Vec<(Configuration, QoRVector)>,
    pub augmented: Vec<Configuration>,
}

/// Draw the offline corpus: U distinct random valid configurations, oracle
/// labels for the first L (budget-exempt), and mutation-based augmentation.
pub fn prepare_data(
    space: &DesignSpace,
    cfg: &ExperimentConfig,
    oracle: &dyn QoREvaluator,
    rng: &mut ChaCha12Rng,
) -> Result<PreparedData> {
    let want = cfg.data.unlabeled;
    let mut seen = HashSet::with_capacity(want);
    let mut unlabeled = Vec::with_capacity(want);
    let mut attempts = 0usize;
    let cap = want.saturating_mul(1000).max(1000);
    while unlabeled.len() < want {
        attempts += 1;
        if attempts > cap {
            return Err(Error::Degenerate(format!(
                "could not draw {want} distinct configurations from this space"
            )));
        }
        let config = space.legalize(&space.random_config(rng));
        if seen.insert(config.clone()) {
            unlabeled.push(config);
        }
    }
    let mut labeled = Vec::with_capacity(cfg.data.labeled);
    for config in unlabeled.iter().take(cfg.data.labeled) {
        let qor = oracle.evaluate_unmetered(config)?;
        labeled.push((config.clone(), qor));
    }
    let mut augmented = Vec::with_capacity(want * cfg.data.augment_multiplier);
    for config in &unlabeled {
        for _ in 0..cfg.data.augment_multiplier {
            let mutant = space.legalize(&space.mutate(config, cfg.data.mutation_rate, rng));
            augmented.push(mutant);
        }
    }
    Ok(PreparedData {
        unlabeled,
        labeled,
        augmented,
    })
}

/// Seed the archive from the labeled set with frozen bounds and reference.
/// Both exploration methods start from the exact same archive.
pub fn seed_archive(labeled: &[(Configuration, QoRVector)]) -> Result<ParetoArchive> {
    let qors: Vec<QoRVector> = labeled.iter().map(|(_, q)| *q).collect();
    let bounds = Bounds::from_qors(&qors)?;
    ParetoArchive::seed(bounds, REFERENCE_MARGIN, labeled)
}

#[derive(Debug)]
pub struct OfflineArtifacts {
    pub denoiser: DenoiserModel,
    pub predictor: QoRPredictor,
    pub archive: ParetoArchive,
    /// (training step, loss) history of the denoiser run.
    pub diffusion_loss: Vec<(usize, f64)>,
    /// Holdout RMSE of the predictor in normalized objective space.
    pub predictor_rmse: f64,
}

/// Offline phase: denoiser on unlabeled ∪ augmented, predictor on the
/// labeled set, archive seeded with frozen normalization.
pub fn run_offline(
    space: &DesignSpace,
    cfg: &ExperimentConfig,
    data: &PreparedData,
) -> Result<OfflineArtifacts> {
    let archive = seed_archive(&data.labeled)?;

    let mut dataset: Vec<Vec<f64>> =
        Vec::with_capacity(data.unlabeled.len() + data.augmented.len());
    for config in data.unlabeled.iter().chain(&data.augmented) {
        dataset.push(space.encode_signed_flat(config));
    }
    let schedule = NoiseSchedule::new(cfg.diffusion.t_total)?;
    let mut diff_rng = rng_for(cfg.seed, "offline-diffusion");
    let mut denoiser = DenoiserModel::new(
        space.flat_width(),
        cfg.diffusion.embed_width,
        cfg.diffusion.hidden,
        cfg.diffusion.blocks,
        cfg.diffusion.activation,
        schedule,
        &mut diff_rng,
    )?;
    let train_cfg = TrainConfig {
        epochs: cfg.diffusion.epochs,
        batch_size: cfg.diffusion.batch_size,
        learning_rate: cfg.diffusion.learning_rate,
    };
    let diffusion_loss = train(&mut denoiser, &dataset, &train_cfg, &mut diff_rng)?;

    let inputs: Vec<Vec<f64>> = data
        .labeled
        .iter()
        .map(|(c, _)| space.encode_signed_flat(c))
        .collect();
    let labels: Vec<QoRVector> = data.labeled.iter().map(|(_, q)| *q).collect();
    let mut pred_rng = rng_for(cfg.seed, "offline-predictor");
    let (predictor, predictor_rmse) = train_predictor_bounded(
        &inputs,
        &labels,
        *archive.bounds(),
        &cfg.predictor_config(),
        &mut pred_rng,
    )?;

    Ok(OfflineArtifacts {
        denoiser,
        predictor,
        archive,
        diffusion_loss,
        predictor_rmse,
    })
}

/// One online evaluation, as recorded. Wall time lives in a separate timing
/// file so record CSVs replay byte-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    /// 1-based, contiguous across the run.
    pub iteration: u64,
    /// The normalized objective the sampler was steered towards (posterior
    /// mean of the selected candidate for the MOBO baseline).
    pub target: [f64; 3],
    pub config: Configuration,
    /// Whether legalization changed the decoded sample.
    pub legalized: bool,
    /// Fresh-start resamples spent on duplicate collisions.
    pub resamples: u32,
    /// True when the duplicate fallback (mutate of the nearest front
    /// configuration) produced this point.
    pub mutated_fallback: bool,
    /// Guidance steps that fell back to the raw noise estimate.
    pub guidance_fallbacks: u64,
    pub qor: QoRVector,
    pub hypervolume: f64,
    /// Hypervolume gained over the frozen offline baseline.
    pub hvi_offline: f64,
}

/// One guidance event annotated with where in the run it happened.
#[derive(Debug, Clone)]
pub struct GuidanceTraceRow {
    pub iteration: u64,
    pub attempt: u32,
    pub step: usize,
    pub t: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub fallback: bool,
}

#[derive(Debug)]
pub struct OnlineOutcome {
    pub records: Vec<RunRecord>,
    /// Seconds per evaluation, index-aligned with `records`.
    pub timings: Vec<f64>,
    pub guidance_events: Vec<GuidanceTraceRow>,
    /// Error text when the run ended early instead of spending the budget.
    pub termination: Option<String>,
}

/// The guided exploration loop. Per evaluation: select a target, sample with
/// guidance, decode + legalize + dedupe (fresh restarts, then a mutation
/// fallback), evaluate, archive, retrain the predictor. Oracle failures end
/// the run gracefully with everything recorded so far.
pub fn run_online(
    space: &DesignSpace,
    cfg: &ExperimentConfig,
    denoiser: &DenoiserModel,
    predictor: &mut QoRPredictor,
    archive: &mut ParetoArchive,
    labeled: &[(Configuration, QoRVector)],
    oracle: &dyn QoREvaluator,
    budget: u64,
) -> Result<OnlineOutcome> {
    let offline_hv = archive.hypervolume();
    let sel_cfg = cfg.selector_config();
    let g_cfg = cfg.guidance_config();
    let sampler_cfg = cfg.sampler_config();
    let retrain_cfg = cfg.retrain_config();
    let mut rng = rng_for(cfg.seed, "online");
    let mut retrain_rng = rng_for(cfg.seed, "online-retrain");

    let mut union: Vec<(Configuration, QoRVector)> = labeled.to_vec();
    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut guidance_events = Vec::new();
    let mut termination = None;

    let mut spent = 0u64;
    'run: while spent < budget {
        let started = Instant::now();
        let (target, _expected_hvi) = select_target(archive, &sel_cfg, &mut rng)?;
        let batch = (cfg.online.batch_size as u64).min(budget - spent);
        for _ in 0..batch {
            let iteration = spent + 1;
            let known: HashSet<&Configuration> =
                archive.records().iter().map(|r| &r.config).collect();
            let mut picked: Option<Configuration> = None;
            let mut legalized = false;
            let mut resamples = 0u32;
            let mut mutated_fallback = false;
            let mut guidance_fallbacks = 0u64;
            for attempt in 0..=(cfg.online.resample_limit as u32) {
                let mut sampler = GuidedSampler::new(predictor, target, g_cfg.clone())?;
                let (x0, _stats) =
                    ddim_sample(denoiser, 1, &sampler_cfg, &mut rng, Some(&mut sampler))?;
                guidance_fallbacks += sampler.fallback_count() as u64;
                for (step, e) in sampler.into_events().into_iter().enumerate() {
                    guidance_events.push(GuidanceTraceRow {
                        iteration,
                        attempt,
                        step,
                        t: e.t,
                        loss: e.loss,
                        grad_norm: e.grad_norm,
                        fallback: e.fallback,
                    });
                }
                let decoded = match space.decode_flat(x0.row(0)) {
                    Ok(c) => c,
                    Err(e) => {
                        // A non-finite sample; treat like a collision and
                        // restart from fresh noise.
                        log::warn!("sample decode failed (attempt {attempt}): {e}");
                        resamples += 1;
                        continue;
                    }
                };
                let legal = space.legalize(&decoded);
                if known.contains(&legal) {
                    resamples += 1;
                    continue;
                }
                legalized = legal != decoded;
                picked = Some(legal);
                break;
            }
            let config = match picked {
                Some(c) => c,
                None => {
                    // Every restart collided: perturb the front point
                    // nearest the target until something new appears.
                    mutated_fallback = true;
                    let near = archive
                        .nearest_front(&target)
                        .ok_or_else(|| Error::Degenerate("archive has no front".into()))?
                        .config
                        .clone();
                    let mut rate = cfg.data.mutation_rate.max(0.05);
                    let mut found = None;
                    for _ in 0..64 {
                        let mutant = space.legalize(&space.mutate(&near, rate, &mut rng));
                        if !known.contains(&mutant) {
                            found = Some(mutant);
                            break;
                        }
                        rate = (rate * 1.5).min(1.0);
                    }
                    found.ok_or_else(|| {
                        Error::Degenerate(
                            "mutation fallback could not leave the evaluated set".into(),
                        )
                    })?
                }
            };
            drop(known);
            match oracle.evaluate(&config) {
                Ok(qor) => {
                    spent += 1;
                    archive.insert(config.clone(), qor, iteration)?;
                    union.push((config.clone(), qor));
                    let hv = archive.hypervolume();
                    records.push(RunRecord {
                        iteration,
                        target: target.0,
                        config,
                        legalized,
                        resamples,
                        mutated_fallback,
                        guidance_fallbacks,
                        qor,
                        hypervolume: hv,
                        hvi_offline: hv - offline_hv,
                    });
                    timings.push(started.elapsed().as_secs_f64());
                }
                Err(e @ Error::BudgetExhausted { .. }) | Err(e @ Error::Oracle(_)) => {
                    log::warn!("run ended early at iteration {iteration}: {e}");
                    termination = Some(e.to_string());
                    break 'run;
                }
                Err(e) => return Err(e),
            }
        }
        let inputs: Vec<Vec<f64>> = union
            .iter()
            .map(|(c, _)| space.encode_signed_flat(c))
            .collect();
        let labels: Vec<QoRVector> = union.iter().map(|(_, q)| *q).collect();
        retrain(predictor, &inputs, &labels, &retrain_cfg, &mut retrain_rng)?;
    }
    Ok(OnlineOutcome {
        records,
        timings,
        guidance_events,
        termination,
    })
}

#[derive(Debug)]
pub struct MoboOutcome {
    pub records: Vec<RunRecord>,
    pub timings: Vec<f64>,
    pub traces: Vec<StepTrace>,
    pub termination: Option<String>,
}

/// The paired baseline: same labeled seeds, same frozen bounds and
/// reference, same budget, records in the same schema.
pub fn run_mobo(
    space: &DesignSpace,
    cfg: &ExperimentConfig,
    labeled: &[(Configuration, QoRVector)],
    oracle: &dyn QoREvaluator,
    budget: u64,
) -> Result<MoboOutcome> {
    let archive = seed_archive(labeled)?;
    let offline_hv = archive.hypervolume();
    let mut state = MOBOState::new(space, archive, cfg.mobo_config())?;
    let mut rng = rng_for(cfg.seed, "mobo");
    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut traces = Vec::new();
    let mut termination = None;
    for _ in 0..budget {
        let started = Instant::now();
        match mobo_step(&mut state, oracle, &mut rng) {
            Ok(trace) => {
                records.push(RunRecord {
                    iteration: trace.iteration,
                    target: trace.means,
                    config: trace.config.clone(),
                    legalized: false,
                    resamples: 0,
                    mutated_fallback: false,
                    guidance_fallbacks: 0,
                    qor: trace.qor,
                    hypervolume: trace.hypervolume,
                    hvi_offline: trace.hypervolume - offline_hv,
                });
                timings.push(started.elapsed().as_secs_f64());
                traces.push(trace);
            }
            Err(e @ Error::BudgetExhausted { .. }) | Err(e @ Error::Oracle(_)) => {
                log::warn!("baseline ended early: {e}");
                termination = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MoboOutcome {
        records,
        timings,
        traces,
        termination,
    })
}

pub const RUN_RECORD_COLUMNS: [&str; 12] = [
    "iteration",
    "target_neg_perf",
    "target_power",
    "target_area",
    "legalized",
    "resamples",
    "mutated_fallback",
    "guidance_fallbacks",
    "performance",
    "power_w",
    "area_um2",
    "hypervolume",
];

pub fn write_run_records<W: io::Write>(
    space: &DesignSpace,
    records: &[RunRecord],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec![
        "iteration".into(),
        "target_neg_perf".into(),
        "target_power".into(),
        "target_area".into(),
    ];
    header.extend(space.params().iter().map(|p| p.name.clone()));
    header.extend(
        [
            "legalized",
            "resamples",
            "mutated_fallback",
            "guidance_fallbacks",
            "performance",
            "power_w",
            "area_um2",
            "hypervolume",
            "hvi_offline",
        ]
        .map(String::from),
    );
    w.write_record(&header).map_err(csv_error)?;
    for r in records {
        let mut row = vec![
            r.iteration.to_string(),
            format!("{:?}", r.target[0]),
            format!("{:?}", r.target[1]),
            format!("{:?}", r.target[2]),
        ];
        row.extend(
            space
                .params()
                .iter()
                .zip(r.config.choices())
                .map(|(p, &c)| p.candidates[c].literal()),
        );
        row.push(r.legalized.to_string());
        row.push(r.resamples.to_string());
        row.push(r.mutated_fallback.to_string());
        row.push(r.guidance_fallbacks.to_string());
        row.push(format!("{:?}", r.qor.performance));
        row.push(format!("{:?}", r.qor.power));
        row.push(format!("{:?}", r.qor.area));
        row.push(format!("{:?}", r.hypervolume));
        row.push(format!("{:?}", r.hvi_offline));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a run-record CSV, enforcing the schema invariants: contiguous
/// 1-based iterations and a non-decreasing hypervolume column.
pub fn read_run_records<R: io::Read>(
    space: &DesignSpace,
    reader: R,
) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let n = space.n_params();
    let headers = r.headers().map_err(csv_error)?.clone();
    let expected_len = n + 13;
    if headers.len() != expected_len {
        return Err(Error::Parse {
            location: "run CSV header".into(),
            message: format!("expected {expected_len} columns, got {}", headers.len()),
        });
    }
    let mut records: Vec<RunRecord> = Vec::new();
    for (idx, record) in r.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(csv_error)?;
        if record.len() != expected_len {
            return Err(Error::Parse {
                location: format!("run CSV row {line}"),
                message: format!("expected {expected_len} fields, got {}", record.len()),
            });
        }
        let field = |i: usize| record.get(i).expect("length checked");
        let parse_f64 = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|e| Error::Parse {
                location: format!("run CSV row {line}, column {}", i + 1),
                message: format!("{e}"),
            })
        };
        let parse_u64 = |i: usize| -> Result<u64> {
            field(i).parse().map_err(|e| Error::Parse {
                location: format!("run CSV row {line}, column {}", i + 1),
                message: format!("{e}"),
            })
        };
        let parse_flag = |i: usize| -> Result<bool> {
            match field(i) {
                "false" => Ok(false),
                "true" => Ok(true),
                other => Err(Error::Parse {
                    location: format!("run CSV row {line}, column {}", i + 1),
                    message: format!("expected true/false flag, got '{other}'"),
                }),
            }
        };
        let iteration = parse_u64(0)?;
        if iteration != records.len() as u64 + 1 {
            return Err(Error::Parse {
                location: format!("run CSV row {line}"),
                message: format!(
                    "iteration {iteration} breaks contiguity (expected {})",
                    records.len() + 1
                ),
            });
        }
        let target = [parse_f64(1)?, parse_f64(2)?, parse_f64(3)?];
        let mut choices = Vec::with_capacity(n);
        for slot in 0..n {
            choices.push(space.literal_to_choice(slot, field(4 + slot))?);
        }
        let config = space.config(choices)?;
        let base = 4 + n;
        let legalized = parse_flag(base)?;
        let resamples = parse_u64(base + 1)? as u32;
        let mutated_fallback = parse_flag(base + 2)?;
        let guidance_fallbacks = parse_u64(base + 3)?;
        let qor = QoRVector {
            performance: parse_f64(base + 4)?,
            power: parse_f64(base + 5)?,
            area: parse_f64(base + 6)?,
        };
        let hypervolume = parse_f64(base + 7)?;
        let hvi_offline = parse_f64(base + 8)?;
        if let Some(prev) = records.last() {
            if hypervolume < prev.hypervolume {
                return Err(Error::Parse {
                    location: format!("run CSV row {line}"),
                    message: format!(
                        "hypervolume {hypervolume} decreases from {}",
                        prev.hypervolume
                    ),
                });
            }
        }
        records.push(RunRecord {
            iteration,
            target,
            config,
            legalized,
            resamples,
            mutated_fallback,
            guidance_fallbacks,
            qor,
            hypervolume,
            hvi_offline,
        });
    }
    Ok(records)
}

pub fn write_timings<W: io::Write>(timings: &[f64], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iteration", "seconds"]).map_err(csv_error)?;
    for (i, s) in timings.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{s:.6}")])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_guidance_trace<W: io::Write>(rows: &[GuidanceTraceRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iteration", "attempt", "step", "t", "loss", "grad_norm", "fallback"])
        .map_err(csv_error)?;
    for row in rows {
        w.write_record([
            row.iteration.to_string(),
            row.attempt.to_string(),
            row.step.to_string(),
            row.t.to_string(),
            format!("{:?}", row.loss),
            format!("{:?}", row.grad_norm),
            row.fallback.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<io::BufWriter<fs::File>> {
    Ok(io::BufWriter::new(fs::File::create(path)?))
}

/// Phase 1: draw and persist the offline corpus plus the run manifest.
pub fn phase_prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let space = DesignSpace::builtin();
    let oracle = build_oracle(&space, cfg, 0)?;
    let mut rng = rng_for(cfg.seed, "prepare");
    let data = prepare_data(&space, cfg, oracle.as_ref(), &mut rng)?;

    let dir = cfg.data_dir();
    fs::create_dir_all(&dir)?;
    space.configs_to_csv(create(&dir.join("unlabeled.csv"))?, &data.unlabeled)?;
    space.configs_to_csv(create(&dir.join("augmented.csv"))?, &data.augmented)?;
    save_table(&space, &data.labeled, create(&dir.join("labeled.csv"))?)?;

    let manifest = toml::to_string_pretty(&cfg.stamped())
        .map_err(|e| Error::ExperimentConfig(format!("manifest serialization: {e}")))?;
    fs::write(cfg.manifest_path(), manifest)?;
    Ok(data)
}

pub fn load_prepared(cfg: &ExperimentConfig, space: &DesignSpace) -> Result<PreparedData> {
    let dir = cfg.data_dir();
    let read = |name: &str| -> Result<fs::File> { Ok(fs::File::open(dir.join(name))?) };
    let unlabeled = space.configs_from_csv(io::BufReader::new(read("unlabeled.csv")?))?;
    let augmented = space.configs_from_csv(io::BufReader::new(read("augmented.csv")?))?;
    let labeled = load_table_rows(space, io::BufReader::new(read("labeled.csv")?))?;
    Ok(PreparedData {
        unlabeled,
        labeled,
        augmented,
    })
}

/// Phase 2: train both models, seed the archive, checkpoint everything.
pub fn phase_offline(cfg: &ExperimentConfig) -> Result<OfflineArtifacts> {
    let space = DesignSpace::builtin();
    let data = load_prepared(cfg, &space)?;
    let artifacts = run_offline(&space, cfg, &data)?;

    let dir = cfg.offline_dir();
    fs::create_dir_all(&dir)?;
    artifacts
        .denoiser
        .save_to_path(&dir.join("denoiser.ckpt"), cfg.seed)?;
    artifacts
        .predictor
        .save_to_path(&dir.join("predictor.ckpt"), cfg.seed)?;
    artifacts
        .archive
        .write_csv(&space, create(&dir.join("archive.csv"))?)?;

    let last_loss = artifacts.diffusion_loss.last().map(|&(_, l)| l);
    let metrics = serde_json::json!({
        "diffusion_final_loss": last_loss,
        "predictor_holdout_rmse": artifacts.predictor_rmse,
        "offline_hypervolume": artifacts.archive.hypervolume(),
        "front_size": artifacts.archive.front_indices().len(),
        "labeled": data.labeled.len(),
        "unlabeled": data.unlabeled.len(),
        "augmented": data.augmented.len(),
    });
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)
            .map_err(|e| Error::Checkpoint(format!("metrics serialization: {e}")))?,
    )?;
    Ok(artifacts)
}

/// Phase 3: the guided online loop against a fresh metered oracle.
pub fn phase_online(cfg: &ExperimentConfig) -> Result<OnlineOutcome> {
    let space = DesignSpace::builtin();
    let data = load_prepared(cfg, &space)?;
    let offline_dir = cfg.offline_dir();
    let denoiser = DenoiserModel::load_from_path(&offline_dir.join("denoiser.ckpt"))?;
    let mut predictor = QoRPredictor::load_from_path(&offline_dir.join("predictor.ckpt"))?;
    let mut archive = seed_archive(&data.labeled)?;
    let oracle = build_oracle(&space, cfg, cfg.online.budget)?;

    let outcome = run_online(
        &space,
        cfg,
        &denoiser,
        &mut predictor,
        &mut archive,
        &data.labeled,
        oracle.as_ref(),
        cfg.online.budget,
    )?;

    let dir = cfg.online_dir();
    fs::create_dir_all(&dir)?;
    write_run_records(&space, &outcome.records, create(&dir.join("run.csv"))?)?;
    write_timings(&outcome.timings, create(&dir.join("timing.csv"))?)?;
    write_guidance_trace(
        &outcome.guidance_events,
        create(&dir.join("guidance_events.csv"))?,
    )?;
    archive.write_csv(&space, create(&dir.join("archive.csv"))?)?;
    predictor.save_to_path(&dir.join("predictor_final.ckpt"), cfg.seed)?;
    Ok(outcome)
}

/// Phase 4: the MOBO baseline from the same seeds against its own fresh
/// oracle meter.
pub fn phase_mobo(cfg: &ExperimentConfig) -> Result<MoboOutcome> {
    let space = DesignSpace::builtin();
    let data = load_prepared(cfg, &space)?;
    let oracle = build_oracle(&space, cfg, cfg.online.budget)?;
    let outcome = run_mobo(&space, cfg, &data.labeled, oracle.as_ref(), cfg.online.budget)?;

    let dir = cfg.mobo_dir();
    fs::create_dir_all(&dir)?;
    write_run_records(&space, &outcome.records, create(&dir.join("run.csv"))?)?;
    write_timings(&outcome.timings, create(&dir.join("timing.csv"))?)?;
    write_mobo_trace(&space, &outcome.traces, create(&dir.join("trace.csv"))?)?;
    // Rebuild the final archive for the report: seeds plus every step.
    let mut archive = seed_archive(&data.labeled)?;
    for r in &outcome.records {
        archive.insert(r.config.clone(), r.qor, r.iteration)?;
    }
    archive.write_csv(&space, create(&dir.join("archive.csv"))?)?;
    Ok(outcome)
}
