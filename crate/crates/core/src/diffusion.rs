//! Denoising diffusion over signed configuration tensors: cumulative noise
//! schedule, forward perturbation, noise-prediction training, and the
//! deterministic DDIM reverse sampler with an optional guidance hook.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::net::{
    self, embed_rows, forward, mse, Activation, NetParams, NetSpec, OptimizerState, Tape,
};
use crate::tensor::Tensor2D;

/// Smallest cumulative coefficient the sampler will divide by.
pub const ALPHA_FLOOR: f64 = 1e-8;

/// Cumulative noise schedule: alpha[t-1] = Π_{s≤t} (1 − β_s), strictly
/// decreasing from just under 1 towards 0.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    beta_min: f64,
    beta_max: f64,
}

impl NoiseSchedule {
    /// Linear per-step variance ramp 1e-4 → 2e-2, the usual discrete-time
    /// default.
    pub fn new(t_total: usize) -> Result<NoiseSchedule> {
        NoiseSchedule::with_beta_range(t_total, 1e-4, 2e-2)
    }

    pub fn with_beta_range(t_total: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
        if t_total < 1 {
            return Err(Error::InvalidConfig(
                "schedule needs at least one timestep".into(),
            ));
        }
        if !(0.0..1.0).contains(&beta_min) || !(0.0..1.0).contains(&beta_max) || beta_max < beta_min
        {
            return Err(Error::InvalidConfig(format!(
                "invalid variance ramp [{beta_min}, {beta_max}]"
            )));
        }
        let mut alpha = Vec::with_capacity(t_total);
        let mut running = 1.0;
        for t in 0..t_total {
            let frac = if t_total > 1 {
                t as f64 / (t_total - 1) as f64
            } else {
                0.0
            };
            let beta = beta_min + (beta_max - beta_min) * frac;
            running *= 1.0 - beta;
            alpha.push(running);
        }
        Ok(NoiseSchedule {
            alpha,
            beta_min,
            beta_max,
        })
    }

    /// The variance ramp this schedule was built from, for exact rebuilds.
    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_min, self.beta_max)
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Cumulative coefficient for 1-based timestep t.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.alpha.len() {
            return Err(Error::InvalidConfig(format!(
                "timestep {t} outside 1..={}",
                self.alpha.len()
            )));
        }
        Ok(())
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }
}

/// x_t = √α_t·x₀ + √(1−α_t)·ε
pub fn forward_noise(
    x0: &Tensor2D,
    t: usize,
    eps: &Tensor2D,
    schedule: &NoiseSchedule,
) -> Result<Tensor2D> {
    schedule.check_timestep(t)?;
    let a = schedule.alpha(t);
    x0.zip(eps, |x, e| a.sqrt() * x + (1.0 - a).sqrt() * e)
}

/// Invert the perturbation given a noise estimate:
/// x̂₀ = (x_t − √(1−α_t)·ε) / √α_t
pub fn x0_from_eps(
    x_t: &Tensor2D,
    t: usize,
    eps: &Tensor2D,
    schedule: &NoiseSchedule,
) -> Result<Tensor2D> {
    schedule.check_timestep(t)?;
    let a = schedule.alpha(t);
    if a < ALPHA_FLOOR {
        return Err(Error::Degenerate(format!(
            "cumulative coefficient {a} at t={t} is below {ALPHA_FLOOR}"
        )));
    }
    x_t.zip(eps, |x, e| (x - (1.0 - a).sqrt() * e) / a.sqrt())
}

/// The noise-prediction network plus its schedule.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub spec: NetSpec,
    pub params: NetParams,
    pub schedule: NoiseSchedule,
}

impl DenoiserModel {
    /// Residual MLP with sinusoidal timestep conditioning; input and output
    /// width are both the flattened bitmap width.
    pub fn new(
        width: usize,
        embed_width: usize,
        hidden: usize,
        blocks: usize,
        activation: Activation,
        schedule: NoiseSchedule,
        rng: &mut impl Rng,
    ) -> Result<DenoiserModel> {
        if embed_width == 0 || embed_width % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "timestep embedding width must be even and positive, got {embed_width}"
            )));
        }
        let spec = NetSpec::residual_mlp(width, embed_width, hidden, blocks, width, activation);
        spec.validate()?;
        let params = NetParams::init(&spec, rng);
        Ok(DenoiserModel {
            spec,
            params,
            schedule,
        })
    }

    pub fn from_parts(spec: NetSpec, params: NetParams, schedule: NoiseSchedule) -> Result<Self> {
        spec.validate()?;
        if spec.input_width != spec.output_width() {
            return Err(Error::ShapeMismatch {
                expected: format!("output width {}", spec.input_width),
                got: format!("{}", spec.output_width()),
            });
        }
        Ok(DenoiserModel {
            spec,
            params,
            schedule,
        })
    }

    pub fn width(&self) -> usize {
        self.spec.input_width
    }

    /// Predict the injected noise for a batch; `ts` is per-row (or a single
    /// broadcast timestep). The tape allows guidance to differentiate
    /// through this prediction.
    pub fn predict_noise(&self, x: &Tensor2D, ts: &[usize]) -> Result<(Tensor2D, Tape)> {
        for &t in ts {
            self.schedule.check_timestep(t)?;
        }
        let embed = embed_rows(ts, self.spec.embed_width)?;
        forward(&self.spec, &self.params, x, Some(&embed))
    }

    /// One-shot clean-data estimate at timestep t.
    pub fn predict_x0(&self, x_t: &Tensor2D, t: usize) -> Result<Tensor2D> {
        let (eps, _) = self.predict_noise(x_t, &[t])?;
        x0_from_eps(x_t, t, &eps, &self.schedule)
    }

    /// Checkpoint with the schedule's construction parameters in the meta
    /// block, so reload rebuilds bit-identical alphas.
    pub fn save_to_path(&self, path: &std::path::Path, seed: u64) -> Result<()> {
        let (beta_min, beta_max) = self.schedule.beta_range();
        crate::checkpoint::save_to_path(
            path,
            "denoiser",
            &self.spec,
            &self.params,
            seed,
            serde_json::json!({
                "t_total": self.schedule.len(),
                "beta_min": beta_min,
                "beta_max": beta_max,
            }),
        )
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<DenoiserModel> {
        let (header, params) = crate::checkpoint::load_from_path(path)?;
        if header.kind != "denoiser" {
            return Err(Error::Checkpoint(format!(
                "expected a denoiser checkpoint, found kind '{}'",
                header.kind
            )));
        }
        let meta = &header.meta;
        let t_total = meta
            .get("t_total")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("denoiser meta lacks t_total".into()))?;
        let beta = |key: &str| {
            meta.get(key)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::Checkpoint(format!("denoiser meta lacks {key}")))
        };
        let schedule =
            NoiseSchedule::with_beta_range(t_total as usize, beta("beta_min")?, beta("beta_max")?)?;
        DenoiserModel::from_parts(header.spec, params, schedule)
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            learning_rate: 1e-3,
        }
    }
}

/// Noise-prediction training: per step draw a minibatch, per-sample uniform
/// timesteps and Gaussian noise, minimize MSE(ε_θ(x_t, t), ε). Returns the
/// per-step loss history.
pub fn train(
    model: &mut DenoiserModel,
    dataset: &[Vec<f64>],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, f64)>> {
    if dataset.is_empty() {
        return Err(Error::Degenerate("diffusion dataset is empty".into()));
    }
    let width = model.width();
    for (i, row) in dataset.iter().enumerate() {
        if row.len() != width {
            return Err(Error::ShapeMismatch {
                expected: format!("dataset row width {width}"),
                got: format!("{} (row {i})", row.len()),
            });
        }
    }
    let t_total = model.schedule.len();
    let batch = cfg.batch_size.max(1).min(dataset.len());
    let steps_per_epoch = dataset.len().div_ceil(batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = OptimizerState::new(model.params.len(), cfg.learning_rate);
    let mut history = Vec::with_capacity(total_steps);

    for step in 1..=total_steps {
        let mut x0 = Tensor2D::zeros(batch, width);
        for b in 0..batch {
            let idx = rng.gen_range(0..dataset.len());
            x0.row_mut(b).copy_from_slice(&dataset[idx]);
        }
        let ts: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=t_total)).collect();
        let mut eps = Tensor2D::zeros(batch, width);
        for v in eps.as_mut_slice() {
            *v = StandardNormal.sample(rng);
        }
        let mut x_t = Tensor2D::zeros(batch, width);
        for b in 0..batch {
            let a = model.schedule.alpha(ts[b]);
            let (xr, x0r, er) = (x_t.row_mut(b), x0.row(b), eps.row(b));
            for i in 0..width {
                xr[i] = a.sqrt() * x0r[i] + (1.0 - a).sqrt() * er[i];
            }
        }

        let embed = embed_rows(&ts, model.spec.embed_width)?;
        let (pred, tape) = forward(&model.spec, &model.params, &x_t, Some(&embed))?;
        let (loss, dloss) = mse(&pred, &eps)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "diffusion training loss".into(),
                step,
            });
        }
        let (grad, _) = net::backward(&model.spec, &model.params, &tape, &dloss)?;
        opt.apply(&mut model.params, &grad).map_err(|e| match e {
            Error::NonFinite { context: _, step: _ } => Error::NonFinite {
                context: "diffusion gradient".into(),
                step,
            },
            other => other,
        })?;
        history.push((step, loss));
    }
    Ok(history)
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Number of reverse steps S; the sampler visits an evenly strided
    /// subsequence of {1..T} ending exactly at T.
    pub steps: usize,
    /// Clamp each intermediate x̂₀ to [−1, 1] (the data range).
    pub clamp_x0: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 50,
            clamp_x0: true,
        }
    }
}

/// τ_k = ⌊k·T/S⌋ for k = 1..S: strictly increasing, ends at T.
pub fn stride_subsequence(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 || steps > t_total {
        return Err(Error::InvalidConfig(format!(
            "sampler steps {steps} must be in 1..={t_total}"
        )));
    }
    Ok((1..=steps).map(|k| k * t_total / steps).collect())
}

/// Counts of work done by one sampler invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub model_evals: usize,
    pub guidance_evals: usize,
}

/// Replaces the raw noise prediction with a refined one, given everything
/// needed to differentiate through the denoiser.
pub trait GuidanceHook {
    fn refine(
        &mut self,
        model: &DenoiserModel,
        x_t: &Tensor2D,
        t: usize,
        eps: &Tensor2D,
        tape: &Tape,
    ) -> Result<Tensor2D>;
}

/// Core DDIM recursion, generic over the noise estimate so tests can drive
/// it with closed-form oracles. `eps_fn(x, t)` must return the (possibly
/// refined) noise estimate for the whole batch.
pub fn ddim_loop(
    schedule: &NoiseSchedule,
    taus: &[usize],
    clamp_x0: bool,
    x_init: Tensor2D,
    mut eps_fn: impl FnMut(&Tensor2D, usize) -> Result<Tensor2D>,
) -> Result<Tensor2D> {
    if taus.is_empty() {
        return Err(Error::InvalidConfig("empty sampler subsequence".into()));
    }
    for pair in taus.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::InvalidConfig(
                "sampler subsequence must be strictly increasing".into(),
            ));
        }
    }
    if *taus.last().unwrap() != schedule.len() {
        return Err(Error::InvalidConfig(
            "sampler subsequence must end at T".into(),
        ));
    }
    for &t in taus {
        schedule.check_timestep(t)?;
        if schedule.alpha(t) < ALPHA_FLOOR {
            return Err(Error::Degenerate(format!(
                "subsequence visits t={t} where the schedule has vanished"
            )));
        }
    }

    let mut x = x_init;
    for (k, idx) in (0..taus.len()).rev().enumerate() {
        let t = taus[idx];
        let eps = eps_fn(&x, t)?;
        let mut x0_hat = x0_from_eps(&x, t, &eps, schedule)?;
        if clamp_x0 {
            x0_hat = x0_hat.clamp(-1.0, 1.0);
        }
        if !x0_hat.is_finite() {
            return Err(Error::NonFinite {
                context: "sampler state".into(),
                step: k + 1,
            });
        }
        if idx == 0 {
            return Ok(x0_hat);
        }
        // Deterministic DDIM move (η = 0): re-noise x̂₀ to the next level.
        let a_prev = schedule.alpha(taus[idx - 1]);
        x = x0_hat.zip(&eps, |x0, e| a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * e)?;
    }
    unreachable!("loop returns at idx == 0");
}

/// Draw `n_samples` configurations worth of signed tensors. Each batch row
/// starts from an independent Gaussian and is denoised along the strided
/// subsequence; the final x̂₀ batch is returned.
pub fn ddim_sample(
    model: &DenoiserModel,
    n_samples: usize,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
    mut guidance: Option<&mut dyn GuidanceHook>,
) -> Result<(Tensor2D, SampleStats)> {
    let taus = stride_subsequence(model.schedule.len(), cfg.steps)?;
    let mut x = Tensor2D::zeros(n_samples, model.width());
    for v in x.as_mut_slice() {
        *v = StandardNormal.sample(rng);
    }
    let mut stats = SampleStats::default();
    let out = ddim_loop(&model.schedule, &taus, cfg.clamp_x0, x, |x_t, t| {
        let (eps, tape) = model.predict_noise(x_t, &[t])?;
        stats.model_evals += 1;
        match guidance.as_deref_mut() {
            Some(hook) => {
                stats.guidance_evals += 1;
                hook.refine(model, x_t, t, &eps, &tape)
            }
            None => Ok(eps),
        }
    })?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design_space::DesignSpace;
    use crate::rng::rng_for;

    #[test]
    fn schedule_is_decreasing_with_expected_endpoints() {
        let s = NoiseSchedule::new(1000).unwrap();
        assert_eq!(s.len(), 1000);
        assert!((s.alpha(1) - 0.9999).abs() < 1e-12);
        assert!(s.alpha(1000) < 1e-3);
        assert!(s.alpha(1000) > 1e-6);
        for t in 1..1000 {
            assert!(s.alpha(t) > s.alpha(t + 1));
            assert!(s.alpha(t) > 0.0 && s.alpha(t) <= 1.0);
        }
    }

    #[test]
    fn schedule_matches_independent_product() {
        let s = NoiseSchedule::new(250).unwrap();
        // Recompute each cumulative coefficient from scratch, most noisy
        // step first, to catch accumulation-order mistakes.
        for t in [1usize, 2, 100, 250] {
            let mut product = 1.0;
            for step in (0..t).rev() {
                let beta = 1e-4 + (2e-2 - 1e-4) * step as f64 / 249.0;
                product *= 1.0 - beta;
            }
            assert!((s.alpha(t) - product).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_schedule_is_degenerate_but_valid() {
        let s = NoiseSchedule::new(1).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s.alpha(1) > 0.0 && s.alpha(1) < 1.0);
        assert!((s.alpha(1) - (1.0 - 1e-4)).abs() < 1e-15);
        assert!(NoiseSchedule::new(0).is_err());
    }

    #[test]
    fn forward_noise_is_the_stated_affine_map() {
        let s = NoiseSchedule::new(100).unwrap();
        let mut rng = rng_for(1, "fwd-noise");
        let x0 = Tensor2D::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let eps = Tensor2D::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let t = 57;
        let xt = forward_noise(&x0, t, &eps, &s).unwrap();
        let a = s.alpha(t);
        for i in 0..6 {
            let expect = a.sqrt() * x0.as_slice()[i] + (1.0 - a).sqrt() * eps.as_slice()[i];
            assert!((xt.as_slice()[i] - expect).abs() < 1e-15);
        }
        assert!(forward_noise(&x0, 0, &eps, &s).is_err());
        assert!(forward_noise(&x0, 101, &eps, &s).is_err());
    }

    #[test]
    fn perturbation_inverts_exactly() {
        let s = NoiseSchedule::new(1000).unwrap();
        let mut rng = rng_for(2, "invert");
        for &t in &[1usize, 250, 999, 1000] {
            let x0 = Tensor2D::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let eps = Tensor2D::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .unwrap();
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            // Feeding the true noise into the inversion recovers x₀ ...
            let x0_back = x0_from_eps(&xt, t, &eps, &s).unwrap();
            for (a, b) in x0_back.as_slice().iter().zip(x0.as_slice()) {
                assert!((a - b).abs() < 1e-9);
            }
            // ... and the noise itself is recoverable from (x_t, x₀).
            let a = s.alpha(t);
            for i in 0..12 {
                let eps_back =
                    (xt.as_slice()[i] - a.sqrt() * x0.as_slice()[i]) / (1.0 - a).sqrt();
                assert!((eps_back - eps.as_slice()[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_noise_estimate_rescales_x_t() {
        let s = NoiseSchedule::new(500).unwrap();
        let xt = Tensor2D::filled(1, 4, 0.8);
        let zero = Tensor2D::zeros(1, 4);
        let x0 = x0_from_eps(&xt, 123, &zero, &s).unwrap();
        let a = s.alpha(123);
        for &v in x0.as_slice() {
            assert!((v - 0.8 / a.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn model_predict_x0_matches_hand_computation() {
        let schedule = NoiseSchedule::new(200).unwrap();
        let mut rng = rng_for(3, "predict-x0");
        let model =
            DenoiserModel::new(6, 4, 8, 1, Activation::Tanh, schedule, &mut rng).unwrap();
        let xt = Tensor2D::from_vec(2, 6, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let t = 77;
        let (eps, _) = model.predict_noise(&xt, &[t]).unwrap();
        let got = model.predict_x0(&xt, t).unwrap();
        let a = model.schedule.alpha(t);
        for i in 0..12 {
            let expect = (xt.as_slice()[i] - (1.0 - a).sqrt() * eps.as_slice()[i]) / a.sqrt();
            assert!((got.as_slice()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn training_on_one_datum_halves_the_running_loss() {
        let space = DesignSpace::builtin();
        let schedule = NoiseSchedule::new(1000).unwrap();
        let mut rng = rng_for(4, "train-one");
        let mut model = DenoiserModel::new(
            space.flat_width(),
            16,
            96,
            1,
            Activation::Relu,
            schedule,
            &mut rng,
        )
        .unwrap();
        let datum = space.encode_signed_flat(&space.random_config(&mut rng));
        let cfg = TrainConfig {
            epochs: 2000,
            batch_size: 64,
            learning_rate: 2e-3,
        };
        let history = train(&mut model, &[datum], &cfg, &mut rng).unwrap();
        assert_eq!(history.len(), 2000);
        let head: f64 = history[..50].iter().map(|(_, l)| l).sum::<f64>() / 50.0;
        let tail: f64 = history[history.len() - 50..]
            .iter()
            .map(|(_, l)| l)
            .sum::<f64>()
            / 50.0;
        assert!(
            tail < 0.5 * head,
            "running loss did not halve: {head} -> {tail}"
        );
    }

    #[test]
    fn training_history_is_deterministic() {
        let schedule = NoiseSchedule::new(50).unwrap();
        let run = || {
            let mut rng = rng_for(5, "train-det");
            let mut model =
                DenoiserModel::new(8, 8, 16, 1, Activation::Relu, schedule.clone(), &mut rng)
                    .unwrap();
            let data = vec![vec![1.0; 8], vec![-1.0; 8]];
            let cfg = TrainConfig {
                epochs: 30,
                batch_size: 2,
                learning_rate: 1e-3,
            };
            train(&mut model, &data, &cfg, &mut rng).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), b.len());
        for ((sa, la), (sb, lb)) in a.iter().zip(&b) {
            assert_eq!(sa, sb);
            assert_eq!(la.to_bits(), lb.to_bits());
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let schedule = NoiseSchedule::new(10).unwrap();
        let mut rng = rng_for(6, "train-empty");
        let mut model =
            DenoiserModel::new(4, 4, 8, 1, Activation::Relu, schedule, &mut rng).unwrap();
        assert!(matches!(
            train(&mut model, &[], &TrainConfig::default(), &mut rng),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn stride_subsequence_is_even_and_ends_at_t() {
        let taus = stride_subsequence(1000, 50).unwrap();
        assert_eq!(taus.len(), 50);
        assert_eq!(taus[0], 20);
        assert_eq!(taus[1], 40);
        assert_eq!(*taus.last().unwrap(), 1000);
        for pair in taus.windows(2) {
            assert_eq!(pair[1] - pair[0], 20);
        }
        assert!(stride_subsequence(10, 11).is_err());
        assert!(stride_subsequence(10, 0).is_err());
    }

    /// With an oracle noise estimate consistent with a fixed clean point c,
    /// every step's x̂₀ is exactly c, so any Gaussian start contracts to c.
    #[test]
    fn oracle_sampler_contracts_to_the_clean_point() {
        let space = DesignSpace::builtin();
        let schedule = NoiseSchedule::new(1000).unwrap();
        let mut rng = rng_for(7, "oracle-sampler");
        let c = space.random_config(&mut rng);
        let target = space.encode_signed_flat(&c);
        let taus = stride_subsequence(1000, 50).unwrap();
        for trial in 0..5 {
            let mut start = Tensor2D::zeros(1, space.flat_width());
            for v in start.as_mut_slice() {
                *v = StandardNormal.sample(&mut rng);
            }
            let out = ddim_loop(&schedule, &taus, true, start, |x, t| {
                let a = schedule.alpha(t);
                let eps = Tensor2D::from_vec(
                    1,
                    space.flat_width(),
                    x.as_slice()
                        .iter()
                        .zip(&target)
                        .map(|(&xv, &cv)| (xv - a.sqrt() * cv) / (1.0 - a).sqrt())
                        .collect(),
                )
                .unwrap();
                Ok(eps)
            })
            .unwrap();
            let decoded = space.decode_flat(out.row(0)).unwrap();
            assert_eq!(decoded, c, "trial {trial}");
        }
    }

    #[test]
    fn sampler_runs_exactly_s_evaluations() {
        let schedule = NoiseSchedule::new(1000).unwrap();
        let taus = stride_subsequence(1000, 50).unwrap();
        let mut evals = 0usize;
        let mut visited = Vec::new();
        let start = Tensor2D::filled(1, 4, 0.1);
        ddim_loop(&schedule, &taus, true, start, |x, t| {
            evals += 1;
            visited.push(t);
            Ok(Tensor2D::zeros(x.rows(), x.cols()))
        })
        .unwrap();
        assert_eq!(evals, 50);
        assert_eq!(visited[0], 1000);
        assert_eq!(*visited.last().unwrap(), 20);
    }

    #[test]
    fn model_sampler_is_deterministic_and_counts_work() {
        let schedule = NoiseSchedule::new(200).unwrap();
        let mut rng = rng_for(8, "sampler-det");
        let model =
            DenoiserModel::new(6, 4, 8, 1, Activation::Relu, schedule, &mut rng).unwrap();
        let cfg = SamplerConfig {
            steps: 25,
            clamp_x0: true,
        };
        let (a, stats) =
            ddim_sample(&model, 3, &cfg, &mut rng_for(9, "draw"), None).unwrap();
        let (b, _) = ddim_sample(&model, 3, &cfg, &mut rng_for(9, "draw"), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(stats.model_evals, 25);
        assert_eq!(stats.guidance_evals, 0);
        // Untrained net, but the clamp still pins the output range.
        assert!(a.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a.rows(), 3);
        assert_eq!(a.cols(), 6);
    }
}
