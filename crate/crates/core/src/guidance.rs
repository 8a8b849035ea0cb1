//! QoR prediction from encoded configurations and gradient guidance of the
//! sampler: a target objective vector is turned into a per-step correction
//! of the predicted noise so generated samples drift toward the target.

use std::io;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde_json::json;

use crate::checkpoint;
use crate::design_space::csv_error;
use crate::diffusion::{x0_from_eps, DenoiserModel, GuidanceHook};
use crate::error::{Error, Result};
use crate::net::{backward, forward, Activation, NetParams, NetSpec, OptimizerState, Tape};
use crate::pareto::{Bounds, NormalizedObjective, QoRVector};
use crate::tensor::Tensor2D;

/// Regression net from signed encodings to the three normalized objectives,
/// carrying the frozen normalization bounds it was trained under.
#[derive(Debug, Clone)]
pub struct QoRPredictor {
    pub spec: NetSpec,
    pub params: NetParams,
    pub bounds: Bounds,
}

impl QoRPredictor {
    pub fn from_parts(spec: NetSpec, params: NetParams, bounds: Bounds) -> Result<QoRPredictor> {
        spec.validate()?;
        bounds.validate()?;
        if spec.output_width() != 3 {
            return Err(Error::ShapeMismatch {
                expected: "3 outputs".into(),
                got: format!("{}", spec.output_width()),
            });
        }
        if spec.embed_width != 0 {
            return Err(Error::InvalidConfig(
                "the objective predictor takes no timestep embedding".into(),
            ));
        }
        Ok(QoRPredictor {
            spec,
            params,
            bounds,
        })
    }

    pub fn input_width(&self) -> usize {
        self.spec.input_width
    }

    /// Batch prediction in normalized objective space.
    pub fn predict(&self, x: &Tensor2D) -> Result<Tensor2D> {
        Ok(self.forward_tape(x)?.0)
    }

    pub fn forward_tape(&self, x: &Tensor2D) -> Result<(Tensor2D, Tape)> {
        forward(&self.spec, &self.params, x, None)
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<[f64; 3]> {
        let t = Tensor2D::from_vec(1, x.len(), x.to_vec())?;
        let y = self.predict(&t)?;
        Ok([y.get(0, 0), y.get(0, 1), y.get(0, 2)])
    }

    pub fn save_to_path(&self, path: &Path, seed: u64) -> Result<()> {
        checkpoint::save_to_path(
            path,
            "qor-predictor",
            &self.spec,
            &self.params,
            seed,
            json!({ "bounds": self.bounds }),
        )
    }

    pub fn load_from_path(path: &Path) -> Result<QoRPredictor> {
        let (header, params) = checkpoint::load_from_path(path)?;
        if header.kind != "qor-predictor" {
            return Err(Error::Checkpoint(format!(
                "expected a qor-predictor checkpoint, found kind {:?}",
                header.kind
            )));
        }
        let bounds: Bounds = serde_json::from_value(header.meta["bounds"].clone())
            .map_err(|e| Error::Checkpoint(format!("missing or bad bounds: {e}")))?;
        QoRPredictor::from_parts(header.spec, params, bounds)
    }
}

#[derive(Debug, Clone)]
pub struct PredictorTrainConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the data held out for the reported generalization error.
    pub holdout_fraction: f64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            hidden: 96,
            blocks: 1,
            activation: Activation::Relu,
            epochs: 120,
            batch_size: 64,
            learning_rate: 1e-3,
            holdout_fraction: 0.1,
        }
    }
}

fn targets_tensor(labels: &[QoRVector], bounds: &Bounds, idx: &[usize]) -> Tensor2D {
    let mut t = Tensor2D::zeros(idx.len(), 3);
    for (row, &i) in idx.iter().enumerate() {
        t.row_mut(row).copy_from_slice(&bounds.normalize(&labels[i]).0);
    }
    t
}

fn inputs_tensor(inputs: &[Vec<f64>], idx: &[usize]) -> Result<Tensor2D> {
    let width = inputs[idx[0]].len();
    let mut t = Tensor2D::zeros(idx.len(), width);
    for (row, &i) in idx.iter().enumerate() {
        if inputs[i].len() != width {
            return Err(Error::ShapeMismatch {
                expected: format!("input width {width}"),
                got: format!("{}", inputs[i].len()),
            });
        }
        t.row_mut(row).copy_from_slice(&inputs[i]);
    }
    Ok(t)
}

/// Minibatch MSE fitting shared by initial training and retraining.
fn fit(
    spec: &NetSpec,
    params: &mut NetParams,
    inputs: &Tensor2D,
    targets: &Tensor2D,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut ChaCha12Rng,
) -> Result<()> {
    let n = inputs.rows();
    if epochs == 0 || n == 0 {
        return Ok(());
    }
    let batch = batch_size.clamp(1, n);
    let steps = epochs * n.div_ceil(batch);
    let mut opt = OptimizerState::new(params.len(), learning_rate);
    for step in 0..steps {
        let mut x = Tensor2D::zeros(batch, inputs.cols());
        let mut y = Tensor2D::zeros(batch, 3);
        for row in 0..batch {
            let i = rng.gen_range(0..n);
            x.row_mut(row).copy_from_slice(inputs.row(i));
            y.row_mut(row).copy_from_slice(targets.row(i));
        }
        let (pred, tape) = forward(spec, params, &x, None)?;
        let (loss, grad) = crate::net::mse(&pred, &y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: "predictor training loss".into(),
                step: step + 1,
            });
        }
        let (pgrad, _) = backward(spec, params, &tape, &grad)?;
        opt.apply(params, &pgrad)?;
    }
    Ok(())
}

fn rmse(pred: &Tensor2D, targets: &Tensor2D) -> f64 {
    let n = (pred.rows() * pred.cols()) as f64;
    let ss: f64 = pred
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    (ss / n).sqrt()
}

/// Fit a fresh predictor; normalization bounds are derived from the labels
/// and frozen. Returns the predictor and its holdout RMSE in normalized
/// units (training RMSE when the holdout is empty).
pub fn train_predictor(
    inputs: &[Vec<f64>],
    labels: &[QoRVector],
    cfg: &PredictorTrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(QoRPredictor, f64)> {
    let bounds = Bounds::from_qors(labels)?;
    train_predictor_bounded(inputs, labels, bounds, cfg, rng)
}

/// Same, with externally frozen bounds (the archive's).
pub fn train_predictor_bounded(
    inputs: &[Vec<f64>],
    labels: &[QoRVector],
    bounds: Bounds,
    cfg: &PredictorTrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<(QoRPredictor, f64)> {
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", inputs.len()),
            got: format!("{}", labels.len()),
        });
    }
    if inputs.len() < 2 {
        return Err(Error::Degenerate(
            "predictor training needs at least two labeled points".into(),
        ));
    }
    bounds.validate()?;
    let width = inputs[0].len();
    let spec = NetSpec::residual_mlp(width, 0, cfg.hidden, cfg.blocks, 3, cfg.activation);
    let params = NetParams::init(&spec, rng);
    let mut predictor = QoRPredictor::from_parts(spec, params, bounds)?;

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_holdout = ((inputs.len() as f64 * cfg.holdout_fraction) as usize)
        .min(inputs.len().saturating_sub(2));
    let (holdout_idx, train_idx) = order.split_at(n_holdout);

    let train_x = inputs_tensor(inputs, train_idx)?;
    let train_y = targets_tensor(labels, &predictor.bounds, train_idx);
    fit(
        &predictor.spec,
        &mut predictor.params,
        &train_x,
        &train_y,
        cfg.epochs,
        cfg.batch_size,
        cfg.learning_rate,
        rng,
    )?;

    let (eval_idx, eval_x, eval_y) = if holdout_idx.is_empty() {
        (train_idx, train_x, train_y)
    } else {
        let x = inputs_tensor(inputs, holdout_idx)?;
        let y = targets_tensor(labels, &predictor.bounds, holdout_idx);
        (holdout_idx, x, y)
    };
    let _ = eval_idx;
    let pred = predictor.predict(&eval_x)?;
    Ok((predictor, rmse(&pred, &eval_y)))
}

/// Continue optimization on the (caller-assembled) union of old and new
/// labeled data, warm-starting from the current parameters. Bounds stay
/// frozen. Zero epochs short-circuits with the parameters untouched.
/// Returns the RMSE over the provided set after fitting.
pub fn retrain(
    predictor: &mut QoRPredictor,
    inputs: &[Vec<f64>],
    labels: &[QoRVector],
    cfg: &PredictorTrainConfig,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", inputs.len()),
            got: format!("{}", labels.len()),
        });
    }
    let all: Vec<usize> = (0..inputs.len()).collect();
    let x = inputs_tensor(inputs, &all)?;
    let y = targets_tensor(labels, &predictor.bounds, &all);
    if cfg.epochs > 0 {
        fit(
            &predictor.spec,
            &mut predictor.params,
            &x,
            &y,
            cfg.epochs,
            cfg.batch_size,
            cfg.learning_rate,
            rng,
        )?;
    }
    let pred = predictor.predict(&x)?;
    Ok(rmse(&pred, &y))
}

#[derive(Debug, Clone)]
pub struct GuidanceConfig {
    /// Base strength constant; the per-step strength is c·√(1−ᾱ_t).
    pub strength: f64,
    /// Per-objective loss weights.
    pub weights: [f64; 3],
    /// Differentiate through the denoiser's own dependence on x_t (exact
    /// chain). When false, the noise estimate is treated as a constant —
    /// the cheaper first-order approximation kept for ablation.
    pub exact_gradient: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            strength: 1000.0,
            weights: [1.0; 3],
            exact_gradient: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.strength.is_finite() || self.strength < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "guidance strength must be finite and non-negative, got {}",
                self.strength
            )));
        }
        for w in self.weights {
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "loss weights must be positive and finite, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Weighted squared error between a predicted and a target objective vector.
pub fn guidance_loss(yhat: &[f64; 3], ystar: &[f64; 3], weights: &[f64; 3]) -> f64 {
    (0..3)
        .map(|k| weights[k] * (yhat[k] - ystar[k]) * (yhat[k] - ystar[k]))
        .sum()
}

/// Loss of the full composite map x_t → x̂₀ → ŷ → L, summed over batch rows.
/// Forward-only twin of [`guidance_gradient`]; the finite-difference oracle
/// differentiates this.
pub fn composite_loss(
    model: &DenoiserModel,
    predictor: &QoRPredictor,
    x_t: &Tensor2D,
    t: usize,
    target: &[f64; 3],
    weights: &[f64; 3],
) -> Result<f64> {
    let (eps, _) = model.predict_noise(x_t, &[t])?;
    let x0 = x0_from_eps(x_t, t, &eps, &model.schedule)?;
    let yhat = predictor.predict(&x0)?;
    let mut loss = 0.0;
    for row in 0..yhat.rows() {
        let y = yhat.row(row);
        loss += guidance_loss(&[y[0], y[1], y[2]], target, weights);
    }
    Ok(loss)
}

/// ∇_{x_t} of the summed loss, plus the loss value. With g = ∇_{x̂₀}L and
/// J = ∂ε/∂x_t, the exact chain through x̂₀ = (x_t − √(1−ᾱ)ε)/√ᾱ is
/// (g − √(1−ᾱ)·Jᵀg)/√ᾱ; the approximate variant drops the Jᵀg term.
pub fn guidance_gradient(
    model: &DenoiserModel,
    predictor: &QoRPredictor,
    x_t: &Tensor2D,
    t: usize,
    eps: &Tensor2D,
    tape: &Tape,
    target: &[f64; 3],
    cfg: &GuidanceConfig,
) -> Result<(Tensor2D, f64)> {
    let a = model.schedule.alpha(t);
    let x0 = x0_from_eps(x_t, t, eps, &model.schedule)?;
    let (yhat, pred_tape) = predictor.forward_tape(&x0)?;

    let mut loss = 0.0;
    let mut out_grad = Tensor2D::zeros(yhat.rows(), 3);
    for row in 0..yhat.rows() {
        let y = yhat.row(row);
        let y3 = [y[0], y[1], y[2]];
        loss += guidance_loss(&y3, target, &cfg.weights);
        for k in 0..3 {
            out_grad.set(row, k, 2.0 * cfg.weights[k] * (y3[k] - target[k]));
        }
    }

    let (_, g) = backward(&predictor.spec, &predictor.params, &pred_tape, &out_grad)?;
    let s1 = a.sqrt();
    let s2 = (1.0 - a).sqrt();
    let grad = if cfg.exact_gradient {
        let (_, jt_g) = backward(&model.spec, &model.params, tape, &g)?;
        g.zip(&jt_g, |gv, jv| (gv - s2 * jv) / s1)?
    } else {
        g.scale(1.0 / s1)
    };
    Ok((grad, loss))
}

/// One row of the guidance event log.
#[derive(Debug, Clone)]
pub struct GuidanceEvent {
    /// 1-based refinement call index within the sampling run.
    pub step: usize,
    /// Schedule timestep the call happened at.
    pub t: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// True when a non-finite gradient forced the unguided fallback.
    pub fallback: bool,
}

pub fn write_guidance_events<W: io::Write>(events: &[GuidanceEvent], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "t", "loss", "grad_norm", "fallback"])
        .map_err(csv_error)?;
    for e in events {
        w.write_record(&[
            e.step.to_string(),
            e.t.to_string(),
            format!("{:?}", e.loss),
            format!("{:?}", e.grad_norm),
            e.fallback.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Sampler hook steering generation toward a target objective vector.
///
/// The refined estimate is ε + s(t)·∇_{x_t}L: since x̂₀ is an affine map of
/// x_t with a *negative* coefficient on the noise estimate, adding the loss
/// gradient to ε moves the predicted clean sample down the loss surface.
pub struct GuidedSampler<'a> {
    predictor: &'a QoRPredictor,
    target: [f64; 3],
    cfg: GuidanceConfig,
    events: Vec<GuidanceEvent>,
}

impl<'a> GuidedSampler<'a> {
    pub fn new(
        predictor: &'a QoRPredictor,
        target: NormalizedObjective,
        cfg: GuidanceConfig,
    ) -> Result<GuidedSampler<'a>> {
        cfg.validate()?;
        if target.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "target objective must be finite, got {:?}",
                target.0
            )));
        }
        Ok(GuidedSampler {
            predictor,
            target: target.0,
            cfg,
            events: Vec::new(),
        })
    }

    pub fn events(&self) -> &[GuidanceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<GuidanceEvent> {
        self.events
    }

    pub fn fallback_count(&self) -> usize {
        self.events.iter().filter(|e| e.fallback).count()
    }
}

impl GuidanceHook for GuidedSampler<'_> {
    fn refine(
        &mut self,
        model: &DenoiserModel,
        x_t: &Tensor2D,
        t: usize,
        eps: &Tensor2D,
        tape: &Tape,
    ) -> Result<Tensor2D> {
        let step = self.events.len() + 1;
        let (grad, loss) = guidance_gradient(
            model,
            self.predictor,
            x_t,
            t,
            eps,
            tape,
            &self.target,
            &self.cfg,
        )?;
        if !grad.is_finite() {
            self.events.push(GuidanceEvent {
                step,
                t,
                loss,
                grad_norm: f64::NAN,
                fallback: true,
            });
            return Ok(eps.clone());
        }
        let s_t = self.cfg.strength * (1.0 - model.schedule.alpha(t)).sqrt();
        self.events.push(GuidanceEvent {
            step,
            t,
            loss,
            grad_norm: grad.frobenius_norm(),
            fallback: false,
        });
        let mut refined = eps.clone();
        refined.axpy(s_t, &grad)?;
        Ok(refined)
    }
}
