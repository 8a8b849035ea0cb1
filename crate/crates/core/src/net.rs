//! Minimal differentiable-network substrate: dense and residual layers with
//! exact reverse-mode gradients for both parameters and inputs, an
//! adaptive-moment optimizer, and sinusoidal timestep embeddings.
//!
//! Both the denoiser and the quality predictor are dense residual MLPs built
//! from this menu; at 16×7 bitmap scale there is no useful spatial prior for
//! convolutions to exploit.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed in terms of the activation *output*; all three
    /// activations allow this, which keeps the tape small.
    fn deriv_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        input: usize,
        output: usize,
        activation: Activation,
    },
    /// y = x + W₂·act(W₁x + b₁) + b₂; width-preserving by construction.
    ResidualBlock {
        width: usize,
        hidden: usize,
        activation: Activation,
    },
}

impl Layer {
    fn in_width(&self) -> usize {
        match *self {
            Layer::Dense { input, .. } => input,
            Layer::ResidualBlock { width, .. } => width,
        }
    }

    fn out_width(&self) -> usize {
        match *self {
            Layer::Dense { output, .. } => output,
            Layer::ResidualBlock { width, .. } => width,
        }
    }

    fn param_count(&self) -> usize {
        match *self {
            Layer::Dense { input, output, .. } => output * input + output,
            Layer::ResidualBlock { width, hidden, .. } => 2 * (hidden * width) + hidden + width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_width: usize,
    /// Timestep-embedding width concatenated to the input; 0 disables it.
    pub embed_width: usize,
    pub layers: Vec<Layer>,
}

impl NetSpec {
    /// The stock architecture: entry dense layer, `blocks` residual blocks,
    /// identity-activated exit layer.
    pub fn residual_mlp(
        input_width: usize,
        embed_width: usize,
        hidden: usize,
        blocks: usize,
        output_width: usize,
        activation: Activation,
    ) -> NetSpec {
        let mut layers = vec![Layer::Dense {
            input: input_width + embed_width,
            output: hidden,
            activation,
        }];
        for _ in 0..blocks {
            layers.push(Layer::ResidualBlock {
                width: hidden,
                hidden,
                activation,
            });
        }
        layers.push(Layer::Dense {
            input: hidden,
            output: output_width,
            activation: Activation::Identity,
        });
        NetSpec {
            input_width,
            embed_width,
            layers,
        }
    }

    pub fn total_input_width(&self) -> usize {
        self.input_width + self.embed_width
    }

    pub fn output_width(&self) -> usize {
        self.layers
            .last()
            .map(Layer::out_width)
            .unwrap_or(self.total_input_width())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_width == 0 {
            return Err(Error::InvalidConfig("net input width is zero".into()));
        }
        let mut width = self.total_input_width();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.in_width() != width {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {i} input width {width}"),
                    got: format!("{}", layer.in_width()),
                });
            }
            if let Layer::ResidualBlock { hidden, .. } = layer {
                if *hidden == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "layer {i}: residual block hidden width is zero"
                    )));
                }
            }
            width = layer.out_width();
        }
        Ok(())
    }
}

/// Flat parameter vector. The revision counter ties gradients to the exact
/// parameter values they were computed from.
#[derive(Debug, Clone)]
pub struct NetParams {
    values: Vec<f64>,
    revision: u64,
}

impl NetParams {
    /// Gaussian fan-in initialization for weights, zero biases.
    pub fn init(spec: &NetSpec, rng: &mut impl Rng) -> NetParams {
        let mut values = Vec::with_capacity(spec.param_count());
        for layer in &spec.layers {
            match *layer {
                Layer::Dense { input, output, .. } => {
                    push_weights(&mut values, output, input, rng);
                    values.extend(std::iter::repeat(0.0).take(output));
                }
                Layer::ResidualBlock { width, hidden, .. } => {
                    push_weights(&mut values, hidden, width, rng);
                    values.extend(std::iter::repeat(0.0).take(hidden));
                    push_weights(&mut values, width, hidden, rng);
                    values.extend(std::iter::repeat(0.0).take(width));
                }
            }
        }
        NetParams {
            values,
            revision: 0,
        }
    }

    pub fn from_vec(spec: &NetSpec, values: Vec<f64>) -> Result<NetParams> {
        if values.len() != spec.param_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", spec.param_count()),
                got: format!("{}", values.len()),
            });
        }
        Ok(NetParams {
            values,
            revision: 0,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mutable access for tests and hand-built nets; invalidates live tapes.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.revision += 1;
        &mut self.values
    }
}

fn push_weights(values: &mut Vec<f64>, rows: usize, cols: usize, rng: &mut impl Rng) {
    let std = 1.0 / (cols as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive standard deviation");
    values.extend((0..rows * cols).map(|_| dist.sample(rng)));
}

enum Record {
    Dense {
        x: Tensor2D,
        /// Post-activation output.
        y: Tensor2D,
    },
    Residual {
        x: Tensor2D,
        /// Post-activation hidden state act(W₁x + b₁).
        h: Tensor2D,
    },
}

/// Activation record from one forward pass; consumed by [`backward`].
pub struct Tape {
    revision: u64,
    records: Vec<Record>,
    out_rows: usize,
    out_cols: usize,
}

/// y[b] = W·x[b] + bias for every batch row, then activation.
fn dense_apply(x: &Tensor2D, w: &[f64], bias: &[f64], act: Activation) -> Tensor2D {
    let (out_w, in_w) = (bias.len(), x.cols());
    let mut y = Tensor2D::zeros(x.rows(), out_w);
    for b in 0..x.rows() {
        let xr = x.row(b);
        let yr = y.row_mut(b);
        for j in 0..out_w {
            let wr = &w[j * in_w..(j + 1) * in_w];
            let mut acc = bias[j];
            for i in 0..in_w {
                acc += wr[i] * xr[i];
            }
            yr[j] = act.apply(acc);
        }
    }
    y
}

/// dx[b][i] += Σ_j dp[b][j]·w[j][i]
fn backprop_input(dp: &Tensor2D, w: &[f64], dx: &mut Tensor2D) {
    let in_w = dx.cols();
    for b in 0..dp.rows() {
        let dpr = dp.row(b);
        let dxr = dx.row_mut(b);
        for (j, &d) in dpr.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let wr = &w[j * in_w..(j + 1) * in_w];
            for i in 0..in_w {
                dxr[i] += d * wr[i];
            }
        }
    }
}

/// dw[j][i] += Σ_b dp[b][j]·x[b][i], db[j] += Σ_b dp[b][j]
fn accumulate_param_grads(dw: &mut [f64], db: &mut [f64], dp: &Tensor2D, x: &Tensor2D) {
    let in_w = x.cols();
    for b in 0..dp.rows() {
        let dpr = dp.row(b);
        let xr = x.row(b);
        for (j, &d) in dpr.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            db[j] += d;
            let row = &mut dw[j * in_w..(j + 1) * in_w];
            for i in 0..in_w {
                row[i] += d * xr[i];
            }
        }
    }
}

/// Scale an upstream gradient by the activation derivative, elementwise.
fn through_activation(dy: &Tensor2D, y: &Tensor2D, act: Activation) -> Tensor2D {
    dy.zip(y, |g, out| g * act.deriv_from_output(out))
        .expect("tape shapes are consistent")
}

/// Run the network. `embed` rows must match the batch (or be a single row
/// broadcast to every sample); it is concatenated to the input columns.
pub fn forward(
    spec: &NetSpec,
    params: &NetParams,
    input: &Tensor2D,
    embed: Option<&Tensor2D>,
) -> Result<(Tensor2D, Tape)> {
    if input.cols() != spec.input_width {
        return Err(Error::ShapeMismatch {
            expected: format!("input width {}", spec.input_width),
            got: format!("{}", input.cols()),
        });
    }
    if params.values.len() != spec.param_count() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", spec.param_count()),
            got: format!("{}", params.values.len()),
        });
    }
    let mut x = match (spec.embed_width, embed) {
        (0, None) => input.clone(),
        (0, Some(_)) => {
            return Err(Error::InvalidConfig(
                "net takes no timestep embedding".into(),
            ))
        }
        (w, Some(e)) => {
            if e.cols() != w {
                return Err(Error::ShapeMismatch {
                    expected: format!("embedding width {w}"),
                    got: format!("{}", e.cols()),
                });
            }
            if e.rows() == input.rows() {
                Tensor2D::concat_cols(input, e)?
            } else if e.rows() == 1 {
                let mut tiled = Tensor2D::zeros(input.rows(), w);
                for b in 0..input.rows() {
                    tiled.row_mut(b).copy_from_slice(e.row(0));
                }
                Tensor2D::concat_cols(input, &tiled)?
            } else {
                return Err(Error::ShapeMismatch {
                    expected: format!("embedding rows 1 or {}", input.rows()),
                    got: format!("{}", e.rows()),
                });
            }
        }
        (w, None) => {
            return Err(Error::InvalidConfig(format!(
                "net expects a timestep embedding of width {w}"
            )))
        }
    };

    let mut records = Vec::with_capacity(spec.layers.len());
    let mut cursor = 0usize;
    for layer in &spec.layers {
        let take = layer.param_count();
        let p = &params.values[cursor..cursor + take];
        cursor += take;
        match *layer {
            Layer::Dense {
                input: in_w,
                output: out_w,
                activation,
            } => {
                let (w, b) = p.split_at(out_w * in_w);
                let y = dense_apply(&x, w, b, activation);
                records.push(Record::Dense { x, y: y.clone() });
                x = y;
            }
            Layer::ResidualBlock {
                width,
                hidden,
                activation,
            } => {
                let (w1, rest) = p.split_at(hidden * width);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(width * hidden);
                let h = dense_apply(&x, w1, b1, activation);
                let mut y = dense_apply(&h, w2, b2, Activation::Identity);
                y.axpy(1.0, &x)?;
                records.push(Record::Residual { x, h });
                x = y;
            }
        }
    }

    let tape = Tape {
        revision: params.revision,
        records,
        out_rows: x.rows(),
        out_cols: x.cols(),
    };
    Ok((x, tape))
}

/// Exact reverse-mode sweep. Returns the gradient for every parameter (flat,
/// aligned with [`NetParams::values`]) and for the caller's input tensor
/// (embedding columns, if any, are dropped).
pub fn backward(
    spec: &NetSpec,
    params: &NetParams,
    tape: &Tape,
    output_gradient: &Tensor2D,
) -> Result<(Vec<f64>, Tensor2D)> {
    if tape.revision != params.revision {
        return Err(Error::StaleTape);
    }
    if output_gradient.rows() != tape.out_rows || output_gradient.cols() != tape.out_cols {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", tape.out_rows, tape.out_cols),
            got: format!("{}x{}", output_gradient.rows(), output_gradient.cols()),
        });
    }
    if tape.records.len() != spec.layers.len() {
        return Err(Error::StaleTape);
    }

    let mut grad = vec![0.0; params.values.len()];
    let mut dy = output_gradient.clone();
    let mut cursor = params.values.len();
    for (layer, record) in spec.layers.iter().zip(&tape.records).rev() {
        let take = layer.param_count();
        cursor -= take;
        let p = &params.values[cursor..cursor + take];
        let g = &mut grad[cursor..cursor + take];
        match (layer, record) {
            (
                &Layer::Dense {
                    input: in_w,
                    output: out_w,
                    activation,
                },
                Record::Dense { x, y },
            ) => {
                let dp = through_activation(&dy, y, activation);
                let (w, _) = p.split_at(out_w * in_w);
                let (gw, gb) = g.split_at_mut(out_w * in_w);
                accumulate_param_grads(gw, gb, &dp, x);
                let mut dx = Tensor2D::zeros(x.rows(), in_w);
                backprop_input(&dp, w, &mut dx);
                dy = dx;
            }
            (
                &Layer::ResidualBlock {
                    width,
                    hidden,
                    activation,
                },
                Record::Residual { x, h },
            ) => {
                let (w1, rest) = p.split_at(hidden * width);
                let (_b1, rest) = rest.split_at(hidden);
                let (w2, _b2) = rest.split_at(width * hidden);
                let (g1, grest) = g.split_at_mut(hidden * width);
                let (gb1, grest) = grest.split_at_mut(hidden);
                let (g2, gb2) = grest.split_at_mut(width * hidden);

                // Branch: dy flows into W₂ and, via the activation, into W₁.
                accumulate_param_grads(g2, gb2, &dy, h);
                let mut dh = Tensor2D::zeros(x.rows(), hidden);
                backprop_input(&dy, w2, &mut dh);
                let dp1 = through_activation(&dh, h, activation);
                accumulate_param_grads(g1, gb1, &dp1, x);
                // Skip connection: dx starts as dy itself.
                let mut dx = dy.clone();
                backprop_input(&dp1, w1, &mut dx);
                dy = dx;
            }
            _ => return Err(Error::StaleTape),
        }
    }

    // Drop the embedding columns: callers differentiate w.r.t. their input.
    let dx = if spec.embed_width > 0 {
        dy.take_cols(spec.input_width)
    } else {
        dy
    };
    Ok((grad, dx))
}

/// Mean squared error and its gradient w.r.t. the prediction.
pub fn mse(prediction: &Tensor2D, target: &Tensor2D) -> Result<(f64, Tensor2D)> {
    if !prediction.same_shape(target) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", target.rows(), target.cols()),
            got: format!("{}x{}", prediction.rows(), prediction.cols()),
        });
    }
    let count = (prediction.rows() * prediction.cols()) as f64;
    let diff = prediction.sub(target)?;
    let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / count;
    let grad = diff.scale(2.0 / count);
    Ok((loss, grad))
}

/// Adaptive-moment optimizer state (first/second moments, bias correction).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(param_count: usize, lr: f64) -> OptimizerState {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Non-finite gradient entries are a divergence signal and
    /// leave the parameters untouched.
    pub fn apply(&mut self, params: &mut NetParams, gradient: &[f64]) -> Result<()> {
        if gradient.len() != params.values.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} gradient entries", params.values.len()),
                got: format!("{}", gradient.len()),
            });
        }
        if let Some(_bad) = gradient.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "optimizer gradient".into(),
                step: self.step as usize + 1,
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..gradient.len() {
            let g = gradient[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params.values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        params.revision += 1;
        Ok(())
    }
}

/// Sinusoidal embedding of a timestep: interleaved sin/cos at geometrically
/// spaced frequencies from 1 down to 1/10000.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "timestep embedding width must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let exponent = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = 10_000f64.powf(-exponent);
        let phase = t as f64 * freq;
        out.push(phase.sin());
        out.push(phase.cos());
    }
    Ok(out)
}

/// Per-row embeddings for a batch of timesteps.
pub fn embed_rows(ts: &[usize], dim: usize) -> Result<Tensor2D> {
    let mut out = Tensor2D::zeros(ts.len(), dim);
    for (b, &t) in ts.iter().enumerate() {
        out.row_mut(b).copy_from_slice(&timestep_embedding(t, dim)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn single_dense(input: usize, output: usize, activation: Activation) -> NetSpec {
        NetSpec {
            input_width: input,
            embed_width: 0,
            layers: vec![Layer::Dense {
                input,
                output,
                activation,
            }],
        }
    }

    fn three_layer(activation: Activation) -> NetSpec {
        NetSpec {
            input_width: 4,
            embed_width: 0,
            layers: vec![
                Layer::Dense {
                    input: 4,
                    output: 6,
                    activation,
                },
                Layer::ResidualBlock {
                    width: 6,
                    hidden: 5,
                    activation,
                },
                Layer::Dense {
                    input: 6,
                    output: 3,
                    activation: Activation::Identity,
                },
            ],
        }
    }

    #[test]
    fn identity_dense_layer_passes_input_through() {
        let spec = single_dense(3, 3, Activation::Identity);
        let mut values = vec![0.0; spec.param_count()];
        for i in 0..3 {
            values[i * 3 + i] = 1.0;
        }
        let params = NetParams::from_vec(&spec, values).unwrap();
        let x = Tensor2D::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, -0.5]).unwrap();
        let (y, _) = forward(&spec, &params, &x, None).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weights_yield_bias_rows() {
        let spec = single_dense(4, 2, Activation::Identity);
        let mut values = vec![0.0; spec.param_count()];
        values[8] = 3.5;
        values[9] = -1.25;
        let params = NetParams::from_vec(&spec, values).unwrap();
        let x = Tensor2D::filled(3, 4, 7.0);
        let (y, _) = forward(&spec, &params, &x, None).unwrap();
        for b in 0..3 {
            assert_eq!(y.row(b), &[3.5, -1.25]);
        }
    }

    /// Straight-line re-evaluation of the same affine/activation chain,
    /// written without any of the tape machinery.
    fn replay_forward(spec: &NetSpec, params: &NetParams, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut cursor = 0;
        for layer in &spec.layers {
            let take = layer.param_count();
            let p = &params.values()[cursor..cursor + take];
            cursor += take;
            match *layer {
                Layer::Dense {
                    input,
                    output,
                    activation,
                } => {
                    let mut next = vec![0.0; output];
                    for (j, n) in next.iter_mut().enumerate() {
                        let mut acc = p[output * input + j];
                        for i in 0..input {
                            acc += p[j * input + i] * cur[i];
                        }
                        *n = activation.apply(acc);
                    }
                    cur = next;
                }
                Layer::ResidualBlock {
                    width,
                    hidden,
                    activation,
                } => {
                    let w1 = &p[..hidden * width];
                    let b1 = &p[hidden * width..hidden * width + hidden];
                    let w2 = &p[hidden * width + hidden..hidden * width + hidden + width * hidden];
                    let b2 = &p[hidden * width + hidden + width * hidden..];
                    let mut h = vec![0.0; hidden];
                    for (j, hj) in h.iter_mut().enumerate() {
                        let mut acc = b1[j];
                        for i in 0..width {
                            acc += w1[j * width + i] * cur[i];
                        }
                        *hj = activation.apply(acc);
                    }
                    let mut next = cur.clone();
                    for (j, n) in next.iter_mut().enumerate() {
                        let mut acc = b2[j];
                        for (i, hi) in h.iter().enumerate() {
                            acc += w2[j * hidden + i] * hi;
                        }
                        *n += acc;
                    }
                    cur = next;
                }
            }
        }
        cur
    }

    #[test]
    fn forward_matches_straight_line_replay() {
        let spec = three_layer(Activation::Relu);
        let mut rng = rng_for(101, "net-replay");
        let params = NetParams::init(&spec, &mut rng);
        for _ in 0..20 {
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let xt = Tensor2D::from_vec(1, 4, x.clone()).unwrap();
            let (y, _) = forward(&spec, &params, &xt, None).unwrap();
            let expect = replay_forward(&spec, &params, &x);
            for (a, b) in y.as_slice().iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_net_input_gradient_is_column_sums() {
        let spec = single_dense(3, 2, Activation::Identity);
        let values = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0];
        let params = NetParams::from_vec(&spec, values).unwrap();
        let x = Tensor2D::from_vec(1, 3, vec![0.3, -0.7, 1.1]).unwrap();
        let (_, tape) = forward(&spec, &params, &x, None).unwrap();
        let ones = Tensor2D::filled(1, 2, 1.0);
        let (_, dx) = backward(&spec, &params, &tape, &ones).unwrap();
        // d(sum y)/dx_i = Σ_j W[j][i]
        assert_eq!(dx.as_slice(), &[5.0, 7.0, 9.0]);
    }

    fn scalar_loss(spec: &NetSpec, params: &NetParams, x: &Tensor2D, c: &Tensor2D) -> f64 {
        let (y, _) = forward(spec, params, x, None).unwrap();
        y.as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    }

    fn assert_close_rel(fd: f64, an: f64, tol: f64) {
        let scale = fd.abs().max(an.abs()).max(1e-8);
        assert!(
            (fd - an).abs() <= tol * scale,
            "finite difference {fd} vs analytic {an}"
        );
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        // Smooth activation keeps the FD oracle valid everywhere.
        let spec = three_layer(Activation::Tanh);
        let h = 1e-5;
        for trial in 0..10 {
            let mut rng = rng_for(200 + trial, "net-fd");
            let params = NetParams::init(&spec, &mut rng);
            let x = Tensor2D::from_vec(2, 4, (0..8).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .unwrap();
            let c = Tensor2D::from_vec(2, 3, (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let (_, tape) = forward(&spec, &params, &x, None).unwrap();
            let (gp, gx) = backward(&spec, &params, &tape, &c).unwrap();

            for i in 0..params.len() {
                let mut plus = params.clone();
                plus.values_mut()[i] += h;
                let mut minus = params.clone();
                minus.values_mut()[i] -= h;
                let fd = (scalar_loss(&spec, &plus, &x, &c) - scalar_loss(&spec, &minus, &x, &c))
                    / (2.0 * h);
                assert_close_rel(fd, gp[i], 1e-4);
            }
            for i in 0..8 {
                let mut plus = x.clone();
                plus.as_mut_slice()[i] += h;
                let mut minus = x.clone();
                minus.as_mut_slice()[i] -= h;
                let fd = (scalar_loss(&spec, &params, &plus, &c)
                    - scalar_loss(&spec, &params, &minus, &c))
                    / (2.0 * h);
                assert_close_rel(fd, gx.as_slice()[i], 1e-4);
            }
        }
    }

    #[test]
    fn relu_gradient_masks_inactive_units() {
        let spec = single_dense(2, 2, Activation::Relu);
        // Row 0 active (pre = 1.0), row 1 inactive (pre = -1.0).
        let values = vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0];
        let params = NetParams::from_vec(&spec, values).unwrap();
        let x = Tensor2D::from_vec(1, 2, vec![1.0, 5.0]).unwrap();
        let (y, tape) = forward(&spec, &params, &x, None).unwrap();
        assert_eq!(y.as_slice(), &[1.0, 0.0]);
        let ones = Tensor2D::filled(1, 2, 1.0);
        let (gp, gx) = backward(&spec, &params, &tape, &ones).unwrap();
        // Only the active unit contributes.
        assert_eq!(gx.as_slice(), &[1.0, 0.0]);
        assert_eq!(&gp[..4], &[1.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn mse_matches_elementwise_loop() {
        let (loss, grad) = mse(&Tensor2D::filled(2, 2, 1.5), &Tensor2D::filled(2, 2, 0.5)).unwrap();
        assert_eq!(loss, 1.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.5));

        let t = Tensor2D::filled(2, 3, 0.25);
        let (loss, grad) = mse(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));

        let mut rng = rng_for(77, "mse");
        let p = Tensor2D::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let q = Tensor2D::from_vec(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let (loss, grad) = mse(&p, &q).unwrap();
        let mut expect = 0.0;
        for i in 0..12 {
            let d = p.as_slice()[i] - q.as_slice()[i];
            expect += d * d / 12.0;
            assert!((grad.as_slice()[i] - 2.0 * d / 12.0).abs() < 1e-15);
        }
        assert!((loss - expect).abs() < 1e-15);
    }

    #[test]
    fn optimizer_zero_gradient_is_a_no_op() {
        let spec = single_dense(2, 2, Activation::Identity);
        let mut params = NetParams::init(&spec, &mut rng_for(1, "opt"));
        let before = params.values().to_vec();
        let mut opt = OptimizerState::new(params.len(), 1e-3);
        let zeros = vec![0.0; params.len()];
        opt.apply(&mut params, &zeros).unwrap();
        assert_eq!(params.values(), before.as_slice());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn optimizer_first_step_moves_by_learning_rate() {
        // Bias correction makes m̂=g, v̂=g² on step one, so |Δ| ≈ lr exactly.
        let spec = single_dense(2, 2, Activation::Identity);
        let mut params = NetParams::init(&spec, &mut rng_for(2, "opt"));
        let before = params.values().to_vec();
        let lr = 1e-3;
        let mut opt = OptimizerState::new(params.len(), lr);
        let grad: Vec<f64> = (0..params.len())
            .map(|i| if i % 2 == 0 { 0.5 } else { -2.0 })
            .collect();
        opt.apply(&mut params, &grad).unwrap();
        for (i, (a, b)) in params.values().iter().zip(&before).enumerate() {
            let delta = a - b;
            assert!((delta.abs() - lr).abs() < 1e-9);
            assert_eq!(delta.signum(), -grad[i].signum());
        }
    }

    #[test]
    fn optimizer_rejects_non_finite_gradients() {
        let spec = single_dense(2, 2, Activation::Identity);
        let mut params = NetParams::init(&spec, &mut rng_for(3, "opt"));
        let before = params.values().to_vec();
        let mut opt = OptimizerState::new(params.len(), 1e-3);
        let mut grad = vec![0.1; params.len()];
        grad[3] = f64::NAN;
        let err = opt.apply(&mut params, &grad).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(params.values(), before.as_slice());
    }

    #[test]
    fn training_trajectories_are_bit_identical() {
        let spec = three_layer(Activation::Relu);
        let run = || {
            let mut rng = rng_for(55, "traj");
            let mut params = NetParams::init(&spec, &mut rng);
            let mut opt = OptimizerState::new(params.len(), 1e-3);
            let x = Tensor2D::from_vec(4, 4, (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
            let target = Tensor2D::zeros(4, 3);
            for _ in 0..5 {
                let (y, tape) = forward(&spec, &params, &x, None).unwrap();
                let (_, dy) = mse(&y, &target).unwrap();
                let (gp, _) = backward(&spec, &params, &tape, &dy).unwrap();
                opt.apply(&mut params, &gp).unwrap();
            }
            params.values().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stale_tape_is_rejected() {
        let spec = single_dense(2, 2, Activation::Identity);
        let mut params = NetParams::init(&spec, &mut rng_for(4, "stale"));
        let x = Tensor2D::filled(1, 2, 0.5);
        let (_, tape) = forward(&spec, &params, &x, None).unwrap();
        let mut opt = OptimizerState::new(params.len(), 1e-3);
        let grad = vec![0.1; params.len()];
        opt.apply(&mut params, &grad).unwrap();
        let ones = Tensor2D::filled(1, 2, 1.0);
        assert!(matches!(
            backward(&spec, &params, &tape, &ones),
            Err(Error::StaleTape)
        ));
    }

    #[test]
    fn embedding_is_deterministic_bounded_and_distinct() {
        let a = timestep_embedding(17, 32).unwrap();
        let b = timestep_embedding(17, 32).unwrap();
        assert_eq!(a, b);
        assert!(timestep_embedding(5, 7).is_err());

        let embeds: Vec<Vec<f64>> = (1..=1000)
            .map(|t| timestep_embedding(t, 32).unwrap())
            .collect();
        for e in &embeds {
            assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        for i in 0..embeds.len() {
            for j in i + 1..embeds.len() {
                assert_ne!(embeds[i], embeds[j], "t={} vs t={}", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn broadcast_embedding_matches_tiled_rows() {
        let spec = NetSpec::residual_mlp(3, 4, 8, 1, 2, Activation::Tanh);
        spec.validate().unwrap();
        let mut rng = rng_for(9, "embed-broadcast");
        let params = NetParams::init(&spec, &mut rng);
        let x = Tensor2D::from_vec(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let one = embed_rows(&[42], 4).unwrap();
        let tiled = embed_rows(&[42, 42, 42], 4).unwrap();
        let (ya, _) = forward(&spec, &params, &x, Some(&one)).unwrap();
        let (yb, _) = forward(&spec, &params, &x, Some(&tiled)).unwrap();
        assert_eq!(ya, yb);
    }

    #[test]
    fn spec_validation_catches_width_breaks() {
        let spec = NetSpec {
            input_width: 4,
            embed_width: 0,
            layers: vec![
                Layer::Dense {
                    input: 4,
                    output: 6,
                    activation: Activation::Relu,
                },
                Layer::Dense {
                    input: 5,
                    output: 3,
                    activation: Activation::Identity,
                },
            ],
        };
        assert!(spec.validate().is_err());
        let good = NetSpec::residual_mlp(112, 32, 256, 3, 112, Activation::Relu);
        good.validate().unwrap();
        assert_eq!(good.output_width(), 112);
    }
}
