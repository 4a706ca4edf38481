//! Feedforward value network `J(x, C, t)` with exact input gradients and exact
//! parameter gradients of losses that depend on those input gradients.
//!
//! Hidden layers use softplus, the output layer is affine. The gradient with
//! respect to the input is itself a small backward network; differentiating a
//! loss through it is done by running that backward network in reverse and
//! then backpropagating through the forward pass, which needs the first and
//! second derivatives of softplus (`sigmoid` and `sigmoid (1 - sigmoid)`).

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{ExtendedState, Matrix, ModelSpec};
use crate::policy::ValueGradients;
use crate::rng::{substream, Purpose};

pub const NETWORK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Softplus,
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub state_dim: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    /// `[x..., C, t]`
    pub fn input_dim(&self) -> usize {
        self.state_dim + 2
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim());
        w.extend_from_slice(&self.hidden);
        w.push(1);
        w
    }

    pub fn n_params(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::invalid("architecture.state_dim", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("architecture.hidden", "layer widths must be positive"));
        }
        Ok(())
    }
}

/// Affine input map `(v - shift) * scale` applied before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Whitening {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Whitening {
    /// Per-input mean and inverse standard deviation over every grid point.
    pub fn fit(dataset: &crate::model::Dataset) -> Self {
        let dim = dataset.state_dim + 2;
        let mut sum = vec![0.0; dim];
        let mut sum_sq = vec![0.0; dim];
        let mut count = 0.0;
        for tr in &dataset.trajectories {
            for i in 0..tr.times.len() {
                let input = network_input(&tr.states[i], tr.costs[i], tr.times[i]);
                for (j, v) in input.iter().enumerate() {
                    sum[j] += v;
                    sum_sq[j] += v * v;
                }
                count += 1.0;
            }
        }
        if count == 0.0 {
            return Whitening {
                shift: vec![0.0; dim],
                scale: vec![1.0; dim],
            };
        }
        let shift: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let scale = sum_sq
            .iter()
            .zip(&shift)
            .map(|(s2, mu)| {
                let sd = (s2 / count - mu * mu).max(0.0).sqrt();
                if sd > 1e-8 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Whitening { shift, scale }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// out x in
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNetwork {
    pub format_version: u32,
    pub architecture: Architecture,
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub whitening: Option<Whitening>,
    pub layers: Vec<Layer>,
}

pub fn network_input(x: &[f64], cost: f64, t: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + 2);
    v.extend_from_slice(x);
    v.push(cost);
    v.push(t);
    v
}

/// Activations saved by a forward pass, plus the input-gradient pass when requested.
#[derive(Debug, Clone)]
pub struct Tape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    slope: Vec<Vec<f64>>,
    value: f64,
    /// `dJ/dz_l` per hidden layer (empty unless gradients were taken).
    delta_pre: Vec<Vec<f64>>,
    /// `dJ/d(post_l)` per hidden layer.
    delta_post: Vec<Vec<f64>>,
    /// Gradient with respect to the raw (unwhitened) input.
    grad: Vec<f64>,
}

impl Tape {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn input_gradient(&self) -> &[f64] {
        &self.grad
    }
}

impl ValueNetwork {
    /// Weights `N(0, 1/fan_in)`, zero biases.
    pub fn initialize(architecture: Architecture, seed: u64) -> Result<Self> {
        architecture.validate()?;
        let mut rng = substream(seed, Purpose::Initialization, 0);
        let widths = architecture.widths();
        let layers = widths
            .windows(2)
            .map(|p| {
                let (fan_in, fan_out) = (p[0], p[1]);
                let sd = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * sd
                    })
                    .collect();
                Layer {
                    weights: Matrix::from_vec(fan_out, fan_in, data).expect("shape"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(ValueNetwork {
            format_version: NETWORK_FORMAT_VERSION,
            architecture,
            activation: Activation::Softplus,
            whitening: None,
            layers,
        })
    }

    /// A network whose every parameter is zero.
    pub fn zeros(architecture: Architecture) -> Result<Self> {
        let mut net = ValueNetwork::initialize(architecture, 0)?;
        net.set_params(&vec![0.0; net.n_params()])?;
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture.validate()?;
        if self.format_version != NETWORK_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported network format_version {}",
                self.format_version
            )));
        }
        let widths = self.architecture.widths();
        check_dim("network layers", widths.len() - 1, self.layers.len())?;
        for (l, p) in widths.windows(2).enumerate() {
            let layer = &self.layers[l];
            if layer.weights.rows() != p[1] || layer.weights.cols() != p[0] {
                return Err(Error::Format(format!(
                    "layer {l}: expected {}x{} weights, got {}x{}",
                    p[1],
                    p[0],
                    layer.weights.rows(),
                    layer.weights.cols()
                )));
            }
            check_dim("layer bias", p[1], layer.bias.len())?;
        }
        if let Some(w) = &self.whitening {
            check_dim("whitening shift", self.architecture.input_dim(), w.shift.len())?;
            check_dim("whitening scale", self.architecture.input_dim(), w.scale.len())?;
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.architecture.state_dim
    }

    pub fn n_params(&self) -> usize {
        self.architecture.n_params()
    }

    /// Per layer: weights row-major, then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("parameter vector", self.n_params(), params.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let w = l.weights.as_mut_slice();
            w.copy_from_slice(&params[off..off + w.len()]);
            off += w.len();
            let n = l.bias.len();
            l.bias.copy_from_slice(&params[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Mask selecting weight entries (true) versus biases (false), in `params` order.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(std::iter::repeat_n(true, l.weights.as_slice().len()));
            out.extend(std::iter::repeat_n(false, l.bias.len()));
        }
        out
    }

    fn whiten(&self, input: &[f64]) -> Vec<f64> {
        match &self.whitening {
            None => input.to_vec(),
            Some(w) => input
                .iter()
                .zip(w.shift.iter().zip(&w.scale))
                .map(|(v, (s, k))| (v - s) * k)
                .collect(),
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        check_dim("network input", self.architecture.input_dim(), input.len())
    }

    pub fn eval(&self, x: &[f64], cost: f64, t: f64) -> Result<f64> {
        check_dim("network state", self.state_dim(), x.len())?;
        Ok(self.eval_input(&network_input(x, cost, t)))
    }

    pub fn eval_input(&self, input: &[f64]) -> f64 {
        let mut a = self.whiten(input);
        let n_hidden = self.layers.len() - 1;
        for layer in &self.layers[..n_hidden] {
            a = affine(layer, &a).into_iter().map(softplus).collect();
        }
        affine(&self.layers[n_hidden], &a)[0]
    }

    /// Forward pass retaining what the parameter gradient needs. With
    /// `with_gradient` the input gradient is computed as well.
    pub fn tape(&self, input: &[f64], with_gradient: bool) -> Tape {
        let n_hidden = self.layers.len() - 1;
        let w_in = self.whiten(input);
        let mut pre = Vec::with_capacity(n_hidden);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_hidden);
        let mut slope = Vec::with_capacity(n_hidden);
        for l in 0..n_hidden {
            let z = affine(&self.layers[l], if l == 0 { &w_in } else { &post[l - 1] });
            slope.push(z.iter().map(|&v| sigmoid(v)).collect::<Vec<_>>());
            post.push(z.iter().map(|&v| softplus(v)).collect::<Vec<_>>());
            pre.push(z);
        }
        let last_in: &[f64] = if n_hidden == 0 { &w_in } else { &post[n_hidden - 1] };
        let value = affine(&self.layers[n_hidden], last_in)[0];

        let mut tape = Tape {
            input: w_in,
            pre,
            post,
            slope,
            value,
            delta_pre: Vec::new(),
            delta_post: Vec::new(),
            grad: Vec::new(),
        };
        if with_gradient {
            self.input_backward(&mut tape);
        }
        tape
    }

    fn input_backward(&self, tape: &mut Tape) {
        let n_hidden = self.layers.len() - 1;
        let mut delta_pre = vec![Vec::new(); n_hidden];
        let mut delta_post = vec![Vec::new(); n_hidden];
        let mut da = self.layers[n_hidden].weights.row(0).to_vec();
        for l in (0..n_hidden).rev() {
            let dz: Vec<f64> = da.iter().zip(&tape.slope[l]).map(|(d, s)| d * s).collect();
            let below = self.layers[l].weights.tr_mul_vec(&dz);
            delta_post[l] = std::mem::replace(&mut da, below);
            delta_pre[l] = dz;
        }
        if let Some(w) = &self.whitening {
            for (g, k) in da.iter_mut().zip(&w.scale) {
                *g *= k;
            }
        }
        tape.delta_pre = delta_pre;
        tape.delta_post = delta_post;
        tape.grad = da;
    }

    /// Adds `adj_value * dJ/dθ + adj_grad . d(grad J)/dθ` into `out`, where the
    /// input gradient is taken in raw input coordinates. `adj_grad` requires a
    /// tape recorded with gradients.
    pub fn accumulate_parameter_gradient(
        &self,
        tape: &Tape,
        adj_value: f64,
        adj_grad: Option<&[f64]>,
        out: &mut [f64],
    ) {
        let n_hidden = self.layers.len() - 1;
        let offsets = self.layer_offsets();
        let mut extra_pre: Vec<Vec<f64>> = tape.pre.iter().map(|z| vec![0.0; z.len()]).collect();

        if let Some(adj) = adj_grad {
            assert!(!tape.grad.is_empty(), "tape recorded without input gradient");
            let mut a_adj: Vec<f64> = match &self.whitening {
                None => adj.to_vec(),
                Some(w) => adj.iter().zip(&w.scale).map(|(a, k)| a * k).collect(),
            };
            // reverse of the backward pass, innermost layer first
            for l in 0..n_hidden {
                let layer = &self.layers[l];
                let (rows, cols) = (layer.weights.rows(), layer.weights.cols());
                let dz = &tape.delta_pre[l];
                let w_off = offsets[l];
                for i in 0..rows {
                    let dzi = dz[i];
                    if dzi != 0.0 {
                        let dst = &mut out[w_off + i * cols..w_off + (i + 1) * cols];
                        for (o, a) in dst.iter_mut().zip(&a_adj) {
                            *o += dzi * a;
                        }
                    }
                }
                let dz_adj = layer.weights.mul_vec(&a_adj);
                let da = &tape.delta_post[l];
                let s = &tape.slope[l];
                for i in 0..rows {
                    extra_pre[l][i] += dz_adj[i] * da[i] * s[i] * (1.0 - s[i]);
                }
                a_adj = dz_adj.iter().zip(s).map(|(d, s)| d * s).collect();
            }
            // the backward pass starts from the output weight row
            let w_off = offsets[n_hidden];
            for (o, a) in out[w_off..w_off + a_adj.len()].iter_mut().zip(&a_adj) {
                *o += a;
            }
        }

        // ordinary reverse pass of the forward computation
        let last = &self.layers[n_hidden];
        let last_in: &[f64] = if n_hidden == 0 { &tape.input } else { &tape.post[n_hidden - 1] };
        let w_off = offsets[n_hidden];
        if adj_value != 0.0 {
            for (o, a) in out[w_off..w_off + last_in.len()].iter_mut().zip(last_in) {
                *o += adj_value * a;
            }
        }
        out[w_off + last_in.len()] += adj_value;
        let mut a_adj: Vec<f64> = last.weights.row(0).iter().map(|w| adj_value * w).collect();
        for l in (0..n_hidden).rev() {
            let layer = &self.layers[l];
            let cols = layer.weights.cols();
            let z_adj: Vec<f64> = a_adj
                .iter()
                .zip(&tape.slope[l])
                .zip(&extra_pre[l])
                .map(|((a, s), e)| a * s + e)
                .collect();
            let input: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            let w_off = offsets[l];
            let b_off = w_off + layer.weights.rows() * cols;
            for (i, &zi) in z_adj.iter().enumerate() {
                if zi != 0.0 {
                    let dst = &mut out[w_off + i * cols..w_off + (i + 1) * cols];
                    for (o, v) in dst.iter_mut().zip(input) {
                        *o += zi * v;
                    }
                }
                out[b_off + i] += zi;
            }
            if l > 0 {
                a_adj = layer.weights.tr_mul_vec(&z_adj);
            }
        }
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offs.push(off);
            off += l.weights.as_slice().len() + l.bias.len();
        }
        offs
    }

    /// `J` and its gradient over `[x..., C, t]`.
    pub fn value_and_input_gradient(&self, input: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_input(input)?;
        let tape = self.tape(input, true);
        Ok((tape.value, tape.grad))
    }

    pub fn input_gradients(&self, spec: &ModelSpec, state: &ExtendedState) -> Result<ValueGradients> {
        check_dim("network state", self.state_dim(), state.x.len())?;
        let (value, grad) = self.value_and_input_gradient(&network_input(&state.x, state.cost, state.t))?;
        let n = self.state_dim();
        Ok(ValueGradients::new(spec, &state.x, value, grad[..n].to_vec(), grad[n]))
    }

    /// Gradient with respect to all parameters of a scalar loss of the values
    /// and input gradients at `inputs`. `loss` receives one `(J, dJ/dinput)` per
    /// input and returns the loss together with its partial derivatives with
    /// respect to each `J` and each input-gradient vector.
    pub fn loss_parameter_gradient<F>(&self, inputs: &[Vec<f64>], loss: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnOnce(&[(f64, Vec<f64>)]) -> (f64, Vec<(f64, Vec<f64>)>),
    {
        for input in inputs {
            self.check_input(input)?;
        }
        let tapes: Vec<Tape> = inputs.iter().map(|v| self.tape(v, true)).collect();
        let evals: Vec<(f64, Vec<f64>)> = tapes.iter().map(|t| (t.value, t.grad.clone())).collect();
        let (value, adjoints) = loss(&evals);
        check_dim("loss adjoints", inputs.len(), adjoints.len())?;
        let mut grad = vec![0.0; self.n_params()];
        for (tape, (adj_v, adj_g)) in tapes.iter().zip(&adjoints) {
            check_dim("loss gradient adjoint", self.architecture.input_dim(), adj_g.len())?;
            self.accumulate_parameter_gradient(tape, *adj_v, Some(adj_g), &mut grad);
        }
        Ok((value, grad))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: ValueNetwork = serde_json::from_str(text)?;
        net.validate()?;
        Ok(net)
    }
}

fn affine(layer: &Layer, v: &[f64]) -> Vec<f64> {
    let cols = layer.weights.cols();
    let w = layer.weights.as_slice();
    layer
        .bias
        .iter()
        .enumerate()
        .map(|(i, b)| b + w[i * cols..(i + 1) * cols].iter().zip(v).map(|(a, x)| a * x).sum::<f64>())
        .collect()
}
