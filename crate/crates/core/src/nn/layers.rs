use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

fn glorot(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data)
}

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, vec![input, output], input, output));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![output]));
        Self { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.matmul(x, w);
        tape.add_row_bias(y, b)
    }
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kk = kernel * kernel;
        let w = store.add(
            format!("{name}.w"),
            glorot(
                rng,
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kk,
                out_channels * kk,
            ),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![out_channels]));
        Self {
            w,
            b,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_size(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let y = tape.conv2d(x, w, self.stride, self.pad);
        tape.channel_add(y, b)
    }
}

/// Batch normalization over `[B, C, ..]` with running statistics for inference.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(vec![channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        Self {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward_train(&mut self, tape: &mut Tape, x: Var) -> Var {
        let (xhat, stats) = tape.batch_normalize(x, self.eps);
        let shape = tape.shape(x);
        let n = (shape[0] * shape[2..].iter().product::<usize>()) as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.running_mean.len() {
            self.running_mean[c] = (1.0 - self.momentum) * self.running_mean[c] + self.momentum * stats.mean[c];
            self.running_var[c] =
                (1.0 - self.momentum) * self.running_var[c] + self.momentum * stats.var[c] * unbias;
        }
        self.affine(tape, xhat)
    }

    pub fn forward_eval(&self, tape: &mut Tape, x: Var) -> Var {
        let scale = self
            .running_var
            .iter()
            .map(|v| 1.0 / (v + self.eps).sqrt())
            .collect();
        let xhat = tape.channel_affine_const(x, scale, &self.running_mean);
        self.affine(tape, xhat)
    }

    fn affine(&self, tape: &mut Tape, xhat: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.channel_mul(xhat, g);
        tape.channel_add(y, b)
    }
}

/// LSTM cell with gate order input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let wx = store.add(
            format!("{name}.wx"),
            glorot(rng, vec![input, 4 * hidden], input, 4 * hidden),
        );
        let wh = store.add(
            format!("{name}.wh"),
            glorot(rng, vec![hidden, 4 * hidden], hidden, 4 * hidden),
        );
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{name}.b"), Tensor::new(vec![4 * hidden], bias));
        Self {
            wx,
            wh,
            b,
            input,
            hidden,
        }
    }

    /// Runs the cell over `xs` (each `[B, input]`) from zero state and
    /// returns the hidden states in the original time order.
    pub fn run(&self, tape: &mut Tape, xs: &[Var], reverse: bool) -> Vec<Var> {
        let batch = tape.shape(xs[0])[0];
        let h_dim = self.hidden;
        let wx = tape.param(self.wx);
        let wh = tape.param(self.wh);
        let b = tape.param(self.b);
        let mut h = tape.input(Tensor::zeros(vec![batch, h_dim]));
        let mut c = tape.input(Tensor::zeros(vec![batch, h_dim]));
        let mut out = vec![h; xs.len()];
        let order: Vec<usize> = if reverse {
            (0..xs.len()).rev().collect()
        } else {
            (0..xs.len()).collect()
        };
        for t in order {
            let gx = tape.matmul(xs[t], wx);
            let gh = tape.matmul(h, wh);
            let gates = tape.add(gx, gh);
            let gates = tape.add_row_bias(gates, b);
            let i = tape.slice_cols(gates, 0, h_dim);
            let f = tape.slice_cols(gates, h_dim, 2 * h_dim);
            let g = tape.slice_cols(gates, 2 * h_dim, 3 * h_dim);
            let o = tape.slice_cols(gates, 3 * h_dim, 4 * h_dim);
            let i = tape.sigmoid(i);
            let f = tape.sigmoid(f);
            let g = tape.tanh(g);
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, c);
            let ig = tape.mul(i, g);
            c = tape.add(fc, ig);
            let tc = tape.tanh(c);
            h = tape.mul(o, tc);
            out[t] = h;
        }
        out
    }
}
