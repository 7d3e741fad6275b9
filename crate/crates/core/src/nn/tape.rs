//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates gradients. Parameters are
//! borrowed from a [`ParamStore`] rather than copied onto the tape.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Form of the KL regulariser applied to `(mu, log_sigma)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlForm {
    /// `sum(mu^2 + sigma - log(sigma) - 1)` with `sigma = exp(log_sigma)`.
    Sigma,
    /// `0.5 * sum(mu^2 + sigma^2 - 2 log(sigma) - 1)`, the Gaussian KL to N(0, I).
    Standard,
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    ChannelAdd(Var, Var),
    ChannelMul(Var, Var),
    ChannelScaleConst {
        x: Var,
        scale: Vec<f64>,
    },
    BatchNormalize {
        x: Var,
        inv_std: Vec<f64>,
    },
    Upsample2x(Var),
    MaxPool2x2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SumAll(Var),
    SigmoidBce {
        logits: Var,
        target: Vec<f64>,
    },
    KlDiv {
        mu: Var,
        log_sigma: Var,
        form: KlForm,
        batch: usize,
    },
    SquaredError {
        pred: Var,
        target: Vec<f64>,
        divisor: f64,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Per-channel batch statistics produced by [`Tape::batch_normalize`].
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "channel op needs [batch, channels, ..]");
    let spatial: usize = shape[2..].iter().product();
    (shape[0], shape[1], spatial)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Clamp bound applied to probabilities before taking logs in cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.get(*id).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let d = self.value(v);
        assert_eq!(d.len(), 1, "not a scalar");
        d[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.store.get(id).shape().to_vec();
        self.push(shape, Vec::new(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let n = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(b), &[n], "bias width");
        let bias = self.value(b);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % n])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::AddRowBias(x, b))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shapes");
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| f(*v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    /// 2-D convolution, `x: [B, C, H, W]`, `w: [Co, C, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4 && xs[1] == ws[1] && ws[2] == ws[3]);
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut cols = vec![0.0; b * ckk * hw];
        let xv = self.value(x);
        for bi in 0..b {
            let col = &mut cols[bi * ckk * hw..(bi + 1) * ckk * hw];
            let img = &xv[bi * c * h * wd..(bi + 1) * c * h * wd];
            im2col(img, c, h, wd, k, stride, pad, ho, wo, col);
        }
        let mut out = vec![0.0; b * co * hw];
        let wv = self.value(w);
        for bi in 0..b {
            gemm(
                co,
                ckk,
                hw,
                wv,
                false,
                &cols[bi * ckk * hw..(bi + 1) * ckk * hw],
                false,
                &mut out[bi * co * hw..(bi + 1) * co * hw],
                false,
            );
        }
        self.push(
            vec![b, co, ho, wo],
            out,
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                cols,
            },
        )
    }

    pub fn channel_add(&mut self, x: Var, bias: Var) -> Var {
        let (_, c, spatial) = channel_layout(self.shape(x));
        assert_eq!(self.shape(bias), &[c]);
        let bv = self.value(bias);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[(i / spatial) % c])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::ChannelAdd(x, bias))
    }

    pub fn channel_mul(&mut self, x: Var, gamma: Var) -> Var {
        let (_, c, spatial) = channel_layout(self.shape(x));
        assert_eq!(self.shape(gamma), &[c]);
        let gv = self.value(gamma);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv[(i / spatial) % c])
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::ChannelMul(x, gamma))
    }

    /// `(x - shift_c) * scale_c` with constant per-channel coefficients.
    pub fn channel_affine_const(&mut self, x: Var, scale: Vec<f64>, shift: &[f64]) -> Var {
        let (_, c, spatial) = channel_layout(self.shape(x));
        assert_eq!(scale.len(), c);
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / spatial) % c;
                (v - shift[ch]) * scale[ch]
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::ChannelScaleConst { x, scale })
    }

    /// Normalizes each channel with its batch mean and (biased) variance.
    pub fn batch_normalize(&mut self, x: Var, eps: f64) -> (Var, BatchStats) {
        let (b, c, spatial) = channel_layout(self.shape(x));
        let n = (b * spatial) as f64;
        let xv = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * spatial;
                mean[ch] += xv[off..off + spatial].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * spatial;
                var[ch] += xv[off..off + spatial]
                    .iter()
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; xv.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let ch = (i / spatial) % c;
            *o = (xv[i] - mean[ch]) * inv_std[ch];
        }
        let shape = self.shape(x).to_vec();
        let v = self.push(shape, out, Op::BatchNormalize { x, inv_std });
        (v, BatchStats { mean, var })
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let xv = self.value(x);
        let mut out = vec![0.0; b * c * h * w * 4];
        for p in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = xv[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(vec![b, c, 2 * h, 2 * w], out, Op::Upsample2x(x))
    }

    /// 2×2 max pooling with stride 2 (trailing odd row/column dropped).
    pub fn maxpool2x2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = vec![0.0; b * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..b * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = (p * h + 2 * y + dy) * w + 2 * xx + dx;
                            if xv[idx] > best_v || best == usize::MAX {
                                best_v = xv[idx];
                                best = idx;
                            }
                        }
                    }
                    let o = (p * ho + y) * wo + xx;
                    out[o] = best_v;
                    argmax[o] = best;
                }
            }
        }
        self.push(vec![b, c, ho, wo], out, Op::MaxPool2x2 { x, argmax })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), self.value(x).len(), "reshape size");
        let out = self.value(x).to_vec();
        self.push(shape, out, Op::Reshape(x))
    }

    /// Concatenates 2-D tensors along their second axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let s = self.shape(*p);
                assert!(s.len() == 2 && s[0] == rows, "concat shapes");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let v = self.value(*p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let s = self.shape(x);
        assert!(s.len() == 2 && start < end && end <= s[1]);
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + end]);
        }
        self.push(vec![rows, w], out, Op::SliceCols { x, start })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::SumAll(x))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `target`, with
    /// probabilities clamped to `[BCE_EPS, 1 - BCE_EPS]` for the value.
    pub fn sigmoid_bce(&mut self, logits: Var, target: Vec<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), target.len());
        let n = lv.len() as f64;
        let total: f64 = lv
            .iter()
            .zip(&target)
            .map(|(l, t)| bce_term(sigmoid(*l), *t))
            .sum();
        self.push(vec![1], vec![total / n], Op::SigmoidBce { logits, target })
    }

    /// KL regulariser summed over latent dims, averaged over the batch rows.
    pub fn kl_div(&mut self, mu: Var, log_sigma: Var, form: KlForm) -> Var {
        assert_eq!(self.shape(mu), self.shape(log_sigma));
        let batch = self.shape(mu)[0];
        let total: f64 = self
            .value(mu)
            .iter()
            .zip(self.value(log_sigma))
            .map(|(m, ls)| kl_term(*m, *ls, form))
            .sum();
        self.push(
            vec![1],
            vec![total / batch as f64],
            Op::KlDiv {
                mu,
                log_sigma,
                form,
                batch,
            },
        )
    }

    /// `sum((pred - target)^2) / divisor`.
    pub fn squared_error(&mut self, pred: Var, target: Vec<f64>, divisor: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.len(), target.len());
        let s: f64 = pv.iter().zip(&target).map(|(p, t)| (p - t).powi(2)).sum();
        self.push(
            vec![1],
            vec![s / divisor],
            Op::SquaredError {
                pred,
                target,
                divisor,
            },
        )
    }

    /// Mean softmax cross-entropy over the rows of `logits: [B, S]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let s = self.shape(logits);
        assert!(s.len() == 2 && s[0] == labels.len());
        let (b, classes) = (s[0], s[1]);
        let probs = softmax_rows(self.value(logits), classes);
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -probs[r * classes + l].max(1e-300).ln())
            .sum::<f64>()
            / b as f64;
        self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            },
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|(v, w)| w * self.scalar(*v)).sum();
        self.push(vec![1], vec![s], Op::WeightedSum(terms.to_vec()))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let bv = self.value(*b);
                    acc(&mut grads, *a, m * k, |da| gemm(m, n, k, &g, false, bv, true, da, true));
                    let av = self.value(*a);
                    acc(&mut grads, *b, k * n, |db| gemm(k, m, n, av, true, &g, false, db, true));
                }
                Op::AddRowBias(x, b) => {
                    let n = self.shape(*b)[0];
                    acc(&mut grads, *x, g.len(), |dx| add_into(dx, &g));
                    acc(&mut grads, *b, n, |db| {
                        for (j, v) in g.iter().enumerate() {
                            db[j % n] += v;
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.len(), |d| add_into(d, &g));
                    acc(&mut grads, *b, g.len(), |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.len(), |d| add_into(d, &g));
                    acc(&mut grads, *b, g.len(), |d| {
                        d.iter_mut().zip(&g).for_each(|(x, y)| *x -= y)
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * bv[j];
                        }
                    });
                    acc(&mut grads, *b, g.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * av[j];
                        }
                    });
                }
                Op::Scale(x, s) => {
                    acc(&mut grads, *x, g.len(), |d| {
                        d.iter_mut().zip(&g).for_each(|(a, b)| *a += s * b)
                    });
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    acc(&mut grads, *x, g.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * y[j] * (1.0 - y[j]);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    acc(&mut grads, *x, g.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * (1.0 - y[j] * y[j]);
                        }
                    });
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    acc(&mut grads, *x, g.len(), |d| {
                        for j in 0..d.len() {
                            if y[j] > 0.0 {
                                d[j] += g[j];
                            }
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = &node.value;
                    acc(&mut grads, *x, g.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * y[j];
                        }
                    });
                }
                Op::Conv2d {
                    x,
                    w,
                    stride,
                    pad,
                    cols,
                } => {
                    let xs = self.shape(*x);
                    let ws = self.shape(*w);
                    let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                    let (co, k) = (ws[0], ws[2]);
                    let (ho, wo) = (node.shape[2], node.shape[3]);
                    let (ckk, hw) = (c * k * k, ho * wo);
                    acc(&mut grads, *w, co * ckk, |dw| {
                        for bi in 0..b {
                            gemm(
                                co,
                                hw,
                                ckk,
                                &g[bi * co * hw..(bi + 1) * co * hw],
                                false,
                                &cols[bi * ckk * hw..(bi + 1) * ckk * hw],
                                true,
                                dw,
                                true,
                            );
                        }
                    });
                    let wv = self.value(*w);
                    acc(&mut grads, *x, b * c * h * wd, |dx| {
                        let mut dcol = vec![0.0; ckk * hw];
                        for bi in 0..b {
                            gemm(
                                ckk,
                                co,
                                hw,
                                wv,
                                true,
                                &g[bi * co * hw..(bi + 1) * co * hw],
                                false,
                                &mut dcol,
                                false,
                            );
                            col2im(
                                &dcol,
                                c,
                                h,
                                wd,
                                k,
                                *stride,
                                *pad,
                                ho,
                                wo,
                                &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd],
                            );
                        }
                    });
                }
                Op::ChannelAdd(x, bias) => {
                    let (_, c, spatial) = channel_layout(&node.shape);
                    acc(&mut grads, *x, g.len(), |d| add_into(d, &g));
                    acc(&mut grads, *bias, c, |db| {
                        for (j, v) in g.iter().enumerate() {
                            db[(j / spatial) % c] += v;
                        }
                    });
                }
                Op::ChannelMul(x, gamma) => {
                    let (_, c, spatial) = channel_layout(&node.shape);
                    let gv = self.value(*gamma);
                    let xv = self.value(*x);
                    acc(&mut grads, *x, g.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * gv[(j / spatial) % c];
                        }
                    });
                    acc(&mut grads, *gamma, c, |dg| {
                        for j in 0..g.len() {
                            dg[(j / spatial) % c] += g[j] * xv[j];
                        }
                    });
                }
                Op::ChannelScaleConst { x, scale } => {
                    let (_, c, spatial) = channel_layout(&node.shape);
                    acc(&mut grads, *x, g.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += g[j] * scale[(j / spatial) % c];
                        }
                    });
                }
                Op::BatchNormalize { x, inv_std } => {
                    let (b, c, spatial) = channel_layout(&node.shape);
                    let n = (b * spatial) as f64;
                    let xhat = &node.value;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for j in 0..g.len() {
                        let ch = (j / spatial) % c;
                        sum_g[ch] += g[j];
                        sum_gx[ch] += g[j] * xhat[j];
                    }
                    acc(&mut grads, *x, g.len(), |d| {
                        for j in 0..d.len() {
                            let ch = (j / spatial) % c;
                            d[j] += inv_std[ch] / n * (n * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]);
                        }
                    });
                }
                Op::Upsample2x(x) => {
                    let s = self.shape(*x);
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    acc(&mut grads, *x, b * c * h * w, |d| {
                        for p in 0..b * c {
                            for y in 0..2 * h {
                                for xx in 0..2 * w {
                                    d[(p * h + y / 2) * w + xx / 2] += g[(p * 2 * h + y) * 2 * w + xx];
                                }
                            }
                        }
                    });
                }
                Op::MaxPool2x2 { x, argmax } => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, n, |d| {
                        for (o, &src) in argmax.iter().enumerate() {
                            d[src] += g[o];
                        }
                    });
                }
                Op::Reshape(x) => {
                    acc(&mut grads, *x, g.len(), |d| add_into(d, &g));
                }
                Op::ConcatCols(parts) => {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p)[1];
                        acc(&mut grads, *p, rows * w, |d| {
                            for r in 0..rows {
                                for c in 0..w {
                                    d[r * w + c] += g[r * total + off + c];
                                }
                            }
                        });
                        off += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let w = node.shape[1];
                    acc(&mut grads, *x, rows * cols, |d| {
                        for r in 0..rows {
                            for c in 0..w {
                                d[r * cols + start + c] += g[r * w + c];
                            }
                        }
                    });
                }
                Op::SumAll(x) => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, n, |d| d.iter_mut().for_each(|v| *v += g[0]));
                }
                Op::SigmoidBce { logits, target } => {
                    let lv = self.value(*logits);
                    let n = lv.len() as f64;
                    acc(&mut grads, *logits, lv.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += g[0] * (sigmoid(lv[j]) - target[j]) / n;
                        }
                    });
                }
                Op::KlDiv {
                    mu,
                    log_sigma,
                    form,
                    batch,
                } => {
                    let scale = g[0] / *batch as f64;
                    let mv = self.value(*mu);
                    let lv = self.value(*log_sigma);
                    let (dmu_coef, form) = match form {
                        KlForm::Sigma => (2.0, *form),
                        KlForm::Standard => (1.0, *form),
                    };
                    acc(&mut grads, *mu, mv.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += scale * dmu_coef * mv[j];
                        }
                    });
                    acc(&mut grads, *log_sigma, lv.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += scale
                                * match form {
                                    KlForm::Sigma => lv[j].exp() - 1.0,
                                    KlForm::Standard => (2.0 * lv[j]).exp() - 1.0,
                                };
                        }
                    });
                }
                Op::SquaredError {
                    pred,
                    target,
                    divisor,
                } => {
                    let pv = self.value(*pred);
                    acc(&mut grads, *pred, pv.len(), |d| {
                        for j in 0..d.len() {
                            d[j] += g[0] * 2.0 * (pv[j] - target[j]) / divisor;
                        }
                    });
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let classes = self.shape(*logits)[1];
                    let b = labels.len() as f64;
                    acc(&mut grads, *logits, probs.len(), |d| {
                        for (r, &l) in labels.iter().enumerate() {
                            for c in 0..classes {
                                let onehot = if c == l { 1.0 } else { 0.0 };
                                d[r * classes + c] += g[0] * (probs[r * classes + c] - onehot) / b;
                            }
                        }
                    });
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        acc(&mut grads, *v, 1, |d| d[0] += w * g[0]);
                    }
                }
            }
        }
        let mut params: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                match &mut params[id.index()] {
                    Some(p) => add_into(p, g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }
}

pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a tape input or parameter node.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.index()).and_then(|g| g.as_deref())
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn bce_term(p: f64, t: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

pub(crate) fn kl_term(mu: f64, log_sigma: f64, form: KlForm) -> f64 {
    match form {
        KlForm::Sigma => mu * mu + log_sigma.exp() - log_sigma - 1.0,
        KlForm::Standard => 0.5 * (mu * mu + (2.0 * log_sigma).exp() - 2.0 * log_sigma - 1.0),
    }
}

pub(crate) fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, o) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for (oi, l) in o.iter_mut().zip(row) {
            *oi = (l - m).exp();
            s += *oi;
        }
        o.iter_mut().for_each(|v| *v /= s);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst[oy * wo..(oy + 1) * wo].fill(0.0);
                        continue;
                    }
                    let src = &img[(ch * h + iy as usize) * w..(ch * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [f64],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
