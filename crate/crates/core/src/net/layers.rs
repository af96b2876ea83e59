//! Layer types and their local forward/backward kernels.

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_bias_grad, conv2d_input_grad, conv2d_weight_grad, matmul_nt, matmul_tn, Rng, Tensor,
};

use super::FeedbackMode;

/// Backward-path state of a trainable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Feedback {
    /// FA: fixed `B` in the layout of `Wᵀ`. DFA: fixed `B` of shape
    /// `(layer output size) × classes`; absent on the output layer.
    pub matrix: Option<Tensor>,
    /// brSF/frSF: the magnitudes `|R|`, laid out like `Wᵀ`.
    pub magnitude: Option<Tensor>,
    /// Xavier standard deviation of the forward weight, the uSF scale.
    pub init_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Tensor,
    pub bias: Tensor,
    pub feedback: Feedback,
    pub(crate) slot: usize,
    pub(crate) param_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `F × C × K × K`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub feedback: Feedback,
    pub(crate) slot: usize,
    pub(crate) param_offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub(crate) param_offset: usize,
}

/// Parameter-free shortcut of a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shortcut {
    Identity,
    /// Spatial subsampling by `stride` plus zero channels padded evenly on
    /// both sides (`pad` per side).
    Subsample { stride: usize, pad: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub main: Vec<Layer>,
    pub shortcut: Shortcut,
    /// Trainable slot whose direct feedback lands on the post-sum ReLU.
    pub(crate) out_tap: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    /// `tap` names the trainable slot whose direct feedback is injected at
    /// this activation's input under DFA.
    Relu { tap: Option<usize> },
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    BatchNorm2d(BatchNorm2d),
    Residual(Box<ResidualBlock>),
}

/// A trainable (feedback-carrying) layer.
#[derive(Clone, Copy, Debug)]
pub enum Trainable<'a> {
    Linear(&'a Linear),
    Conv2d(&'a Conv2d),
}

impl<'a> Trainable<'a> {
    pub fn weight(&self) -> &'a Tensor {
        match self {
            Trainable::Linear(l) => &l.weight,
            Trainable::Conv2d(c) => &c.weight,
        }
    }

    pub fn feedback(&self) -> &'a Feedback {
        match self {
            Trainable::Linear(l) => &l.feedback,
            Trainable::Conv2d(c) => &c.feedback,
        }
    }

    pub fn slot(&self) -> usize {
        match self {
            Trainable::Linear(l) => l.slot,
            Trainable::Conv2d(c) => c.slot,
        }
    }

    /// `Wᵀ` for linear layers; the kernel itself for convolutions, where the
    /// transposed convolution consumes the kernel in its forward layout.
    pub fn weight_transposed(&self) -> Tensor {
        match self {
            Trainable::Linear(l) => l.weight.transpose().expect("linear weight is a matrix"),
            Trainable::Conv2d(c) => c.weight.clone(),
        }
    }

    /// The matrix that transports error through this layer under `mode`.
    ///
    /// `None` only for the DFA output layer, which receives the loss
    /// derivative directly and relays nothing.
    pub fn effective_backward_weight(&self, mode: FeedbackMode) -> Option<Tensor> {
        let fb = self.feedback();
        match mode {
            FeedbackMode::Bp => Some(self.weight_transposed()),
            FeedbackMode::Fa | FeedbackMode::Dfa => fb.matrix.clone(),
            FeedbackMode::Usf => Some(self.weight_transposed().sign().scale(fb.init_std)),
            FeedbackMode::Brsf | FeedbackMode::Frsf => {
                let mag = fb.magnitude.as_ref()?;
                Some(
                    mag.mul(&self.weight_transposed().sign())
                        .expect("magnitude laid out like the transposed weight"),
                )
            }
        }
    }
}

/// Per-layer values retained from the forward pass.
#[derive(Clone, Debug)]
pub(crate) enum LayerCache {
    Skipped,
    Input(Tensor),
    Mask(Vec<bool>, Vec<usize>),
    Pool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Shape(Vec<usize>),
    Norm { xhat: Tensor, inv_std: Vec<f64> },
    Residual {
        main: Vec<LayerCache>,
        input_shape: Vec<usize>,
        mask: Vec<bool>,
        out_shape: Vec<usize>,
    },
}

/// Batch statistics produced by a training-mode batch norm, applied to the
/// running averages after the pass.
pub(crate) struct BnStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

pub(crate) fn linear_forward(l: &Linear, x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || x.dim(1) != l.weight.dim(1) {
        return Err(Error::shape("linear", x.shape(), l.weight.shape()));
    }
    let mut y = matmul_nt(x, &l.weight)?;
    let out = l.weight.dim(0);
    for row in y.data_mut().chunks_mut(out) {
        for (v, b) in row.iter_mut().zip(l.bias.data()) {
            *v += b;
        }
    }
    Ok(y)
}

/// `(dW, db)` for error `e: N×out` and cached input `x: N×in`.
pub(crate) fn linear_param_grads(e: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let dw = matmul_tn(e, x)?;
    let out = e.dim(1);
    let mut db = vec![0.0; out];
    for row in e.data().chunks(out) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok((dw, Tensor::from_vec(db)))
}

/// Error relayed to the input: `e · Bᵀ` with `B` laid out like `Wᵀ`.
pub(crate) fn linear_relay(e: &Tensor, backward: &Tensor) -> Result<Tensor> {
    matmul_nt(e, backward)
}

pub(crate) fn conv_forward(c: &Conv2d, x: &Tensor) -> Result<Tensor> {
    conv2d(x, &c.weight, &c.bias, c.stride, c.padding)
}

pub(crate) fn conv_param_grads(c: &Conv2d, e: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((
        conv2d_weight_grad(e, x, c.stride, c.padding, c.weight.shape())?,
        conv2d_bias_grad(e)?,
    ))
}

pub(crate) fn conv_relay(c: &Conv2d, e: &Tensor, backward: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    conv2d_input_grad(e, backward, c.stride, c.padding, input_shape)
}

pub(crate) fn relu_forward(x: &Tensor) -> (Tensor, Vec<bool>) {
    let mask: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    (x.map(|v| if v > 0.0 { v } else { 0.0 }), mask)
}

pub(crate) fn apply_mask(e: &Tensor, mask: &[bool], shape: &[usize]) -> Result<Tensor> {
    if e.len() != mask.len() {
        return Err(Error::shape("relu backward", e.shape(), shape));
    }
    let data = e
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { 0.0 })
        .collect();
    Tensor::new(shape, data)
}

fn expect_rank4(op: &'static str, x: &Tensor) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::invalid(op, format!("expected N×C×H×W, got {:?}", x.shape()))),
    }
}

pub(crate) fn maxpool_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = expect_rank4("maxpool", x)?;
    if kernel == 0 || stride == 0 || h < kernel || w < kernel {
        return Err(Error::invalid("maxpool", format!("kernel {kernel} on {h}×{w}")));
    }
    let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

pub(crate) fn maxpool_backward(e: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    let mut grad = Tensor::zeros(input_shape);
    if e.len() != argmax.len() {
        return Err(Error::shape("maxpool backward", e.shape(), input_shape));
    }
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(e.data()) {
        g[idx] += v;
    }
    Ok(grad)
}

pub(crate) fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = expect_rank4("global_avg_pool", x)?;
    let p = h * w;
    let data = x.data().chunks(p).map(|plane| plane.iter().sum::<f64>() / p as f64).collect();
    Tensor::new(&[n, c, 1, 1], data)
}

pub(crate) fn global_avg_pool_backward(e: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let p = input_shape[2] * input_shape[3];
    let mut data = Vec::with_capacity(e.len() * p);
    for &v in e.data() {
        data.extend(std::iter::repeat(v / p as f64).take(p));
    }
    Tensor::new(input_shape, data)
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
            param_offset: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, Tensor, Vec<f64>, Option<BnStats>)> {
        let [n, c, h, w] = expect_rank4("batchnorm", x)?;
        if c != self.channels() {
            return Err(Error::shape("batchnorm", x.shape(), self.gamma.shape()));
        }
        let p = h * w;
        let count = n * p;
        let (mean, var, stats) = if training {
            if count == 0 {
                return Err(Error::invalid("batchnorm", "empty batch in training mode"));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    s += x.data()[(i * c + ch) * p..][..p].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut sq = 0.0;
                for i in 0..n {
                    sq += x.data()[(i * c + ch) * p..][..p].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = sq / count as f64;
            }
            let unbiased = var
                .iter()
                .map(|v| if count > 1 { v * count as f64 / (count - 1) as f64 } else { *v })
                .collect();
            let stats = BnStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec(), None)
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..n {
            for ch in 0..c {
                let (g, b) = (self.gamma.data()[ch], self.beta.data()[ch]);
                let off = (i * c + ch) * p;
                for j in off..off + p {
                    let nv = (x.data()[j] - mean[ch]) * inv_std[ch];
                    xhat.data_mut()[j] = nv;
                    y.data_mut()[j] = g * nv + b;
                }
            }
        }
        Ok((y, xhat, inv_std, stats))
    }

    pub(crate) fn apply_stats(&mut self, stats: &BnStats) {
        let m = self.momentum;
        for (r, v) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&stats.var_unbiased) {
            *r = (1.0 - m) * *r + m * v;
        }
    }

    /// `(dx, dgamma, dbeta)`; batch statistics are differentiated through in
    /// training mode, running statistics are constants at eval.
    pub(crate) fn backward(
        &self,
        e: &Tensor,
        xhat: &Tensor,
        inv_std: &[f64],
        training: bool,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let [n, c, h, w] = expect_rank4("batchnorm backward", e)?;
        if e.shape() != xhat.shape() {
            return Err(Error::shape("batchnorm backward", e.shape(), xhat.shape()));
        }
        let p = h * w;
        let count = (n * p) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * p;
                for j in off..off + p {
                    dbeta[ch] += e.data()[j];
                    dgamma[ch] += e.data()[j] * xhat.data()[j];
                }
            }
        }
        let mut dx = e.clone();
        for i in 0..n {
            for ch in 0..c {
                let g = self.gamma.data()[ch] * inv_std[ch];
                let off = (i * c + ch) * p;
                for j in off..off + p {
                    dx.data_mut()[j] = if training {
                        g * (e.data()[j] - dbeta[ch] / count - xhat.data()[j] * dgamma[ch] / count)
                    } else {
                        g * e.data()[j]
                    };
                }
            }
        }
        Ok((dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta)))
    }
}

pub(crate) fn shortcut_forward(s: Shortcut, x: &Tensor) -> Result<Tensor> {
    match s {
        Shortcut::Identity => Ok(x.clone()),
        Shortcut::Subsample { stride, pad } => {
            let [n, c, h, w] = expect_rank4("shortcut", x)?;
            let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
            let oc = c + 2 * pad;
            let mut out = Tensor::zeros(&[n, oc, oh, ow]);
            let dst = out.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dst[((i * oc + ch + pad) * oh + y) * ow + xx] =
                                x.data()[((i * c + ch) * h + y * stride) * w + xx * stride];
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

pub(crate) fn shortcut_backward(s: Shortcut, e: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    match s {
        Shortcut::Identity => e.reshaped(input_shape),
        Shortcut::Subsample { stride, pad } => {
            let [n, oc, oh, ow] = expect_rank4("shortcut backward", e)?;
            let (c, h, w) = (input_shape[1], input_shape[2], input_shape[3]);
            let mut grad = Tensor::zeros(input_shape);
            let g = grad.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            g[((i * c + ch) * h + y * stride) * w + xx * stride] +=
                                e.data()[((i * oc + ch + pad) * oh + y) * ow + xx];
                        }
                    }
                }
            }
            Ok(grad)
        }
    }
}

impl Feedback {
    /// Redraws `|R|` in place (brSF).
    pub(crate) fn redraw_magnitude(&mut self, rng: &mut Rng) -> Result<()> {
        if let Some(mag) = self.magnitude.as_mut() {
            let fresh = crate::init::xavier_uniform(mag.shape(), rng)?.abs();
            *mag = fresh;
        }
        Ok(())
    }
}

/// `δz · Bᵀ` for a DFA matrix `B: D × classes`.
pub(crate) fn direct_projection(delta: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_nt(delta, b)
}
