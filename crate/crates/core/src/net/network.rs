use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::init::{layer_rng, xavier_std, InitSpec, StreamRole};
use crate::tensor::{conv2d_output_size, Rng, Tensor};

use super::layers::*;
use super::FeedbackMode;

/// Sub-stream index reserved for the DFA input projection.
const INPUT_STREAM: usize = u32::MAX as usize;
/// Sub-stream index for runtime brSF redraws.
const REFRESH_STREAM: usize = u32::MAX as usize - 1;

/// Declarative layer description consumed by [`Network::from_specs`].
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Linear { out: usize },
    Conv2d { filters: usize, kernel: usize, stride: usize, padding: usize },
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    Flatten,
    BatchNorm2d,
    /// Basic block: conv3×3 → BN → ReLU → conv3×3 → BN, plus a parameter-free
    /// shortcut, then ReLU.
    Residual { planes: usize, stride: usize },
}

/// Per-channel input standardization applied ahead of the first layer, so
/// callers (and attacks) work in raw pixel space.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Activations retained by a forward call. Valid for one network generation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    training: bool,
    input_shape: Vec<usize>,
    layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input_shape[0]
    }

    pub fn is_training(&self) -> bool {
        self.training
    }
}

/// One tensor per parameter, in [`Network::parameters`] order.
pub type Gradients = Vec<Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    mode: FeedbackMode,
    classes: usize,
    input_shape: Vec<usize>,
    architecture: String,
    seed: u64,
    input_norm: Option<InputNorm>,
    input_feedback: Option<Tensor>,
    refresh_rng: Rng,
    generation: u64,
    trainable_count: usize,
    param_count: usize,
}

struct Builder<'a> {
    init: &'a InitSpec,
    seed: u64,
    slot: usize,
    out_dims: Vec<usize>,
}

impl Builder<'_> {
    fn trainable_weight(&mut self, shape: &[usize]) -> Result<Tensor> {
        let mut rng = layer_rng(self.seed, self.slot, StreamRole::Forward);
        self.init.forward.sample(shape, &mut rng)
    }

    fn layer(&mut self, spec: &LayerSpec, shape: &mut Vec<usize>) -> Result<Layer> {
        let placeholder = Feedback {
            matrix: None,
            magnitude: None,
            init_std: 0.0,
        };
        let layer = match *spec {
            LayerSpec::Linear { out } => {
                let [inp] = shape[..] else {
                    return Err(Error::invalid("linear", format!("expects a flat input, got {shape:?}")));
                };
                let weight = self.trainable_weight(&[out, inp])?;
                *shape = vec![out];
                self.push_slot(out);
                Layer::Linear(Linear {
                    weight,
                    bias: Tensor::zeros(&[out]),
                    feedback: placeholder,
                    slot: self.slot - 1,
                    param_offset: 0,
                })
            }
            LayerSpec::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::invalid("conv2d", format!("expects C×H×W input, got {shape:?}")));
                };
                let weight = self.trainable_weight(&[filters, c, kernel, kernel])?;
                let oh = conv2d_output_size(h, kernel, stride, padding)?;
                let ow = conv2d_output_size(w, kernel, stride, padding)?;
                *shape = vec![filters, oh, ow];
                self.push_slot(filters * oh * ow);
                Layer::Conv2d(Conv2d {
                    weight,
                    bias: Tensor::zeros(&[filters]),
                    stride,
                    padding,
                    feedback: placeholder,
                    slot: self.slot - 1,
                    param_offset: 0,
                })
            }
            LayerSpec::Relu => Layer::Relu { tap: None },
            LayerSpec::MaxPool2d { kernel, stride } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::invalid("maxpool", format!("expects C×H×W input, got {shape:?}")));
                };
                if kernel == 0 || stride == 0 || h < kernel || w < kernel {
                    return Err(Error::invalid("maxpool", format!("kernel {kernel} on {h}×{w}")));
                }
                *shape = vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
                Layer::MaxPool2d { kernel, stride }
            }
            LayerSpec::GlobalAvgPool => {
                if shape.len() != 3 {
                    return Err(Error::invalid("global_avg_pool", format!("expects C×H×W input, got {shape:?}")));
                }
                *shape = vec![shape[0], 1, 1];
                Layer::GlobalAvgPool
            }
            LayerSpec::Flatten => {
                *shape = vec![shape.iter().product()];
                Layer::Flatten
            }
            LayerSpec::BatchNorm2d => {
                if shape.len() != 3 {
                    return Err(Error::invalid("batchnorm", format!("expects C×H×W input, got {shape:?}")));
                }
                Layer::BatchNorm2d(BatchNorm2d::new(shape[0]))
            }
            LayerSpec::Residual { planes, stride } => {
                let in_channels = *shape.first().unwrap_or(&0);
                let main_specs = [
                    LayerSpec::Conv2d {
                        filters: planes,
                        kernel: 3,
                        stride,
                        padding: 1,
                    },
                    LayerSpec::BatchNorm2d,
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        filters: planes,
                        kernel: 3,
                        stride: 1,
                        padding: 1,
                    },
                    LayerSpec::BatchNorm2d,
                ];
                let input = shape.clone();
                let mut main = Vec::new();
                for s in &main_specs {
                    main.push(self.layer(s, shape)?);
                }
                let shortcut = if stride == 1 && in_channels == planes {
                    Shortcut::Identity
                } else {
                    if planes < in_channels || (planes - in_channels) % 2 != 0 {
                        return Err(Error::invalid(
                            "residual",
                            format!("cannot pad {in_channels} channels evenly to {planes}"),
                        ));
                    }
                    Shortcut::Subsample {
                        stride,
                        pad: (planes - in_channels) / 2,
                    }
                };
                let expected = [planes, input[1].div_ceil(stride), input[2].div_ceil(stride)];
                if shape[..] != expected {
                    return Err(Error::shape("residual", shape, &expected));
                }
                Layer::Residual(Box::new(ResidualBlock {
                    main,
                    shortcut,
                    out_tap: None,
                }))
            }
        };
        Ok(layer)
    }

    fn push_slot(&mut self, out_dim: usize) {
        self.out_dims.push(out_dim);
        self.slot += 1;
    }
}

fn visit<'a>(layers: &'a [Layer], f: &mut dyn FnMut(&'a Layer)) {
    for l in layers {
        f(l);
        if let Layer::Residual(b) = l {
            visit(&b.main, f);
        }
    }
}

fn visit_mut(layers: &mut [Layer], f: &mut dyn FnMut(&mut Layer)) {
    for l in layers {
        f(l);
        if let Layer::Residual(b) = l {
            visit_mut(&mut b.main, f);
        }
    }
}

/// Points each ReLU at the nearest trainable layer feeding it.
fn assign_taps(layers: &mut [Layer], pending: &mut Option<usize>) {
    for l in layers {
        match l {
            Layer::Linear(x) => *pending = Some(x.slot),
            Layer::Conv2d(x) => *pending = Some(x.slot),
            Layer::Relu { tap } => *tap = pending.take(),
            Layer::Residual(b) => {
                assign_taps(&mut b.main, pending);
                b.out_tap = pending.take();
            }
            _ => {}
        }
    }
}

fn named<'a>(layers: &'a [Layer], prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
    for (i, l) in layers.iter().enumerate() {
        let p = format!("{prefix}{i}");
        let mut push = |k: &str, t: &'a Tensor| out.push((format!("{p}.{k}"), t));
        match l {
            Layer::Linear(Linear { weight, bias, feedback, .. })
            | Layer::Conv2d(Conv2d { weight, bias, feedback, .. }) => {
                push("weight", weight);
                push("bias", bias);
                if let Some(m) = &feedback.matrix {
                    push("feedback", m);
                }
                if let Some(m) = &feedback.magnitude {
                    push("feedback_magnitude", m);
                }
            }
            Layer::BatchNorm2d(bn) => {
                push("gamma", &bn.gamma);
                push("beta", &bn.beta);
                push("running_mean", &bn.running_mean);
                push("running_var", &bn.running_var);
            }
            Layer::Residual(b) => named(&b.main, &format!("{p}.main."), out),
            _ => {}
        }
    }
}

fn named_mut<'a>(layers: &'a mut [Layer], prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
    for (i, l) in layers.iter_mut().enumerate() {
        let p = format!("{prefix}{i}");
        match l {
            Layer::Linear(Linear { weight, bias, feedback, .. })
            | Layer::Conv2d(Conv2d { weight, bias, feedback, .. }) => {
                out.push((format!("{p}.weight"), weight));
                out.push((format!("{p}.bias"), bias));
                if let Some(m) = feedback.matrix.as_mut() {
                    out.push((format!("{p}.feedback"), m));
                }
                if let Some(m) = feedback.magnitude.as_mut() {
                    out.push((format!("{p}.feedback_magnitude"), m));
                }
            }
            Layer::BatchNorm2d(bn) => {
                out.push((format!("{p}.gamma"), &mut bn.gamma));
                out.push((format!("{p}.beta"), &mut bn.beta));
                out.push((format!("{p}.running_mean"), &mut bn.running_mean));
                out.push((format!("{p}.running_var"), &mut bn.running_var));
            }
            Layer::Residual(b) => named_mut(&mut b.main, &format!("{p}.main."), out),
            _ => {}
        }
    }
}

fn params_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Tensor>) {
    for l in layers {
        match l {
            Layer::Linear(Linear { weight, bias, .. }) | Layer::Conv2d(Conv2d { weight, bias, .. }) => {
                out.push(weight);
                out.push(bias);
            }
            Layer::BatchNorm2d(bn) => {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
            Layer::Residual(b) => params_mut(&mut b.main, out),
            _ => {}
        }
    }
}

struct BackwardCtx<'a> {
    mode: FeedbackMode,
    training: bool,
    param_grads: bool,
    /// Relay error below the first trainable layer (only input gradients need it).
    relay_first: bool,
    /// DFA projections `δz · B_iᵀ`, indexed by trainable slot.
    direct: &'a [Option<Tensor>],
    grads: Vec<Option<Tensor>>,
}

impl BackwardCtx<'_> {
    fn direct_for(&self, slot: Option<usize>) -> Option<&Tensor> {
        if self.mode != FeedbackMode::Dfa {
            return None;
        }
        slot.and_then(|s| self.direct.get(s)).and_then(Option::as_ref)
    }
}

fn forward_seq(
    layers: &[Layer],
    mut x: Tensor,
    training: bool,
    keep: bool,
    stats: &mut Vec<BnStats>,
) -> Result<(Tensor, Vec<LayerCache>)> {
    let mut caches = Vec::with_capacity(if keep { layers.len() } else { 0 });
    for (i, layer) in layers.iter().enumerate() {
        let (y, c) = forward_layer(layer, x, training, keep, stats).map_err(|e| e.at_layer(i))?;
        if keep {
            caches.push(c);
        }
        x = y;
    }
    Ok((x, caches))
}

fn forward_layer(
    layer: &Layer,
    x: Tensor,
    training: bool,
    keep: bool,
    stats: &mut Vec<BnStats>,
) -> Result<(Tensor, LayerCache)> {
    let skip = |c: LayerCache| if keep { c } else { LayerCache::Skipped };
    Ok(match layer {
        Layer::Linear(l) => (linear_forward(l, &x)?, skip(LayerCache::Input(x))),
        Layer::Conv2d(c) => (conv_forward(c, &x)?, skip(LayerCache::Input(x))),
        Layer::Relu { .. } => {
            let (y, mask) = relu_forward(&x);
            (y, skip(LayerCache::Mask(mask, x.shape().to_vec())))
        }
        Layer::MaxPool2d { kernel, stride } => {
            let (y, argmax) = maxpool_forward(&x, *kernel, *stride)?;
            let input_shape = x.shape().to_vec();
            (y, skip(LayerCache::Pool { argmax, input_shape }))
        }
        Layer::GlobalAvgPool => (global_avg_pool_forward(&x)?, skip(LayerCache::Shape(x.shape().to_vec()))),
        Layer::Flatten => {
            let shape = x.shape().to_vec();
            let rest: usize = shape.iter().skip(1).product();
            (x.reshape(&[shape[0], rest])?, skip(LayerCache::Shape(shape)))
        }
        Layer::BatchNorm2d(bn) => {
            let (y, xhat, inv_std, st) = bn.forward(&x, training)?;
            stats.extend(st);
            (y, skip(LayerCache::Norm { xhat, inv_std }))
        }
        Layer::Residual(b) => {
            let (main_out, main) = forward_seq(&b.main, x.clone(), training, keep, stats)?;
            let sum = main_out.add(&shortcut_forward(b.shortcut, &x)?)?;
            let (y, mask) = relu_forward(&sum);
            let cache = LayerCache::Residual {
                main,
                input_shape: x.shape().to_vec(),
                mask,
                out_shape: sum.shape().to_vec(),
            };
            (y, skip(cache))
        }
    })
}

fn backward_seq(
    layers: &[Layer],
    caches: &[LayerCache],
    mut err: Option<Tensor>,
    ctx: &mut BackwardCtx<'_>,
) -> Result<Option<Tensor>> {
    if layers.len() != caches.len() {
        return Err(Error::invalid("backward", "cache does not match the layer stack"));
    }
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        err = backward_layer(layer, cache, err, ctx).map_err(|e| e.at_layer(i))?;
    }
    Ok(err)
}

fn masked(err: Option<Tensor>, tap: Option<usize>, mask: &[bool], shape: &[usize], ctx: &BackwardCtx<'_>) -> Result<Option<Tensor>> {
    match (ctx.direct_for(tap), err) {
        (Some(p), _) => apply_mask(p, mask, shape).map(Some),
        (None, Some(e)) => apply_mask(&e, mask, shape).map(Some),
        (None, None) => Ok(None),
    }
}

fn backward_layer(
    layer: &Layer,
    cache: &LayerCache,
    err: Option<Tensor>,
    ctx: &mut BackwardCtx<'_>,
) -> Result<Option<Tensor>> {
    let stale = || Error::invalid("backward", "forward cache was produced without retained activations");
    match layer {
        Layer::Linear(l) => {
            let LayerCache::Input(x) = cache else { return Err(stale()) };
            let Some(e) = err.or_else(|| ctx.direct_for(Some(l.slot)).cloned()) else {
                return Ok(None);
            };
            if ctx.param_grads {
                let (dw, db) = linear_param_grads(&e, x)?;
                ctx.grads[l.param_offset] = Some(dw);
                ctx.grads[l.param_offset + 1] = Some(db);
            }
            if ctx.mode == FeedbackMode::Dfa || (l.slot == 0 && !ctx.relay_first) {
                return Ok(None);
            }
            let b = Trainable::Linear(l)
                .effective_backward_weight(ctx.mode)
                .ok_or_else(|| Error::invalid("backward", "missing feedback matrix"))?;
            linear_relay(&e, &b).map(Some)
        }
        Layer::Conv2d(c) => {
            let LayerCache::Input(x) = cache else { return Err(stale()) };
            let e = match err {
                Some(e) => e,
                None => match ctx.direct_for(Some(c.slot)) {
                    Some(p) => {
                        let (oh, ow) = conv_out_hw(c, x.shape())?;
                        p.reshaped(&[x.dim(0), c.weight.dim(0), oh, ow])?
                    }
                    None => return Ok(None),
                },
            };
            if ctx.param_grads {
                let (dw, db) = conv_param_grads(c, &e, x)?;
                ctx.grads[c.param_offset] = Some(dw);
                ctx.grads[c.param_offset + 1] = Some(db);
            }
            if ctx.mode == FeedbackMode::Dfa || (c.slot == 0 && !ctx.relay_first) {
                return Ok(None);
            }
            let b = Trainable::Conv2d(c)
                .effective_backward_weight(ctx.mode)
                .ok_or_else(|| Error::invalid("backward", "missing feedback kernel"))?;
            conv_relay(c, &e, &b, x.shape()).map(Some)
        }
        Layer::Relu { tap } => {
            let LayerCache::Mask(mask, shape) = cache else { return Err(stale()) };
            masked(err, *tap, mask, shape, ctx)
        }
        Layer::MaxPool2d { .. } => {
            let LayerCache::Pool { argmax, input_shape } = cache else { return Err(stale()) };
            err.map(|e| maxpool_backward(&e, argmax, input_shape)).transpose()
        }
        Layer::GlobalAvgPool => {
            let LayerCache::Shape(s) = cache else { return Err(stale()) };
            err.map(|e| global_avg_pool_backward(&e, s)).transpose()
        }
        Layer::Flatten => {
            let LayerCache::Shape(s) = cache else { return Err(stale()) };
            err.map(|e| e.reshape(s)).transpose()
        }
        Layer::BatchNorm2d(bn) => {
            let LayerCache::Norm { xhat, inv_std } = cache else { return Err(stale()) };
            let Some(e) = err else { return Ok(None) };
            let (dx, dg, db) = bn.backward(&e, xhat, inv_std, ctx.training)?;
            if ctx.param_grads {
                ctx.grads[bn.param_offset] = Some(dg);
                ctx.grads[bn.param_offset + 1] = Some(db);
            }
            Ok(Some(dx))
        }
        Layer::Residual(b) => {
            let LayerCache::Residual {
                main,
                input_shape,
                mask,
                out_shape,
            } = cache
            else {
                return Err(stale());
            };
            let Some(e_sum) = masked(err, b.out_tap, mask, out_shape, ctx)? else {
                return Ok(None);
            };
            let e_main = backward_seq(&b.main, main, Some(e_sum.clone()), ctx)?;
            let e_short = shortcut_backward(b.shortcut, &e_sum, input_shape)?;
            match e_main {
                Some(m) => m.add(&e_short).map(Some),
                None => Ok(Some(e_short)),
            }
        }
    }
}

fn conv_out_hw(c: &Conv2d, input_shape: &[usize]) -> Result<(usize, usize)> {
    let k = c.weight.dim(2);
    Ok((
        conv2d_output_size(input_shape[2], k, c.stride, c.padding)?,
        conv2d_output_size(input_shape[3], k, c.stride, c.padding)?,
    ))
}

impl Network {
    /// Builds a network for per-sample inputs of `input_shape` (`[C, H, W]`
    /// or `[D]`). The last spec must be the `Linear` output layer.
    pub fn from_specs(
        architecture: &str,
        input_shape: &[usize],
        specs: &[LayerSpec],
        mode: FeedbackMode,
        init: &InitSpec,
        seed: u64,
    ) -> Result<Self> {
        let mut builder = Builder {
            init,
            seed,
            slot: 0,
            out_dims: Vec::new(),
        };
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            layers.push(builder.layer(spec, &mut shape).map_err(|e| e.at_layer(i))?);
        }
        let classes = match (layers.last(), &shape[..]) {
            (Some(Layer::Linear(l)), [c]) => {
                if l.weight.dim(0) != *c {
                    unreachable!("linear output tracks its width");
                }
                *c
            }
            _ => {
                return Err(Error::invalid(
                    "network",
                    "the last layer must be the linear output layer of class-count width",
                ))
            }
        };
        let trainable_count = builder.slot;
        let out_dims = builder.out_dims;

        let mut param_offset = 0;
        visit_mut(&mut layers, &mut |l| match l {
            Layer::Linear(x) => {
                x.param_offset = param_offset;
                param_offset += 2;
            }
            Layer::Conv2d(x) => {
                x.param_offset = param_offset;
                param_offset += 2;
            }
            Layer::BatchNorm2d(x) => {
                x.param_offset = param_offset;
                param_offset += 2;
            }
            _ => {}
        });
        assign_taps(&mut layers, &mut None);

        let mut failure = None;
        visit_mut(&mut layers, &mut |l| {
            let (weight, feedback, slot, transposed) = match l {
                Layer::Linear(x) => {
                    let t = vec![x.weight.dim(1), x.weight.dim(0)];
                    (&x.weight, &mut x.feedback, x.slot, t)
                }
                Layer::Conv2d(x) => (&x.weight, &mut x.feedback, x.slot, x.weight.shape().to_vec()),
                _ => return,
            };
            let mut rng = layer_rng(seed, slot, StreamRole::Backward);
            let result = (|| -> Result<Feedback> {
                let init_std = xavier_std(weight.shape())?;
                let (matrix, magnitude) = match mode {
                    FeedbackMode::Bp | FeedbackMode::Usf => (None, None),
                    FeedbackMode::Fa => (Some(init.backward(&transposed, &mut rng)?), None),
                    FeedbackMode::Dfa if slot + 1 < trainable_count => {
                        (Some(init.backward(&[out_dims[slot], classes], &mut rng)?), None)
                    }
                    FeedbackMode::Dfa => (None, None),
                    FeedbackMode::Brsf | FeedbackMode::Frsf => {
                        (None, Some(init.backward(&transposed, &mut rng)?.abs()))
                    }
                };
                Ok(Feedback {
                    matrix,
                    magnitude,
                    init_std,
                })
            })();
            match result {
                Ok(fb) => *feedback = fb,
                Err(e) => failure = Some(e),
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }

        let input_feedback = if mode == FeedbackMode::Dfa {
            let dim = input_shape.iter().product();
            let mut rng = layer_rng(seed, INPUT_STREAM, StreamRole::Backward);
            Some(init.backward(&[dim, classes], &mut rng)?)
        } else {
            None
        };

        Ok(Self {
            layers,
            mode,
            classes,
            input_shape: input_shape.to_vec(),
            architecture: architecture.to_string(),
            seed,
            input_norm: None,
            input_feedback,
            refresh_rng: layer_rng(seed, REFRESH_STREAM, StreamRole::Refresh),
            generation: 0,
            trainable_count,
            param_count: param_offset,
        })
    }

    pub fn mode(&self) -> FeedbackMode {
        self.mode
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn architecture(&self) -> &str {
        &self.architecture
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_norm(&self) -> Option<&InputNorm> {
        self.input_norm.as_ref()
    }

    pub fn set_input_norm(&mut self, norm: Option<InputNorm>) -> Result<()> {
        if let Some(n) = &norm {
            let c = self.input_shape[0];
            if self.input_shape.len() != 3 || n.mean.len() != c || n.std.len() != c {
                return Err(Error::invalid(
                    "input_norm",
                    format!("{} means / {} stds for input {:?}", n.mean.len(), n.std.len(), self.input_shape),
                ));
            }
            if n.std.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::invalid("input_norm", "standard deviations must be positive"));
            }
        }
        self.input_norm = norm;
        self.generation += 1;
        Ok(())
    }

    /// The DFA projection onto the input, `input_dim × classes`.
    pub fn input_feedback(&self) -> Option<&Tensor> {
        self.input_feedback.as_ref()
    }

    pub fn refresh_rng_state(&self) -> [u64; 4] {
        self.refresh_rng.state()
    }

    pub fn set_refresh_rng_state(&mut self, state: [u64; 4]) {
        self.refresh_rng = Rng::from_state(self.refresh_rng.seed(), state);
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_count
    }

    /// Trainable layers in forward order.
    pub fn trainable_layers(&self) -> Vec<Trainable<'_>> {
        let mut out = Vec::with_capacity(self.trainable_count);
        visit(&self.layers, &mut |l| match l {
            Layer::Linear(x) => out.push(Trainable::Linear(x)),
            Layer::Conv2d(x) => out.push(Trainable::Conv2d(x)),
            _ => {}
        });
        out
    }

    /// Learnable tensors (weights, biases, BN scale/shift) in forward order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.param_count);
        visit(&self.layers, &mut |l| match l {
            Layer::Linear(Linear { weight, bias, .. }) | Layer::Conv2d(Conv2d { weight, bias, .. }) => {
                out.push(weight);
                out.push(bias);
            }
            Layer::BatchNorm2d(bn) => {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
            _ => {}
        });
        out
    }

    /// Mutable parameters; invalidates outstanding forward caches.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.generation += 1;
        let mut out = Vec::with_capacity(self.param_count);
        params_mut(&mut self.layers, &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Overwrites the stored feedback matrix of trainable layer `slot`.
    pub fn set_feedback_matrix(&mut self, slot: usize, matrix: Tensor) -> Result<()> {
        let mut found = false;
        let mut result = Ok(());
        visit_mut(&mut self.layers, &mut |l| {
            let (s, fb, expected) = match l {
                Layer::Linear(x) => (x.slot, &mut x.feedback, vec![x.weight.dim(1), x.weight.dim(0)]),
                Layer::Conv2d(x) => (x.slot, &mut x.feedback, x.weight.shape().to_vec()),
                _ => return,
            };
            if s != slot {
                return;
            }
            found = true;
            let want = fb.matrix.as_ref().map(|m| m.shape().to_vec()).unwrap_or(expected);
            if matrix.shape() != want {
                result = Err(Error::shape("set_feedback_matrix", matrix.shape(), &want));
            } else {
                fb.matrix = Some(matrix.clone());
            }
        });
        if !found {
            return Err(Error::invalid("set_feedback_matrix", format!("no trainable layer {slot}")));
        }
        self.generation += 1;
        result
    }

    /// Redraws every `|R|` from the refresh stream (brSF, after each backward).
    pub fn refresh_feedback(&mut self) -> Result<()> {
        let rng = &mut self.refresh_rng;
        let mut result = Ok(());
        visit_mut(&mut self.layers, &mut |l| {
            let fb = match l {
                Layer::Linear(x) => &mut x.feedback,
                Layer::Conv2d(x) => &mut x.feedback,
                _ => return,
            };
            if result.is_ok() {
                result = fb.redraw_magnitude(rng);
            }
        });
        result
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut want = vec![x.shape().first().copied().unwrap_or(0)];
            want.extend(&self.input_shape);
            return Err(Error::shape("network input", x.shape(), &want).at_layer(0));
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor) -> Tensor {
        let Some(norm) = &self.input_norm else { return x.clone() };
        let mut y = x.clone();
        let c = norm.mean.len();
        let plane = self.input_shape[1] * self.input_shape[2];
        for (i, v) in y.data_mut().chunks_mut(plane).enumerate() {
            let ch = i % c;
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            v.iter_mut().for_each(|p| *p = (*p - m) / s);
        }
        y
    }

    fn run(&self, x: &Tensor, training: bool, keep: bool) -> Result<(Tensor, Vec<LayerCache>, Vec<BnStats>)> {
        self.check_input(x)?;
        let mut stats = Vec::new();
        let (y, caches) = forward_seq(&self.layers, self.normalize(x), training, keep, &mut stats)?;
        Ok((y, caches, stats))
    }

    /// Training-mode forward: batch statistics in batch norm, running
    /// averages updated.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (y, layers, stats) = self.run(x, true, true)?;
        let mut stats = stats.into_iter();
        visit_mut(&mut self.layers, &mut |l| {
            if let Layer::BatchNorm2d(bn) = l {
                bn.apply_stats(&stats.next().expect("one stats record per batch norm"));
            }
        });
        self.generation += 1;
        let cache = ForwardCache {
            generation: self.generation,
            training: true,
            input_shape: x.shape().to_vec(),
            layers,
        };
        Ok((y, cache))
    }

    /// Eval-mode forward retaining activations (for input gradients).
    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let (y, layers, _) = self.run(x, false, true)?;
        let cache = ForwardCache {
            generation: self.generation,
            training: false,
            input_shape: x.shape().to_vec(),
            layers,
        };
        Ok((y, cache))
    }

    /// Eval-mode logits without retaining activations.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, false, false)?.0)
    }

    fn check_cache(&self, delta: &Tensor, cache: &ForwardCache) -> Result<()> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache {
                cache: cache.generation,
                network: self.generation,
            });
        }
        let want = [cache.batch_size(), self.classes];
        if delta.shape() != want {
            return Err(Error::shape("backward delta", delta.shape(), &want));
        }
        Ok(())
    }

    fn direct_projections(&self, delta: &Tensor, mode: FeedbackMode) -> Result<Vec<Option<Tensor>>> {
        if mode != FeedbackMode::Dfa {
            return Ok(Vec::new());
        }
        self.trainable_layers()
            .iter()
            .map(|t| t.feedback().matrix.as_ref().map(|b| direct_projection(delta, b)).transpose())
            .collect()
    }

    /// Parameter gradients for `δz_N = delta` under the network's mode,
    /// without touching any state.
    pub fn compute_gradients(&self, delta: &Tensor, cache: &ForwardCache) -> Result<Gradients> {
        self.check_cache(delta, cache)?;
        let direct = self.direct_projections(delta, self.mode)?;
        let mut ctx = BackwardCtx {
            mode: self.mode,
            training: cache.training,
            param_grads: true,
            relay_first: false,
            direct: &direct,
            grads: vec![None; self.param_count],
        };
        backward_seq(&self.layers, &cache.layers, Some(delta.clone()), &mut ctx)?;
        let params = self.parameters();
        Ok(ctx
            .grads
            .into_iter()
            .zip(params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect())
    }

    /// Parameter gradients, then the brSF magnitude redraw.
    pub fn backward(&mut self, delta: &Tensor, cache: &ForwardCache) -> Result<Gradients> {
        let grads = self.compute_gradients(delta, cache)?;
        if self.mode == FeedbackMode::Brsf {
            self.refresh_feedback()?;
        }
        Ok(grads)
    }

    /// Error signal at the raw input for `δz_N = delta`, transported by the
    /// network's mode (DFA uses its input projection), or by true
    /// backpropagation when `force_bp` is set.
    pub fn input_gradient(&self, delta: &Tensor, cache: &ForwardCache, force_bp: bool) -> Result<Tensor> {
        self.check_cache(delta, cache)?;
        let mode = if force_bp { FeedbackMode::Bp } else { self.mode };
        if mode == FeedbackMode::Dfa {
            let b = self
                .input_feedback
                .as_ref()
                .ok_or_else(|| Error::invalid("input_gradient", "missing input feedback"))?;
            return direct_projection(delta, b)?.reshape(&cache.input_shape);
        }
        let mut ctx = BackwardCtx {
            mode,
            training: cache.training,
            param_grads: false,
            relay_first: true,
            direct: &[],
            grads: Vec::new(),
        };
        let mut g = backward_seq(&self.layers, &cache.layers, Some(delta.clone()), &mut ctx)?
            .unwrap_or_else(|| Tensor::zeros(&cache.input_shape));
        if let Some(norm) = &self.input_norm {
            let plane = self.input_shape[1] * self.input_shape[2];
            let c = norm.std.len();
            for (i, v) in g.data_mut().chunks_mut(plane).enumerate() {
                let s = norm.std[i % c];
                v.iter_mut().for_each(|p| *p /= s);
            }
        }
        Ok(g)
    }

    /// All persistent tensors keyed by parameter path.
    pub fn state_dict(&self) -> BTreeMap<String, Tensor> {
        let mut entries = Vec::new();
        named(&self.layers, "layers.", &mut entries);
        let mut map: BTreeMap<String, Tensor> = entries.into_iter().map(|(k, t)| (k, t.clone())).collect();
        if let Some(b) = &self.input_feedback {
            map.insert("input.feedback".into(), b.clone());
        }
        if let Some(n) = &self.input_norm {
            map.insert("input.mean".into(), Tensor::from_vec(n.mean.clone()));
            map.insert("input.std".into(), Tensor::from_vec(n.std.clone()));
        }
        map
    }

    /// Restores tensors saved by [`Network::state_dict`]; every key must match
    /// in name and shape.
    pub fn load_state_dict(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut used = 0;
        {
            let mut entries = Vec::new();
            named_mut(&mut self.layers, "layers.", &mut entries);
            if let Some(b) = self.input_feedback.as_mut() {
                entries.push(("input.feedback".into(), b));
            }
            for (name, slot) in entries {
                let src = state
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
                if src.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, network expects {:?}",
                        src.shape(),
                        slot.shape()
                    )));
                }
                *slot = src.clone();
                used += 1;
            }
        }
        match (state.get("input.mean"), state.get("input.std")) {
            (Some(m), Some(s)) => {
                self.set_input_norm(Some(InputNorm {
                    mean: m.data().to_vec(),
                    std: s.data().to_vec(),
                }))?;
                used += 2;
            }
            (None, None) => self.input_norm = None,
            _ => return Err(Error::Checkpoint("input normalization is incomplete".into())),
        }
        if used != state.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors do not belong to this network",
                state.len() - used
            )));
        }
        self.generation += 1;
        Ok(())
    }
}
