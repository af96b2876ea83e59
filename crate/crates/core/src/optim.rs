//! SGD with momentum, Adam, and the multi-step learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_shapes(op: &'static str, params: &[&mut Tensor], grads: &[Tensor], state: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(op, format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(op, p.shape(), g.shape()));
        }
    }
    if !state.is_empty() {
        if state.len() != params.len() {
            return Err(Error::invalid(op, "parameter list changed between steps"));
        }
        for (p, s) in params.iter().zip(state) {
            if p.shape() != s.shape() {
                return Err(Error::shape(op, p.shape(), s.shape()));
            }
        }
    }
    Ok(())
}

fn zeros_like(params: &[&mut Tensor]) -> Vec<Tensor> {
    params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// `g ← g + wd·w; v ← μ·v + g; w ← w − lr·v`
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes("sgd_step", params, grads, &self.velocity)?;
        if self.velocity.is_empty() {
            self.velocity = zeros_like(params);
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let (w, v) = (p.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i] + self.weight_decay * w[i];
                v[i] = self.momentum * v[i] + gi;
                w[i] -= self.lr * v[i];
            }
        }
        Ok(())
    }
}

/// Adam with bias correction; weight decay is added to the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            lr,
            betas,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes("adam_step", params, grads, &self.m)?;
        if self.m.is_empty() {
            self.m = zeros_like(params);
            self.v = zeros_like(params);
        }
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (w, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let gi = g.data()[i] + self.weight_decay * w[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd(o) => o.lr,
            Optimizer::Adam(o) => o.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }
}

/// Step decay: `base · gamma^(number of milestones ≤ epoch)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    milestones: Vec<usize>,
    gamma: f64,
}

impl LrSchedule {
    pub fn new(milestones: Vec<usize>, gamma: f64) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "lr_schedule",
                format!("milestones must be strictly increasing, got {milestones:?}"),
            ));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::invalid("lr_schedule", format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { milestones, gamma })
    }

    pub fn constant() -> Self {
        Self {
            milestones: Vec::new(),
            gamma: 1.0,
        }
    }

    pub fn milestones(&self) -> &[usize] {
        &self.milestones
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lr_at(&self, base_lr: f64, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        base_lr * self.gamma.powi(passed as i32)
    }
}

/// Clamps every gradient entry to `[-limit, limit]`.
pub fn clip_gradients(grads: &mut [Tensor], limit: f64) {
    for g in grads {
        g.map_inplace(|v| v.clamp(-limit, limit));
    }
}
