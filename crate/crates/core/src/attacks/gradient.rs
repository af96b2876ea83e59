//! Sign-gradient attacks: FGSM, PGD, averaged-gradient PGD and TRADES-style
//! KL PGD.

use super::{check_eps, project, GradientModel, Objective};
use crate::error::{Error, Result};
use crate::net::softmax;
use crate::tensor::{sign, Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PgdParams {
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
    /// Start from a uniform point in the ε-ball.
    pub random_start: bool,
}

impl PgdParams {
    /// `steps = 10`, `α = 2ε/steps`, random start.
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps,
            alpha: 2.0 * eps / 10.0,
            steps: 10,
            random_start: true,
        }
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        check_eps(op, self.eps)?;
        if self.steps > 0 && self.eps > 0.0 && !(self.alpha > 0.0) {
            return Err(Error::invalid(op, format!("step size must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApgdParams {
    pub pgd: PgdParams,
    /// Noisy gradient evaluations averaged per step.
    pub samples: usize,
    /// Half-width of the uniform noise, as a fraction of `eps`.
    pub noise: f64,
}

impl ApgdParams {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            pgd: PgdParams::with_eps(eps),
            samples: 4,
            noise: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TpgdParams {
    pub eps: f64,
    pub alpha: f64,
    pub steps: usize,
}

impl TpgdParams {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps,
            alpha: 2.0 * eps / 10.0,
            steps: 10,
        }
    }
}

fn ascend(v: &mut Tensor, g: &Tensor, alpha: f64) {
    for (a, &d) in v.data_mut().iter_mut().zip(g.data()) {
        *a += alpha * sign(d);
    }
}

/// One step of size `eps` along the sign of the loss gradient, clipped to `[0, 1]`.
pub fn fgsm(model: &dyn GradientModel, x: &Tensor, y: &[usize], eps: f64) -> Result<Tensor> {
    check_eps("fgsm", eps)?;
    let g = model.input_gradient(x, Objective::CrossEntropy(y))?;
    let mut adv = x.clone();
    ascend(&mut adv, &g, eps);
    Ok(adv.clamp(0.0, 1.0))
}

fn random_start(x: &Tensor, eps: f64, rng: &mut Rng) -> Result<Tensor> {
    let mut v = x.add(&rng.uniform(x.shape(), -eps, eps)?)?;
    project(&mut v, x, eps);
    Ok(v)
}

/// Iterated sign steps, each projected back onto the ε-ball and `[0, 1]`.
pub fn pgd(model: &dyn GradientModel, x: &Tensor, y: &[usize], p: &PgdParams, rng: &mut Rng) -> Result<Tensor> {
    p.validate("pgd")?;
    if p.eps == 0.0 {
        return Ok(x.clone());
    }
    let mut adv = if p.random_start { random_start(x, p.eps, rng)? } else { x.clone() };
    for _ in 0..p.steps {
        let g = model.input_gradient(&adv, Objective::CrossEntropy(y))?;
        ascend(&mut adv, &g, p.alpha);
        project(&mut adv, x, p.eps);
    }
    Ok(adv)
}

/// Mean of `samples` gradients taken at `x + U(-noise, noise)`.
pub fn averaged_gradient(
    model: &dyn GradientModel,
    x: &Tensor,
    objective: Objective<'_>,
    samples: usize,
    noise: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    if samples == 0 {
        return Err(Error::invalid("averaged_gradient", "need at least one sample"));
    }
    let mut acc = Tensor::zeros(x.shape());
    for _ in 0..samples {
        let g = if noise > 0.0 {
            model.input_gradient(&x.add(&rng.uniform(x.shape(), -noise, noise)?)?, objective)?
        } else {
            model.input_gradient(x, objective)?
        };
        acc.axpy(1.0, &g)?;
    }
    Ok(acc.scale(1.0 / samples as f64))
}

/// PGD on a gradient averaged over noisy copies of the current iterate.
pub fn apgd(model: &dyn GradientModel, x: &Tensor, y: &[usize], p: &ApgdParams, rng: &mut Rng) -> Result<Tensor> {
    p.pgd.validate("apgd")?;
    if !(p.noise >= 0.0) {
        return Err(Error::invalid("apgd", format!("noise fraction must be non-negative, got {}", p.noise)));
    }
    if p.pgd.eps == 0.0 {
        return Ok(x.clone());
    }
    let eps = p.pgd.eps;
    let mut adv = if p.pgd.random_start { random_start(x, eps, rng)? } else { x.clone() };
    for _ in 0..p.pgd.steps {
        let g = averaged_gradient(model, &adv, Objective::CrossEntropy(y), p.samples, p.noise * eps, rng)?;
        ascend(&mut adv, &g, p.pgd.alpha);
        project(&mut adv, x, eps);
    }
    Ok(adv)
}

/// Mean over rows of `KL(p ‖ softmax(logits))`, with `0·log 0 = 0`.
pub fn kl_divergence(p: &Tensor, logits: &Tensor) -> Result<f64> {
    if p.shape() != logits.shape() || p.ndim() != 2 {
        return Err(Error::shape("kl_divergence", p.shape(), logits.shape()));
    }
    let (n, c) = (p.dim(0), p.dim(1));
    let mut total = 0.0;
    for i in 0..n {
        let z = logits.row(i);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for j in 0..c {
            let pj = p.row(i)[j];
            if pj > 0.0 {
                total += pj * (pj.ln() - (z[j] - lse));
            }
        }
    }
    Ok(total / n as f64)
}

/// Label-free PGD that pushes the prediction away from the clean softmax.
pub fn tpgd(model: &dyn GradientModel, x: &Tensor, p: &TpgdParams, rng: &mut Rng) -> Result<Tensor> {
    PgdParams {
        eps: p.eps,
        alpha: p.alpha,
        steps: p.steps,
        random_start: false,
    }
    .validate("tpgd")?;
    if p.eps == 0.0 {
        return Ok(x.clone());
    }
    let clean = softmax(&model.logits(x)?)?;
    let mut adv = x.add(&rng.normal(x.shape(), 0.0, 0.001)?)?;
    project(&mut adv, x, p.eps);
    for _ in 0..p.steps {
        let g = model.input_gradient(&adv, Objective::KlFrom(&clean))?;
        ascend(&mut adv, &g, p.alpha);
        project(&mut adv, x, p.eps);
    }
    Ok(adv)
}
