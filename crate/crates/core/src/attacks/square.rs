//! Square attack (L∞): random square-window sign updates accepted only when
//! they lower the margin loss.

use super::{check_eps, Model};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SquareParams {
    pub eps: f64,
    /// Model evaluations allowed per image, the initial point included.
    pub query_budget: usize,
    /// Initial fraction of the image area covered by a window.
    pub p_init: f64,
}

impl Default for SquareParams {
    fn default() -> Self {
        Self {
            eps: 0.05,
            query_budget: 1000,
            p_init: 0.05,
        }
    }
}

/// Per-image record: the margin of every queried point and whether it was kept.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SquareTrace {
    pub losses: Vec<f64>,
    pub accepted: Vec<bool>,
}

impl SquareTrace {
    pub fn queries(&self) -> usize {
        self.losses.len()
    }

    pub fn success(&self) -> bool {
        self.best() < 0.0
    }

    /// Margin of the returned image.
    pub fn best(&self) -> f64 {
        self.losses
            .iter()
            .zip(&self.accepted)
            .filter(|(_, &a)| a)
            .map(|(l, _)| *l)
            .last()
            .unwrap_or(f64::INFINITY)
    }
}

/// `logit[y] − max_{j≠y} logit[j]` for one row; negative means misclassified.
pub fn margin(row: &[f64], y: usize) -> f64 {
    let other = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    row[y] - other
}

/// Window area fraction at iteration `it`: `p_init` halved at the published
/// breakpoints, which are defined for 10 000 iterations and rescaled to the budget.
pub fn square_fraction(p_init: f64, it: usize, budget: usize) -> f64 {
    let it = (it as f64 / budget.max(1) as f64 * 10_000.0) as usize;
    let div = match it {
        0..=10 => 1.0,
        11..=50 => 2.0,
        51..=200 => 4.0,
        201..=500 => 8.0,
        501..=1000 => 16.0,
        1001..=2000 => 32.0,
        2001..=4000 => 64.0,
        4001..=6000 => 128.0,
        6001..=8000 => 256.0,
        _ => 512.0,
    };
    p_init / div
}

fn query(model: &dyn Model, img: &[f64], shape: &[usize], y: usize) -> Result<f64> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    let logits = model.logits(&Tensor::new(&s, img.to_vec())?)?;
    Ok(margin(logits.row(0), y))
}

fn attack_one(
    model: &dyn Model,
    orig: &[f64],
    [c, h, w]: [usize; 3],
    y: usize,
    p: &SquareParams,
    rng: &mut Rng,
) -> Result<(Vec<f64>, SquareTrace)> {
    let eps = p.eps;
    let mut trace = SquareTrace::default();
    // Vertical stripes of ±eps.
    let mut best = orig.to_vec();
    for ch in 0..c {
        for col in 0..w {
            let s = if rng.bernoulli(0.5) { eps } else { -eps };
            for row in 0..h {
                let k = (ch * h + row) * w + col;
                best[k] = (orig[k] + s).clamp(0.0, 1.0);
            }
        }
    }
    let mut best_loss = query(model, &best, &[c, h, w], y)?;
    trace.losses.push(best_loss);
    trace.accepted.push(true);
    let max_side = if h.min(w) > 1 { h.min(w) - 1 } else { 1 };
    let mut it = 1;
    while trace.queries() < p.query_budget && best_loss >= 0.0 {
        let frac = square_fraction(p.p_init, it, p.query_budget);
        let side = ((frac * (h * w) as f64).sqrt().round() as usize).clamp(1, max_side);
        let (top, left) = (rng.below(h - side + 1), rng.below(w - side + 1));
        let mut cand = best.clone();
        for ch in 0..c {
            let s = if rng.bernoulli(0.5) { eps } else { -eps };
            for row in top..top + side {
                for col in left..left + side {
                    let k = (ch * h + row) * w + col;
                    cand[k] = (orig[k] + s).clamp(0.0, 1.0);
                }
            }
        }
        let loss = query(model, &cand, &[c, h, w], y)?;
        let keep = loss < best_loss;
        trace.losses.push(loss);
        trace.accepted.push(keep);
        if keep {
            best = cand;
            best_loss = loss;
        }
        it += 1;
    }
    Ok((best, trace))
}

/// Attacks each image of `x` independently within its own query budget.
pub fn square_attack(
    model: &dyn Model,
    x: &Tensor,
    y: &[usize],
    p: &SquareParams,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<SquareTrace>)> {
    check_eps("square", p.eps)?;
    let &[n, c, h, w] = x.shape() else {
        return Err(Error::invalid("square", format!("expected N×C×H×W input, got {:?}", x.shape())));
    };
    if y.len() != n {
        return Err(Error::invalid("square", format!("{} labels for {n} images", y.len())));
    }
    if !(p.p_init > 0.0 && p.p_init <= 1.0) {
        return Err(Error::invalid("square", format!("p_init must lie in (0, 1], got {}", p.p_init)));
    }
    if p.eps == 0.0 || p.query_budget == 0 {
        return Ok((x.clone(), vec![SquareTrace::default(); n]));
    }
    let per = c * h * w;
    let mut adv = x.clone();
    let mut traces = Vec::with_capacity(n);
    for i in 0..n {
        let (img, trace) = attack_one(model, &x.data()[i * per..(i + 1) * per], [c, h, w], y[i], p, rng)?;
        adv.data_mut()[i * per..(i + 1) * per].copy_from_slice(&img);
        traces.push(trace);
    }
    Ok((adv, traces))
}

#[cfg(test)]
mod tests {
    use super::super::testing::LinearModel;
    use super::*;

    fn toy(seed: u64) -> (LinearModel, Tensor, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let w = rng.normal(&[3, 16], 0.0, 1.0).unwrap();
        let x = rng.uniform(&[4, 1, 4, 4], 0.0, 1.0).unwrap();
        let m = LinearModel::new(w);
        // Label each image with its clean prediction so every attack has work to do.
        let logits = m.logits(&x).unwrap();
        let y = (0..4)
            .map(|i| {
                let r = logits.row(i);
                (0..3).fold(0, |b, j| if r[j] > r[b] { j } else { b })
            })
            .collect();
        m.calls.set(0);
        (m, x, y)
    }

    #[test]
    fn acceptance_matches_brute_force_rule() {
        let (m, x, y) = toy(11);
        let p = SquareParams {
            eps: 0.02,
            query_budget: 200,
            p_init: 0.3,
        };
        let (adv, traces) = square_attack(&m, &x, &y, &p, &mut Rng::new(4)).unwrap();
        let logits = m.logits(&adv).unwrap();
        for (i, t) in traces.iter().enumerate() {
            assert!(t.accepted[0]);
            let mut cur = t.losses[0];
            for (&l, &a) in t.losses.iter().zip(&t.accepted).skip(1) {
                assert_eq!(a, l < cur);
                if a {
                    cur = l;
                }
            }
            // The returned image is the last accepted point.
            assert!((margin(logits.row(i), y[i]) - cur).abs() < 1e-12);
            assert!(t.queries() <= p.query_budget);
            assert!(t.success() || t.queries() == p.query_budget);
        }
        assert!(adv.sub(&x).unwrap().max_abs() <= p.eps + 1e-12);
        assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn budget_of_one_evaluates_only_the_start() {
        let (m, x, y) = toy(12);
        let p = SquareParams {
            eps: 0.01,
            query_budget: 1,
            p_init: 0.05,
        };
        let (_, traces) = square_attack(&m, &x, &y, &p, &mut Rng::new(0)).unwrap();
        assert!(traces.iter().all(|t| t.queries() == 1));
        assert_eq!(m.calls.get(), 4);
    }

    #[test]
    fn model_calls_match_reported_queries() {
        let (m, x, y) = toy(13);
        let p = SquareParams {
            eps: 0.05,
            query_budget: 50,
            p_init: 0.1,
        };
        let (_, traces) = square_attack(&m, &x, &y, &p, &mut Rng::new(0)).unwrap();
        assert_eq!(m.calls.get(), traces.iter().map(SquareTrace::queries).sum::<usize>());
    }

    #[test]
    fn window_fraction_schedule() {
        assert_eq!(square_fraction(0.8, 0, 10_000), 0.8);
        assert_eq!(square_fraction(0.8, 11, 10_000), 0.4);
        assert_eq!(square_fraction(0.8, 9_000, 10_000), 0.8 / 512.0);
        // Rescaled: iteration 50 of 1000 maps to 500 of 10 000.
        assert_eq!(square_fraction(0.8, 50, 1000), 0.1);
        let mut prev = f64::INFINITY;
        for it in 0..1000 {
            let f = square_fraction(0.05, it, 1000);
            assert!(f <= prev);
            prev = f;
        }
    }

    #[test]
    fn margin_sign() {
        assert_eq!(margin(&[1.0, 3.0, 2.0], 1), 1.0);
        assert_eq!(margin(&[1.0, 3.0, 2.0], 0), -2.0);
    }
}
