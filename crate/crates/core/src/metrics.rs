//! Alignment diagnostics between forward and backward weights, and top-k
//! accuracy.

use crate::error::{Error, Result};
use crate::net::{FeedbackMode, Network};
use crate::tensor::{dot, Tensor};

/// Per-layer diagnostics. `angle_deg` is `None` where the angle is undefined
/// (DFA shapes, zero-norm operands).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub angle_deg: Option<f64>,
    pub norm_ratio: f64,
}

/// `‖B‖_F / ‖Wᵀ‖_F`; `+∞` when the forward weight is zero.
pub fn weight_norm_ratio(wt: &Tensor, b: &Tensor) -> f64 {
    let wn = wt.frobenius_norm();
    if wn == 0.0 {
        log::warn!("norm ratio of a zero forward weight reported as +inf");
        return f64::INFINITY;
    }
    b.frobenius_norm() / wn
}

/// Angle in degrees between `vec(Wᵀ)` and `vec(B)`.
pub fn alignment_angle(wt: &Tensor, b: &Tensor) -> Option<f64> {
    if wt.shape() != b.shape() {
        return None;
    }
    let denom = wt.frobenius_norm() * b.frobenius_norm();
    if denom == 0.0 {
        return None;
    }
    let cos = (dot(wt, b).ok()? / denom).clamp(-1.0, 1.0);
    Some(cos.acos().to_degrees())
}

/// Diagnostics for every trainable layer that transports error; the DFA
/// output layer has no feedback matrix and is skipped.
pub fn layer_diagnostics(net: &Network) -> Vec<LayerDiagnostics> {
    let mode = net.mode();
    net.trainable_layers()
        .iter()
        .enumerate()
        .filter_map(|(i, t)| {
            let b = t.effective_backward_weight(mode)?;
            let wt = t.weight_transposed();
            let angle_deg = if mode == FeedbackMode::Dfa { None } else { alignment_angle(&wt, &b) };
            Some(LayerDiagnostics {
                layer: i,
                angle_deg,
                norm_ratio: weight_norm_ratio(&wt, &b),
            })
        })
        .collect()
}

/// Fraction of rows whose label ranks among the `k` largest logits; ties
/// favour the lower class index.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    if logits.ndim() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::invalid(
            "topk_accuracy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let c = logits.dim(1);
    if k == 0 || k > c {
        return Err(Error::invalid("topk_accuracy", format!("k = {k} out of range for {c} classes")));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = topk_hits(logits, labels, k)?;
    Ok(hits as f64 / labels.len() as f64)
}

/// Number of rows counted correct by [`topk_accuracy`].
pub fn topk_hits(logits: &Tensor, labels: &[usize], k: usize) -> Result<usize> {
    let c = logits.dim(1);
    let mut hits = 0;
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(Error::invalid("topk_accuracy", format!("label {y} out of range for {c} classes")));
        }
        let target = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::InitSpec;
    use crate::net::LayerSpec;
    use crate::tensor::Rng;

    #[test]
    fn ratio_cases() {
        let w = Rng::new(1).normal(&[5, 3], 0.0, 1.0).unwrap();
        assert!((weight_norm_ratio(&w, &w) - 1.0).abs() < 1e-15);
        assert!((weight_norm_ratio(&w, &w.scale(2.0)) - 2.0).abs() < 1e-15);
        assert_eq!(weight_norm_ratio(&Tensor::zeros(&[2, 2]), &w), f64::INFINITY);
    }

    #[test]
    fn ratio_matches_loop_oracle() {
        let mut rng = Rng::new(2);
        let w = rng.normal(&[7, 4], 0.0, 1.0).unwrap();
        let b = rng.uniform(&[7, 4], -1.0, 1.0).unwrap();
        let mut sw = 0.0;
        let mut sb = 0.0;
        for i in 0..28 {
            sw += w.data()[i] * w.data()[i];
            sb += b.data()[i] * b.data()[i];
        }
        assert!((weight_norm_ratio(&w, &b) - (sb.sqrt() / sw.sqrt())).abs() <= 1e-12);
    }

    #[test]
    fn angle_cases() {
        let w = Rng::new(3).normal(&[4, 6], 0.0, 1.0).unwrap();
        assert!(alignment_angle(&w, &w).unwrap().abs() < 1e-6);
        assert!((alignment_angle(&w, &w.scale(-1.0)).unwrap() - 180.0).abs() < 1e-6);
        let wt = Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0], &[1.0]]).unwrap();
        assert_eq!(alignment_angle(&wt, &b), Some(90.0));
        assert_eq!(alignment_angle(&wt, &Tensor::zeros(&[2, 1])), None);
        assert_eq!(alignment_angle(&wt, &Tensor::zeros(&[1, 2])), None);
    }

    #[test]
    fn angle_is_scale_invariant() {
        let mut rng = Rng::new(4);
        let w = rng.normal(&[10, 10], 0.0, 1.0).unwrap();
        let b = rng.normal(&[10, 10], 0.0, 1.0).unwrap();
        let a = alignment_angle(&w, &b).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            assert!((alignment_angle(&w, &b.scale(c)).unwrap() - a).abs() <= 1e-12);
        }
    }

    fn net(mode: FeedbackMode, hidden: usize) -> Network {
        Network::from_specs(
            "mlp",
            &[200],
            &[LayerSpec::Linear { out: hidden }, LayerSpec::Relu, LayerSpec::Linear { out: 10 }],
            mode,
            &InitSpec::default(),
            11,
        )
        .unwrap()
    }

    #[test]
    fn fresh_fa_layer_is_near_orthogonal() {
        let d = layer_diagnostics(&net(FeedbackMode::Fa, 100));
        let a = d[0].angle_deg.unwrap();
        assert!((80.0..=100.0).contains(&a), "{a}");
    }

    #[test]
    fn bp_diagnostics_are_trivial() {
        for d in layer_diagnostics(&net(FeedbackMode::Bp, 20)) {
            assert!(d.angle_deg.unwrap().abs() < 1e-6);
            assert!((d.norm_ratio - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn usf_ratio_matches_independent_formula() {
        let n = net(FeedbackMode::Usf, 20);
        let d = layer_diagnostics(&n);
        for (t, diag) in n.trainable_layers().iter().zip(&d) {
            let w = t.weight();
            let (fan_out, fan_in) = (w.dim(0), w.dim(1));
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let nonzero = w.data().iter().filter(|v| **v != 0.0).count() as f64;
            let wn = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((diag.norm_ratio - std * nonzero.sqrt() / wn).abs() <= 1e-12);
        }
    }

    #[test]
    fn dfa_reports_ratio_only() {
        let d = layer_diagnostics(&net(FeedbackMode::Dfa, 20));
        assert_eq!(d.len(), 1);
        assert!(d[0].angle_deg.is_none() && d[0].norm_ratio > 0.0);
    }

    #[test]
    fn topk_cases() {
        let mut rng = Rng::new(5);
        let logits = rng.normal(&[100, 10], 0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..100).map(|_| rng.below(10)).collect();
        assert_eq!(topk_accuracy(&logits, &labels, 10).unwrap(), 1.0);
        for k in [1, 3, 5] {
            let mut hits = 0;
            for (i, &y) in labels.iter().enumerate() {
                let mut idx: Vec<usize> = (0..10).collect();
                idx.sort_by(|&a, &b| logits.data()[i * 10 + b].partial_cmp(&logits.data()[i * 10 + a]).unwrap().then(a.cmp(&b)));
                if idx[..k].contains(&y) {
                    hits += 1;
                }
            }
            assert_eq!(topk_accuracy(&logits, &labels, k).unwrap(), hits as f64 / 100.0);
        }
        let sep = Tensor::from_rows(&[&[5.0, 0.0], &[0.0, 5.0]]).unwrap();
        assert_eq!(topk_accuracy(&sep, &[0, 1], 1).unwrap(), 1.0);
        assert!(topk_accuracy(&sep, &[0, 1], 3).is_err());
        assert!(topk_accuracy(&sep, &[0, 1], 0).is_err());
    }

    #[test]
    fn ties_favour_lower_index() {
        let t = Tensor::from_rows(&[&[1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(topk_accuracy(&t, &[0], 1).unwrap(), 1.0);
        assert_eq!(topk_accuracy(&t, &[1], 1).unwrap(), 0.0);
        assert_eq!(topk_accuracy(&t, &[1], 2).unwrap(), 1.0);
    }
}
