use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of `N×C` logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.ndim() != 2 {
        return Err(Error::invalid("softmax", format!("expected N×C logits, got {:?}", logits.shape())));
    }
    let c = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy and its derivative w.r.t. the logits,
/// `(softmax − onehot) / N`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.ndim() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::invalid(
            "cross_entropy",
            format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        ));
    }
    let (n, c) = (logits.dim(0), logits.dim(1));
    if n == 0 {
        return Err(Error::invalid("cross_entropy", "empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {c} classes")));
    }
    let mut delta = softmax(logits)?;
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.data().chunks(c).zip(labels).enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        delta.data_mut()[i * c + y] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    Ok((loss * inv, delta.scale(inv)))
}
