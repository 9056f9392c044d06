use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean over the batch of `w[y] · −log softmax(logits)[y]`, with its
/// gradient with respect to the logits.
pub fn weighted_cross_entropy(logits: &Tensor, labels: &[usize], weights: &[f64]) -> Result<(f64, Tensor)> {
    let c = logits.last_dim();
    let b = labels.len();
    if logits.len() != b * c || weights.len() != c {
        return Err(Error::Shape(format!(
            "logits {:?}, {} labels, {} class weights",
            logits.shape(),
            b,
            weights.len()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Data("non-finite logits".into()));
    }
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    if b == 0 {
        return Ok((0.0, grad));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Data(format!("label {y} out of range for {c} classes")));
        }
        let row = &logits.data()[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let w = weights[y];
        loss += w * (lse - row[y]);
        let g = &mut grad.data_mut()[r * c..(r + 1) * c];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = w * inv_b * (row[k] - lse).exp();
        }
        g[y] -= w * inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Mean squared error of `[B, 1]` predictions, with gradient `2(p − y)/B`.
pub fn mse_loss(pred: &Tensor, targets: &[f64]) -> Result<(f64, Tensor)> {
    if pred.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            targets.len()
        )));
    }
    let b = targets.len();
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    if b == 0 {
        return Ok((0.0, grad));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for (i, (&p, &t)) in pred.data().iter().zip(targets).enumerate() {
        let r = p - t;
        loss += r * r;
        grad.data_mut()[i] = 2.0 * r * inv_b;
    }
    Ok((loss * inv_b, grad))
}
