use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// ∂loss/∂logits, same shape as the logits.
    pub grad: Tensor,
}

/// Mean softmax cross-entropy over the batch.
pub fn loss_softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let w = 1.0 / logits.rows() as f64;
    softmax_ce_weighted(logits, labels, &vec![w; logits.rows()])
}

/// Softmax cross-entropy with an explicit weight per row:
/// `loss = Σ_r w_r · (−log softmax(z_r)[y_r])`, `grad_r = w_r · (softmax(z_r) − onehot(y_r))`.
///
/// With `w_r = 1/b` this is the batch mean. The server uses `w_r = δ_i / b_i`
/// for the rows of client `i`.
pub fn softmax_ce_weighted(logits: &Tensor, labels: &[usize], row_weights: &[f64]) -> Result<LossOutput> {
    if logits.shape().len() != 2 {
        return Err(Error::dim(format!("logits must be [batch, classes], got {:?}", logits.shape())));
    }
    let (n, classes) = (logits.rows(), logits.cols());
    if labels.len() != n || row_weights.len() != n {
        return Err(Error::dim(format!(
            "{n} logit rows but {} labels and {} weights",
            labels.len(),
            row_weights.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::input(format!("label {bad} out of range for {classes} classes")));
    }

    let mut grad = logits.clone();
    let mut loss = 0.0;
    for r in 0..n {
        let y = labels[r];
        let row = grad.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let log_norm = sum.ln();
        let shifted_label = logits.row(r)[y] - max;
        loss += row_weights[r] * (log_norm - shifted_label);
        for v in row.iter_mut() {
            *v /= sum;
        }
        row[y] -= 1.0;
        row.iter_mut().for_each(|v| *v *= row_weights[r]);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy loss".into()));
    }
    Ok(LossOutput { loss, grad })
}
