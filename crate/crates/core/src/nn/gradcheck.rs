use crate::tensor::Tensor;

/// Central-difference estimate of ∂f/∂p for every entry of `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = params.clone();
    let mut grad = Tensor::zeros(params.shape());
    for i in 0..params.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `|a − b| / max(|a|, |b|, 1e-5)`. The floor keeps gradients that are zero up
/// to difference round-off from dominating the comparison.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}
