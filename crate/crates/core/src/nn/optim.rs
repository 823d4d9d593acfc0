use serde::{Deserialize, Serialize};

use super::{parameters, parameters_mut, Layer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// `w ← w − η·g`
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
    check_shapes(param, grad)?;
    for (w, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *w -= lr * g;
    }
    Ok(())
}

/// One bias-corrected Adam update of a single tensor. `t` is the step number
/// after incrementing, so the first call passes `t = 1`.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    first: &mut Tensor,
    second: &mut Tensor,
    t: u64,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    check_shapes(param, grad)?;
    check_shapes(param, first)?;
    check_shapes(param, second)?;
    let t = i32::try_from(t).map_err(|_| Error::input("adam step counter overflow"))?;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (m, v) = (first.data_mut(), second.data_mut());
    for (i, (w, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::dim(format!("optimizer shapes {:?} and {:?}", a.shape(), b.shape())))
    }
}

/// Optimizer plus its per-parameter accumulators for one layer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub adam: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, layers: &[Layer]) -> Self {
        let first: Vec<Tensor> = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => parameters(layers)
                .into_iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        };
        Self {
            kind,
            adam: AdamConfig::default(),
            second: first.clone(),
            first,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update to every parameter of `layers`. `grads` is ordered as
    /// [`crate::nn::parameters`].
    pub fn step(&mut self, layers: &mut [Layer], grads: &[Tensor], lr: f64) -> Result<()> {
        let mut params = parameters_mut(layers);
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    sgd_step(p, g, lr)?;
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() != grads.len() {
                    return Err(Error::dim("optimizer state was built for a different stack"));
                }
                self.t += 1;
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    adam_step(p, g, &mut self.first[i], &mut self.second[i], self.t, &self.adam, lr)?;
                }
            }
        }
        Ok(())
    }
}
