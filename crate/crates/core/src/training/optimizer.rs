use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Parameters;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// `θ − η g`.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2) && self.adam_eps >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "optimizer: betas must lie in [0, 1) and eps must be >= 0".into(),
            ))
        }
    }
}

/// First and second moments for a list of tensors, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_params(params: &Parameters<T>) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.len()).collect();
        Self::new(&sizes)
    }
}

/// One optimizer step over parallel lists of parameter and gradient tensors.
pub fn step_tensors<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
    learning_rate: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer got {} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() {
            return Err(Error::InvalidArgument(format!(
                "gradient {i} has shape {:?}, parameter has {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let lr = T::from_f64_lossy(learning_rate);
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (x, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                    *x = *x - lr * gi;
                }
            }
        }
        OptimizerKind::Adam => {
            let t = state.step as i32;
            let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
            let bc1 = T::from_f64_lossy(1.0 - b1.powi(t));
            let bc2 = T::from_f64_lossy(1.0 - b2.powi(t));
            let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
            let eps = T::from_f64_lossy(cfg.adam_eps);
            let one = T::one();
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                    *mi = b1 * *mi + (one - b1) * gi;
                    *vi = b2 * *vi + (one - b2) * gi * gi;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    let denom = v_hat.sqrt() + eps;
                    if denom > T::zero() {
                        *x = *x - lr * m_hat / denom;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Updates every tensor of `params` from the congruent `grads`.
pub fn apply_update<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &Parameters<T>,
    state: &mut OptimizerState<T>,
    learning_rate: f64,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.config != grads.config {
        return Err(Error::InvalidArgument(
            "gradients belong to a different model configuration".into(),
        ));
    }
    let mut p: Vec<&mut Tensor<T>> = params.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
    let g: Vec<&Tensor<T>> = grads.named_tensors().into_iter().map(|(_, t)| t).collect();
    step_tensors(&mut p, &g, state, learning_rate, cfg)
}
