use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::gcn::Parameter;
use super::tape::{AutodiffError, Result};
use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl OptimizerState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Parameter>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Matrix::zeros(p.value.dim()), Matrix::zeros(p.value.dim())))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }
}

/// One bias-corrected Adam update. Every parameter must carry a gradient;
/// gradients are cleared afterwards.
pub fn optimizer_step<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    state: &mut OptimizerState,
) -> Result<()> {
    let mut params: Vec<&mut Parameter> = params.into_iter().collect();
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    if let Some(index) = params.iter().position(|p| p.grad.is_none()) {
        return Err(AutodiffError::MissingGrad { index });
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.take().expect("checked above");
        Zip::from(&mut p.value)
            .and(m)
            .and(v)
            .and(&g)
            .for_each(|w, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    Ok(())
}
