//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWState {
    pub fn new(len: usize, cfg: AdamWConfig) -> Result<Self> {
        for (name, b) in [("beta1", cfg.beta1), ("beta2", cfg.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {b}")));
            }
        }
        Ok(AdamWState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        })
    }
}

/// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
pub fn adamw_step(param: &mut Tensor, grad: Option<&[f64]>, state: &mut AdamWState, lr: f64) -> Result<()> {
    let grad = grad.ok_or_else(|| Error::Contract("adamw_step called on a parameter without a gradient".into()))?;
    if grad.len() != param.len() || state.m.len() != param.len() {
        return Err(Error::Contract(format!(
            "optimizer state sized {} for a parameter of {} values",
            state.m.len(),
            param.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * *p);
    }
    Ok(())
}

/// Optimizer over every trainable tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    states: Vec<Option<AdamWState>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        let states = store
            .iter()
            .map(|p| if p.trainable { AdamWState::new(p.value.len(), cfg).map(Some) } else { Ok(None) })
            .collect::<Result<_>>()?;
        Ok(AdamW { cfg, states })
    }

    pub fn config(&self) -> AdamWConfig {
        self.cfg
    }

    /// Updates every trainable parameter that holds a gradient, then clears
    /// the gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        for (param, state) in store.iter_mut().zip(&mut self.states) {
            if let Some(state) = state {
                if param.grad.is_some() {
                    adamw_step(&mut param.value, param.grad.as_deref(), state, lr)?;
                }
            }
            param.grad = None;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut p = Tensor::scalar(theta);
        let mut st = AdamWState::new(1, AdamWConfig { weight_decay: wd, ..Default::default() }).unwrap();
        adamw_step(&mut p, Some(&[g]), &mut st, lr).unwrap();
        assert_eq!(st.step, 1);
        p.item()
    }

    #[test]
    fn worked_examples() {
        assert!((one_step(1.0, 1.0, 0.01, 0.0) - 0.99).abs() < 1e-9);
        assert_eq!(one_step(1.0, 0.0, 0.01, 0.0), 1.0);
        assert!((one_step(1.0, 1.0, 0.01, 0.1) - 0.989).abs() < 1e-9);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamWState::new(1, AdamWConfig::default()).unwrap();
        assert!(matches!(adamw_step(&mut p, None, &mut st, 0.1), Err(Error::Contract(_))));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(AdamWState::new(1, AdamWConfig { beta1: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::new(&[2], vec![3.0, -2.0]).unwrap();
        let mut st = AdamWState::new(2, AdamWConfig::default()).unwrap();
        for _ in 0..2000 {
            let g: Vec<f64> = p.data().iter().map(|v| 2.0 * v).collect();
            adamw_step(&mut p, Some(&g), &mut st, 0.05).unwrap();
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-2), "{:?}", p);
    }
}
