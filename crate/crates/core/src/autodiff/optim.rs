//! Adam and RAdam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    RAdam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn radam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::RAdam,
            ..Self::adam(learning_rate)
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl OptimizerState {
    /// Zero accumulators shaped like `params`.
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second_moment: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.first_moment[i].shape() || g.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "tensor {i}: param {:?}, grad {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    self.first_moment[i].shape()
                )));
            }
        }

        self.step += 1;
        let OptimizerConfig {
            kind,
            learning_rate: lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);

        // RAdam: variance rectification once the approximated SMA length exceeds 5,
        // otherwise an un-adapted momentum step.
        let rectifier = match kind {
            OptimizerKind::Adam => Some(1.0),
            OptimizerKind::RAdam => {
                let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
                let rho_t = rho_inf - 2.0 * t as f64 * beta2.powi(t) / bias2;
                (rho_t > 5.0).then(|| {
                    ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
                        / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                        .sqrt()
                })
            }
        };

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                if weight_decay != 0.0 {
                    p[i] -= lr * weight_decay * p[i];
                }
                let m_hat = m[i] / bias1;
                p[i] -= match rectifier {
                    Some(r) => lr * r * m_hat / ((v[i] / bias2).sqrt() + eps),
                    None => lr * m_hat,
                };
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_fixed_point() {
        for cfg in [OptimizerConfig::adam(0.1), OptimizerConfig::radam(0.1)] {
            let mut params = vec![Tensor::from_vec(vec![1.0, -2.0, 3.0])];
            let before = params.clone();
            let mut state = OptimizerState::new(cfg, &params);
            for _ in 0..10 {
                state.step(&mut params, &[Tensor::zeros(&[3])]).unwrap();
            }
            assert_eq!(params, before);
            assert_eq!(state.step_count(), 10);
        }
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate_against_gradient_sign() {
        let cfg = OptimizerConfig {
            eps: 0.0,
            ..OptimizerConfig::adam(0.01)
        };
        let mut params = vec![Tensor::from_vec(vec![0.0, 0.0, 0.0])];
        let mut state = OptimizerState::new(cfg, &params);
        state
            .step(&mut params, &[Tensor::from_vec(vec![3.0, -0.5, 1e-3])])
            .unwrap();
        for (p, want) in params[0].data().iter().zip([-0.01, 0.01, -0.01]) {
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = OptimizerConfig::adam(0.1).with_weight_decay(0.5);
        let mut params = vec![Tensor::from_vec(vec![2.0])];
        let mut state = OptimizerState::new(cfg, &params);
        state.step(&mut params, &[Tensor::zeros(&[1])]).unwrap();
        // zero gradient: only the decay term p ← p − lr·wd·p applies
        assert!((params[0].data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let mut state = OptimizerState::new(OptimizerConfig::adam(0.1), &params);
        assert!(state.step(&mut params, &[Tensor::zeros(&[3])]).is_err());
        let mut other = vec![Tensor::zeros(&[3])];
        assert!(state.step(&mut other, &[Tensor::zeros(&[3])]).is_err());
        assert_eq!(state.step_count(), 0);
    }

    #[test]
    fn radam_warmup_uses_plain_momentum() {
        // the SMA length stays ≤ 5 for the first few steps with β2 = 0.999
        let mut params = vec![Tensor::from_vec(vec![0.0])];
        let mut state = OptimizerState::new(OptimizerConfig::radam(0.1), &params);
        state.step(&mut params, &[Tensor::from_vec(vec![2.0])]).unwrap();
        // m̂ = g on the first step
        assert!((params[0].data()[0] + 0.2).abs() < 1e-12);
    }
}
