//! SGD with momentum and Adam.
//!
//! Both optimizers fold weight decay into the gradient (g <- g + wd * theta)
//! before the update. State buffers are kept per parameter in registration
//! order; the caller passes parameters and gradients in that same order on
//! every step.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

enum State {
    Sgd {
        cfg: SgdConfig,
        velocity: Vec<Vec<f32>>,
    },
    Adam {
        cfg: AdamConfig,
        step: u64,
        m: Vec<Vec<f32>>,
        v: Vec<Vec<f32>>,
    },
}

/// Optimizer with per-parameter state buffers.
pub struct Optimizer {
    state: State,
}

impl Optimizer {
    /// v <- momentum * v + g + wd * theta; theta <- theta - lr * v.
    pub fn sgd(cfg: SgdConfig, param_sizes: &[usize]) -> Self {
        let velocity = param_sizes.iter().map(|n| vec![0.0; *n]).collect();
        Optimizer {
            state: State::Sgd { cfg, velocity },
        }
    }

    /// Bias-corrected Adam; weight decay is added to the gradient.
    pub fn adam(cfg: AdamConfig, param_sizes: &[usize]) -> Self {
        let m = param_sizes.iter().map(|n| vec![0.0; *n]).collect();
        let v = param_sizes.iter().map(|n| vec![0.0; *n]).collect();
        Optimizer {
            state: State::Adam { cfg, step: 0, m, v },
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        match &mut self.state {
            State::Sgd { cfg, .. } => cfg.lr = lr,
            State::Adam { cfg, .. } => cfg.lr = lr,
        }
    }

    pub fn lr(&self) -> f32 {
        match &self.state {
            State::Sgd { cfg, .. } => cfg.lr,
            State::Adam { cfg, .. } => cfg.lr,
        }
    }

    /// Apply one update. `params` and `grads` must line up with the sizes the
    /// optimizer was built with; a `None` gradient is an error naming the
    /// parameter.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Tensor)],
        grads: &[Option<&[f32]>],
    ) -> Result<()> {
        let expected = match &self.state {
            State::Sgd { velocity, .. } => velocity.len(),
            State::Adam { m, .. } => m.len(),
        };
        if params.len() != expected || grads.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                expected,
                params.len(),
                grads.len()
            )));
        }
        for (idx, ((name, param), grad)) in params.iter_mut().zip(grads).enumerate() {
            let grad = grad.ok_or_else(|| Error::MissingGrad(name.to_string()))?;
            if grad.len() != param.numel() {
                return Err(Error::BadShape {
                    op: "optimizer step",
                    expected: format!("gradient of {} elements for `{}`", param.numel(), name),
                    got: vec![grad.len()],
                });
            }
            match &mut self.state {
                State::Sgd { cfg, velocity } => {
                    let vel = &mut velocity[idx];
                    let theta = param.data_mut();
                    for i in 0..theta.len() {
                        let g = grad[i] + cfg.weight_decay * theta[i];
                        vel[i] = cfg.momentum * vel[i] + g;
                        theta[i] -= cfg.lr * vel[i];
                    }
                }
                State::Adam { cfg, step, m, v } => {
                    // step is incremented once per call, below.
                    let t = (*step + 1) as f64;
                    let bc1 = 1.0 - (cfg.beta1 as f64).powf(t);
                    let bc2 = 1.0 - (cfg.beta2 as f64).powf(t);
                    let (mb, vb) = (&mut m[idx], &mut v[idx]);
                    let theta = param.data_mut();
                    for i in 0..theta.len() {
                        let g = grad[i] + cfg.weight_decay * theta[i];
                        mb[i] = cfg.beta1 * mb[i] + (1.0 - cfg.beta1) * g;
                        vb[i] = cfg.beta2 * vb[i] + (1.0 - cfg.beta2) * g * g;
                        let mhat = mb[i] as f64 / bc1;
                        let vhat = vb[i] as f64 / bc2;
                        theta[i] -= (cfg.lr as f64 * mhat / (vhat.sqrt() + cfg.eps as f64)) as f32;
                    }
                }
            }
        }
        if let State::Adam { step, .. } = &mut self.state {
            *step += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: Vec<f32>) -> Tensor {
        Tensor::new(vec![v.len()], v).unwrap()
    }

    #[test]
    fn sgd_single_step_matches_update_rule() {
        // lr 1, no momentum, no decay: theta = 2, g = 3 -> -1.
        let mut p = one_param(vec![2.0]);
        let mut opt = Optimizer::sgd(
            SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.0 },
            &[1],
        );
        opt.step(&mut [("p", &mut p)], &[Some(&[3.0])]).unwrap();
        assert_eq!(p.data(), &[-1.0]);
    }

    #[test]
    fn sgd_ten_steps_on_quadratic_contracts_by_0_8_per_step() {
        // f(theta) = theta^2, grad = 2 theta, lr 0.1 -> theta *= 0.8 each step.
        let mut p = one_param(vec![1.0]);
        let mut opt = Optimizer::sgd(
            SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 },
            &[1],
        );
        for _ in 0..10 {
            let g = [2.0 * p.data()[0]];
            opt.step(&mut [("p", &mut p)], &[Some(&g)]).unwrap();
        }
        assert!((p.data()[0] - 0.8f32.powi(10)).abs() < 1e-6);
        assert!((p.data()[0] - 0.107).abs() < 1e-3);
    }

    #[test]
    fn adam_first_step_is_roughly_lr_times_sign() {
        let mut p = one_param(vec![0.5, -0.25]);
        let mut opt = Optimizer::adam(AdamConfig::new(1e-3, 0.0), &[2]);
        opt.step(&mut [("p", &mut p)], &[Some(&[1.0, 1.0])]).unwrap();
        assert!((p.data()[0] - (0.5 - 1e-3)).abs() < 1e-8);
        assert!((p.data()[1] - (-0.25 - 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_with_zero_decay_is_a_no_op() {
        let mut p = one_param(vec![1.5, -2.5]);
        let before = p.data().to_vec();
        let mut sgd = Optimizer::sgd(
            SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 },
            &[2],
        );
        sgd.step(&mut [("p", &mut p)], &[Some(&[0.0, 0.0])]).unwrap();
        assert_eq!(p.data(), &before[..]);

        let mut adam = Optimizer::adam(AdamConfig::new(1e-3, 0.0), &[2]);
        adam.step(&mut [("p", &mut p)], &[Some(&[0.0, 0.0])]).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = one_param(vec![1.0]);
        let mut opt = Optimizer::sgd(
            SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 },
            &[1],
        );
        let err = opt.step(&mut [("conv1.weight", &mut p)], &[None]).unwrap_err();
        assert!(err.to_string().contains("conv1.weight"), "{err}");
    }

    #[test]
    fn weight_decay_pulls_parameters_toward_zero() {
        let mut p = one_param(vec![1.0]);
        let mut opt = Optimizer::sgd(
            SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.5 },
            &[1],
        );
        opt.step(&mut [("p", &mut p)], &[Some(&[0.0])]).unwrap();
        // g_eff = 0 + 0.5 * 1.0 -> theta = 1 - 0.1 * 0.5.
        assert!((p.data()[0] - 0.95).abs() < 1e-7);
    }
}
