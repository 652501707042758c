//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use crate::autodiff::ParamSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, params: &ParamSet) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: params.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently stored in `params`.
    /// Decay is decoupled and applied before the adaptive step.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for p in &params.params {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter '{}'", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.params.iter_mut().enumerate() {
            let decay = 1.0 - self.lr * self.weight_decay;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let value = p.value.data_mut();
            let grad = p.grad.data();
            for j in 0..value.len() {
                let g = grad[j];
                let mj = self.beta1 * m.data()[j] + (1.0 - self.beta1) * g;
                let vj = self.beta2 * v.data()[j] + (1.0 - self.beta2) * g * g;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                value[j] = value[j] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine interpolation between two learning rates.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: u64,
}

pub fn cosine_lr(schedule: &Schedule, t: u64) -> Result<f64> {
    if t > schedule.total_steps {
        return Err(Error::Domain(format!(
            "schedule step {t} beyond total {}",
            schedule.total_steps
        )));
    }
    let frac = t as f64 / schedule.total_steps as f64;
    Ok(schedule.lr_end
        + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> ParamSet {
        let mut p = ParamSet::default();
        p.push("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn first_step_hand_computed() {
        // grad 1, lr 0.1, wd 0: m_hat = 1, v_hat = 1 -> 1 - 0.1/(1 + 1e-8).
        let mut params = scalar_params(1.0);
        params.params[0].grad = Tensor::scalar(1.0);
        let mut opt = AdamW::new(0.1, 0.0, &params);
        opt.step(&mut params).unwrap();
        let got = params.params[0].value.item();
        assert!((got - 0.9000000010).abs() < 1e-9, "{got}");
    }

    #[test]
    fn zero_grad_is_identity_without_decay() {
        let mut params = scalar_params(0.7);
        let mut opt = AdamW::new(0.1, 0.0, &params);
        opt.step(&mut params).unwrap();
        assert_eq!(params.params[0].value.item(), 0.7);
    }

    #[test]
    fn pure_decay_with_zero_grad() {
        let mut params = scalar_params(1.0);
        let mut opt = AdamW::new(0.1, 0.01, &params);
        opt.step(&mut params).unwrap();
        assert!((params.params[0].value.item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn three_steps_match_closed_form() {
        // Constant gradient g, wd 0: the bias corrections cancel so every
        // step moves by exactly -lr (up to eps).
        let g = 0.3;
        let lr = 0.05;
        let mut params = scalar_params(2.0);
        let mut opt = AdamW::new(lr, 0.0, &params);
        let mut want = 2.0;
        for _ in 0..3 {
            params.params[0].grad = Tensor::scalar(g);
            opt.step(&mut params).unwrap();
            want -= lr * g / (g + opt.eps);
            let got = params.params[0].value.item();
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = ParamSet::default();
        params.push("conv1.weight", Tensor::scalar(1.0));
        params.params[0].grad = Tensor::scalar(f64::NAN);
        let mut opt = AdamW::new(0.1, 0.0, &params);
        let err = opt.step(&mut params).unwrap_err().to_string();
        assert!(err.contains("conv1.weight"), "{err}");
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = Schedule {
            lr_start: 1e-4,
            lr_end: 1e-6,
            total_steps: 100,
        };
        assert_eq!(cosine_lr(&s, 0).unwrap(), 1e-4);
        let end = cosine_lr(&s, 100).unwrap();
        assert!((end - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(&s, 50).unwrap();
        assert!((mid - 5.05e-5).abs() < 1e-12, "{mid}");
        assert!(cosine_lr(&s, 101).is_err());
        // Bounded by the endpoints everywhere.
        for t in 0..=100 {
            let lr = cosine_lr(&s, t).unwrap();
            assert!((1e-6..=1e-4).contains(&lr));
        }
    }
}
