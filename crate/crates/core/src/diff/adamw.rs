//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: one pair of moment buffers per parameter, in the order the
/// parameters are passed to [`AdamW::step`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter. The parameter list must have the
    /// same order and shapes on every call.
    pub fn step<'a, S, I>(&mut self, params: I) -> Result<()>
    where
        S: AsRef<str>,
        I: IntoIterator<Item = (S, &'a mut Tensor)>,
    {
        let mut params: Vec<(S, &mut Tensor)> = params.into_iter().collect();
        for (name, p) in &params {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(name.as_ref().to_string()));
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, p)| Moments {
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect();
        } else if self.moments.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;

        for ((name, p), mom) in params.iter_mut().zip(&mut self.moments) {
            if mom.m.len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: vec![mom.m.len()],
                    rhs: p.shape().to_vec(),
                });
            }
            let grad = p
                .grad()
                .ok_or_else(|| Error::MissingGrad(name.as_ref().to_string()))?
                .to_vec();
            for (i, (w, g)) in p.values_mut().iter_mut().zip(&grad).enumerate() {
                let m = beta1 * mom.m[i] + (1.0 - beta1) * g;
                let v = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
                mom.m[i] = m;
                mom.v[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *w *= decay;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(value: f64, grad: f64) -> Tensor {
        let mut p = Tensor::scalar(value).with_grad();
        p.accumulate_grad(&[grad]).unwrap();
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = scalar_param(0.37, 0.0);
        for _ in 0..5 {
            opt.step([("p", &mut p)]).unwrap();
        }
        assert_eq!(p.values(), &[0.37]);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: m̂ = g, v̂ = g², update = lr·g/(|g| + eps).
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let mut p = scalar_param(1.0, 1.0);
        opt.step([("p", &mut p)]).unwrap();
        let expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.values()[0] - expected).abs() < 1e-15);
        assert!((1.0 - p.values()[0] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn pure_decay_with_zero_grad() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = scalar_param(2.5, 0.0);
        opt.step([("p", &mut p)]).unwrap();
        assert_eq!(p.values()[0], 2.5 * (1.0 - 1e-3 * 1e-3));
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = Tensor::scalar(1.0).with_grad();
        let err = opt.step([("fc1.weight", &mut p)]).unwrap_err();
        assert!(err.to_string().contains("fc1.weight"));
    }

    #[test]
    fn zero_decay_matches_plain_adam() {
        // Plain Adam reference, written out independently.
        let grads = [0.5, -1.2, 0.3, 2.0, -0.1];
        let (lr, b1, b2, eps) = (1e-2, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (0.8f64, 0.0f64, 0.0f64);
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            weight_decay: 0.0,
            beta1: b1,
            beta2: b2,
            eps,
        });
        let mut p = Tensor::scalar(0.8).with_grad();
        for (t, g) in grads.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            w -= lr * mh / (vh.sqrt() + eps);
            p.zero_grad();
            p.accumulate_grad(&[*g]).unwrap();
            opt.step([("p", &mut p)]).unwrap();
            assert!((p.values()[0] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn step_moves_against_moment_sign() {
        for g in [0.7, -0.4] {
            let mut opt = AdamW::new(AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            });
            let mut p = scalar_param(0.0, g);
            opt.step([("p", &mut p)]).unwrap();
            assert_eq!(p.values()[0].signum(), -f64::signum(g));
        }
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        let mut p = scalar_param(-0.123456789, 3.3);
        opt.step([("p", &mut p)]).unwrap();
        assert_eq!(p.values()[0].to_bits(), (-0.123456789f64).to_bits());
    }
}
