//! SGD with momentum and L2 weight decay.

use crate::error::{Error, Result};
use alloc::string::ToString;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidInput("lr must be finite and >= 0".to_string()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput("momentum must lie in [0, 1)".to_string()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidInput("weight_decay must be finite and >= 0".to_string()));
        }
        Ok(())
    }
}

/// One update, elementwise:
/// `v <- momentum * v + (g + weight_decay * w)`, then `w <- w - lr * v`.
pub fn sgd_step(params: &mut [f64], velocity: &mut [f64], grads: &[f64], cfg: &SgdConfig) {
    assert_eq!(params.len(), velocity.len(), "velocity buffer shape");
    assert_eq!(params.len(), grads.len(), "gradient buffer shape");
    for ((w, v), &g) in params.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        *v = cfg.momentum * *v + (g + cfg.weight_decay * *w);
        *w -= cfg.lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanilla_sgd() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 };
        let mut w = [1.0, -2.0];
        let mut v = [0.0; 2];
        sgd_step(&mut w, &mut v, &[0.5, 1.0], &cfg);
        assert_eq!(w, [1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn velocity_decays_geometrically() {
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut w = [0.0];
        let mut v = [0.0];
        sgd_step(&mut w, &mut v, &[1.0], &cfg);
        assert_eq!(v[0], 1.0);
        for k in 1..5 {
            let before = v[0];
            sgd_step(&mut w, &mut v, &[0.0], &cfg);
            assert_eq!(v[0], 0.9 * before);
            assert!((v[0] - 0.9f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn two_steps_match_hand_unroll() {
        // Toy objective f(w) = 0.5 * c * w^2, gradient c * w.
        let (c, lr, mu, wd) = (3.0, 0.05, 0.9, 0.01);
        let cfg = SgdConfig { lr, momentum: mu, weight_decay: wd };
        let w0 = 2.0;
        let v1 = c * w0 + wd * w0;
        let w1 = w0 - lr * v1;
        let v2 = mu * v1 + c * w1 + wd * w1;
        let w2 = w1 - lr * v2;

        let mut w = [w0];
        let mut v = [0.0];
        for _ in 0..2 {
            let g = [c * w[0]];
            sgd_step(&mut w, &mut v, &g, &cfg);
        }
        assert!((w[0] - w2).abs() < 1e-15);
        assert!((v[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(SgdConfig::default().validate().is_ok());
        assert!(SgdConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(SgdConfig { weight_decay: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
