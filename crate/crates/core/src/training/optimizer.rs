//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Optimizer state: moments are flattened in `Params` visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub learning_rate: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, learning_rate: f64, scalar_count: usize) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) || config.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0,1) and eps must be positive".into()));
        }
        Ok(Self {
            config,
            learning_rate,
            step: 0,
            m: vec![0.0; scalar_count],
            v: vec![0.0; scalar_count],
        })
    }

    pub fn for_params(config: AdamConfig, learning_rate: f64, params: &impl Params) -> Result<Self> {
        Self::new(config, learning_rate, params.scalar_count())
    }

    /// One update of every scalar in `params` from the matching scalar in `grads`.
    pub fn update<P: Params>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.slices();
        let total: usize = grads.iter().map(|s| s.len()).sum();
        if total != self.m.len() {
            return shape_err(format!("optimizer tracks {} scalars, gradient has {total}", self.m.len()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = self.learning_rate;
        let mut offset = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grads) {
            if p.len() != g.len() {
                return shape_err("parameter and gradient tensors differ in size");
            }
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * p[i]);
            }
            offset += p.len();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A single scalar parameter.
    struct Scalar([f64; 1]);

    impl Params for Scalar {
        fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &'a [f64])) {
            f(prefix.to_string(), vec![1], &self.0);
        }
        fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut [f64])) {
            f(&mut self.0);
        }
    }

    #[test]
    fn matches_scalar_reference() {
        // minimise (x - 3)^2 from x = 0
        let cfg = AdamConfig::default();
        let lr = 0.05;
        let mut x = Scalar([0.0]);
        let mut opt = Adam::new(cfg, lr, 1).unwrap();
        let (mut rx, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * (x.0[0] - 3.0);
            opt.update(&mut x, &Scalar([g])).unwrap();

            let rg = 2.0 * (rx - 3.0);
            m = 0.9 * m + 0.1 * rg;
            v = 0.999 * v + 0.001 * rg * rg;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            rx -= lr * (mh / (vh.sqrt() + 1e-8) + 1e-4 * rx);
            assert!((x.0[0] - rx).abs() <= 1e-12, "step {t}: {} vs {rx}", x.0[0]);
        }
        assert!((x.0[0] - 3.0).abs() < 0.1);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut x = Scalar([1.5]);
        let mut opt = Adam::new(AdamConfig::default(), 0.0, 1).unwrap();
        opt.update(&mut x, &Scalar([10.0])).unwrap();
        assert_eq!(x.0[0], 1.5);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Adam::new(AdamConfig::default(), -1.0, 1).is_err());
        assert!(Adam::new(AdamConfig { beta1: 1.0, ..Default::default() }, 0.1, 1).is_err());
        let mut opt = Adam::new(AdamConfig::default(), 0.1, 2).unwrap();
        assert!(opt.update(&mut Scalar([0.0]), &Scalar([1.0])).is_err());
    }
}
