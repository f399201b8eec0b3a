//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Optimizer state for a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[&Mat]) -> Self {
        let zeros = |p: &&Mat| Mat::zeros(p.rows(), p.cols());
        Self {
            cfg,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    /// One update; `grads[i]` must match the shape of `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let ps = p.as_mut_slice();
            for i in 0..ps.len() {
                let gi = g.as_slice()[i];
                let mi = &mut m.as_mut_slice()[i];
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                let vi = &mut v.as_mut_slice()[i];
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                ps[i] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * ps[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = Mat::from_rows(&[[3.0, -2.0]]);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0), &[&x]);
        for _ in 0..500 {
            let g = x.scale(2.0);
            opt.step(&mut [&mut x], &[g]);
        }
        assert!(x.frobenius_norm() < 1e-2, "{x:?}");
    }

    #[test]
    fn decay_shrinks_weights_with_zero_gradient() {
        let mut x = Mat::from_rows(&[[1.0]]);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.5), &[&x]);
        opt.step(&mut [&mut x], &[Mat::zeros(1, 1)]);
        assert!((x.item() - 0.95).abs() < 1e-12);
    }
}
