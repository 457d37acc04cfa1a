//! AdamW with decoupled weight decay, and the cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to arrays with more than one row; biases and norm gains are exempt.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: ParamSet,
    pub second: ParamSet,
    pub steps: u64,
}

impl Moments {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        let zero = |s: &ParamSet| s.iter().all(|(_, m)| m.iter().all(|&v| v == 0.0));
        self.steps == 0 && zero(&self.first) && zero(&self.second)
    }
}

pub fn adamw_step(
    cfg: &AdamWConfig,
    params: &mut ParamSet,
    grads: &ParamSet,
    moments: &mut Moments,
    lr: f64,
) {
    moments.steps += 1;
    let t = moments.steps as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).expect("gradient for every trainable array");
        let m = moments.first.get_mut(name).expect("first moment");
        m.zip_mut_with(g, |m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
        let v = moments.second.get_mut(name).expect("second moment");
        v.zip_mut_with(g, |v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
        let decay = if p.nrows() > 1 { lr * cfg.weight_decay } else { 0.0 };
        let m = moments.first.get(name).unwrap();
        let v = moments.second.get(name).unwrap();
        ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
            *p -= decay * *p;
            *p -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        });
    }
}

/// Cosine decay from `base` at step 0 towards 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Matrix;
    use ndarray::array;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params_untouched() {
        let mut p = ParamSet::new();
        p.insert("w".into(), array![[1.0, -2.0], [0.5, 3.0]]);
        let before = p.clone();
        let mut g = ParamSet::new();
        g.insert("w".into(), Matrix::ones((2, 2)));
        let mut m = Moments::zeros_like(&p);
        adamw_step(&AdamWConfig::default(), &mut p, &g, &mut m, 0.0);
        assert_eq!(p, before);
        assert!(!m.is_zero());
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ParamSet::new();
        p.insert("b".into(), array![[0.0, 0.0]]);
        let mut g = ParamSet::new();
        g.insert("b".into(), array![[2.0, -0.5]]);
        let mut m = Moments::zeros_like(&p);
        adamw_step(&AdamWConfig::default(), &mut p, &g, &mut m, 0.01);
        let b = p.get("b").unwrap();
        assert!((b[[0, 0]] + 0.01).abs() < 1e-9);
        assert!((b[[0, 1]] - 0.01).abs() < 1e-9);
    }
}
