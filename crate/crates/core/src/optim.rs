//! Adaptive-moment optimizer with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Matrix<T>>) -> Self {
        let m: Vec<Matrix<T>> = shapes.into_iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update of every tensor in `params` with the matching gradient.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Matrix<T>>, grads: &[Matrix<T>], cfg: &AdamWConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (lr, wd, eps) = (T::of(cfg.lr), T::of(cfg.weight_decay), T::of(cfg.eps));
        let (c1, c2) = (T::of(c1), T::of(c2));
        let mut n = 0;
        for (i, p) in params.into_iter().enumerate() {
            n += 1;
            let g = &grads[i];
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for tensor {i}");
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1t * *mi + (T::one() - b1t) * gi;
                *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * (mhat / (vhat.sqrt() + eps) + wd * *x);
            }
        }
        assert_eq!(n, grads.len(), "parameter and gradient counts differ");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_formula() {
        let mut p = Matrix::from_vec(1, 2, vec![1.0f64, -2.0]);
        let g = Matrix::from_vec(1, 2, vec![0.5, 0.0]);
        let mut opt = AdamW::new([&p]);
        let cfg = AdamWConfig::default();
        opt.update([&mut p], &[g], &cfg);
        // Bias correction makes the first moment step exactly lr·sign(g).
        let want0 = 1.0 - 0.005 * (0.5 / (0.5 + 1e-8) + 0.001);
        assert!((p.get(0, 0) - want0).abs() < 1e-15);
        assert!((p.get(0, 1) - (-2.0 + 0.005 * 0.001 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Matrix::from_vec(1, 3, vec![1.0f32, 2.0, 3.0]);
        let before = p.clone();
        let mut opt = AdamW::new([&p]);
        let cfg = AdamWConfig { lr: 0.0, ..Default::default() };
        opt.update([&mut p], &[Matrix::filled(1, 3, 1.0)], &cfg);
        assert_eq!(p, before);
    }
}
