//! String-keyed Adam with global-norm gradient clipping.
//!
//! Parameters live outside the optimizer as plain tensors; callers look up
//! gradients per key after backward and hand them in. Keys give deterministic
//! state identity across steps regardless of binding order.

use std::collections::HashMap;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, AdamState>,
}

struct AdamState {
    step: u64,
    m: Tensor,
    v: Tensor,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, state: HashMap::new() }
    }

    /// One update for a single parameter; the learning rate is passed per
    /// call so schedules stay in the caller's hands.
    pub fn step(&mut self, key: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Dim(format!(
                "param/grad shape mismatch for {key}: {:?} vs {:?}",
                param.shape(),
                grad.shape()
            )));
        }
        let st = self.state.entry(key.to_string()).or_insert_with(|| AdamState {
            step: 0,
            m: Tensor::zeros(param.rows(), param.cols()),
            v: Tensor::zeros(param.rows(), param.cols()),
        });
        st.step += 1;
        let t = st.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        st.m = st.m.scale(b1).zip_map(grad, |m, g| m + (1.0 - b1) * g)?;
        st.v = st.v.scale(b2).zip_map(grad, |v, g| v + (1.0 - b2) * g * g)?;
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        let eps = self.eps;
        let upd = st.m.zip_map(&st.v, |m, v| {
            let mh = m / c1;
            let vh = v / c2;
            mh / (vh.sqrt() + eps)
        })?;
        param.axpy(-lr, &upd)?;
        param.check_finite("adam update")
    }
}

/// Scales all gradients in place so their joint L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(&str, Tensor)], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let k = max_norm / total;
        for (_, g) in grads.iter_mut() {
            *g = g.scale(k);
        }
    }
    total
}

/// Cosine decay from `lr` to 0 over `total` steps.
pub fn cosine_lr(lr: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let x = (step as f64 / total as f64).min(1.0);
    lr * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_quadratic() {
        // min (x - 3)^2; gradient 2(x - 3).
        let mut opt = Adam::new();
        let mut x = Tensor::scalar(0.0);
        for _ in 0..400 {
            let g = Tensor::scalar(2.0 * (x.get(0, 0) - 3.0));
            opt.step("x", &mut x, &g, 0.05).unwrap();
        }
        assert!((x.get(0, 0) - 3.0).abs() < 1e-3, "got {}", x.get(0, 0));
    }

    #[test]
    fn clip_preserves_direction_and_caps_norm() {
        let g1 = Tensor::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let g2 = Tensor::from_rows(&[vec![0.0, 4.0]]).unwrap();
        let mut grads = vec![("a", g1), ("b", g2)];
        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((grads[0].1.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((grads[1].1.get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 100), 1.0);
        assert!(cosine_lr(1.0, 100, 100).abs() < 1e-15);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
    }
}
