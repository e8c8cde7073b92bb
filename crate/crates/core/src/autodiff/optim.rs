use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::ParamStore;
use crate::error::{Error, Result};

/// Adam with bias correction. The learning rate is a plain field so a
/// schedule can overwrite it between steps.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, moments: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter and zeroes the
    /// gradients. Every trainable parameter must carry a gradient.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(name.clone()));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let c2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        for (name, p) in store.iter_mut().filter(|(_, p)| p.trainable) {
            let grad = p.grad.as_mut().expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            if m.len() != grad.len() {
                return Err(Error::Dimension {
                    op: "adam",
                    detail: alloc::format!("moment buffer for `{name}` has wrong length"),
                });
            }
            for (((w, g), mi), vi) in
                p.value.data_mut().iter_mut().zip(grad.iter_mut()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * *g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * *g * *g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
                *g = 0.0;
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * frac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut store = ParamStore::new(1);
        store.init_weight("w", 3, 2).unwrap();
        let before = store.value("w").unwrap().clone();
        store.zero_grads();
        let mut opt = Adam::new(1e-3);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value("w").unwrap(), &before);
    }

    #[test]
    fn single_scalar_step_matches_hand_update() {
        // One Adam step from w=0.5 with g=0.2, lr=0.1:
        // m = 0.02, v = 4e-5, mhat = 0.2, vhat = 0.04, w' = 0.5 - 0.1*0.2/(0.2+1e-8).
        let mut store = ParamStore::new(0);
        store.set_entry("w", Tensor::vector(vec![0.5]), true);
        store.accumulate_grad("w", &[0.2], 1.0).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut store).unwrap();
        let expected = 0.5 - 0.1 * 0.2 / (0.2 + 1e-8);
        let got = store.value("w").unwrap().data()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert_eq!(store.get("w").unwrap().grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn missing_grad_is_state_error() {
        let mut store = ParamStore::new(0);
        store.init_zeros("b", &[2]).unwrap();
        assert_eq!(Adam::new(1e-3).step(&mut store), Err(Error::MissingGrad("b".into())));
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    }
}
