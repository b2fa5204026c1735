//! Adam with per-parameter step counts, freeze flags and learning-rate
//! scales.

use crate::params::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One update of every non-frozen parameter using its accumulated
    /// gradient. Gradients are left in place.
    pub fn step(&self, store: &mut ParameterStore) {
        for p in store.iter_mut() {
            if p.frozen {
                continue;
            }
            p.steps += 1;
            let t = p.steps as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let lr = self.lr * p.lr_scale;
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((v, g), m), s) in values
                .iter_mut()
                .zip(grads)
                .zip(p.first_moment.iter_mut())
                .zip(p.second_moment.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *s = self.beta2 * *s + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let s_hat = *s / bc2;
                *v -= lr * m_hat / (s_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::NumArray;

    fn store_with_grad(g: f64) -> ParameterStore {
        let mut s = ParameterStore::new();
        for name in ["a", "b"] {
            let id = s.add(name, NumArray::zeros(&[3])).unwrap();
            s.get_mut(id).grad.fill(g);
        }
        s
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut s = store_with_grad(0.7);
        s.set_frozen("a", true);
        let adam = Adam::new(0.01);
        for _ in 0..100 {
            adam.step(&mut s);
        }
        assert!(s.by_name("a").unwrap().value.data().iter().all(|&v| v == 0.0));
        assert!(s.by_name("b").unwrap().value.data().iter().all(|&v| v < 0.0));
        assert_eq!(s.by_name("a").unwrap().steps(), 0);
    }

    #[test]
    fn zero_grads_leave_values() {
        let mut s = store_with_grad(0.0);
        s.by_name_mut("b").unwrap().value.fill(1.5);
        Adam::default().step(&mut s);
        assert!(s.by_name("b").unwrap().value.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn lr_scale_scales_first_step() {
        // First bias-corrected step is lr * g / (|g| + eps).
        let g = 0.3;
        let mut s = store_with_grad(g);
        s.set_lr_scale("a", 0.2);
        let adam = Adam::new(1e-2);
        adam.step(&mut s);
        let da = -s.by_name("a").unwrap().value.data()[0];
        let db = -s.by_name("b").unwrap().value.data()[0];
        let closed = 1e-2 * g / (g + 1e-8);
        assert!((db - closed).abs() < 1e-15);
        assert!((da - 0.2 * closed).abs() < 1e-15);
        assert!((da / db - 0.2).abs() < 1e-12);
    }
}
