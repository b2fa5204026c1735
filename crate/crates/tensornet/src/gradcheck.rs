//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::params::ParameterStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Entries probed per parameter tensor; `None` probes every entry.
    pub samples_per_param: Option<usize>,
    pub seed: u64,
    /// Relative errors are measured against `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            samples_per_param: Some(8),
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tol
    }
}

/// Compares analytic gradients against central differences.
///
/// `loss(store, with_grad)` must return the scalar loss; when `with_grad` is
/// set it must also accumulate analytic gradients into `store`. Frozen
/// parameters are skipped.
pub fn grad_check<F>(store: &mut ParameterStore, mut loss: F, opts: GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&mut ParameterStore, bool) -> f64,
{
    store.zero_grads();
    loss(store, true);
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tol: opts.tol,
    };
    let names: Vec<(String, usize, bool)> = store
        .iter()
        .map(|p| (p.name.clone(), p.value.len(), p.frozen))
        .collect();
    for (pi, (name, len, frozen)) in names.iter().enumerate() {
        if *frozen {
            continue;
        }
        let idx: Vec<usize> = match opts.samples_per_param {
            Some(k) if k < *len => sample(&mut rng, *len, k).into_vec(),
            _ => (0..*len).collect(),
        };
        for i in idx {
            let orig = store.by_name(name).unwrap().value.data()[i];
            store.by_name_mut(name).unwrap().value.data_mut()[i] = orig + opts.eps;
            let up = loss(store, false);
            store.by_name_mut(name).unwrap().value.data_mut()[i] = orig - opts.eps;
            let down = loss(store, false);
            store.by_name_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel >= report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    store.zero_grads();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::NumArray;

    fn quadratic(store: &mut ParameterStore, with_grad: bool, scale: f64) -> f64 {
        let id = store.id("x").unwrap();
        let x = store.value(id).data().to_vec();
        let l: f64 = x.iter().map(|v| v * v * v).sum();
        if with_grad {
            let g = store.get_mut(id).grad.data_mut();
            for (gi, v) in g.iter_mut().zip(&x) {
                *gi += scale * 3.0 * v * v;
            }
        }
        l
    }

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("x", NumArray::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.1]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn accepts_correct_gradient() {
        let mut s = store();
        let r = grad_check(&mut s, |s, g| quadratic(s, g, 1.0), GradCheckOptions::default());
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn rejects_corrupted_gradient() {
        let mut s = store();
        let r = grad_check(&mut s, |s, g| quadratic(s, g, 1.1), GradCheckOptions::default());
        assert!(!r.passed());
        assert!(r.max_rel_error > 0.05);
    }
}
