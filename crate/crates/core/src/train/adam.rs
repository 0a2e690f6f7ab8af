use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::{ParamId, ParamStore};

use super::TrainError;

/// Adam with bias correction on the global step count.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    params: Vec<ParamId>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    /// Moments start at zero, shaped like each registered parameter.
    pub fn new(store: &ParamStore<T>, params: Vec<ParamId>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |id: &ParamId| vec![T::zero(); store.get(*id).len()];
        Self {
            beta1,
            beta2,
            eps,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&[T], &[T]) {
        (&self.m[index], &self.v[index])
    }

    /// One update. Every registered parameter needs a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<ParamId, Vec<T>>, lr: f64) -> Result<(), TrainError> {
        if let Some(id) = self.params.iter().find(|id| !grads.contains_key(id)) {
            return Err(TrainError::MissingGradient(store.get(*id).name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let one = T::one();
        for (i, id) in self.params.iter().enumerate() {
            let g = &grads[id];
            let p = store.value_mut(*id);
            for j in 0..p.len() {
                let m = b1 * self.m[i][j] + (one - b1) * g[j];
                let v = b2 * self.v[i][j] + (one - b2) * g[j] * g[j];
                self.m[i][j] = m;
                self.v[i][j] = v;
                p[j] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new(0);
        let id = s.constant("p", &[3], 0.5);
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = store();
        let mut opt = Adam::new(&s, vec![id], 0.9, 0.999, 1e-8);
        let grads = BTreeMap::from([(id, vec![0.0; 3])]);
        opt.step(&mut s, &grads, 1e-3).unwrap();
        assert_eq!(s.value(id), &[0.5; 3]);
    }

    #[test]
    fn first_step_closed_form() {
        // m1 = (1-b1) g, v1 = (1-b2) g^2, so the corrected ratio is
        // g / (|g| + eps): a step of lr * g / (|g| + eps).
        let (mut s, id) = store();
        let mut opt = Adam::new(&s, vec![id], 0.9, 0.999, 1e-8);
        let g = vec![0.3, -2.0, 1e-9];
        opt.step(&mut s, &BTreeMap::from([(id, g.clone())]), 1e-3).unwrap();
        for (p, g) in s.value(id).iter().zip(&g) {
            let expected = 0.5 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
        }
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let (mut s, id) = store();
        let mut opt = Adam::new(&s, vec![id], 0.9, 0.999, 1e-8);
        let err = opt.step(&mut s, &BTreeMap::new(), 1e-3).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
    }

    #[test]
    fn identical_state_gives_identical_updates() {
        let (mut a, id) = store();
        let mut b = a.clone();
        let mut oa = Adam::new(&a, vec![id], 0.9, 0.999, 1e-8);
        let mut ob = oa.clone();
        let grads = BTreeMap::from([(id, vec![0.1, 0.2, -0.3])]);
        for _ in 0..3 {
            oa.step(&mut a, &grads, 1e-2).unwrap();
            ob.step(&mut b, &grads, 1e-2).unwrap();
        }
        assert_eq!(a.value(id), b.value(id));
    }
}
