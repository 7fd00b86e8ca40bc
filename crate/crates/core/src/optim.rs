//! Adam with per-parameter bias correction that skips frozen parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{cst, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments of one parameter plus the number of updates it has received.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub learning_rate: f64,
    /// Number of `step` calls so far.
    pub step: u64,
    /// Indexed by parameter id; `None` until the parameter is first updated.
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, learning_rate: f64) -> Self {
        Self {
            config,
            learning_rate,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter of `store`.
    ///
    /// Frozen parameters are skipped entirely: their data, moments and step
    /// counts stay as they are. A trainable parameter without a gradient is an
    /// error.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::Optimizer(format!(
                "trainable parameter {:?} has no gradient",
                p.name
            )));
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2, e) = (cst::<T>(beta1), cst::<T>(beta2), cst::<T>(eps));
        let lr = self.learning_rate;
        for (p, slot) in store.params_mut().iter_mut().zip(self.moments.iter_mut()) {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_ref().expect("checked above");
            let n = p.tensor.numel();
            let mo = slot.get_or_insert_with(|| Moments {
                step: 0,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            mo.step += 1;
            let t = mo.step as i32;
            let bc1 = cst::<T>(1.0 - beta1.powi(t));
            let bc2 = cst::<T>(1.0 - beta2.powi(t));
            let lr_t = cst::<T>(lr);
            let data = p.tensor.data_mut();
            for i in 0..n {
                let gi = grad.data()[i];
                mo.m[i] = b1 * mo.m[i] + (T::one() - b1) * gi;
                mo.v[i] = b2 * mo.v[i] + (T::one() - b2) * gi * gi;
                let mhat = mo.m[i] / bc1;
                let vhat = mo.v[i] / bc2;
                data[i] = data[i] - lr_t * mhat / (vhat.sqrt() + e);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        let id = store.add_param("w", Tensor::scalar(value)).unwrap();
        store.param_mut(id).grad = Some(Tensor::scalar(grad));
        store
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = scalar_store(1.0, 1.0);
        let mut adam = AdamState::new(AdamConfig::default(), 0.1);
        adam.step(&mut store).unwrap();
        // m̂ = 1, v̂ = 1, so the step is lr / (1 + eps).
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((store.params()[0].tensor.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut store = scalar_store(0.123456789, 5.0);
        store.params_mut()[0].trainable = false;
        store.params_mut()[0].grad = None;
        let before = store.params()[0].tensor.clone();
        let mut adam = AdamState::new(AdamConfig::default(), 0.1);
        for _ in 0..10 {
            adam.step(&mut store).unwrap();
        }
        assert!(store.params()[0].tensor.bit_eq(&before));
    }

    #[test]
    fn zero_gradient_leaves_fresh_parameter_unchanged() {
        let mut store = scalar_store(2.5, 0.0);
        let mut adam = AdamState::new(AdamConfig::default(), 0.1);
        adam.step(&mut store).unwrap();
        assert_eq!(store.params()[0].tensor.data()[0], 2.5);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut store = scalar_store(0.0, 1.0);
        let mut adam = AdamState::new(AdamConfig::default(), 0.1);
        adam.step(&mut store).unwrap();
        let before = adam.moments[0].clone().unwrap();
        store.params_mut()[0].grad = Some(Tensor::scalar(0.0));
        adam.step(&mut store).unwrap();
        let after = adam.moments[0].as_ref().unwrap();
        assert_eq!(after.m[0], 0.9 * before.m[0]);
        assert_eq!(after.v[0], 0.999 * before.v[0]);
        assert_eq!(after.step, 2);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = scalar_store(0.0, 0.0);
        store.params_mut()[0].grad = None;
        let mut adam = AdamState::new(AdamConfig::default(), 0.1);
        assert!(matches!(adam.step(&mut store), Err(Error::Optimizer(_))));
    }

    proptest::proptest! {
        #[test]
        fn frozen_parameters_never_change(
            values in proptest::collection::vec(-10.0f32..10.0, 1..8),
            frozen in proptest::collection::vec(proptest::bool::ANY, 8),
            grads in proptest::collection::vec(-5.0f32..5.0, 8),
            steps in 1usize..20,
        ) {
            let mut store = ParamStore::<f32>::new();
            for (i, &v) in values.iter().enumerate() {
                let id = store.add_param(format!("p{i}"), Tensor::full(&[2], v)).unwrap();
                store.param_mut(id).trainable = !frozen[i];
            }
            let before = store.clone();
            let mut adam = AdamState::new(AdamConfig::default(), 0.05);
            for s in 0..steps {
                for (i, p) in store.params_mut().iter_mut().enumerate() {
                    p.grad = p.trainable.then(|| Tensor::full(&[2], grads[(i + s) % 8]));
                }
                adam.step(&mut store).unwrap();
            }
            for (a, b) in store.params().iter().zip(before.params()) {
                if !b.trainable {
                    proptest::prop_assert!(a.tensor.bit_eq(&b.tensor));
                }
            }
        }
    }
}
