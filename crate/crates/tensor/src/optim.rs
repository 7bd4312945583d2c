use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments, one pair per parameter slot of the store it was built for.
#[derive(Clone, Debug)]
pub struct OptimizerState<T: Real = f32> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let n = store.len();
        Self { config, step: 0, first: vec![None; n], second: vec![None; n] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> Option<(&[T], &[T])> {
        Some((self.first.get(id.0)?.as_deref()?, self.second.get(id.0)?.as_deref()?))
    }

    /// One bias-corrected Adam update. Only trainable parameters move; a
    /// gradient for a frozen parameter or buffer is a usage error.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        for (id, g) in grads {
            if id.0 >= self.first.len() {
                return Err(TensorError::Usage(format!("gradient for unknown parameter {id:?}")));
            }
            if !store.is_trainable(*id) {
                return Err(TensorError::Usage(format!("gradient supplied for non-trainable `{}`", store.name(*id))));
            }
            if g.dims() != store.value(*id).dims() {
                return Err(TensorError::Usage(format!(
                    "gradient dims {:?} do not match `{}` {:?}",
                    g.dims(),
                    store.name(*id),
                    store.value(*id).dims()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        for (id, g) in grads {
            let len = g.len();
            let m = self.first[id.0].get_or_insert_with(|| vec![T::zero(); len]);
            let v = self.second[id.0].get_or_insert_with(|| vec![T::zero(); len]);
            let p = store.value_mut(*id).data_mut();
            for i in 0..len {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i].as_f64() / bc1;
                let v_hat = v[i].as_f64() / bc2;
                p[i] -= T::from_f64_lossy(lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}
