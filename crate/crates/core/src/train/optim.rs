use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for every parameter of a store, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    /// Clips the accumulated gradients to global norm `clip` (skipped when
    /// `clip <= 0`), applies one Adam update and returns the pre-clip norm.
    /// A non-finite gradient aborts before anything changes.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, clip: f64) -> Result<f64> {
        if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", p.name),
            });
        }
        let norm = store.grad_norm().as_f64();
        if clip > 0.0 && norm > clip {
            store.scale_grads(T::lit(clip / norm));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPS));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m)
                .zip(v)
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Tensor::scalar(1.0)).unwrap();
        let mut adam = Adam::new(&store);
        let mut tape = Tape::new();
        let x = tape.param(&store, w);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        adam.step(&mut store, 0.1, 0.0).unwrap();
        assert!((store.value(w).item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        let w = store.register("w", Tensor::full(vec![3], 0.5)).unwrap();
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 0.1, 1.0).unwrap();
        assert_eq!(store.value(w).data(), &[0.5; 3]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut store = ParamStore::<f64>::new();
        store.register("fine", Tensor::zeros(vec![1])).unwrap();
        let bad = store.register("layer.bad", Tensor::zeros(vec![2])).unwrap();
        store.get_mut(bad).grad.data_mut()[1] = f64::NAN;
        let mut adam = Adam::new(&store);
        let err = adam.step(&mut store, 0.1, 1.0).unwrap_err();
        assert!(err.to_string().contains("layer.bad"));
        assert_eq!(adam.steps, 0);
    }
}
