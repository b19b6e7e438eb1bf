//! AdamW with decoupled weight decay, bias correction, a global-norm
//! gradient clip at 1.0, and a hard abort on non-finite gradients. Moments
//! are kept in f64 regardless of the training precision.

use anyhow::{bail, Result};
use ccformer_model::params::ParamStore;
use ccformer_tensor::{Scalar, Tensor};

pub const CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, sizes: &[usize]) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_store<T: Scalar>(lr: f64, weight_decay: f64, store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).data().len()).collect();
        AdamW::new(lr, weight_decay, &sizes)
    }

    /// One update over every parameter in the store. `grads[i]` pairs with
    /// the i-th registered parameter.
    pub fn apply<T: Scalar>(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Tensor<T>],
    ) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if grads.len() != ids.len() {
            bail!("expected {} gradients, got {}", ids.len(), grads.len());
        }

        let mut sq_norm = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            for &x in g.data() {
                let x = x.to_f64_lossy();
                if !x.is_finite() {
                    bail!("non-finite gradient in parameter `{}`", store.name(ids[i]));
                }
                sq_norm += x * x;
            }
        }
        let norm = sq_norm.sqrt();
        let scale = if norm > CLIP_NORM { CLIP_NORM / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for (i, id) in ids.iter().enumerate() {
            let cur = store.get(*id);
            if cur.data().len() != self.m[i].len() {
                bail!("optimizer moment {} does not match parameter `{}`", i, store.name(*id));
            }
            let mut out = Vec::with_capacity(cur.data().len());
            for (j, (&p, &g)) in cur.data().iter().zip(grads[i].data()).enumerate() {
                let g = g.to_f64_lossy() * scale;
                let m = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                let v = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                self.m[i][j] = m;
                self.v[i][j] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                let theta = p.to_f64_lossy();
                let updated =
                    theta - self.lr * m_hat / (v_hat.sqrt() + self.eps) - self.lr * self.weight_decay * theta;
                out.push(T::of_f64(updated));
            }
            let shape = cur.shape().to_vec();
            store.set(*id, Tensor::from_vec(shape, out)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.register("theta", Tensor::from_vec(vec![1], vec![value]).unwrap());
        store
    }

    fn grad(value: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_vec(vec![1], vec![value]).unwrap()]
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut store = scalar_store(1.25);
        let mut opt = AdamW::for_store(0.1, 0.0, &store);
        for _ in 0..3 {
            opt.apply(&mut store, &grad(0.0)).unwrap();
        }
        let id = store.lookup("theta").unwrap();
        assert_eq!(store.get(id).data()[0], 1.25);
    }

    #[test]
    fn single_step_matches_hand_evaluated_update() {
        let (theta0, g, lr) = (1.0f64, 0.5f64, 0.1f64);
        let mut store = scalar_store(theta0);
        let mut opt = AdamW::for_store(lr, 0.0, &store);
        opt.apply(&mut store, &grad(g)).unwrap();

        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let want = theta0 - lr * m_hat / (v_hat.sqrt() + 1e-8);
        let id = store.lookup("theta").unwrap();
        assert!((store.get(id).data()[0] - want).abs() <= 1e-15);
    }

    #[test]
    fn decay_with_zero_gradient_is_a_multiplicative_shrink() {
        let mut store = scalar_store(2.0);
        let (lr, wd) = (0.05, 0.1);
        let mut opt = AdamW::for_store(lr, wd, &store);
        opt.apply(&mut store, &grad(0.0)).unwrap();
        let id = store.lookup("theta").unwrap();
        assert!((store.get(id).data()[0] - 2.0 * (1.0 - lr * wd)).abs() <= 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_naming_the_parameter() {
        let mut store = scalar_store(0.0);
        let mut opt = AdamW::for_store(0.1, 0.0, &store);
        let err = opt.apply(&mut store, &grad(f64::NAN)).unwrap_err().to_string();
        assert!(err.contains("theta"), "error does not name the parameter: {err}");
        assert_eq!(opt.step, 0, "aborted step must not advance the counter");
    }

    #[test]
    fn oversized_gradients_are_clipped_to_unit_global_norm() {
        let mut a = scalar_store(1.0);
        let mut b = scalar_store(1.0);
        let mut opt_a = AdamW::for_store(0.1, 0.0, &a);
        let mut opt_b = AdamW::for_store(0.1, 0.0, &b);
        opt_a.apply(&mut a, &grad(50.0)).unwrap();
        opt_b.apply(&mut b, &grad(1.0)).unwrap();
        let ia = a.lookup("theta").unwrap();
        let ib = b.lookup("theta").unwrap();
        assert!((a.get(ia).data()[0] - b.get(ib).data()[0]).abs() <= 1e-15);
        assert!((opt_a.m[0][0] - opt_b.m[0][0]).abs() <= 1e-15);
    }

    #[test]
    fn small_gradients_are_not_rescaled() {
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::for_store(0.1, 0.0, &store);
        opt.apply(&mut store, &grad(0.25)).unwrap();
        assert!((opt.m[0][0] - 0.025).abs() <= 1e-15);
    }
}
