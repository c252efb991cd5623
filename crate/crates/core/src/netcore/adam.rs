use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-4,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept in the same order as
/// the store's parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store.params().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            cfg,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.first, &self.second)
    }

    /// Apply one update. `grads` must follow the store's parameter order.
    /// A non-finite gradient aborts the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.first.len() {
            return Err(Error::Shape {
                layer: "adam".into(),
                expected: vec![self.first.len()],
                got: vec![grads.len()],
            });
        }
        for ((name, p), g) in store.params().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    layer: format!("adam:{name}"),
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let wd = T::from_f64(c.lr * c.weight_decay);
        let step_size = T::from_f64(c.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        for (((_, p), g), (m, v)) in store
            .params_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            let pd = p.data_mut();
            #[allow(clippy::needless_range_loop)]
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + ob1 * gi;
                let vi = b2 * v.data()[i] + ob2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let denom = (vi * inv_bc2).sqrt() + eps;
                pd[i] = pd[i] - wd * pd[i] - step_size * mi / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert_param("w".into(), Tensor::scalar(w));
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = single(0.7);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &s);
        for _ in 0..3 {
            opt.step(&mut s, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(s.param("w").item(), 0.7);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+eps) ≈ lr·sign(g).
        let mut s = single(1.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &s);
        opt.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        let expected = 1.0 - 1e-4 * 1.0 / (1.0 + 1e-8);
        assert!((s.param("w").item() - expected).abs() < 1e-15);

        // With the default decay the extra shrink is lr·wd·w = 4e-8.
        let mut s = single(1.0);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s, &[Tensor::scalar(1.0)]).unwrap();
        let delta = 1.0 - s.param("w").item();
        assert!((delta - (1e-4 / (1.0 + 1e-8) + 4e-8)).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let mut a = single(0.3);
        let mut b = single(0.3);
        let mut oa = Adam::new(AdamConfig::default(), &a);
        let mut ob = Adam::new(AdamConfig::default(), &b);
        for g in [0.5, -1.2, 3.0] {
            oa.step(&mut a, &[Tensor::scalar(g)]).unwrap();
            ob.step(&mut b, &[Tensor::scalar(g)]).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_aborts_without_touching_state() {
        let mut s = single(0.3);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        let err = opt.step(&mut s, &[Tensor::scalar(f64::NAN)]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(opt.step, 0);
        assert_eq!(s.param("w").item(), 0.3);
    }
}
