use std::collections::BTreeMap;

use super::network::BN_MOMENTUM;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Named trainable arrays plus non-trainable buffers (batch-norm running
/// statistics). Iteration order is sorted by name and therefore stable.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: String, t: Tensor<T>) {
        self.params.insert(name, t);
    }

    pub fn insert_buffer(&mut self, name: String, t: Tensor<T>) {
        self.buffers.insert(name, t);
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> &Tensor<T> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("no buffer {name}"))
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.all_finite())
            && self.buffers.values().all(|t| t.all_finite())
    }

    /// Fold batch statistics from a training forward pass into the running
    /// averages.
    pub fn apply_bn_updates(&mut self, updates: &[(String, Vec<f64>, Vec<f64>)]) {
        let m = BN_MOMENTUM;
        for (prefix, mean, var) in updates {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let buf = self
                    .buffers
                    .get_mut(&format!("{prefix}.{suffix}"))
                    .unwrap_or_else(|| panic!("no running stats for {prefix}"));
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = T::from_f64((1.0 - m) * r.as_f64() + m * b);
                }
            }
        }
    }

    /// Every array (params then buffers) with its name, for persistence.
    pub fn named_arrays(&self) -> Vec<(String, bool, &Tensor<T>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), true, v))
            .chain(self.buffers.iter().map(|(k, v)| (k.clone(), false, v)))
            .collect()
    }
}
