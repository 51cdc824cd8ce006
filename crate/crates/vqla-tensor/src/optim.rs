//! Named parameter store and decoupled-weight-decay Adam.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Dot-separated parameter paths mapped to leaf tensors. Frozen paths are
/// excluded from optimization and flagged `requires_grad = false`.
pub struct ParamStore<E: Scalar> {
    entries: BTreeMap<String, Tensor<E>>,
    frozen: BTreeSet<String>,
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> ParamStore<E> {
        ParamStore {
            entries: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor<E>) -> Result<()> {
        let path = path.into();
        if !tensor.is_leaf() {
            return Err(TensorError::Store(format!("`{path}` is not a leaf tensor")));
        }
        if self.entries.contains_key(&path) {
            return Err(TensorError::Store(format!("duplicate parameter `{path}`")));
        }
        tensor.set_requires_grad(true);
        self.entries.insert(path, tensor);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<E>> {
        self.entries.get(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.contains(path)
    }

    pub fn freeze(&mut self, path: &str) {
        if let Some(t) = self.entries.get(path) {
            t.set_requires_grad(false);
            self.frozen.insert(path.to_string());
        }
    }

    pub fn unfreeze(&mut self, path: &str) {
        if let Some(t) = self.entries.get(path) {
            t.set_requires_grad(true);
            self.frozen.remove(path);
        }
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        let paths: Vec<String> = self
            .entries
            .keys()
            .filter(|p| p.starts_with(prefix))
            .cloned()
            .collect();
        for p in paths {
            self.freeze(&p);
        }
    }

    pub fn unfreeze_prefix(&mut self, prefix: &str) {
        let paths: Vec<String> = self
            .entries
            .keys()
            .filter(|p| p.starts_with(prefix))
            .cloned()
            .collect();
        for p in paths {
            self.unfreeze(&p);
        }
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.entries.iter().filter(|(p, _)| !self.frozen.contains(*p))
    }

    pub fn zero_grads(&self) {
        for t in self.entries.values() {
            t.clear_grad();
        }
    }

    /// Store sharing the tensors whose paths start with `prefix`.
    pub fn filtered(&self, prefix: &str) -> ParamStore<E> {
        let mut out = ParamStore::new();
        for (p, t) in &self.entries {
            if p.starts_with(prefix) {
                out.entries.insert(p.clone(), t.clone());
                if self.frozen.contains(p) {
                    out.frozen.insert(p.clone());
                }
            }
        }
        out
    }

    /// Raw value snapshot, usable for bit-exact freeze assertions.
    pub fn snapshot(&self, prefix: &str) -> BTreeMap<String, Vec<E>> {
        self.entries
            .iter()
            .filter(|(p, _)| p.starts_with(prefix))
            .map(|(p, t)| (p.clone(), t.data_vec()))
            .collect()
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }
}

/// Optimizer state: one pair of moment buffers per parameter plus the shared
/// step counter and hyperparameters.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> AdamW {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update over the non-frozen parameters.
    /// Frozen parameters are untouched even if they carry a gradient.
    pub fn step<E: Scalar>(&mut self, store: &ParamStore<E>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (path, param) in store.trainable() {
            let grad = param
                .grad()
                .ok_or_else(|| TensorError::MissingGrad(path.clone()))?;
            let (m, v) = self
                .moments
                .entry(path.clone())
                .or_insert_with(|| (vec![0.0; param.numel()], vec![0.0; param.numel()]));
            let mut data = param.data_vec();
            for i in 0..data.len() {
                let g = grad[i].to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let w = data[i].to_f64();
                data[i] = E::from_f64(
                    w - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * w),
                );
            }
            param.set_data(&data);
        }
        Ok(())
    }
}
