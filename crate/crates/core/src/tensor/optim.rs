use serde::{Deserialize, Serialize};

use super::{Gradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated the first time a
/// parameter receives a gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update of every parameter in `store` that `grads` reaches.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step_where(store, grads, |_| true);
    }

    /// Like [`Adam::step`], restricted to parameters whose name passes `keep`.
    pub fn step_where(&mut self, store: &mut ParamStore, grads: &Gradients, keep: impl Fn(&str) -> bool) {
        self.step += 1;
        let n = store.len();
        self.first.resize(n, None);
        self.second.resize(n, None);
        let AdamConfig { lr, beta1, beta2, epsilon } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            if !keep(store.name(id)) {
                continue;
            }
            let Some(g) = grads.get(store.get(id)) else { continue };
            let g = g.to_vec();
            let m = self.first[slot].get_or_insert_with(|| vec![0.0; g.len()]);
            let v = self.second[slot].get_or_insert_with(|| vec![0.0; g.len()]);
            for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(&g) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            let (m, v) = (&*m, &*v);
            store.tensor_mut(id).update_leaf(|theta| {
                for ((t, mi), vi) in theta.iter_mut().zip(m).zip(v) {
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    *t -= lr * mhat / (vhat.sqrt() + epsilon);
                }
            });
        }
    }

    /// Moment buffers by parameter slot, for checkpointing.
    pub fn moments(&self) -> impl Iterator<Item = (usize, &Vec<f64>, &Vec<f64>)> {
        self.first
            .iter()
            .zip(&self.second)
            .enumerate()
            .filter_map(|(i, (m, v))| Some((i, m.as_ref()?, v.as_ref()?)))
    }

    pub fn restore(&mut self, step: u64, slots: usize, moments: Vec<(usize, Vec<f64>, Vec<f64>)>) {
        self.step = step;
        self.first = vec![None; slots];
        self.second = vec![None; slots];
        for (i, m, v) in moments {
            self.first[i] = Some(m);
            self.second[i] = Some(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, Tensor};

    fn quadratic_store(x: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(x));
        (store, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let (mut store, id) = quadratic_store(3.0);
        let loss = store.get(id).scale(0.0).unwrap().sum().unwrap();
        let grads = backward(&loss).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut store, &grads);
        assert_eq!(store.get(id).item(), 3.0);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        let (mut store, id) = quadratic_store(2.0);
        // d/dθ of θ is 1
        let loss = store.get(id).sum().unwrap();
        let grads = backward(&loss).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut store, &grads);
        // m = 0.1, v = 0.001 → m̂ = 1, v̂ = 1
        let expected = 2.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((store.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn node_id_survives_update() {
        let (mut store, id) = quadratic_store(1.0);
        let before = store.get(id).id();
        let loss = store.get(id).sum().unwrap();
        let grads = backward(&loss).unwrap();
        drop(loss);
        Adam::new(AdamConfig::default()).step(&mut store, &grads);
        assert_eq!(store.get(id).id(), before);
    }
}
