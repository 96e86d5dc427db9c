//! Named parameter storage and the Adam optimizer.
//!
//! Parameters live as plain buffers keyed by canonical names; each training
//! step binds them onto a fresh tape as tracked leaves, and the optimizer
//! applies updates back into the buffers. Iteration order is insertion order
//! everywhere, which keeps checkpoints and updates deterministic.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::rng::RngStream;
use crate::numerics::tape::{Grads, Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            data: tensor.to_vec(),
        });
        Ok(())
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        self.add(name, Tensor::zeros(shape))
    }

    /// Xavier-style uniform init scaled by fan-in and fan-out.
    pub fn add_xavier(&mut self, name: &str, shape: &[usize], rng: &RngStream) -> Result<()> {
        let (fan_in, fan_out) = match shape.len() {
            2 => (shape[0], shape[1]),
            4 => (shape[0] * shape[1] * shape[2], shape[3]),
            _ => {
                let n: usize = shape.iter().product();
                (n, n)
            }
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add(name, rng.derive(name).uniform_tensor(shape, -limit, limit))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        let idx = self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        let e = &self.entries[*idx];
        Tensor::from_vec(&e.shape, e.data.clone())
    }

    pub fn set(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let idx = self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))?;
        let e = &mut self.entries[*idx];
        if e.shape != tensor.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{:?}", e.shape),
                format!("{:?}", tensor.shape()),
            ));
        }
        e.data = tensor.to_vec();
        Ok(())
    }

    /// Bind every parameter onto `tape`. Trainable bindings become tracked
    /// leaves; frozen bindings become constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Bindings {
        let mut map = HashMap::with_capacity(self.entries.len());
        for e in &self.entries {
            let t = Tensor::from_vec(&e.shape, e.data.clone()).expect("stored shape consistent");
            let var = if trainable { tape.var(t) } else { tape.constant(t) };
            map.insert(e.name.clone(), var);
        }
        Bindings { map }
    }

    /// Mutable access for optimizer updates, by entry index.
    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.data.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Parameters bound onto one tape.
pub struct Bindings {
    map: HashMap<String, Var>,
}

impl Bindings {
    /// Replace one binding (used by tests to track a single parameter).
    pub fn insert(&mut self, name: &str, var: Var) {
        self.map.insert(name.to_string(), var);
    }

    pub fn get(&self, name: &str) -> Var {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
            .clone()
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.map.get(name).cloned()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Adam with optional step decay handled by the caller via `lr`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
            v: store.entries().iter().map(|e| vec![0.0; e.data.len()]).collect(),
        }
    }

    /// Apply one update. Parameters without gradient flow are left untouched
    /// but still advance their bias-correction step.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        bindings: &Bindings,
        grads: &mut Grads,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for idx in 0..store.len() {
            let name = store.entries()[idx].name.clone();
            let var = bindings.get(&name);
            let Some(grad) = grads.take(&var) else {
                continue;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Train(format!(
                    "non-finite gradient for parameter '{name}'"
                )));
            }
            let entry = store.entry_mut(idx);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..entry.data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                entry.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (idx, e) in store.entries().iter().enumerate() {
            out.push((
                format!("adam.m.{}", e.name),
                Tensor::from_vec(&e.shape, self.m[idx].clone()).expect("aligned"),
            ));
            out.push((
                format!("adam.v.{}", e.name),
                Tensor::from_vec(&e.shape, self.v[idx].clone()).expect("aligned"),
            ));
        }
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, get: impl Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (idx, e) in store.entries().iter().enumerate() {
            let m = get(&format!("adam.m.{}", e.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing adam.m.{}", e.name)))?;
            let v = get(&format!("adam.v.{}", e.name))
                .ok_or_else(|| Error::Checkpoint(format!("missing adam.v.{}", e.name)))?;
            self.m[idx] = m.to_vec();
            self.v[idx] = v.to_vec();
        }
        Ok(())
    }
}

/// Learning-rate step decay: halve at 60% and at 85% of the total budget.
pub fn step_decay_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    let frac = step as f64 / total_steps.max(1) as f64;
    let mut lr = base_lr;
    if frac >= 0.60 {
        lr *= 0.5;
    }
    if frac >= 0.85 {
        lr *= 0.5;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ops;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store
            .add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap())
            .unwrap();
        let mut adam = Adam::new(&store);
        for _ in 0..400 {
            let tape = Tape::new();
            let binds = store.bind(&tape, true);
            let x = binds.get("x");
            let loss = ops::sum(&ops::square(&x).unwrap()).unwrap();
            let mut grads = tape.backward(&loss).unwrap();
            adam.step(&mut store, &binds, &mut grads, 0.05).unwrap();
        }
        let x = store.get("x").unwrap();
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{:?}", x.data());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add_zeros("w", &[2, 2]).unwrap();
        assert!(store.add_zeros("w", &[2]).is_err());
    }

    #[test]
    fn decay_schedule_breakpoints() {
        assert_eq!(step_decay_lr(1.0, 0, 100), 1.0);
        assert_eq!(step_decay_lr(1.0, 59, 100), 1.0);
        assert_eq!(step_decay_lr(1.0, 60, 100), 0.5);
        assert_eq!(step_decay_lr(1.0, 85, 100), 0.25);
    }
}
