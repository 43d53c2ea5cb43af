use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
}

/// Named parameters. Values are held at `f32` precision so that the model
/// container round-trips them exactly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, dims: Vec<usize>, value: Vec<f64>) -> ParamId {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        let mut value = value;
        snap_f32(&mut value);
        self.params.push(Param {
            name: name.into(),
            dims,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter drawn uniformly from `±bound`.
    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, dims: Vec<usize>, bound: f64, rng: &mut R) -> ParamId {
        let n = dims.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, dims, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, dims: Vec<usize>) -> ParamId {
        let n = dims.iter().product();
        self.add(name, dims, vec![0.0; n])
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            values: self.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Replaces values from `other`, which must have identical names and dims.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(DseError::format(format!(
                "parameter count mismatch: {} vs {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if mine.name != theirs.name || mine.dims != theirs.dims {
                return Err(DseError::format(format!(
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    mine.name, mine.dims, theirs.name, theirs.dims
                )));
            }
            mine.value.clone_from(&theirs.value);
        }
        Ok(())
    }

    pub(crate) fn push_raw(&mut self, param: Param) {
        self.params.push(param);
    }
}

pub(crate) fn snap_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub values: Vec<Vec<f64>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add_from(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().flatten().for_each(|g| *g = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Adam optimizer.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.zero_grads().values,
            v: store.zero_grads().values,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.params.iter_mut().enumerate() {
            let g = &grads.values[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                p.value[j] -= update;
            }
            snap_f32(&mut p.value);
        }
    }
}
