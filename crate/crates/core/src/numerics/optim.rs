use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    first_moment: Tensor<T>,
    second_moment: Tensor<T>,
}

/// Named parameters with gradient buffers and Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
    steps: u64,
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Gradients {
            slots: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        match &mut self.slots[id.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn add(&mut self, other: &Gradients<T>) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.slots.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// Adam hyperparameters with global-norm clipping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        let zeros = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Uniform(-bound, bound) initialisation.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.gen_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    /// Weight matrix `[fan_in, fan_out]` with uniform(+-1/sqrt(fan_in)) entries.
    pub fn add_matrix(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add_uniform(name, &[fan_in, fan_out], bound, rng)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    pub fn set_grads(&mut self, grads: &Gradients<T>) {
        self.zero_grad();
        for (id, g) in grads.iter() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.sum_squares().as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Convert every parameter (values only; moments reset) to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(&p.name, p.value.cast());
        }
        out.steps = self.steps;
        out
    }

    /// Copy parameter values from `other` by name (used to restore checkpoints).
    pub fn load_values(&mut self, other: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for p in &mut self.params {
            let v = other
                .get(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter {}: checkpoint shape {:?} vs model {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// One Adam update from the gradients currently held in the store.
    ///
    /// The global gradient norm is clipped to `clip_norm` first. Returns the
    /// pre-clipping norm.
    pub fn adam_step(&mut self, cfg: &AdamConfig, lr: f64) -> Result<f64> {
        let norm = self.grad_norm();
        if !norm.is_finite() {
            let culprit = self
                .params
                .iter()
                .find(|p| !p.grad.is_finite())
                .map(|p| p.name.clone())
                .unwrap_or_default();
            return Err(Error::NonFinite(format!("gradient of {culprit}")));
        }
        let clip = match cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let step = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(cfg.eps);
        let clip = T::lit(clip);
        for p in &mut self.params {
            let g = p.grad.data();
            let m = p.first_moment.data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1t * *mi + one_b1 * gi * clip;
            }
            let v = p.second_moment.data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                let gc = gi * clip;
                *vi = b2t * *vi + one_b2 * gc * gc;
            }
            let m = p.first_moment.data();
            let v = p.second_moment.data();
            for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                *w = *w - step * mi / ((vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
