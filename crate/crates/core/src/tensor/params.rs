use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::{lit, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a named parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Replace a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let cur = &self.tensors[id.0];
        if cur.shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "param_set",
                lhs: cur.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Bit-level digest of the selected parameters (all when `ids` is empty).
    pub fn fingerprint(&self, ids: &[ParamId]) -> [u8; 32] {
        let mut h = Sha256::new();
        let all: Vec<ParamId> = if ids.is_empty() {
            self.ids().collect()
        } else {
            ids.to_vec()
        };
        for id in all {
            h.update(self.names[id.0].as_bytes());
            for v in self.tensors[id.0].data() {
                h.update(v.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Per-parameter gradient buffers, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn new(num_params: usize) -> Self {
        Gradients {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[T]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &Gradients<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    /// Copy holding only the gradients of `ids`.
    pub fn restricted(&self, ids: &[ParamId]) -> Gradients<T> {
        let mut out = Gradients::new(self.grads.len());
        for id in ids {
            if let Some(g) = self.get(*id) {
                out.accumulate(*id, g);
            }
        }
        out
    }

    pub fn scale(&mut self, c: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = *v * c);
        }
    }

    pub fn present(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| *v * *v)
            .sum::<T>()
            .sqrt()
    }
}

/// Linear warmup followed by linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f32,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f32, warmup_fraction: f32, total_steps: usize) -> Self {
        let warmup_steps = ((total_steps as f32) * warmup_fraction).round() as usize;
        LrSchedule {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    pub fn at(&self, step: usize) -> f32 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let decay_span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let into = step.saturating_sub(self.warmup_steps) as f32;
        (self.peak * (1.0 - into / decay_span as f32)).max(0.0)
    }
}

/// Adam over a fixed group of parameters; anything outside the group is never
/// touched, which is how the freeze contracts are enforced.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    group: Vec<ParamId>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl Adam {
    pub fn new(group: Vec<ParamId>, store: &ParamStore<f32>) -> Self {
        let m = group.iter().map(|id| vec![0.0; store.get(*id).len()]).collect();
        let v = group.iter().map(|id| vec![0.0; store.get(*id).len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            group,
            m,
            v,
            step: 0,
        }
    }

    pub fn group(&self) -> &[ParamId] {
        &self.group
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Group members without a gradient
    /// are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f32) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (slot, id) in self.group.iter().enumerate() {
            let Some(g) = grads.get(*id) else { continue };
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let w = store.get_mut(*id).data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers, for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<f32>], &[Vec<f32>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::format("optimizer", "group size mismatch"));
        }
        for (a, b) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if a.len() != b.len() {
                return Err(Error::format("optimizer", "moment length mismatch"));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Gradient clipping by global norm; returns the pre-clip norm.
pub fn clip_global_norm<T: Element>(grads: &mut Gradients<T>, max_norm: f64) -> T {
    let norm = grads.global_norm();
    let max = lit::<T>(max_norm);
    if norm > max {
        grads.scale(max / norm);
    }
    norm
}
