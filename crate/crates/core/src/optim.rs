//! Parameter storage and optimizers.
//!
//! Parameters live outside any graph in a [`ParamStore`] and are re-inserted
//! as leaves at the start of every training step via [`ParamStore::bind`].
//! After `backward` the optimizer reads gradients off the bound leaves and
//! updates the store in place. Entries that received no gradient in a step
//! (or are frozen) are left bit-identical, including their moment buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, TensorId};

/// Adam first-moment decay.
pub const ADAM_BETA1: f64 = 0.9;
/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
/// Adam denominator stabilizer.
pub const ADAM_EPS: f64 = 1e-8;
/// Default decoupled weight decay.
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;

/// Broad parameter families, used for freezing and for optimizer filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Codebook entry matrices.
    Codebook,
    /// Convolution weights and biases.
    Conv,
    /// Grayscale-attention parameters (attention-vector projections).
    Ga,
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Frozen entries bind as constants and are never stepped.
    pub trainable: bool,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

/// Graph leaves for every store entry of one step, in store order.
#[derive(Debug, Clone)]
pub struct Bound {
    ids: Vec<TensorId>,
    by_name: HashMap<String, usize>,
}

impl Bound {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.by_name
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::Arg(format!("unknown parameter '{name}'")))
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: &str,
        kind: ParamKind,
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::Arg(format!("duplicate parameter name '{name}'")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim(format!(
                "parameter '{name}' shape {shape:?} wants {numel} values, got {}",
                data.len()
            )));
        }
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            shape,
            data,
            trainable: true,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.by_name
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::Arg(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        match self.by_name.get(name) {
            Some(&i) => Ok(&mut self.entries[i]),
            None => Err(Error::Arg(format!("unknown parameter '{name}'"))),
        }
    }

    /// Mark every entry of `kind` frozen (bound as constants from now on).
    pub fn freeze_kind(&mut self, kind: ParamKind) {
        for e in &mut self.entries {
            if e.kind == kind {
                e.trainable = false;
            }
        }
    }

    /// Insert every entry into `g` as a leaf: trainable entries as params,
    /// frozen ones as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> Result<Bound> {
        let mut ids = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let id = if e.trainable {
                g.param(e.shape.clone(), e.data.clone())?
            } else {
                g.constant(e.shape.clone(), e.data.clone())?
            };
            ids.push(id);
        }
        Ok(Bound {
            ids,
            by_name: self.by_name.clone(),
        })
    }

    /// Plain SGD over entries selected by `pred`: `p -= lr * grad`. Entries
    /// that are frozen, filtered out, or gradient-free stay bit-identical.
    pub fn sgd_step<F>(&mut self, g: &Graph<T>, bound: &Bound, lr: T, mut pred: F) -> usize
    where
        F: FnMut(&ParamEntry<T>) -> bool,
    {
        let mut stepped = 0;
        for (i, e) in self.entries.iter_mut().enumerate() {
            if !e.trainable || !pred(e) {
                continue;
            }
            let Some(grad) = g.grad(bound.ids[i]) else {
                continue;
            };
            for (p, &gv) in e.data.iter_mut().zip(grad) {
                *p = *p - lr * gv;
            }
            stepped += 1;
        }
        stepped
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// Moment buffers are allocated per store entry up front, aligned by
    /// index so freezing or filtering never shifts state.
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let m = store.entries().iter().map(|e| vec![T::zero(); e.data.len()]).collect();
        let v = store.entries().iter().map(|e| vec![T::zero(); e.data.len()]).collect();
        AdamW {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
            steps: 0,
            m,
            v,
        }
    }

    /// Apply one update from the gradients on `bound`. Entries without a
    /// gradient are skipped entirely — no decay, no moment update.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        g: &Graph<T>,
        bound: &Bound,
        lr: f64,
    ) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::Arg(format!(
                "optimizer tracks {} entries but store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - self.beta1), T::from_f64(1.0 - self.beta2));
        let inv_bc1 = T::from_f64(bc1.recip());
        let inv_bc2 = T::from_f64(bc2.recip());
        let eps = T::from_f64(self.eps);
        let lr_t = T::from_f64(lr);
        let decay = T::from_f64(lr * self.weight_decay);

        for (i, e) in store.entries.iter_mut().enumerate() {
            if !e.trainable {
                continue;
            }
            let Some(grad) = g.grad(bound.ids[i]) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..e.data.len() {
                let gj = grad[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                let mhat = m[j] * inv_bc1;
                let vhat = v[j] * inv_bc2;
                let p = e.data[j];
                e.data[j] = p - lr_t * (mhat / (vhat.sqrt() + eps)) - decay * p;
            }
        }
        Ok(())
    }
}

/// Triangular cyclic learning rate: `base/10` at the first and last step,
/// peaking at `base` in the middle of the schedule.
#[derive(Debug, Clone, Copy)]
pub struct CycleScheduler {
    pub base: f64,
    pub total_steps: usize,
}

impl CycleScheduler {
    pub fn new(base: f64, total_steps: usize) -> Self {
        CycleScheduler { base, total_steps }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let floor = self.base / 10.0;
        if self.total_steps <= 1 {
            return self.base;
        }
        let mid = (self.total_steps - 1) as f64 / 2.0;
        let frac = 1.0 - ((step as f64 - mid).abs() / mid);
        floor + (self.base - floor) * frac
    }
}
