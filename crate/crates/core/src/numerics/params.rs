use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors with paired gradient buffers.
///
/// Gradients accumulate across backward passes until [`ParamStore::zero_grad`]
/// clears them. Cloning produces an independent store with a new identity, so a
/// clone never receives gradients recorded against the original.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
    lookup: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            names: self.names.clone(),
            values: self.values.clone(),
            grads: self.grads.clone(),
            lookup: self.lookup.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Incongruent(format!("duplicate parameter `{name}`")));
        }
        let idx = self.values.len();
        self.lookup.insert(name.clone(), idx);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Clears every gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => {
                if grad.shape() != self.values[id.0].shape() {
                    return Err(Error::Shape {
                        op: "accumulate_grad",
                        lhs: self.values[id.0].shape().to_vec(),
                        rhs: grad.shape().to_vec(),
                    });
                }
                *slot = Some(grad.clone());
                Ok(())
            }
        }
    }

    /// True when every populated gradient is exactly zero (missing counts as zero).
    pub fn grads_are_zero(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.data().iter().all(|&v| v == 0.0))
    }

    /// Global L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    ///
    /// Returns the norm measured before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        assert!(max_norm > 0.0, "max_norm must be positive");
        let norm = self.grad_norm();
        if norm > max_norm {
            let scale = max_norm / norm;
            for g in self.grads.iter_mut().flatten() {
                g.scale_inplace(scale);
            }
        }
        norm
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn ensure_congruent(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Incongruent(format!(
                "parameter names differ ({} vs {} entries)",
                self.names.len(),
                other.names.len()
            )));
        }
        for (name, (a, b)) in self.names.iter().zip(self.values.iter().zip(&other.values)) {
            if a.shape() != b.shape() {
                return Err(Error::Incongruent(format!(
                    "`{name}` has shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Overwrites values with those of a congruent store.
    pub fn copy_values_from(&mut self, source: &ParamStore) -> Result<()> {
        self.ensure_congruent(source)?;
        self.values.clone_from(&source.values);
        Ok(())
    }

    /// `self <- tau * source + (1 - tau) * self`, elementwise. Entries already
    /// equal to the source are left bitwise unchanged.
    pub fn polyak_from(&mut self, source: &ParamStore, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {tau}")));
        }
        self.ensure_congruent(source)?;
        for (t, s) in self.values.iter_mut().zip(&source.values) {
            for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
                if *tv != *sv {
                    *tv = tau * sv + (1.0 - tau) * *tv;
                }
            }
        }
        Ok(())
    }

    /// Bitwise equality of names and values.
    pub fn values_identical(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// All parameter values flattened in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// All gradients flattened in store order; missing gradients read as zero.
    pub fn flat_grads(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.grads)
            .flat_map(|(v, g)| match g {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; v.len()],
            })
            .collect()
    }
}
