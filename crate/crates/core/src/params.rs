//! Named parameter storage and its binding onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    value: Tensor,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Whether batch norm uses batch statistics (and records them) or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ids of the trainable entries, in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Puts every trainable entry on the graph as a leaf (with gradient iff
    /// `requires_grad`).
    pub fn bind<'a>(&'a self, g: &mut Graph, mode: Mode, requires_grad: bool) -> Bound<'a> {
        let vars = self
            .entries
            .iter()
            .map(|e| e.trainable.then(|| g.leaf(e.value.clone(), requires_grad)))
            .collect();
        Bound {
            store: self,
            vars,
            mode,
            bn_stats: Vec::new(),
        }
    }

    /// Folds recorded batch statistics into the running buffers.
    pub fn apply_bn_stats(&mut self, stats: &[(BnIds, BatchStats)], momentum: f64) {
        for (ids, s) in stats {
            for (r, b) in self.get_mut(ids.running_mean).data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self.get_mut(ids.running_var).data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match {}",
                other.entries.len(),
                self.entries.len()
            )));
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// A parameter store bound onto one graph.
pub struct Bound<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    bn_stats: Vec<(BnIds, BatchStats)>,
}

impl<'a> Bound<'a> {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound as graph leaves")
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub(crate) fn record_bn(&mut self, ids: BnIds, stats: BatchStats) {
        self.bn_stats.push((ids, stats));
    }

    pub fn bn_stats(&self) -> &[(BnIds, BatchStats)] {
        &self.bn_stats
    }

    pub fn into_bn_stats(self) -> Vec<(BnIds, BatchStats)> {
        self.bn_stats
    }

    /// `(id, var)` for every trainable entry.
    pub fn trainable_vars(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }
}

/// Convolution weight `[k·k·cin, cout]` and bias `[cout]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl ConvIds {
    /// He-normal weights for a leaky-rectified layer, zero bias.
    #[allow(clippy::too_many_arguments)]
    fn init(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        cols: usize,
        bias_len: usize,
        fan_in: usize,
        leaky_slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / ((1.0 + leaky_slope * leaky_slope) * fan_in as f64)).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let w = Tensor::from_fn(&[rows, cols], |_| normal.sample(rng));
        Self {
            w: store.add(format!("{name}.weight"), w),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[bias_len])),
        }
    }

    /// A `kernel×kernel` convolution from `cin` to `cout` channels.
    pub fn conv(
        store: &mut ParamStore,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        leaky_slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        Self::init(store, name, fan_in, cout, cout, fan_in, leaky_slope, rng)
    }

    /// A 2×2 stride-2 transposed convolution from `cin` to `cout` channels.
    pub fn up(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        leaky_slope: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self::init(store, name, cin, 4 * cout, cout, cin, leaky_slope, rng)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        store.get_mut(self.b).data_mut().fill(0.0);
    }
}

/// Batch-norm affine parameters and running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BnIds {
    pub fn init(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_skips_buffers_and_load_checks_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let conv = ConvIds::conv(&mut store, "c", 3, 2, 4, 0.2, &mut rng);
        let bn = BnIds::init(&mut store, "bn", 4);
        assert_eq!(store.trainable_ids().len(), 4);
        assert_eq!(store.get(conv.w).shape(), &[18, 4]);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, Mode::Train, true);
        assert_eq!(bound.trainable_vars().len(), 4);
        assert_eq!(bound.tensor(bn.running_var).data(), &[1.0; 4]);

        let mut other = ParamStore::new();
        other.add("c.weight", Tensor::zeros(&[18, 4]));
        assert!(store.load_values(&other).is_err());
        let copy = store.clone();
        store.get_mut(conv.b).data_mut()[0] = 3.0;
        store.load_values(&copy).unwrap();
        assert_eq!(store, copy);
    }
}
