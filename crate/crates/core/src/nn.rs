//! Named parameter storage and the per-pass forward context.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{contract_err, Result};
use crate::tensor::{BatchStats, Graph, Tensor, Var, BN_EPS};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (running statistics) are stored and checkpointed but never
    /// receive gradients.
    pub trainable: bool,
}

/// Ordered table of named tensors. Every tensor is registered exactly once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(contract_err!("tensor {name:?} registered twice"));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert(name, value, false)
    }

    /// Registers `{key}.gamma`, `{key}.beta` and their running statistics.
    pub fn add_batch_norm(&mut self, key: &str, features: usize) -> Result<()> {
        self.add_param(&format!("{key}.gamma"), Tensor::ones(&[features]))?;
        self.add_param(&format!("{key}.beta"), Tensor::zeros(&[features]))?;
        self.add_buffer(&format!("{key}.running_mean"), Tensor::zeros(&[features]))?;
        self.add_buffer(&format!("{key}.running_var"), Tensor::ones(&[features]))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| contract_err!("no tensor named {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(contract_err!("no tensor named {name:?}")),
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut Entry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Blends batch statistics into the running estimates of each norm.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (key, s) in stats {
            let n = s.mean.len();
            let rm = self.get_mut(&format!("{key}.running_mean"))?;
            for (r, &m) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.get_mut(&format!("{key}.running_var"))?;
            debug_assert_eq!(rv.numel(), n);
            for (r, &v) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        Ok(())
    }
}

/// He-style normal initialization for a weight with `fan_in` inputs.
pub fn he_normal(dims: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::randn(dims, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; parameters require gradients.
    Train,
    /// Running statistics; nothing requires gradients.
    Eval,
}

/// One forward pass: the tape plus lazily bound parameters.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
    mode: Mode,
    stats: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self::with_graph(Graph::new(), store, mode)
    }

    pub fn with_graph(g: Graph, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            g,
            store,
            bound: HashMap::new(),
            mode,
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Binds `name` to an existing node instead of the stored value.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    /// The graph node for a stored tensor, recorded on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let v = self.g.leaf(value, self.mode == Mode::Train);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Every parameter bound so far, by name.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Batch statistics gathered by training-mode norms, in call order.
    pub fn take_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.stats)
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    /// Batch-normalizes the rows of `x: [.., F]` with the norm stored under
    /// `key`; identity when the store has no such norm.
    pub fn norm(&mut self, key: &str, x: Var) -> Result<Var> {
        let gamma_name = format!("{key}.gamma");
        if !self.store.contains(&gamma_name) {
            return Ok(x);
        }
        let dims = self.g.dims(x).to_vec();
        let f = *dims.last().expect("rank >= 1");
        let rows = dims.iter().product::<usize>() / f;
        let flat = self.g.reshape(x, &[rows, f])?;
        let gamma = self.param(&gamma_name)?;
        let beta = self.param(&format!("{key}.beta"))?;
        let y = match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm(flat, gamma, beta)?;
                self.stats.push((key.to_string(), stats));
                y
            }
            Mode::Eval => {
                let rm = self.store.get(&format!("{key}.running_mean"))?;
                let rv = self.store.get(&format!("{key}.running_var"))?;
                let shift = self.g.constant(rm.clone().reshape(&[1, f])?);
                let inv = self
                    .g
                    .constant(rv.map(|v| 1.0 / (v + BN_EPS).sqrt()).reshape(&[1, f])?);
                let gamma = self.g.reshape(gamma, &[1, f])?;
                let beta = self.g.reshape(beta, &[1, f])?;
                let centered = self.g.sub(flat, shift)?;
                let scaled = self.g.hadamard(centered, inv)?;
                let scaled = self.g.hadamard(scaled, gamma)?;
                self.g.add(scaled, beta)?
            }
        };
        self.g.reshape(y, &dims)
    }

    /// `x: [.., D_in] · W[D_in, D_out]`, then the norm `{name}.bn` if present.
    pub fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let y = self.g.matmul(x, w)?;
        self.norm(&format!("{name}.bn"), y)
    }
}
