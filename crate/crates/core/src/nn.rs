//! Named parameter storage and the handful of layers the network is built
//! from.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// Ordered, named parameters and buffers. Insertion order is the
/// serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces values by name, checking that names and shapes line up.
    pub fn load_values(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.entries.len() {
            return Err(Error::config(format!(
                "parameter count mismatch: expected {}, found {}",
                self.entries.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .find(&name)
                .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
            let slot = &mut self.entries[id.0].value;
            if slot.shape() != value.shape() {
                return Err(Error::config(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }

    /// Lifts every entry into `graph`. Trainable entries become gradient
    /// leaves only in training mode.
    pub fn bind<'g, 's>(&'s self, graph: &'g Graph, mode: Mode) -> Bindings<'g, 's> {
        let vars = self
            .entries
            .iter()
            .map(|e| graph.leaf(e.value.clone(), e.trainable && mode == Mode::Train))
            .collect();
        Bindings {
            store: self,
            vars,
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Binds externally supplied vars (one per entry, in order), e.g. from
    /// a gradient checker.
    pub fn bind_vars<'g, 's>(&'s self, vars: Vec<Var<'g>>, mode: Mode) -> Bindings<'g, 's> {
        assert_eq!(vars.len(), self.entries.len());
        Bindings {
            store: self,
            vars,
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Vec<f64>)>) {
        for (id, v) in updates {
            self.entries[id.0].value.data_mut().copy_from_slice(&v);
        }
    }
}

/// Parameters of a store as graph vars for one forward pass.
pub struct Bindings<'g, 's> {
    store: &'s ParamStore,
    vars: Vec<Var<'g>>,
    mode: Mode,
    updates: RefCell<Vec<(ParamId, Vec<f64>)>>,
}

impl<'g> Bindings<'g, '_> {
    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn record_update(&self, id: ParamId, value: Vec<f64>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by training-mode batch norms.
    pub fn take_updates(&self) -> Vec<(ParamId, Vec<f64>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    /// Gradients of trainable entries after a backward pass.
    pub fn gradients(&self) -> Vec<(ParamId, Tensor)> {
        self.store
            .ids()
            .filter(|id| self.store.entry(*id).trainable)
            .map(|id| {
                let v = self.vars[id.0];
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.value().shape()));
                (id, g)
            })
            .collect()
    }
}

/// `U(−b, b)` with `b = gain · sqrt(3 / fan_in)`.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;
pub const LINEAR_GAIN: f64 = 1.0;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = fan_in_uniform(&[c_out, c_in, kernel, kernel], fan_in, gain, rng);
        let weight = store.add(format!("{name}.weight"), w, true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true));
        Conv2d {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(
            p.var(self.weight),
            self.bias.map(|b| p.var(b)),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), false),
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let (gamma, beta) = (p.var(self.gamma), p.var(self.beta));
        match p.mode() {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, BN_EPS)?;
                let blend = |old: &Tensor, new: &[f64]| -> Vec<f64> {
                    old.data()
                        .iter()
                        .zip(new)
                        .map(|(o, n)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * n)
                        .collect()
                };
                let store = p.store();
                p.record_update(self.running_mean, blend(store.get(self.running_mean), &stats.mean));
                p.record_update(self.running_var, blend(store.get(self.running_var), &stats.var));
                Ok(y)
            }
            Mode::Eval => {
                let store = p.store();
                x.batch_norm_eval(
                    gamma,
                    beta,
                    store.get(self.running_mean).data(),
                    store.get(self.running_var).data(),
                    BN_EPS,
                )
            }
        }
    }
}

/// `y = x · W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = fan_in_uniform(&[c_in, c_out], c_in, LINEAR_GAIN, rng);
        Linear {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true),
            out: c_out,
        }
    }

    pub fn forward<'g>(&self, p: &Bindings<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let b = p.var(self.bias).reshape(&[1, self.out])?;
        x.matmul(p.var(self.weight))?.add(b)
    }
}
