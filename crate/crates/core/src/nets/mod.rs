//! Parameter storage and the trainable models: the two-pass transport map
//! (generator + residual embedding module), the image potential, and small
//! MLPs for 1-D transport experiments.

pub(crate) mod blocks;
mod mlp;
mod potential;
mod transport;

pub use blocks::{gdfn_block, mdta_attention, mdta_block};
pub use mlp::{Mlp1d, MlpPotential1d, MonotoneMap1d};
pub use potential::{potential_forward, PotentialNet};
pub use transport::{generator_forward, regm_encode, regm_forward, two_pass_restore, DaRcot, Embeddings, Injection, TwoPass};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Zero every tensor whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Register every tensor on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            vars.insert(name.clone(), tape.leaf(t.clone(), trainable)?);
        }
        Ok(Bound { vars })
    }
}

/// A [`ParamStore`] registered on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter '{name}'")))
    }

    /// Point `name` at another variable (e.g. a probe leaf).
    pub fn replace(&mut self, name: &str, v: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => Err(Error::contract(format!("missing parameter '{name}'"))),
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients after `tape.backward`, keyed like the store.
    pub fn grads(&self, tape: &Tape) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, &v) in &self.vars {
            let g = tape
                .grad(v)
                .ok_or_else(|| Error::contract(format!("no gradient for '{name}' (frozen or backward not run)")))?;
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

/// Which signal the second generator pass is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Single unconditional pass.
    None,
    /// First-pass estimate injected at the finest scale.
    X0,
    /// Encoded residual injected at the bottleneck.
    R0,
    /// `R1, R2, R3` at bottleneck, mid and finest scales.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Generator base width `C` (scales carry `C, 2C, 4C`).
    pub base_channels: usize,
    /// Embedding widths `(C3, C2, C1)` of `R1, R2, R3`.
    pub embed_channels: [usize; 3],
    /// Potential network base width (stages carry `P, 2P, 4P, 8P`).
    pub potential_channels: usize,
    pub conditioning: Conditioning,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 16,
            embed_channels: [64, 32, 16],
            potential_channels: 16,
            conditioning: Conditioning::Full,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_channels > 0, "base_channels must be positive");
        ensure!(self.embed_channels.iter().all(|&c| c > 0), "embed_channels must be positive");
        ensure!(self.potential_channels > 0, "potential_channels must be positive");
        Ok(())
    }
}

/// Output of a transport map on a batch.
pub struct TransportOutput {
    pub restored: Var,
    /// Pooled task embedding `[B, D]` for the contrastive loss, if the model
    /// has one.
    pub task_embedding: Option<Var>,
}

pub trait TransportModel {
    fn init(&self, rng: &mut dyn rand::RngCore) -> ParamStore;
    fn forward(&self, tape: &Tape, p: &Bound, y: Var) -> Result<TransportOutput>;
}

pub trait PotentialModel {
    fn init(&self, rng: &mut dyn rand::RngCore) -> ParamStore;
    /// One scalar per sample, shape `[B]`.
    fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var>;
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut dyn rand::RngCore) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Adds `{name}.w` `[c_out, c_in, k, k]` and a zero `{name}.b`.
pub(crate) fn add_conv(p: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut dyn rand::RngCore) {
    p.insert(format!("{name}.w"), fan_in_uniform(&[c_out, c_in, k, k], c_in * k * k, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
}

/// Adds a depthwise `{name}.w` `[c, 1, 3, 3]` and a zero `{name}.b`.
pub(crate) fn add_depthwise(p: &mut ParamStore, name: &str, c: usize, rng: &mut dyn rand::RngCore) {
    p.insert(format!("{name}.w"), fan_in_uniform(&[c, 1, 3, 3], 9, rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[c]));
}

pub(crate) fn conv(tape: &Tape, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let k = tape.shape(w)[2];
    tape.conv2d(x, w, Some(p.get(&format!("{name}.b"))?), stride, k / 2)
}

pub(crate) fn depthwise(tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    tape.depthwise_conv2d(x, p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?), 1)
}

#[cfg(test)]
mod tests;
