//! Parameter store, checkpoint format and the four trainable networks.

mod checkpoint;
mod denoiser;
mod heads;
pub mod layers;
mod vae;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use denoiser::{Denoiser, DenoiserConfig, DenoiserOut, NULL_CLASS};
pub use heads::{activate, Latch, LatchConfig, Readout, ReadoutConfig};
pub use vae::{Vae, VaeConfig};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};

/// Named parameter tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) {
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        Ok(&mut self.entries[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Inserts every parameter into `g`. Trainable parameters get gradients,
    /// frozen ones enter as constants.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| g.leaf(t.cast(), trainable))
            .collect();
        Bound {
            ids,
            index: self.index.clone(),
        }
    }

    /// Replaces values of matching names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, model expects {}", other.len(), self.len()),
            ));
        }
        for (name, t) in &mut self.entries {
            let src = other.get(name).map_err(|_| Error::format("checkpoint", format!("missing {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name} has shape {:?}, model expects {:?}", src.shape(), t.shape()),
                ));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Node ids of a [`ParamStore`] bound into one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.index
            .get(name)
            .map(|&i| self.ids[i])
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    /// Ids in store order.
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Gradients in store order; parameters that received none get zeros.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        self.ids
            .iter()
            .map(|&id| g.grad(id).unwrap_or_else(|| Tensor::zeros(g.shape(id).to_vec())))
            .collect()
    }
}

/// What a control head sees as input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NoiseMode {
    /// Clean latents, no time conditioning.
    Clean,
    /// Forward-diffused latents with a time token.
    Forward,
    /// Posterior means `z0|t` taken from sampling trajectories, with a time token.
    #[default]
    Backward,
}

impl NoiseMode {
    pub const ALL: [NoiseMode; 3] = [NoiseMode::Clean, NoiseMode::Forward, NoiseMode::Backward];

    pub fn name(self) -> &'static str {
        match self {
            NoiseMode::Clean => "clean",
            NoiseMode::Forward => "forward",
            NoiseMode::Backward => "backward",
        }
    }

    pub fn uses_time(self) -> bool {
        self != NoiseMode::Clean
    }
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown noise mode {s:?} (clean|forward|backward)")))
    }
}

/// Architecture metadata stored next to the weights.
pub(crate) type Meta = Vec<(String, String)>;

pub(crate) fn meta_get<'a>(meta: &'a [(String, String)], key: &str) -> Result<&'a str> {
    meta.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::format("checkpoint", format!("header lacks {key}")))
}

pub(crate) fn meta_parse<V: FromStr>(meta: &[(String, String)], key: &str) -> Result<V> {
    let raw = meta_get(meta, key)?;
    raw.parse()
        .map_err(|_| Error::format("checkpoint", format!("bad {key} value {raw:?}")))
}

pub(crate) fn expect_model(meta: &[(String, String)], model: &str) -> Result<()> {
    let found = meta_get(meta, "model")?;
    if found != model {
        return Err(Error::format(
            "checkpoint",
            format!("holds a {found}, expected a {model}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_param_count() {
        let mut store = ParamStore::new();
        layers::add_linear(&mut store, "l", 8, 64, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.param_count(), 576);
    }

    #[test]
    fn frozen_binding_has_no_grads() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::full([2], 3.0));
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, false);
        let x = g.leaf(Tensor::full([2], 1.0), true);
        let y = g.mul(x, p.get("w").unwrap()).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 3.0]);
        assert!(g.grad(p.get("w").unwrap()).is_none());
        assert_eq!(p.grads(&g)[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn noise_mode_parse() {
        for m in NoiseMode::ALL {
            assert_eq!(m.name().parse::<NoiseMode>().unwrap(), m);
        }
        assert!("noisy".parse::<NoiseMode>().is_err());
    }
}
