use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{Float, Tape, Tensor};
use crate::error::{Error, Result};

/// A registered parameter. `locked` parameters are base weights of a frozen
/// component and can never be switched to trainable.
#[derive(Debug, Clone)]
pub struct Param<F: Float> {
    pub tensor: Tensor<F>,
    pub locked: bool,
}

impl<F: Float> Param<F> {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad
    }
}

/// Named parameter registry keyed by hierarchical dotted names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F: Float> {
    entries: BTreeMap<String, Param<F>>,
    version: u64,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            version: 0,
        }
    }

    /// Registers a trainable or frozen (but unlockable) parameter.
    pub fn insert(&mut self, name: &str, tensor: Tensor<F>, trainable: bool) -> Result<()> {
        self.insert_inner(name, tensor, trainable, false)
    }

    /// Registers a permanently frozen base weight.
    pub fn insert_locked(&mut self, name: &str, tensor: Tensor<F>) -> Result<()> {
        self.insert_inner(name, tensor, false, true)
    }

    fn insert_inner(&mut self, name: &str, mut tensor: Tensor<F>, trainable: bool, locked: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Param(format!("duplicate parameter name {name}")));
        }
        tensor.requires_grad = trainable;
        tensor.grad = None;
        self.entries.insert(name.to_string(), Param { tensor, locked });
        self.version += 1;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<F>> {
        self.version += 1;
        self.entries.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Param(format!("unknown parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Result<&Param<F>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter {name}")))
    }

    /// Mutable access bumps the store version, invalidating decode caches.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.version += 1;
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Param(format!("unknown parameter {name}")))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter {name}")))?;
        if trainable && p.locked {
            return Err(Error::Policy(format!(
                "{name} is a frozen base weight and cannot be made trainable"
            )));
        }
        p.tensor.requires_grad = trainable;
        if !trainable {
            p.tensor.grad = None;
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<F>)> {
        self.version += 1;
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable())
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn count_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn count_all(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    /// Monotone counter bumped by every mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.grad = None;
        }
    }

    /// Adds the gradients of every parameter leaf recorded on `tape` into
    /// the matching parameter's `grad` buffer. Frozen parameters never
    /// receive a buffer.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>) -> Result<()> {
        for (name, var) in tape.param_leaves() {
            let p = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Param(format!("tape references unknown parameter {name}")))?;
            if !p.trainable() {
                continue;
            }
            if let Some(g) = tape.grad(var) {
                match &mut p.tensor.grad {
                    Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &x)| *b += x),
                    None => p.tensor.grad = Some(g.to_vec()),
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the names and raw little-endian bytes of every
    /// parameter that is currently frozen.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, p) in &self.entries {
            if p.trainable() {
                continue;
            }
            h.update(name.as_bytes());
            buf.clear();
            for &x in p.tensor.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    pub fn global_grad_norm(&self) -> f64 {
        self.entries
            .values()
            .filter_map(|p| p.tensor.grad.as_ref())
            .flat_map(|g| g.iter().map(|x| x.as_f64() * x.as_f64()))
            .sum::<f64>()
            .sqrt()
    }
}
