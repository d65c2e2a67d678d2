use std::collections::BTreeSet;

use indexmap::IndexMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Named trainable arrays in insertion order, plus a freeze mask.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: IndexMap<String, Parameter>,
    frozen: BTreeSet<String>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Parameter { value, grad: None });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.entries.get(name)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).and_then(|p| p.grad.as_ref())
    }

    /// Adds `grad` into the stored gradient for `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if grad.len() != p.value.numel() {
            return Err(Error::dim("accumulate_grad", p.value.shape(), &[grad.len()]));
        }
        match &mut p.grad {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(a, b)| *a += b),
            None => {
                p.grad = Some(Tensor::new(p.value.shape().to_vec(), grad.to_vec())?);
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.entries.values_mut().for_each(|p| p.grad = None);
    }

    pub fn freeze(&mut self, name: &str) {
        self.frozen.insert(name.to_string());
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    /// Freezes every parameter whose name does not start with one of `trainable_prefixes`.
    pub fn freeze_all_except(&mut self, trainable_prefixes: &[&str]) {
        let names: Vec<String> = self.entries.keys().cloned().collect();
        for name in names {
            if !trainable_prefixes.iter().any(|p| name.starts_with(p)) {
                self.frozen.insert(name);
            }
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Copies every parameter of `other` whose name starts with `prefix` into `self`,
    /// overwriting values (shapes must agree).
    pub fn copy_from(&mut self, other: &ParameterStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, p) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = self.get_mut(name)?;
            if dst.shape() != p.value.shape() {
                return Err(Error::dim("copy_from", dst.shape(), p.value.shape()));
            }
            *dst = p.value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Copies `{from}.*` parameters of `other` onto the matching `{to}.*` names of `self`.
    pub fn copy_renamed(&mut self, other: &ParameterStore, from: &str, to: &str) -> Result<usize> {
        let src = format!("{from}.");
        let mut copied = 0;
        for (name, p) in other.iter().filter(|(n, _)| n.starts_with(&src)) {
            let target = format!("{to}.{}", &name[src.len()..]);
            let dst = self.get_mut(&target)?;
            if dst.shape() != p.value.shape() {
                return Err(Error::dim("copy_renamed", dst.shape(), p.value.shape()));
            }
            *dst = p.value.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Bit-level equality of values for every parameter name both stores share.
    pub fn values_bit_equal(&self, other: &ParameterStore, name: &str) -> bool {
        match (self.get(name), other.get(name)) {
            (Ok(a), Ok(b)) => {
                a.shape() == b.shape()
                    && a
                        .data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}
