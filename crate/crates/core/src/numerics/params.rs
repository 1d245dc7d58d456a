use std::collections::BTreeMap;
use std::rc::Rc;

use super::tape::{Grads, Tape};
use super::{NdArray, Scalar};
use crate::error::{dim_err, Error, Result};

/// One named tensor with its gradient slot.
#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    value: Rc<NdArray<T>>,
    pub grad: NdArray<T>,
    pub trainable: bool,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn value(&self) -> &NdArray<T> {
        &self.value
    }

    pub fn value_rc(&self) -> Rc<NdArray<T>> {
        Rc::clone(&self.value)
    }

    /// Mutable access; copies the value first if a live tape still shares it.
    pub fn value_mut(&mut self) -> &mut NdArray<T> {
        Rc::make_mut(&mut self.value)
    }
}

/// Named trainable tensors keyed by hierarchical dotted names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: NdArray<T>,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let grad = NdArray::zeros(value.shape());
        self.entries.insert(
            name,
            ParamEntry {
                value: Rc::new(value),
                grad,
                trainable,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_owned()))
    }

    pub fn value(&self, name: &str) -> Result<&NdArray<T>> {
        Ok(self.entry(name)?.value())
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut NdArray<T>> {
        Ok(self.entry_mut(name)?.value_mut())
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set(&mut self, name: &str, value: NdArray<T>) -> Result<()> {
        let e = self.entry_mut(name)?;
        if e.value.shape() != value.shape() {
            return Err(dim_err(
                "ParamStore::set",
                format!(
                    "`{name}` has shape {:?}, got {:?}",
                    e.value.shape(),
                    value.shape()
                ),
            ));
        }
        e.value = Rc::new(value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn num_trainable_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, e)| e.trainable && k.starts_with(prefix))
            .map(|(_, e)| e.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the gradients of every parameter leaf on `tape` into the slots.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Grads<T>, weight: T) -> Result<()> {
        for (id, name) in tape.param_leaves() {
            let Some(g) = grads.by_id(id) else { continue };
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.to_owned()))?;
            if !e.trainable {
                continue;
            }
            for (acc, &v) in e.grad.data_mut().iter_mut().zip(g.data()) {
                *acc += weight * v;
            }
        }
        Ok(())
    }

    pub fn grad_norm(&self) -> T {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.grad.sq_norm())
            .sum::<T>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, c: T) {
        for e in self.entries.values_mut() {
            e.grad.scale_assign(c);
        }
    }

    /// Same names and values in another precision; gradients reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, e) in &self.entries {
            out.insert(k.clone(), e.value.cast(), e.trainable)
                .expect("names are unique");
        }
        out
    }
}
