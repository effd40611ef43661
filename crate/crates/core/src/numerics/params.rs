use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Named parameter collection owned by one model component.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

/// Tape handles for every parameter of a store, valid for one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes the tape handle of one parameter.
    pub fn with_var(mut self, id: ParamId, var: Var) -> Bound {
        self.vars[id.0] = var;
        self
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new trainable parameter. Panics on a duplicate name, which
    /// is always a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            requires_grad: true,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Enables or disables training for every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.requires_grad = trainable;
        }
    }

    /// Places all parameters on `tape`; trainable ones collect gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), p.requires_grad))
                .collect(),
        }
    }

    /// Places all parameters on `tape` as constants.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect(),
        }
    }

    /// Adds tape gradients into each trainable parameter's `grad`. Trainable
    /// parameters that the loss did not reach receive a zero gradient.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if !p.requires_grad {
                continue;
            }
            let g = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            match &mut p.grad {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies values of same-named parameters from `other`.
    ///
    /// Every parameter of `self` starting with `prefix` must exist in `other`
    /// with an identical shape.
    pub fn copy_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = other.id(&p.name).map(|id| other.value(id)).ok_or_else(|| Error::Checkpoint {
                name: p.name.clone(),
                detail: "missing from source".into(),
            })?;
            if src.shape() != p.value.shape() {
                return Err(Error::Checkpoint {
                    name: p.name.clone(),
                    detail: format!("shape {:?} but expected {:?}", src.shape(), p.value.shape()),
                });
            }
            p.value = src.clone();
            copied += 1;
        }
        Ok(copied)
    }

    /// Copies values from `other`, renaming `from` prefixes to `to`.
    pub fn copy_renamed(&mut self, other: &ParamStore, from: &str, to: &str) -> Result<usize> {
        let mut copied = 0;
        for src in other.iter().filter(|p| p.name.starts_with(from)) {
            let name = format!("{to}{}", &src.name[from.len()..]);
            let id = self.id(&name).ok_or_else(|| Error::Checkpoint {
                name: name.clone(),
                detail: "missing from destination".into(),
            })?;
            let dst = self.get_mut(id);
            if dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint {
                    name,
                    detail: format!("shape {:?} but expected {:?}", src.value.shape(), dst.value.shape()),
                });
            }
            dst.value = src.value.clone();
            copied += 1;
        }
        Ok(copied)
    }
}
