//! Named parameter storage and per-pass binding onto a tape.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use crate::tensor::{Tape, Tensor, Var};

/// Which part of the network a parameter belongs to. Drives the warm-up
/// freeze: only [`ParamGroup::Head`] trains while the rest is frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Patch embedding, class/position/camera embeddings and trunk layers.
    Backbone,
    /// Direction-specific encoder layers of the pyramid.
    Pyramid,
    /// Branch BatchNorm and classifier layers.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            group,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter as a leaf of `tape`, borrowing the values.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, requires_grad: bool) -> Bound {
        self.bind_with(tape, |_| requires_grad)
    }

    /// Like [`bind`](Self::bind), tracking gradients only for parameters
    /// accepted by `trainable`.
    pub fn bind_with<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        trainable: impl Fn(&Param) -> bool,
    ) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if trainable(p) {
                        tape.param(&p.value)
                    } else {
                        tape.input(&p.value)
                    }
                })
                .collect(),
        )
    }
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
