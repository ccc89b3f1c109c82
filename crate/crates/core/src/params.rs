//! Named parameter store with component tags.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor5};

/// Which part of the network a parameter belongs to. Every parameter has exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Stem,
    Encoder,
    Decoder,
    SegHead,
    ReconHead,
    MaskToken,
    Densify,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Stem,
        Component::Encoder,
        Component::Decoder,
        Component::SegHead,
        Component::ReconHead,
        Component::MaskToken,
        Component::Densify,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Component::Stem => "stem",
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::SegHead => "seg_head",
            Component::ReconHead => "recon_head",
            Component::MaskToken => "mask_token",
            Component::Densify => "densify",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::UnknownComponent(s.to_string()))
    }
}

/// Parses a comma-separated component list, e.g. `"stem,encoder"`.
pub fn parse_components(list: &str) -> Result<BTreeSet<Component>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Component::from_str)
        .collect()
}

#[derive(Clone, Debug)]
pub struct Param<T = f32> {
    pub name: String,
    pub value: Tensor5<T>,
    pub grad: Tensor5<T>,
    pub component: Component,
    /// Whether weight decay applies (off for norm affine terms and mask tokens).
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor5<T>, component: Component, decay: bool) -> usize {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            grad: Tensor5::zeros(value.shape()),
            value,
            component,
            decay,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
    pub fn get(&self, id: usize) -> &Param<T> {
        &self.params[id]
    }
    pub fn get_mut(&mut self, id: usize) -> &mut Param<T> {
        &mut self.params[id]
    }
    pub fn id(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }
    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|i| &self.params[i])
    }
    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }
    pub fn value(&self, id: usize) -> &Tensor5<T> {
        &self.params[id].value
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, id: usize, grad: &[T]) {
        let g = self.params[id].grad.data_mut();
        debug_assert_eq!(g.len(), grad.len());
        g.iter_mut().zip(grad).for_each(|(a, &b)| *a += b);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    component: p.component,
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
