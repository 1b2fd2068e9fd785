use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::error::{DiffError, Result};
use super::tensor::Tensor;

/// Partition tag carried by every parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ParamGroup {
    /// Linear classifier weights and biases of the cascade heads.
    Classifier,
    Other,
    /// The two lowest backbone blocks.
    BackboneBottom,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Classifier => "CLASSIFIER",
            ParamGroup::Other => "OTHER",
            ParamGroup::BackboneBottom => "BACKBONE_BOTTOM",
        }
    }
}

/// First/second moment estimates plus the step counter for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
    pub(crate) step: u64,
}

impl AdamState {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    tensor: Tensor,
    trainable: bool,
    group: ParamGroup,
    adam: AdamState,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.values()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.tensor.grad()
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Tensor, &mut AdamState) {
        (&mut self.tensor, &mut self.adam)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Owns every parameter of a model, addressed by id or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let adam = AdamState::new(tensor.numel());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor,
            trainable: true,
            group,
            adam,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Result<&Param> {
        self.id(name)
            .map(|id| self.get(id))
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets every parameter's trainable flag from a predicate.
    pub fn set_trainable_where(&mut self, mut pred: impl FnMut(&Param) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(p);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        self.params[id.0].tensor.accumulate_grad(delta);
    }

    /// Overwrites the values of a parameter, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if values.len() != p.tensor.numel() {
            return Err(DiffError::ShapeMismatch {
                op: "set_values",
                shapes: vec![p.tensor.shape().to_vec(), vec![values.len()]],
            });
        }
        p.tensor.values_mut().copy_from_slice(values);
        Ok(())
    }

    /// Replaces a parameter's tensor (possibly with a new shape) and resets its
    /// optimizer state. The group tag is kept.
    pub fn replace(&mut self, id: ParamId, tensor: Tensor) {
        let p = &mut self.params[id.0];
        p.adam = AdamState::new(tensor.numel());
        p.tensor = tensor;
    }

    pub fn reset_optimizer_state(&mut self) {
        for p in &mut self.params {
            p.adam = AdamState::new(p.tensor.numel());
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the selected
    /// parameters, in store order.
    pub fn checksum_where(&self, mut pred: impl FnMut(&Param) -> bool) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| pred(p)) {
            hasher.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.values() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }
}
