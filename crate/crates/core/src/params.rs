//! Named parameter storage.
//!
//! Every learnable tensor in a model lives in a [`ParamStore`] under a
//! unique hierarchical name (e.g. `encoder.block.attn.w_q`). Store order is
//! construction order and is deterministic, which fixes both the optimizer
//! iteration order and the checkpoint layout.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// What a parameter is, for counting conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamRole {
    /// A linear map's weight matrix (includes low-rank signal factors).
    Weight,
    /// A linear map's bias vector; dropped under the weights-only convention.
    Bias,
    /// Layer-norm gain or shift; retained under every convention.
    Norm,
}

/// Where a parameter sits in the architecture, for breakdowns and the
/// embeddings/head exclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum ParamGroup {
    Embedding,
    Head,
    EncoderBlock,
    DecoderBlock,
    /// The single feedforward block shared model-wide by the one-wide-FFN
    /// architecture.
    SharedFfn,
    EncoderSignal,
    DecoderSignal,
    EncoderNorm,
    DecoderNorm,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embeddings",
            ParamGroup::Head => "head",
            ParamGroup::EncoderBlock => "encoder_blocks",
            ParamGroup::DecoderBlock => "decoder_blocks",
            ParamGroup::SharedFfn => "shared_ffn",
            ParamGroup::EncoderSignal => "encoder_signals",
            ParamGroup::DecoderSignal => "decoder_signals",
            ParamGroup::EncoderNorm => "encoder_norms",
            ParamGroup::DecoderNorm => "decoder_norms",
        }
    }

    pub fn all() -> [ParamGroup; 9] {
        [
            ParamGroup::Embedding,
            ParamGroup::Head,
            ParamGroup::EncoderBlock,
            ParamGroup::DecoderBlock,
            ParamGroup::SharedFfn,
            ParamGroup::EncoderSignal,
            ParamGroup::DecoderSignal,
            ParamGroup::EncoderNorm,
            ParamGroup::DecoderNorm,
        ]
    }
}

/// A named, optionally trainable tensor with an optional gradient slot.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub trainable: bool,
    pub role: ParamRole,
    pub group: ParamGroup,
}

/// Ordered collection of parameters with unique names.
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor<S>,
        role: ParamRole,
        group: ParamGroup,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            trainable: true,
            role,
            group,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Parameters in store (construction) order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar element count over all parameters.
    pub fn total_elements(&self) -> u64 {
        self.params.iter().map(|p| p.value.numel() as u64).sum()
    }
}

/// Per-parameter gradients, aligned with [`ParamStore`] order.
#[derive(Debug, Clone)]
pub struct Gradients<S: Scalar> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor<S>) {
        match &mut self.slots[id.0] {
            Some(existing) => {
                let sum = existing.add(grad).expect("gradient shape drift");
                *existing = sum;
            }
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.slots[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<S>)> {
        self.slots
            .iter_mut()
            .enumerate()
            .filter_map(|(i, g)| g.as_mut().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|g| g.all_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_must_be_unique() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("w", Tensor::zeros(&[2]), ParamRole::Weight, ParamGroup::EncoderBlock)
            .unwrap();
        assert!(store
            .add("w", Tensor::zeros(&[2]), ParamRole::Weight, ParamGroup::EncoderBlock)
            .is_err());
    }

    #[test]
    fn lookup_by_name_and_order() {
        let mut store = ParamStore::<f64>::new();
        let a = store
            .add("a", Tensor::zeros(&[1]), ParamRole::Weight, ParamGroup::EncoderBlock)
            .unwrap();
        let b = store
            .add("b", Tensor::zeros(&[1]), ParamRole::Bias, ParamGroup::EncoderBlock)
            .unwrap();
        assert_eq!(store.id_by_name("a"), Some(a));
        assert_eq!(store.id_by_name("b"), Some(b));
        let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn gradients_accumulate() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", Tensor::zeros(&[2]), ParamRole::Weight, ParamGroup::EncoderBlock)
            .unwrap();
        let mut grads = Gradients::zeros_like(&store);
        let g = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        grads.accumulate(id, &g);
        grads.accumulate(id, &g);
        assert_eq!(grads.get(id).unwrap().data(), &[2.0, 4.0]);
    }
}
