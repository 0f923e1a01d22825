use std::collections::BTreeSet;

use rand::Rng;

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Index of a trainable tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor under a unique name. The tensor is marked as
    /// requiring gradients.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name:?}"
        );
        tensor.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Kaiming-normal initialisation for a weight with the given fan-in.
    pub fn add_kaiming<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        self.add(name, Tensor::randn(shape, std, rng))
    }

    /// Glorot-uniform initialisation for a `[fan_in × fan_out]` matrix.
    pub fn add_xavier<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add(name, Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Copy gradients of every bound parameter out of a graph after
    /// `backward`. Parameters the graph never touched get no gradient.
    pub fn collect_grads(&mut self, graph: &Graph) -> Result<()> {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            match graph.param_var(ParamId(i)).and_then(|v| graph.grad(v)) {
                Some(g) => t.set_grad(g.to_vec())?,
                None => t.zero_grad(),
            }
        }
        Ok(())
    }

    /// Global L2 norm of all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for t in &mut self.tensors {
                if let Some(g) = t.grad.as_mut() {
                    g.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        norm
    }

    /// Replace tensor values by name, checking that the name set and shapes
    /// match exactly.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        let expected: BTreeSet<&str> = self.names.iter().map(String::as_str).collect();
        let got: BTreeSet<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        if expected != got {
            let missing: Vec<_> = expected.difference(&got).collect();
            let extra: Vec<_> = got.difference(&expected).collect();
            return Err(Error::Checkpoint(format!(
                "parameter set differs: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for (name, value) in named {
            let id = self.id_of(&name).expect("checked above");
            let slot = &mut self.tensors[id.0];
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match model shape {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(value.data());
        }
        Ok(())
    }
}
