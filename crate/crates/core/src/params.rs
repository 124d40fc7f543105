//! Ordered collections of named parameter tensors.

use crate::error::{Error, FormatErrorKind, Result};
use crate::graph::{Graph, Var};
use crate::io::igt1::Archive;
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

/// Named tensors in a fixed order determined by a model configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// How `init` fills a tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`, where `fan_in` is the first dimension.
    FanIn,
    Zeros,
    Ones,
}

impl ParamSet {
    pub fn zeros(layout: &[(String, Vec<usize>)]) -> Self {
        Self {
            names: layout.iter().map(|(n, _)| n.clone()).collect(),
            tensors: layout.iter().map(|(_, s)| Tensor::zeros(s)).collect(),
        }
    }

    /// Fills tensors in layout order from one generator stream.
    pub fn init(layout: &[(String, Vec<usize>, Init)], rng: &mut SeededRng) -> Self {
        let mut names = Vec::with_capacity(layout.len());
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape, init) in layout {
            names.push(name.clone());
            tensors.push(match init {
                Init::FanIn => rng::uniform_tensor(rng, shape, 1.0 / (shape[0] as f64).sqrt()),
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::full(shape, 1.0),
            });
        }
        Self { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Records every tensor as a constant leaf.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn write_into(&self, archive: &mut Archive) -> Result<()> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            archive.insert(n.clone(), t.clone())?;
        }
        Ok(())
    }

    /// Reads every tensor of `layout` from `archive`, checking shapes.
    pub fn from_archive(archive: &Archive, layout: &[(String, Vec<usize>)]) -> Result<Self> {
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            tensors.push(archive.require(name, shape)?.clone());
        }
        Ok(Self {
            names: layout.iter().map(|(n, _)| n.clone()).collect(),
            tensors,
        })
    }

    /// Replaces the tensors, which must match the current shapes.
    pub fn assign(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::dim("assign", &[self.tensors.len()], &[tensors.len()]));
        }
        for (name, (old, new)) in self.names.iter().zip(self.tensors.iter().zip(&tensors)) {
            if old.shape() != new.shape() {
                return Err(Error::format(
                    FormatErrorKind::ShapeMismatch,
                    0,
                    format!("{name}: expected {:?}, found {:?}", old.shape(), new.shape()),
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}
