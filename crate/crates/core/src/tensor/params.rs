use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major float tensor. Values are stored as f32; reductions and
/// norms accumulate in f64 before casting back.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Uniform init on [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| rng.random_range(-bound..=bound) as f32)
        .collect();
    Tensor { shape, data }
}

/// Handle into a [`ParamSet`]. Only valid for the set that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named collection of trainable tensors. Registration order is the canonical
/// order for checkpoints and gradient reduction, so it must be deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar count across all tensors.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients, indexed like the owning `ParamSet`. Entries stay
/// `None` for parameters the differentiated output never touched.
#[derive(Debug, Clone)]
pub struct GradMap {
    grads: Vec<Option<Vec<f32>>>,
}

impl GradMap {
    pub fn zeros(params: &ParamSet) -> Self {
        GradMap {
            grads: vec![None; params.len()],
        }
    }

    pub(crate) fn from_parts(grads: Vec<Option<Vec<f32>>>) -> Self {
        GradMap { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    /// Adds `other` in parameter order. Both maps must come from the same
    /// `ParamSet`; accumulation order is fixed so reductions are reproducible.
    pub fn accumulate(&mut self, other: &GradMap) {
        assert_eq!(self.grads.len(), other.grads.len(), "grad maps differ in size");
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            match dst {
                Some(dst) => {
                    assert_eq!(dst.len(), src.len(), "grad length mismatch");
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                None => *dst = Some(src.clone()),
            }
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
}
