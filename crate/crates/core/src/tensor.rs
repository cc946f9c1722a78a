//! Dense tensors and named parameters.
//!
//! Values are stored as `f32`; every reduction (dot products, norms, loss
//! sums) accumulates in `f64`. Layout is contiguous row-major with axis
//! order batch x channel x height x width for 4-order tensors.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense n-dimensional array (order <= 4) with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::shape(
                "tensor",
                format!("order must be 1..=4, got {}", shape.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} wants {numel} scalars, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
            grad: None,
        }
    }

    /// Uniform values in [lo, hi), drawn in flat index order.
    pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Self {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Gradient buffer, if one has been attached.
    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Attaches (or resets) a zero gradient buffer of matching length.
    pub fn ensure_grad(&mut self) -> &mut [f32] {
        let n = self.data.len();
        let g = self.grad.get_or_insert_with(|| vec![0.0; n]);
        g.as_mut_slice()
    }

    pub fn clear_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f32]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let g = self.ensure_grad();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Flat offset of (b, c, y, x) in a 4-order tensor.
    #[inline]
    pub fn idx4(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx4(b, c, y, x)]
    }

    #[inline]
    pub fn set4(&mut self, b: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx4(b, c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.to_string(),
            })
        }
    }
}

/// A learnable tensor with a persistent gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad_accum: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad_accum = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad_accum,
        }
    }

    pub fn add_grad(&mut self, grad: &Tensor) {
        debug_assert_eq!(grad.shape(), self.value.shape());
        for (a, g) in self
            .grad_accum
            .data_mut()
            .iter_mut()
            .zip(grad.data().iter())
        {
            *a += g;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad_accum.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Handle into a [`Params`] arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Arena of all model parameters, addressed by [`ParamId`].
///
/// Names must be unique; registration order is the canonical order used by
/// the optimizer and the checkpoint format.
#[derive(Debug, Default, Clone)]
pub struct Params {
    items: Vec<Param>,
}

impl Params {
    pub fn new() -> Self {
        Params { items: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.items.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.items.push(Param::new(name, value));
        ParamId(self.items.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.items[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.items[id.0].value
    }

    pub fn add_grad(&mut self, id: ParamId, grad: &Tensor) {
        self.items[id.0].add_grad(grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.items.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.items.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.items.iter_mut().for_each(Param::zero_grad);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.items.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// Xavier-uniform weight init: U(+-sqrt(6 / (fan_in + fan_out))).
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::uniform(shape, -bound, bound, rng)
}
