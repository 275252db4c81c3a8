//! Dense row-major f64 tensors and named trainable parameters.

use crate::error::{Error, Result};

/// Dense tensor with row-major values. Rank 0 (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, validating that every extent is positive, the value
    /// count matches the shape, and every value is finite.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("extent of axis {axis} is zero"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!(
                    "shape {:?} implies {} values, got {}",
                    shape,
                    numel,
                    values.len()
                ),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "tensor",
                detail: format!("non-finite value at flat index {i}"),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            values: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Extent of axis 0 for rank-2 tensors (the temporal axis).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Extent of axis 1 for rank-2 tensors (the channel axis).
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Row `t` of a rank-2 tensor.
    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.cols();
        &self.values[t * d..(t + 1) * d]
    }

    /// Column `c` of a rank-2 tensor, copied out.
    pub fn column(&self, c: usize) -> Vec<f64> {
        let (t, d) = (self.rows(), self.cols());
        (0..t).map(|r| self.values[r * d + c]).collect()
    }
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// A named trainable tensor with its gradient and Adam moment buffers.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub(crate) name: String,
    pub(crate) value: Tensor,
    pub(crate) grad: Vec<f64>,
    pub(crate) adam_m: Vec<f64>,
    pub(crate) adam_v: Vec<f64>,
    pub(crate) steps: u64,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// The full set of parameters of one model, with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Registers a parameter. Names must be unique within the set.
    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        let n = value.numel();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            steps: 0,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids of parameters whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}
