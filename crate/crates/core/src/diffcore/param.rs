use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{FlowsError, Result};

/// Index of a [`ParamArray`] inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// A named, shaped, flat array of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(FlowsError::Shape(format!("`{name}` has invalid shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(FlowsError::Shape(format!(
                "`{name}` has shape {shape:?} but {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FlowsError::NonFinite {
                name,
                message: format!("entry {i} is {}", values[i]),
            });
        }
        Ok(ParamArray {
            name,
            shape,
            values,
        })
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        ParamArray {
            name: name.into(),
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows and columns when viewed as a matrix; vectors are a single row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            other => (other[0], other[1..].iter().product()),
        }
    }

    pub fn to_mat(&self) -> Array2<f64> {
        let (r, c) = self.matrix_dims();
        Array2::from_shape_vec((r, c), self.values.clone()).expect("shape checked at construction")
    }
}

/// An ordered collection of parameter arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub arrays: Vec<ParamArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, array: ParamArray) -> ParamId {
        self.arrays.push(array);
        ParamId(self.arrays.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ParamArray {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamArray {
        &mut self.arrays[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.arrays.iter().position(|a| a.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(ParamArray::len).sum()
    }

    /// Checks that `other` has the same names and shapes, in the same order.
    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(FlowsError::Shape(format!(
                "expected {} parameter arrays, found {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.arrays.iter().zip(&other.arrays) {
            if a.name != b.name || a.shape != b.shape {
                return Err(FlowsError::Shape(format!(
                    "expected `{}` {:?}, found `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|a| ParamArray::zeros(a.name.clone(), a.shape.clone()))
                .collect(),
        }
    }
}

/// Gradients for every array of a [`ParamSet`], same order and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub grads: Vec<Vec<f64>>,
}

impl GradientRecord {
    pub fn zeros_like(params: &ParamSet) -> Self {
        GradientRecord {
            grads: params.arrays.iter().map(|a| vec![0.0; a.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, other: &GradientRecord) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flat_map(|g| g.iter_mut()) {
            *g *= factor;
        }
    }

    /// Returns the name of the first array holding a non-finite entry.
    pub fn first_non_finite<'a>(&self, params: &'a ParamSet) -> Option<&'a str> {
        self.grads
            .iter()
            .zip(&params.arrays)
            .find(|(g, _)| g.iter().any(|v| !v.is_finite()))
            .map(|(_, a)| a.name.as_str())
    }
}
