use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Row-major serialized form of one matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_mat(name: &str, m: &Mat) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Self {
            name: name.to_owned(),
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        if self.rows * self.cols != self.data.len() {
            return Err(Error::DimensionMismatch(format!(
                "tensor {} declares {}x{} but holds {} values",
                self.name,
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(Mat::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Flat registry of named parameter matrices. Biases are `n × 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Mat] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients(
            self.tensors
                .iter()
                .map(|t| Mat::zeros(t.nrows(), t.ncols()))
                .collect(),
        )
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| Tensor::from_mat(n, t))
            .collect()
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        let mut set = Self::new();
        for t in tensors {
            set.add(t.name.clone(), t.to_mat()?);
        }
        Ok(set)
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn assign(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names
            || self
                .tensors
                .iter()
                .zip(&other.tensors)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::DimensionMismatch(
                "parameter layouts differ".into(),
            ));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

/// One gradient matrix per parameter, same layout as the owning [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Mat>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.0[id.0]
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.0 {
            *g *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }
}
