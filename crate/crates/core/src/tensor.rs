//! Dense `f32` weight storage and the channel-removal primitives used by the
//! pruner.
//!
//! Rank-4 tensors use the axis order `(out_channels, in_channels, kernel_h,
//! kernel_w)`; rank-2 tensors are dense weights `(out, in)`. Data is row-major.
//! Every operation returns a fresh tensor.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but data has {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: rank must be 1..=4 with every extent >= 1")]
    InvalidShape(Vec<usize>),
    #[error("{context}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        context: String,
        index: usize,
        extent: usize,
    },
    #[error("{context}: duplicate index {index}")]
    DuplicateIndex { context: String, index: usize },
    #[error("{context}: layer would be emptied")]
    WouldEmpty { context: String },
    #[error("expected rank {expected}, got shape {shape:?}")]
    RankMismatch { expected: String, shape: Vec<usize> },
    #[error("vector lengths differ: {0} vs {1}")]
    VectorLength(usize, usize),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

impl TensorError {
    pub fn code(&self) -> &'static str {
        match self {
            TensorError::LengthMismatch { .. } => "LengthMismatch",
            TensorError::InvalidShape(_) => "InvalidShape",
            TensorError::IndexOutOfRange { .. } => "IndexOutOfRange",
            TensorError::DuplicateIndex { .. } => "DuplicateIndex",
            TensorError::WouldEmpty { .. } => "LayerEmptied",
            TensorError::RankMismatch { .. } => "RankMismatch",
            TensorError::VectorLength(..) => "VectorLength",
            TensorError::NonFinite(_) => "NonFinite",
        }
    }
}

/// A dense row-major `f32` tensor of rank 1 to 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
            return Err(TensorError::InvalidShape(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of slabs along axis 0 (filters for conv weights).
    pub fn outer(&self) -> usize {
        self.shape[0]
    }

    /// Elements per slab along axis 0.
    pub fn slab_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Flat view of slab `j` along axis 0.
    pub fn slab(&self, j: usize) -> &[f32] {
        let n = self.slab_len();
        &self.data[j * n..(j + 1) * n]
    }

    /// Index of the first non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn check_finite(&self) -> Result<(), TensorError> {
        match self.first_non_finite() {
            Some(i) => Err(TensorError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn scaled(&self, c: f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }
}

/// Copies filter `j` out of a rank-4 conv weight as a `(in, kH, kW)` tensor.
pub fn slice_filter(t: &WeightTensor, j: usize) -> Result<WeightTensor, TensorError> {
    if t.rank() != 4 {
        return Err(TensorError::RankMismatch {
            expected: "4".into(),
            shape: t.shape.clone(),
        });
    }
    if j >= t.outer() {
        return Err(TensorError::IndexOutOfRange {
            context: "filter".into(),
            index: j,
            extent: t.outer(),
        });
    }
    WeightTensor::new(t.shape[1..].to_vec(), t.slab(j).to_vec())
}

fn checked_index_set(
    indices: &[usize],
    extent: usize,
    context: &str,
) -> Result<BTreeSet<usize>, TensorError> {
    let mut set = BTreeSet::new();
    for &i in indices {
        if i >= extent {
            return Err(TensorError::IndexOutOfRange {
                context: context.into(),
                index: i,
                extent,
            });
        }
        if !set.insert(i) {
            return Err(TensorError::DuplicateIndex {
                context: context.into(),
                index: i,
            });
        }
    }
    if set.len() >= extent {
        return Err(TensorError::WouldEmpty {
            context: context.into(),
        });
    }
    Ok(set)
}

/// Removes slabs `indices` along axis 0. Survivors keep their relative order.
pub fn drop_output_filters(
    t: &WeightTensor,
    indices: &[usize],
) -> Result<WeightTensor, TensorError> {
    let removed = checked_index_set(indices, t.outer(), "output filters")?;
    if removed.is_empty() {
        return Ok(t.clone());
    }
    let mut shape = t.shape.clone();
    shape[0] -= removed.len();
    let mut data = Vec::with_capacity(shape.iter().product());
    for j in (0..t.outer()).filter(|j| !removed.contains(j)) {
        data.extend_from_slice(t.slab(j));
    }
    WeightTensor::new(shape, data)
}

/// Removes input channels `indices` along axis 1 of a rank-2 or rank-4 tensor.
pub fn drop_input_channels(
    t: &WeightTensor,
    indices: &[usize],
) -> Result<WeightTensor, TensorError> {
    if t.rank() != 2 && t.rank() != 4 {
        return Err(TensorError::RankMismatch {
            expected: "2 or 4".into(),
            shape: t.shape.clone(),
        });
    }
    let inputs = t.shape[1];
    let removed = checked_index_set(indices, inputs, "input channels")?;
    if removed.is_empty() {
        return Ok(t.clone());
    }
    // Elements per input channel: 1 for dense, kH*kW for conv.
    let inner: usize = t.shape[2..].iter().product();
    let mut shape = t.shape.clone();
    shape[1] -= removed.len();
    let mut data = Vec::with_capacity(shape.iter().product());
    for row in t.data.chunks_exact(inputs * inner) {
        for c in (0..inputs).filter(|c| !removed.contains(c)) {
            data.extend_from_slice(&row[c * inner..(c + 1) * inner]);
        }
    }
    WeightTensor::new(shape, data)
}

/// Removes entries from a rank-1 tensor (bias, affine scale/shift).
pub fn drop_entries(t: &WeightTensor, indices: &[usize]) -> Result<WeightTensor, TensorError> {
    if t.rank() != 1 {
        return Err(TensorError::RankMismatch {
            expected: "1".into(),
            shape: t.shape.clone(),
        });
    }
    drop_output_filters(t, indices)
}

/// `sqrt(sum((a_i - b_i)^2))`, accumulated in `f64`.
pub fn euclidean_distance(a: &[f32], b: &[f32]) -> Result<f64, TensorError> {
    if a.len() != b.len() {
        return Err(TensorError::VectorLength(a.len(), b.len()));
    }
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}
