//! On-disk model (`PKM` manifest + `PKMT` blob) and dataset formats.
//!
//! A model is a JSON manifest plus a tensor blob. The CLI keeps the blob next
//! to the manifest at `<manifest>.bin` (see [`blob_path_for`]).

pub mod blob;
mod graph;
mod validate;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use blob::{decode_blob, encode_blob, BlobError};
pub use graph::{
    Attrs, LayerKind, LayerNode, Manifest, ModelGraph, Padding, Shape, WeightRefs, FORMAT_TAG,
};
pub use validate::{
    infer_shapes, node_shapes, validate_graph, window_extent, Violation, ViolationKind,
};

use crate::tensor::{TensorError, WeightTensor};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: manifest schema violation: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest schema violation: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Blob {
        path: String,
        #[source]
        source: BlobError,
    },
    #[error("invalid graph: {0}")]
    Invalid(Violation),
    #[error("dataset has {inputs} inputs but {labels} labels")]
    CountMismatch { inputs: usize, labels: usize },
    #[error("label {index} has non-integral value {value}")]
    NonIntegralLabel { index: usize, value: f32 },
    #[error("label {index} is negative ({value})")]
    NegativeLabel { index: usize, value: f32 },
    #[error("dataset shape: {0}")]
    DatasetShape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::Io { .. } => "Io",
            FormatError::Json { .. } | FormatError::Schema(_) => "Schema",
            FormatError::Blob { source, .. } => source.code(),
            FormatError::Invalid(v) => v.kind.code(),
            FormatError::CountMismatch { .. } => "CountMismatch",
            FormatError::NonIntegralLabel { .. } => "NonIntegralLabel",
            FormatError::NegativeLabel { .. } => "NegativeLabel",
            FormatError::DatasetShape(_) => "DatasetShape",
            FormatError::Tensor(e) => e.code(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Default blob location for a manifest path: `<manifest>.bin`.
pub fn blob_path_for(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

pub fn read_blob(path: &Path) -> Result<Vec<(String, WeightTensor)>, FormatError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_blob(&bytes).map_err(|source| FormatError::Blob {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_blob<'a, I>(path: &Path, tensors: I) -> Result<(), FormatError>
where
    I: IntoIterator<Item = (&'a str, &'a WeightTensor)>,
{
    let bytes = encode_blob(tensors).map_err(|source| FormatError::Blob {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Manifest, FormatError> {
    let m: Manifest = serde_json::from_str(text).map_err(|source| FormatError::Json {
        path: path.display().to_string(),
        source,
    })?;
    if m.format != FORMAT_TAG {
        return Err(FormatError::Schema(format!(
            "format must be {FORMAT_TAG:?}, got {:?}",
            m.format
        )));
    }
    Ok(m)
}

/// Loads and fully validates a model. The first violation becomes the error.
pub fn load_model(manifest: &Path, blob: &Path) -> Result<ModelGraph, FormatError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let m = parse_manifest(&text, manifest)?;
    let tensors: BTreeMap<_, _> = read_blob(blob)?.into_iter().collect();
    let g = ModelGraph::from_manifest(m, tensors);
    if let Some(v) = validate_graph(&g).into_iter().next() {
        return Err(FormatError::Invalid(v));
    }
    Ok(g)
}

pub fn manifest_json(g: &ModelGraph) -> String {
    let mut s = serde_json::to_string_pretty(&g.manifest()).expect("manifest serializes");
    s.push('\n');
    s
}

/// Writes a validated graph. Refuses graphs with violations.
pub fn save_model(g: &ModelGraph, manifest: &Path, blob: &Path) -> Result<(), FormatError> {
    if let Some(v) = validate_graph(g).into_iter().next() {
        return Err(FormatError::Invalid(v));
    }
    fs::write(manifest, manifest_json(g)).map_err(io_err(manifest))?;
    write_blob(blob, g.tensors.iter().map(|(n, t)| (n.as_str(), t)))
}

/// Evaluation samples `(N, C, H, W)` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: WeightTensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: WeightTensor, labels: Vec<usize>) -> Result<Self, FormatError> {
        if inputs.rank() != 4 {
            return Err(FormatError::DatasetShape(format!(
                "inputs must be rank 4 (N,C,H,W), got {:?}",
                inputs.shape()
            )));
        }
        if inputs.outer() != labels.len() {
            return Err(FormatError::CountMismatch {
                inputs: inputs.outer(),
                labels: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of each sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        self.inputs.slab(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &WeightTensor {
        &self.inputs
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = indices.len();
        let data = indices
            .iter()
            .flat_map(|&i| self.sample(i).iter().copied())
            .collect();
        Self {
            inputs: WeightTensor::new(shape, data).expect("selection keeps shape consistent"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn single_tensor(path: &Path) -> Result<WeightTensor, FormatError> {
    let mut ts = read_blob(path)?;
    if ts.len() != 1 {
        return Err(FormatError::DatasetShape(format!(
            "{}: expected exactly one tensor, found {}",
            path.display(),
            ts.len()
        )));
    }
    Ok(ts.remove(0).1)
}

pub fn load_dataset(inputs: &Path, labels: &Path) -> Result<Dataset, FormatError> {
    let x = single_tensor(inputs)?;
    let y = single_tensor(labels)?;
    if y.rank() != 1 {
        return Err(FormatError::DatasetShape(format!(
            "labels must be rank 1, got {:?}",
            y.shape()
        )));
    }
    if x.rank() == 4 && x.outer() != y.len() {
        return Err(FormatError::CountMismatch {
            inputs: x.outer(),
            labels: y.len(),
        });
    }
    let labels = y
        .data()
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if value.fract() != 0.0 {
                Err(FormatError::NonIntegralLabel { index, value })
            } else if value < 0.0 {
                Err(FormatError::NegativeLabel { index, value })
            } else {
                Ok(value as usize)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Dataset::new(x, labels)
}

pub fn save_dataset(d: &Dataset, inputs: &Path, labels: &Path) -> Result<(), FormatError> {
    write_blob(inputs, [("inputs", &d.inputs)])?;
    let y = WeightTensor::new(
        vec![d.labels.len()],
        d.labels.iter().map(|&l| l as f32).collect(),
    )?;
    write_blob(labels, [("labels", &y)])
}
