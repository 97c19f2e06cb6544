use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::WeightTensor;

pub const FORMAT_TAG: &str = "pkm-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "input")]
    Input,
    #[serde(rename = "conv2d")]
    Conv2d,
    #[serde(rename = "dense")]
    Dense,
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d,
    #[serde(rename = "globalavgpool")]
    GlobalAvgPool,
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "add")]
    Add,
    #[serde(rename = "affine")]
    Affine,
}

impl LayerKind {
    pub fn arity(self) -> usize {
        match self {
            LayerKind::Input => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Dense => "dense",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::GlobalAvgPool => "globalavgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
            LayerKind::Affine => "affine",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding split floor-left / ceil-right; output extent `ceil(in / stride)`.
    Same,
    Valid,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

/// Tensor-store references held by a node.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightRefs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<String>,
}

impl WeightRefs {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &str)> {
        [
            ("weight", &self.weight),
            ("bias", &self.bias),
            ("scale", &self.scale),
            ("shift", &self.shift),
        ]
        .into_iter()
        .filter_map(|(role, name)| name.as_deref().map(|n| (role, n)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub attrs: Attrs,
    #[serde(default)]
    pub weights: WeightRefs,
    #[serde(default)]
    pub residual_last: bool,
}

impl LayerNode {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            attrs: Attrs::default(),
            weights: WeightRefs::default(),
            residual_last: false,
        }
    }

    /// A conv2d layer that is not flagged `residual_last`.
    pub fn is_prunable(&self) -> bool {
        self.kind == LayerKind::Conv2d && !self.residual_last
    }
}

/// The JSON manifest document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub nodes: Vec<LayerNode>,
}

/// Activation shape flowing along a graph edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    /// Channel count for maps; feature count for flat vectors.
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Map { c, .. } => c,
            Shape::Flat(d) => d,
        }
    }

    pub fn numel(&self) -> usize {
        match *self {
            Shape::Map { c, h, w } => c * h * w,
            Shape::Flat(d) => d,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Map { c, h, w } => write!(f, "({c},{h},{w})"),
            Shape::Flat(d) => write!(f, "({d})"),
        }
    }
}

/// A layer graph plus its tensor store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub nodes: Vec<LayerNode>,
    pub tensors: BTreeMap<String, WeightTensor>,
}

impl ModelGraph {
    pub fn from_manifest(m: Manifest, tensors: BTreeMap<String, WeightTensor>) -> Self {
        Self {
            input_shape: m.input_shape,
            num_classes: m.num_classes,
            nodes: m.nodes,
            tensors,
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT_TAG.to_string(),
            input_shape: self.input_shape,
            num_classes: self.num_classes,
            nodes: self.nodes.clone(),
        }
    }

    pub fn node(&self, name: &str) -> Option<&LayerNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.get(name)
    }

    /// The conv weight of `layer`, if it is a conv2d with a resolvable weight.
    pub fn conv_weight(&self, layer: &str) -> Option<&WeightTensor> {
        let node = self.node(layer)?;
        if node.kind != LayerKind::Conv2d {
            return None;
        }
        self.tensor(node.weights.weight.as_deref()?)
    }

    /// Names of conv2d layers eligible for filter pruning, in graph order.
    pub fn prunable_layers(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.is_prunable())
            .map(|n| n.name.clone())
            .collect()
    }

    pub fn conv_layers(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| n.kind == LayerKind::Conv2d)
            .map(|n| n.name.clone())
            .collect()
    }
}
