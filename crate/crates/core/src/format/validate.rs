use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::Serialize;

use super::graph::{LayerKind, LayerNode, ModelGraph, Padding, Shape};
use crate::tensor::WeightTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    DuplicateName,
    BadArity { expected: usize, got: usize },
    UnknownInput(String),
    DanglingTensor(String),
    MissingWeight(&'static str),
    UnexpectedWeight(&'static str),
    MissingAttr(&'static str),
    InvalidAttr(String),
    ShapeMismatch(String),
    NonFinite(String),
    InputCount(usize),
    OutputCount(usize),
    OutputShape(String),
}

impl ViolationKind {
    pub fn code(&self) -> &'static str {
        match self {
            ViolationKind::DuplicateName => "DuplicateName",
            ViolationKind::BadArity { .. } => "BadArity",
            ViolationKind::UnknownInput(_) => "UnknownInput",
            ViolationKind::DanglingTensor(_) => "DanglingTensor",
            ViolationKind::MissingWeight(_) => "MissingWeight",
            ViolationKind::UnexpectedWeight(_) => "UnexpectedWeight",
            ViolationKind::MissingAttr(_) => "MissingAttr",
            ViolationKind::InvalidAttr(_) => "InvalidAttr",
            ViolationKind::ShapeMismatch(_) => "ShapeMismatch",
            ViolationKind::NonFinite(_) => "NonFinite",
            ViolationKind::InputCount(_) => "InputCount",
            ViolationKind::OutputCount(_) => "OutputCount",
            ViolationKind::OutputShape(_) => "OutputShape",
        }
    }
}

/// One invariant violation, attributed to a node (or `<graph>`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub node: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let detail = match &self.kind {
            ViolationKind::DuplicateName => "duplicate node name".to_string(),
            ViolationKind::BadArity { expected, got } => {
                format!("expected {expected} inputs, got {got}")
            }
            ViolationKind::UnknownInput(i) => format!("input {i:?} is not an earlier node"),
            ViolationKind::DanglingTensor(t) => format!("missing tensor {t:?}"),
            ViolationKind::MissingWeight(r) => format!("missing {r} reference"),
            ViolationKind::UnexpectedWeight(r) => format!("unexpected {r} reference"),
            ViolationKind::MissingAttr(a) => format!("missing attribute {a}"),
            ViolationKind::InvalidAttr(d)
            | ViolationKind::ShapeMismatch(d)
            | ViolationKind::OutputShape(d) => d.clone(),
            ViolationKind::NonFinite(t) => format!("tensor {t:?} has non-finite values"),
            ViolationKind::InputCount(n) => format!("expected exactly one input node, found {n}"),
            ViolationKind::OutputCount(n) => format!("expected exactly one output node, found {n}"),
        };
        write!(f, "{}: {}: {}", self.kind.code(), self.node, detail)
    }
}

pub(crate) const GRAPH: &str = "<graph>";

/// Output extent and leading pad for a sliding window along one axis.
pub fn window_extent(
    input: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    if stride == 0 || k == 0 {
        return None;
    }
    match padding {
        Padding::Valid => {
            if input < k {
                None
            } else {
                Some(((input - k) / stride + 1, 0))
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

fn allowed_roles(kind: LayerKind) -> &'static [&'static str] {
    match kind {
        LayerKind::Conv2d | LayerKind::Dense => &["weight", "bias"],
        LayerKind::Affine => &["scale", "shift"],
        _ => &[],
    }
}

struct Checker<'g> {
    g: &'g ModelGraph,
    out: Vec<Violation>,
}

impl<'g> Checker<'g> {
    fn push(&mut self, node: &str, kind: ViolationKind) {
        self.out.push(Violation {
            node: node.to_string(),
            kind,
        });
    }

    /// Resolves a tensor reference, recording dangling/non-finite violations.
    fn tensor(
        &mut self,
        node: &LayerNode,
        name: Option<&str>,
        role: &'static str,
        required: bool,
    ) -> Option<&'g WeightTensor> {
        let Some(name) = name else {
            if required {
                self.push(&node.name, ViolationKind::MissingWeight(role));
            }
            return None;
        };
        match self.g.tensors.get(name) {
            None => {
                self.push(&node.name, ViolationKind::DanglingTensor(name.to_string()));
                None
            }
            Some(t) if t.first_non_finite().is_some() => {
                self.push(&node.name, ViolationKind::NonFinite(name.to_string()));
                None
            }
            Some(t) => Some(t),
        }
    }

    fn vector(
        &mut self,
        node: &LayerNode,
        name: Option<&str>,
        role: &'static str,
        required: bool,
        len: usize,
    ) -> bool {
        match self.tensor(node, name, role, required) {
            Some(t) if t.rank() != 1 || t.len() != len => {
                self.push(
                    &node.name,
                    ViolationKind::ShapeMismatch(format!(
                        "{role} shape {:?} does not match {len} channels",
                        t.shape()
                    )),
                );
                false
            }
            Some(_) => true,
            None => !required && name.is_none(),
        }
    }

    fn shape_of(&mut self, node: &LayerNode, input: Option<Shape>) -> Option<Shape> {
        let input = input?;
        let name = node.name.as_str();
        let mismatch = |d: String| ViolationKind::ShapeMismatch(d);
        match node.kind {
            LayerKind::Input => unreachable!("input handled by caller"),
            LayerKind::Conv2d => {
                let w = self.tensor(node, node.weights.weight.as_deref(), "weight", true);
                let stride = node.attrs.stride;
                let padding = node.attrs.padding;
                if stride.is_none() {
                    self.push(name, ViolationKind::MissingAttr("stride"));
                }
                if padding.is_none() {
                    self.push(name, ViolationKind::MissingAttr("padding"));
                }
                if stride == Some(0) {
                    self.push(
                        name,
                        ViolationKind::InvalidAttr("stride must be >= 1".into()),
                    );
                }
                let w = w?;
                if w.rank() != 4 {
                    self.push(
                        name,
                        mismatch(format!("conv2d weight must be rank 4, got {:?}", w.shape())),
                    );
                    return None;
                }
                let (out_c, in_c, kh, kw) =
                    (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
                let bias_ok = self.vector(node, node.weights.bias.as_deref(), "bias", false, out_c);
                let Shape::Map { c, h, w: width } = input else {
                    self.push(
                        name,
                        mismatch(format!("conv2d needs a feature map, got {input}")),
                    );
                    return None;
                };
                if c != in_c {
                    self.push(
                        name,
                        mismatch(format!(
                            "weight expects {in_c} input channels, input has {c}"
                        )),
                    );
                    return None;
                }
                let (stride, padding) = (stride.filter(|&s| s > 0)?, padding?);
                let (Some((ho, _)), Some((wo, _))) = (
                    window_extent(h, kh, stride, padding),
                    window_extent(width, kw, stride, padding),
                ) else {
                    self.push(
                        name,
                        mismatch(format!("kernel {kh}x{kw} does not fit input {input}")),
                    );
                    return None;
                };
                bias_ok.then_some(Shape::Map {
                    c: out_c,
                    h: ho,
                    w: wo,
                })
            }
            LayerKind::Dense => {
                let w = self.tensor(node, node.weights.weight.as_deref(), "weight", true)?;
                if w.rank() != 2 {
                    self.push(
                        name,
                        mismatch(format!("dense weight must be rank 2, got {:?}", w.shape())),
                    );
                    return None;
                }
                let (out_d, in_d) = (w.shape()[0], w.shape()[1]);
                let bias_ok = self.vector(node, node.weights.bias.as_deref(), "bias", false, out_d);
                match input {
                    Shape::Flat(d) if d == in_d => bias_ok.then_some(Shape::Flat(out_d)),
                    _ => {
                        self.push(
                            name,
                            mismatch(format!("dense expects ({in_d}), input is {input}")),
                        );
                        None
                    }
                }
            }
            LayerKind::Relu => Some(input),
            LayerKind::MaxPool2d => {
                let window = node.attrs.window;
                let stride = node.attrs.stride;
                if window.is_none() {
                    self.push(name, ViolationKind::MissingAttr("window"));
                }
                if stride.is_none() {
                    self.push(name, ViolationKind::MissingAttr("stride"));
                }
                let (window, stride) = (window?, stride?);
                if window == 0 || stride == 0 {
                    self.push(
                        name,
                        ViolationKind::InvalidAttr("window and stride must be >= 1".into()),
                    );
                    return None;
                }
                let Shape::Map { c, h, w } = input else {
                    self.push(
                        name,
                        mismatch(format!("maxpool2d needs a feature map, got {input}")),
                    );
                    return None;
                };
                match (
                    window_extent(h, window, stride, Padding::Valid),
                    window_extent(w, window, stride, Padding::Valid),
                ) {
                    (Some((ho, _)), Some((wo, _))) => Some(Shape::Map { c, h: ho, w: wo }),
                    _ => {
                        self.push(
                            name,
                            mismatch(format!("window {window} does not fit input {input}")),
                        );
                        None
                    }
                }
            }
            LayerKind::GlobalAvgPool => match input {
                Shape::Map { c, .. } => Some(Shape::Flat(c)),
                Shape::Flat(_) => {
                    self.push(
                        name,
                        mismatch(format!("globalavgpool needs a feature map, got {input}")),
                    );
                    None
                }
            },
            LayerKind::Flatten => match input {
                Shape::Map { .. } => Some(Shape::Flat(input.numel())),
                Shape::Flat(_) => {
                    self.push(
                        name,
                        mismatch(format!("flatten needs a feature map, got {input}")),
                    );
                    None
                }
            },
            LayerKind::Affine => {
                let c = input.channels();
                let a = self.vector(node, node.weights.scale.as_deref(), "scale", true, c);
                let b = self.vector(node, node.weights.shift.as_deref(), "shift", true, c);
                (a && b).then_some(input)
            }
            LayerKind::Add => unreachable!("add handled by caller"),
        }
    }
}

/// Infers every node's output shape and collects all invariant violations in
/// node order. Nodes downstream of a failure get `None` without further
/// violations.
pub fn infer_shapes(g: &ModelGraph) -> (Vec<Option<Shape>>, Vec<Violation>) {
    let mut ck = Checker { g, out: Vec::new() };
    let mut shapes: Vec<Option<Shape>> = Vec::with_capacity(g.nodes.len());
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut consumed: HashSet<&str> = HashSet::new();
    let mut input_nodes = 0;

    for (i, node) in g.nodes.iter().enumerate() {
        if index.contains_key(node.name.as_str()) {
            ck.push(&node.name, ViolationKind::DuplicateName);
        }
        for role in node.weights.iter().map(|(r, _)| r) {
            if !allowed_roles(node.kind).contains(&role) {
                ck.push(&node.name, ViolationKind::UnexpectedWeight(role));
            }
        }
        let expected = node.kind.arity();
        let mut producers = Vec::with_capacity(node.inputs.len());
        if node.inputs.len() != expected {
            ck.push(
                &node.name,
                ViolationKind::BadArity {
                    expected,
                    got: node.inputs.len(),
                },
            );
        }
        let mut resolved = true;
        for input in &node.inputs {
            match index.get(input.as_str()) {
                Some(&p) => {
                    producers.push(shapes[p]);
                    consumed.insert(input.as_str());
                }
                None => {
                    ck.push(&node.name, ViolationKind::UnknownInput(input.clone()));
                    resolved = false;
                }
            }
        }
        let shape = if node.kind == LayerKind::Input {
            input_nodes += 1;
            let [c, h, w] = g.input_shape;
            if c == 0 || h == 0 || w == 0 {
                ck.push(
                    &node.name,
                    ViolationKind::InvalidAttr("input_shape extents must be >= 1".into()),
                );
                None
            } else {
                Some(Shape::Map { c, h, w })
            }
        } else if !resolved || node.inputs.len() != expected {
            // Still surface weight problems on structurally broken nodes.
            for (role, t) in node.weights.iter() {
                if !g.tensors.contains_key(t) && allowed_roles(node.kind).contains(&role) {
                    ck.push(&node.name, ViolationKind::DanglingTensor(t.to_string()));
                }
            }
            None
        } else if node.kind == LayerKind::Add {
            match (producers[0], producers[1]) {
                (Some(a), Some(b)) if a == b => Some(a),
                (Some(a), Some(b)) => {
                    ck.push(
                        &node.name,
                        ViolationKind::ShapeMismatch(format!("add inputs differ: {a} vs {b}")),
                    );
                    None
                }
                _ => None,
            }
        } else {
            ck.shape_of(node, producers[0])
        };
        shapes.push(shape);
        index.entry(node.name.as_str()).or_insert(i);
    }

    if input_nodes != 1 {
        ck.push(GRAPH, ViolationKind::InputCount(input_nodes));
    }
    let sinks: Vec<usize> = g
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| !consumed.contains(n.name.as_str()))
        .map(|(i, _)| i)
        .collect();
    if sinks.len() != 1 {
        ck.push(GRAPH, ViolationKind::OutputCount(sinks.len()));
    } else if let Some(shape) = shapes[sinks[0]] {
        if shape != Shape::Flat(g.num_classes) {
            let node = &g.nodes[sinks[0]].name;
            ck.push(
                node,
                ViolationKind::OutputShape(format!(
                    "output shape {shape} does not match num_classes {}",
                    g.num_classes
                )),
            );
        }
    }
    (shapes, ck.out)
}

/// Every invariant violation, in node order. Empty means valid.
pub fn validate_graph(g: &ModelGraph) -> Vec<Violation> {
    infer_shapes(g).1
}

/// Output shape of every node of a valid graph.
pub fn node_shapes(g: &ModelGraph) -> Result<Vec<Shape>, Violation> {
    let (shapes, violations) = infer_shapes(g);
    if let Some(v) = violations.into_iter().next() {
        return Err(v);
    }
    Ok(shapes
        .into_iter()
        .map(|s| s.expect("valid graph has all shapes"))
        .collect())
}
