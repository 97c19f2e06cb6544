//! Deterministic single-sample forward pass and accuracy evaluation.
//!
//! Convolution is cross-correlation (no kernel flip). Flatten is channel-major.
//! All accumulation happens in `f32` in a fixed loop order, so identical
//! inputs give bit-identical logits.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::format::{
    node_shapes, window_extent, Dataset, LayerKind, LayerNode, ModelGraph, Padding, Shape,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InferenceError {
    #[error("graph is invalid: {0}")]
    InvalidGraph(String),
    #[error("input has {got} values, model expects {expected:?}")]
    InputShape { expected: [usize; 3], got: usize },
    #[error("dataset samples are {data:?}, model expects {model:?}")]
    DatasetShape { model: [usize; 3], data: [usize; 3] },
    #[error("label {label} at sample {index} is outside 0..{classes}")]
    ClassMismatch {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("top-k must be in 1..={classes}, got {k}")]
    TopK { k: usize, classes: usize },
    #[error("internal shape error at node {0}")]
    Internal(String),
}

impl InferenceError {
    pub fn code(&self) -> &'static str {
        match self {
            InferenceError::InvalidGraph(_) => "InvalidGraph",
            InferenceError::InputShape { .. } => "InputShape",
            InferenceError::DatasetShape { .. } => "DatasetShape",
            InferenceError::ClassMismatch { .. } => "ClassMismatch",
            InferenceError::TopK { .. } => "TopK",
            InferenceError::Internal(_) => "Internal",
        }
    }
}

/// A feature map `(C, H, W)` or flat vector, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    pub shape: Shape,
    pub data: Vec<f32>,
}

/// A graph with shapes resolved once, ready for repeated forward passes.
pub struct Prepared<'g> {
    graph: &'g ModelGraph,
    shapes: Vec<Shape>,
    inputs: Vec<Vec<usize>>,
}

impl<'g> Prepared<'g> {
    pub fn new(graph: &'g ModelGraph) -> Result<Self, InferenceError> {
        let shapes = node_shapes(graph).map_err(|v| InferenceError::InvalidGraph(v.to_string()))?;
        let inputs = graph
            .nodes
            .iter()
            .map(|n| {
                n.inputs
                    .iter()
                    .map(|i| graph.node_index(i).expect("validated input reference"))
                    .collect()
            })
            .collect();
        Ok(Self {
            graph,
            shapes,
            inputs,
        })
    }

    pub fn forward(&self, x: &[f32]) -> Result<Vec<f32>, InferenceError> {
        let expected: usize = self.graph.input_shape.iter().product();
        if x.len() != expected {
            return Err(InferenceError::InputShape {
                expected: self.graph.input_shape,
                got: x.len(),
            });
        }
        let mut acts: Vec<Option<Activation>> = vec![None; self.graph.nodes.len()];
        // Remaining consumers per node, so activations are dropped once used.
        let mut uses = vec![0usize; self.graph.nodes.len()];
        for ins in &self.inputs {
            for &i in ins {
                uses[i] += 1;
            }
        }
        let mut last = None;
        for (i, node) in self.graph.nodes.iter().enumerate() {
            let out = if node.kind == LayerKind::Input {
                Activation {
                    shape: self.shapes[i],
                    data: x.to_vec(),
                }
            } else {
                let args: Vec<&Activation> = self.inputs[i]
                    .iter()
                    .map(|&p| {
                        acts[p]
                            .as_ref()
                            .ok_or_else(|| InferenceError::Internal(node.name.clone()))
                    })
                    .collect::<Result<_, _>>()?;
                let out = self.apply(node, &args, self.shapes[i])?;
                for &p in &self.inputs[i] {
                    uses[p] -= 1;
                    if uses[p] == 0 {
                        acts[p] = None;
                    }
                }
                out
            };
            if out.data.len() != self.shapes[i].numel() {
                return Err(InferenceError::Internal(node.name.clone()));
            }
            acts[i] = Some(out);
            last = Some(i);
        }
        let last = last.ok_or_else(|| InferenceError::Internal("<empty graph>".into()))?;
        Ok(acts[last].take().expect("output computed").data)
    }

    fn tensor(&self, node: &LayerNode, name: Option<&str>) -> Result<&'g [f32], InferenceError> {
        name.and_then(|n| self.graph.tensor(n))
            .map(|t| t.data())
            .ok_or_else(|| InferenceError::Internal(node.name.clone()))
    }

    fn apply(
        &self,
        node: &LayerNode,
        args: &[&Activation],
        out_shape: Shape,
    ) -> Result<Activation, InferenceError> {
        let internal = || InferenceError::Internal(node.name.clone());
        let x = args[0];
        let data = match node.kind {
            LayerKind::Input => unreachable!(),
            LayerKind::Conv2d => {
                let w = self
                    .graph
                    .tensor(node.weights.weight.as_deref().ok_or_else(internal)?)
                    .ok_or_else(internal)?;
                let bias = node
                    .weights
                    .bias
                    .as_deref()
                    .map(|b| self.tensor(node, Some(b)))
                    .transpose()?;
                let Shape::Map { c, h, w: width } = x.shape else {
                    return Err(internal());
                };
                let s = w.shape();
                conv2d(
                    &x.data,
                    (c, h, width),
                    w.data(),
                    (s[0], s[2], s[3]),
                    bias,
                    node.attrs.stride.ok_or_else(internal)?,
                    node.attrs.padding.ok_or_else(internal)?,
                )
            }
            LayerKind::Dense => {
                let w = self
                    .graph
                    .tensor(node.weights.weight.as_deref().ok_or_else(internal)?)
                    .ok_or_else(internal)?;
                let bias = node
                    .weights
                    .bias
                    .as_deref()
                    .map(|b| self.tensor(node, Some(b)))
                    .transpose()?;
                dense(&x.data, w.data(), w.shape()[0], bias)
            }
            LayerKind::Relu => x.data.iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::MaxPool2d => {
                let Shape::Map { c, h, w } = x.shape else {
                    return Err(internal());
                };
                let window = node.attrs.window.ok_or_else(internal)?;
                let stride = node.attrs.stride.ok_or_else(internal)?;
                maxpool2d(&x.data, (c, h, w), window, stride)
            }
            LayerKind::GlobalAvgPool => {
                let Shape::Map { c, h, w } = x.shape else {
                    return Err(internal());
                };
                let n = h * w;
                (0..c)
                    .map(|ch| x.data[ch * n..(ch + 1) * n].iter().sum::<f32>() / n as f32)
                    .collect()
            }
            LayerKind::Flatten => x.data.clone(),
            LayerKind::Add => x
                .data
                .iter()
                .zip(&args[1].data)
                .map(|(a, b)| a + b)
                .collect(),
            LayerKind::Affine => {
                let scale = self.tensor(node, node.weights.scale.as_deref())?;
                let shift = self.tensor(node, node.weights.shift.as_deref())?;
                let per = x.shape.numel() / x.shape.channels();
                x.data
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = i / per;
                        scale[ch] * v + shift[ch]
                    })
                    .collect()
            }
        };
        Ok(Activation {
            shape: out_shape,
            data,
        })
    }
}

/// Cross-correlation of a `(C, H, W)` input with `(out, C, kh, kw)` weights.
pub fn conv2d(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    weight: &[f32],
    (out_c, kh, kw): (usize, usize, usize),
    bias: Option<&[f32]>,
    stride: usize,
    padding: Padding,
) -> Vec<f32> {
    let (ho, pad_top) = window_extent(h, kh, stride, padding).expect("kernel fits");
    let (wo, pad_left) = window_extent(w, kw, stride, padding).expect("kernel fits");
    let mut out = vec![0.0f32; out_c * ho * wo];
    for o in 0..out_c {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        for ci in 0..c {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = weight[((o * c + ci) * kh + ky) * kw + kx];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad_top as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for (ox, acc) in orow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad_left as isize;
                            if ix >= 0 && ix < w as isize {
                                *acc += wv * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v += b[o]);
        }
    }
    out
}

pub fn dense(x: &[f32], weight: &[f32], out_d: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let in_d = x.len();
    (0..out_d)
        .map(|o| {
            let row = &weight[o * in_d..(o + 1) * in_d];
            let acc = row.iter().zip(x).fold(0.0f32, |acc, (w, v)| acc + w * v);
            acc + bias.map_or(0.0, |b| b[o])
        })
        .collect()
}

pub fn maxpool2d(
    x: &[f32],
    (c, h, w): (usize, usize, usize),
    window: usize,
    stride: usize,
) -> Vec<f32> {
    let (ho, _) = window_extent(h, window, stride, Padding::Valid).expect("window fits");
    let (wo, _) = window_extent(w, window, stride, Padding::Valid).expect("window fits");
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        m = m.max(plane[(oy * stride + ky) * w + ox * stride + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// Logits for one `(C, H, W)` input.
pub fn forward(g: &ModelGraph, x: &[f32]) -> Result<Vec<f32>, InferenceError> {
    Prepared::new(g)?.forward(x)
}

/// Whether `label` is among the `k` largest logits (ties to the lower index).
pub fn in_top_k(logits: &[f32], label: usize, k: usize) -> bool {
    let target = logits[label];
    let ahead = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > target || (v == target && i < label))
        .count();
    ahead < k
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Top-`k` accuracy over the dataset. Samples run in parallel; the match
/// count is an integer reduction so the result is schedule-independent.
pub fn evaluate(g: &ModelGraph, d: &Dataset, k: usize) -> Result<EvalResult, InferenceError> {
    let prepared = Prepared::new(g)?;
    if d.sample_shape() != g.input_shape {
        return Err(InferenceError::DatasetShape {
            model: g.input_shape,
            data: d.sample_shape(),
        });
    }
    if k == 0 || k > g.num_classes {
        return Err(InferenceError::TopK {
            k,
            classes: g.num_classes,
        });
    }
    if let Some((index, &label)) = d
        .labels()
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= g.num_classes)
    {
        return Err(InferenceError::ClassMismatch {
            index,
            label,
            classes: g.num_classes,
        });
    }
    let correct = (0..d.len())
        .into_par_iter()
        .map(|i| {
            let logits = prepared.forward(d.sample(i))?;
            Ok(usize::from(in_top_k(&logits, d.labels()[i], k)))
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(EvalResult {
        correct,
        total: d.len(),
        accuracy: correct as f64 / d.len() as f64,
    })
}

/// Top-1 predictions for every sample, in dataset order.
pub fn predict(g: &ModelGraph, d: &Dataset) -> Result<Vec<usize>, InferenceError> {
    let prepared = Prepared::new(g)?;
    (0..d.len())
        .into_par_iter()
        .map(|i| prepared.forward(d.sample(i)).map(|l| argmax(&l)))
        .collect()
}
