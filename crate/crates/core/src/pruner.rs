//! Pruning plans, structural graph surgery and Params/FLOPs accounting.
//!
//! Surgery works on a per-node "removed channel" set propagated in graph
//! order: a pruned conv removes its own filters; relu, maxpool2d, affine and
//! add pass the set through; globalavgpool maps channels to features 1:1; and
//! flatten expands channel `c` to features `[c*H*W, (c+1)*H*W)`. Each conv or
//! dense consumer drops the matching input channels, and each affine drops the
//! matching scale/shift entries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{node_shapes, LayerKind, ModelGraph, Shape, Violation};
use crate::ranking::{rank_for_removal, FilterRanking, Method, RankingError};
use crate::tensor::{
    drop_entries, drop_input_channels, drop_output_filters, TensorError, WeightTensor,
};

/// Slack applied before flooring `ratio * filters`, so decimal grid ratios
/// such as 0.7 remove exactly 7 of 10 filters.
const RATIO_EPS: f64 = 1e-9;

pub const FLOPS_CONVENTION: &str =
    "FLOPs convention: multiply-accumulate = 2 FLOPs; relu/pool/add = 1 per output element; affine = 2 per element; flatten = 0";

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("unknown layer {0:?}")]
    UnknownLayer(String),
    #[error("layer {layer:?} is not prunable: {reason}")]
    NotPrunable { layer: String, reason: String },
    #[error("layer {0:?} is flagged residual_last and cannot be pruned")]
    ResidualLast(String),
    #[error("add node {node:?} would receive differently pruned inputs")]
    AddShapeConflict { node: String },
    #[error("layer {0:?} would be emptied")]
    LayerEmptied(String),
    #[error("tensor {0:?} is shared by several nodes and cannot be pruned")]
    SharedTensor(String),
    #[error("no ranking for layer {0:?}")]
    RankingMismatch(String),
    #[error("ranking for layer {layer:?} covers {ranked} filters, layer has {filters}")]
    RankingSize {
        layer: String,
        ranked: usize,
        filters: usize,
    },
    #[error("ratio {ratio} for layer {layer:?} is outside [0, 1]")]
    InvalidRatio { layer: String, ratio: f64 },
    #[error("graph is invalid: {0}")]
    InvalidGraph(Violation),
    #[error("layer {layer:?}: {source}")]
    Tensor {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Ranking(#[from] RankingError),
}

impl PruneError {
    pub fn code(&self) -> &'static str {
        match self {
            PruneError::UnknownLayer(_) => "UnknownLayer",
            PruneError::NotPrunable { .. } => "NotPrunable",
            PruneError::ResidualLast(_) => "ResidualLast",
            PruneError::AddShapeConflict { .. } => "AddShapeConflict",
            PruneError::LayerEmptied(_) => "LayerEmptied",
            PruneError::SharedTensor(_) => "SharedTensor",
            PruneError::RankingMismatch(_) | PruneError::RankingSize { .. } => "RankingMismatch",
            PruneError::InvalidRatio { .. } => "InvalidRatio",
            PruneError::InvalidGraph(v) => v.kind.code(),
            PruneError::Tensor { source, .. } => source.code(),
            PruneError::Ranking(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanSource {
    Threshold(f64),
    Ratios(BTreeMap<String, f64>),
}

/// Filter indices to remove per conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PlanSource>,
    pub layers: BTreeMap<String, Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl PruningPlan {
    pub fn empty(method: Method) -> Self {
        Self {
            method,
            source: None,
            layers: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn removed(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.removed() == 0
    }
}

/// Number of filters removed from a `filters`-wide layer at `ratio`.
pub fn removal_count(ratio: f64, filters: usize) -> usize {
    ((ratio * filters as f64) + RATIO_EPS).floor() as usize
}

fn conv_filter_count(g: &ModelGraph, layer: &str) -> Result<usize, PruneError> {
    let node = g
        .node(layer)
        .ok_or_else(|| PruneError::UnknownLayer(layer.to_string()))?;
    if node.kind != LayerKind::Conv2d {
        return Err(PruneError::NotPrunable {
            layer: layer.to_string(),
            reason: format!("kind is {}", node.kind),
        });
    }
    g.conv_weight(layer)
        .map(WeightTensor::outer)
        .ok_or_else(|| PruneError::UnknownLayer(layer.to_string()))
}

/// Selects the first `floor(r * J)` filters of each layer's ranking.
/// `residual_last` layers are skipped with a warning.
pub fn build_plan(
    g: &ModelGraph,
    method: Method,
    rankings: &BTreeMap<String, FilterRanking>,
    ratios: &BTreeMap<String, f64>,
    source: Option<PlanSource>,
) -> Result<PruningPlan, PruneError> {
    let mut plan = PruningPlan {
        method,
        source,
        layers: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for (layer, &ratio) in ratios {
        let filters = conv_filter_count(g, layer)?;
        if g.node(layer).is_some_and(|n| n.residual_last) {
            plan.warnings.push(format!(
                "layer {layer:?} is residual_last; ratio {ratio} ignored"
            ));
            continue;
        }
        if !(0.0..=1.0).contains(&ratio) {
            return Err(PruneError::InvalidRatio {
                layer: layer.clone(),
                ratio,
            });
        }
        let n = removal_count(ratio, filters);
        if n >= filters {
            return Err(PruneError::LayerEmptied(layer.clone()));
        }
        let ranking = rankings
            .get(layer)
            .ok_or_else(|| PruneError::RankingMismatch(layer.clone()))?;
        if ranking.filters() != filters {
            return Err(PruneError::RankingSize {
                layer: layer.clone(),
                ranked: ranking.filters(),
                filters,
            });
        }
        plan.layers.insert(layer.clone(), ranking.prune_set(n));
    }
    Ok(plan)
}

/// Ranks each listed layer afresh with `method` and builds the plan.
pub fn plan_from_ratios(
    g: &ModelGraph,
    method: Method,
    ratios: &BTreeMap<String, f64>,
    source: Option<PlanSource>,
) -> Result<PruningPlan, PruneError> {
    let mut rankings = BTreeMap::new();
    for (layer, &ratio) in ratios {
        let filters = conv_filter_count(g, layer)?;
        let node = g.node(layer).expect("checked above");
        if node.residual_last || !(0.0..=1.0).contains(&ratio) {
            continue;
        }
        let w = g.conv_weight(layer).expect("conv weight");
        let n = removal_count(ratio, filters).min(filters);
        rankings.insert(layer.clone(), rank_for_removal(method, layer, w, n)?);
    }
    build_plan(g, method, &rankings, ratios, source)
}

struct Surgery<'g> {
    g: &'g ModelGraph,
    tensors: BTreeMap<String, WeightTensor>,
    touched: BTreeSet<String>,
}

impl Surgery<'_> {
    fn edit<F>(&mut self, layer: &str, tensor: &str, f: F) -> Result<(), PruneError>
    where
        F: FnOnce(&WeightTensor) -> Result<WeightTensor, TensorError>,
    {
        let shared = self
            .g
            .nodes
            .iter()
            .filter(|n| n.weights.iter().any(|(_, t)| t == tensor))
            .count()
            > 1;
        if shared || !self.touched.insert(tensor.to_string()) {
            return Err(PruneError::SharedTensor(tensor.to_string()));
        }
        let current = self
            .tensors
            .get(tensor)
            .ok_or_else(|| PruneError::UnknownLayer(layer.to_string()))?;
        let next = f(current).map_err(|source| match source {
            TensorError::WouldEmpty { .. } => PruneError::LayerEmptied(layer.to_string()),
            source => PruneError::Tensor {
                layer: layer.to_string(),
                source,
            },
        })?;
        self.tensors.insert(tensor.to_string(), next);
        Ok(())
    }
}

/// Structurally removes the planned filters and every dependent input
/// channel, returning a new graph.
pub fn apply_plan(g: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph, PruneError> {
    let shapes = node_shapes(g).map_err(PruneError::InvalidGraph)?;
    for (layer, indices) in &plan.layers {
        let filters = conv_filter_count(g, layer)?;
        if g.node(layer).is_some_and(|n| n.residual_last) && !indices.is_empty() {
            return Err(PruneError::ResidualLast(layer.clone()));
        }
        if indices.len() >= filters {
            return Err(PruneError::LayerEmptied(layer.clone()));
        }
    }
    if plan.is_empty() {
        return Ok(g.clone());
    }

    let mut s = Surgery {
        g,
        tensors: g.tensors.clone(),
        touched: BTreeSet::new(),
    };
    let mut removed: Vec<Vec<usize>> = Vec::with_capacity(g.nodes.len());
    for (i, node) in g.nodes.iter().enumerate() {
        let producers: Vec<usize> = node
            .inputs
            .iter()
            .map(|n| g.node_index(n).expect("validated"))
            .collect();
        let upstream: &[usize] = producers.first().map_or(&[], |&p| &removed[p]);
        let out = match node.kind {
            LayerKind::Input => Vec::new(),
            LayerKind::Conv2d => {
                let own = plan.layers.get(&node.name).cloned().unwrap_or_default();
                let weight = node
                    .weights
                    .weight
                    .as_deref()
                    .expect("validated conv weight");
                if !upstream.is_empty() || !own.is_empty() {
                    s.edit(&node.name, weight, |w| {
                        drop_output_filters(&drop_input_channels(w, upstream)?, &own)
                    })?;
                }
                if let (Some(bias), false) = (node.weights.bias.as_deref(), own.is_empty()) {
                    s.edit(&node.name, bias, |b| drop_entries(b, &own))?;
                }
                own
            }
            LayerKind::Dense => {
                if !upstream.is_empty() {
                    let weight = node
                        .weights
                        .weight
                        .as_deref()
                        .expect("validated dense weight");
                    s.edit(&node.name, weight, |w| drop_input_channels(w, upstream))?;
                }
                Vec::new()
            }
            LayerKind::Affine => {
                if !upstream.is_empty() {
                    for t in [&node.weights.scale, &node.weights.shift]
                        .into_iter()
                        .flatten()
                    {
                        s.edit(&node.name, t, |v| drop_entries(v, upstream))?;
                    }
                }
                upstream.to_vec()
            }
            LayerKind::Relu | LayerKind::MaxPool2d | LayerKind::GlobalAvgPool => upstream.to_vec(),
            LayerKind::Flatten => match shapes[producers[0]] {
                Shape::Map { h, w, .. } => upstream
                    .iter()
                    .flat_map(|&c| c * h * w..(c + 1) * h * w)
                    .collect(),
                Shape::Flat(_) => upstream.to_vec(),
            },
            LayerKind::Add => {
                if removed[producers[0]] != removed[producers[1]] {
                    return Err(PruneError::AddShapeConflict {
                        node: node.name.clone(),
                    });
                }
                upstream.to_vec()
            }
        };
        debug_assert!(i == removed.len());
        removed.push(out);
    }

    let pruned = ModelGraph {
        input_shape: g.input_shape,
        num_classes: g.num_classes,
        nodes: g.nodes.clone(),
        tensors: s.tensors,
    };
    if let Some(v) = crate::format::validate_graph(&pruned).into_iter().next() {
        return Err(PruneError::InvalidGraph(v));
    }
    Ok(pruned)
}

/// Parameter and FLOP contribution of one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub kind: LayerKind,
    pub params: u64,
    pub flops: u64,
}

pub fn layer_costs(g: &ModelGraph) -> Result<Vec<LayerCost>, PruneError> {
    let shapes = node_shapes(g).map_err(PruneError::InvalidGraph)?;
    let len = |name: &Option<String>| -> u64 {
        name.as_deref()
            .and_then(|n| g.tensor(n))
            .map_or(0, |t| t.len() as u64)
    };
    Ok(g.nodes
        .iter()
        .zip(&shapes)
        .map(|(node, out)| {
            let numel = out.numel() as u64;
            let (params, flops) = match node.kind {
                LayerKind::Conv2d => {
                    let w = len(&node.weights.weight);
                    let b = len(&node.weights.bias);
                    let spatial = numel / out.channels() as u64;
                    // w = kh*kw*cin*cout; every output pixel needs w / cout MACs per channel.
                    (w + b, 2 * w * spatial + b * spatial)
                }
                LayerKind::Dense => {
                    let w = len(&node.weights.weight);
                    let b = len(&node.weights.bias);
                    (w + b, 2 * w + b)
                }
                LayerKind::Affine => (
                    len(&node.weights.scale) + len(&node.weights.shift),
                    2 * numel,
                ),
                LayerKind::Relu
                | LayerKind::MaxPool2d
                | LayerKind::GlobalAvgPool
                | LayerKind::Add => (0, numel),
                LayerKind::Flatten | LayerKind::Input => (0, 0),
            };
            LayerCost {
                layer: node.name.clone(),
                kind: node.kind,
                params,
                flops,
            }
        })
        .collect())
}

pub fn count_params(g: &ModelGraph) -> Result<u64, PruneError> {
    Ok(layer_costs(g)?.iter().map(|c| c.params).sum())
}

pub fn count_flops(g: &ModelGraph) -> Result<u64, PruneError> {
    Ok(layer_costs(g)?.iter().map(|c| c.flops).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub flops_convention: String,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
    pub acc_before: Option<f64>,
    pub acc_after: Option<f64>,
    /// Percentage points; negative means the pruned model is more accurate.
    pub acc_drop_pct: Option<f64>,
}

pub fn reduction_pct(before: u64, after: u64) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (1.0 - after as f64 / before as f64)
    }
}

impl ReductionReport {
    pub fn from_counts(
        (params_before, params_after): (u64, u64),
        (flops_before, flops_after): (u64, u64),
        acc_before: Option<f64>,
        acc_after: Option<f64>,
    ) -> Self {
        let acc_drop_pct = match (acc_before, acc_after) {
            (Some(b), Some(a)) => Some(100.0 * (b - a)),
            _ => None,
        };
        Self {
            flops_convention: FLOPS_CONVENTION.to_string(),
            params_before,
            params_after,
            flops_before,
            flops_after,
            params_reduction_pct: reduction_pct(params_before, params_after),
            flops_reduction_pct: reduction_pct(flops_before, flops_after),
            acc_before,
            acc_after,
            acc_drop_pct,
        }
    }

    /// Aligned plain-text table with the comparison-table column names.
    pub fn render_table(&self, model: &str, approach: &str) -> String {
        let drop = self
            .acc_drop_pct
            .map_or("-".to_string(), |d| format!("{d:.2}"));
        let rows = [
            [
                "Model",
                "Approach",
                "Acc. Drop(%)",
                "Params Reduction(%)",
                "FLOPs Reduction(%)",
            ]
            .map(String::from),
            [
                model.to_string(),
                approach.to_string(),
                drop,
                format!("{:.2}", self.params_reduction_pct),
                format!("{:.2}", self.flops_reduction_pct),
            ],
        ];
        let widths: Vec<usize> = (0..5)
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap())
            .collect();
        let mut out = String::new();
        writeln!(out, "# {}", self.flops_convention).unwrap();
        writeln!(
            out,
            "# params {} -> {}; flops {} -> {}",
            self.params_before, self.params_after, self.flops_before, self.flops_after
        )
        .unwrap();
        for row in &rows {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c:<w$}"))
                .collect();
            writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
        }
        out
    }
}

pub fn reduction_report(
    before: &ModelGraph,
    after: &ModelGraph,
    acc_before: Option<f64>,
    acc_after: Option<f64>,
) -> Result<ReductionReport, PruneError> {
    Ok(ReductionReport::from_counts(
        (count_params(before)?, count_params(after)?),
        (count_flops(before)?, count_flops(after)?),
        acc_before,
        acc_after,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proneness {
    Positive,
    Negative,
}

/// One filter's sign statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignRatioRow {
    pub layer: String,
    pub filter: usize,
    pub positive_count: usize,
    pub total: usize,
    pub positive_ratio: f64,
    pub s_pos: f64,
    pub s_neg_abs: f64,
    /// Positive-prone when at least half the weights are strictly positive.
    pub prone: Proneness,
}

pub fn sign_ratio_report(g: &ModelGraph) -> Vec<SignRatioRow> {
    let mut rows = Vec::new();
    for layer in g.conv_layers() {
        let Some(w) = g.conv_weight(&layer) else {
            continue;
        };
        for f in 0..w.outer() {
            let slab = w.slab(f);
            let split = crate::ranking::sign_sums(slab).expect("non-empty filter");
            let positive_count = slab.iter().filter(|&&v| v > 0.0).count();
            let positive_ratio = positive_count as f64 / slab.len() as f64;
            rows.push(SignRatioRow {
                layer: layer.clone(),
                filter: f,
                positive_count,
                total: slab.len(),
                positive_ratio,
                s_pos: split.s_pos,
                s_neg_abs: -split.s_neg,
                prone: if positive_ratio >= 0.5 {
                    Proneness::Positive
                } else {
                    Proneness::Negative
                },
            });
        }
    }
    rows
}
