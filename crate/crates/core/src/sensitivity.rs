//! Per-layer pruning sensitivity sweeps and threshold-to-ratio extraction.
//!
//! Every sweep point starts from the original model: rank the layer, remove
//! `floor(r * J)` filters from that layer only, evaluate.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{Dataset, ModelGraph};
use crate::inference::{evaluate, InferenceError};
use crate::pruner::{apply_plan, removal_count, PruneError, PruningPlan};
use crate::ranking::{rank_for_removal, Method, RankingError};

pub const BASELINE_LAYER: &str = "__baseline__";

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("layer {layer:?} is not prunable: {reason}")]
    NotPrunable { layer: String, reason: String },
    #[error("invalid ratio grid: {0}")]
    Grid(String),
    #[error("sensitivity file: {0}")]
    Parse(String),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Ranking(#[from] RankingError),
}

impl SensitivityError {
    pub fn code(&self) -> &'static str {
        match self {
            SensitivityError::NotPrunable { .. } => "NotPrunable",
            SensitivityError::Grid(_) => "RatioGrid",
            SensitivityError::Parse(_) => "SensitivityFormat",
            SensitivityError::Inference(e) => e.code(),
            SensitivityError::Prune(e) => e.code(),
            SensitivityError::Ranking(e) => e.code(),
        }
    }
}

/// One sweep point. `accuracy` is `None` when the ratio would empty the layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub removed: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub layer: String,
    pub ratio: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityMap {
    pub method: Method,
    pub top_k: usize,
    pub baseline_accuracy: f64,
    pub ratios: Vec<f64>,
    pub entries: Vec<SensitivityEntry>,
}

/// Rounds to 1e-9 so generated grid values print as their decimal form.
fn tidy(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

/// Parses `start:stop:step` (inclusive) into a ratio grid.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>, SensitivityError> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || SensitivityError::Grid(format!("expected start:stop:step, got {spec:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if step.is_nan() || step <= 0.0 || start > stop {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..n).map(|i| tidy(start + i as f64 * step)).collect();
    check_grid(&grid)?;
    Ok(grid)
}

pub fn default_grid() -> Vec<f64> {
    parse_grid("0.1:0.9:0.1").expect("default grid is valid")
}

pub fn check_grid(ratios: &[f64]) -> Result<(), SensitivityError> {
    if ratios.is_empty() {
        return Err(SensitivityError::Grid("empty grid".into()));
    }
    if let Some(r) = ratios.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
        return Err(SensitivityError::Grid(format!("ratio {r} outside (0, 1]")));
    }
    if ratios.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SensitivityError::Grid(
            "ratios must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn check_prunable(g: &ModelGraph, layer: &str) -> Result<usize, SensitivityError> {
    let not = |reason: &str| SensitivityError::NotPrunable {
        layer: layer.to_string(),
        reason: reason.to_string(),
    };
    let node = g.node(layer).ok_or_else(|| not("no such layer"))?;
    if !node.is_prunable() {
        return Err(not(if node.residual_last {
            "flagged residual_last"
        } else {
            "not a conv2d layer"
        }));
    }
    Ok(g.conv_weight(layer)
        .ok_or_else(|| not("missing weight"))?
        .outer())
}

/// Accuracy after removing `floor(ratio * J)` filters of `layer` alone.
fn sweep_point(
    g: &ModelGraph,
    d: &Dataset,
    method: Method,
    layer: &str,
    ratio: f64,
    baseline: f64,
    top_k: usize,
) -> Result<SweepPoint, SensitivityError> {
    let w = g.conv_weight(layer).expect("checked prunable");
    let filters = w.outer();
    let removed = removal_count(ratio, filters);
    let accuracy = if removed == 0 {
        Some(baseline)
    } else if removed >= filters {
        None
    } else {
        let ranking = rank_for_removal(method, layer, w, removed)?;
        let mut plan = PruningPlan::empty(method);
        plan.layers
            .insert(layer.to_string(), ranking.prune_set(removed));
        let pruned = apply_plan(g, &plan)?;
        Some(evaluate(&pruned, d, top_k)?.accuracy)
    };
    Ok(SweepPoint {
        ratio,
        removed,
        accuracy,
    })
}

pub fn sweep_layer(
    g: &ModelGraph,
    d: &Dataset,
    method: Method,
    layer: &str,
    ratios: &[f64],
    top_k: usize,
) -> Result<Vec<SweepPoint>, SensitivityError> {
    check_prunable(g, layer)?;
    check_grid(ratios)?;
    let baseline = evaluate(g, d, top_k)?.accuracy;
    ratios
        .par_iter()
        .map(|&r| sweep_point(g, d, method, layer, r, baseline, top_k))
        .collect()
}

/// Sweeps every prunable layer over the same grid.
pub fn full_sensitivity(
    g: &ModelGraph,
    d: &Dataset,
    method: Method,
    ratios: &[f64],
    top_k: usize,
) -> Result<SensitivityMap, SensitivityError> {
    check_grid(ratios)?;
    let baseline = evaluate(g, d, top_k)?.accuracy;
    let layers = g.prunable_layers();
    let jobs: Vec<(&str, f64)> = layers
        .iter()
        .flat_map(|l| ratios.iter().map(move |&r| (l.as_str(), r)))
        .collect();
    let points = jobs
        .par_iter()
        .map(|&(layer, r)| sweep_point(g, d, method, layer, r, baseline, top_k))
        .collect::<Result<Vec<_>, _>>()?;
    let entries = jobs
        .iter()
        .zip(points)
        .map(|(&(layer, _), p)| SensitivityEntry {
            layer: layer.to_string(),
            ratio: p.ratio,
            accuracy: p.accuracy,
        })
        .collect();
    Ok(SensitivityMap {
        method,
        top_k,
        baseline_accuracy: baseline,
        ratios: ratios.to_vec(),
        entries,
    })
}

impl SensitivityMap {
    /// Layers in first-appearance order.
    pub fn layers(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.layer.as_str()) {
                out.push(&e.layer);
            }
        }
        out
    }

    pub fn curve(&self, layer: &str) -> Vec<(f64, Option<f64>)> {
        self.entries
            .iter()
            .filter(|e| e.layer == layer)
            .map(|e| (e.ratio, e.accuracy))
            .collect()
    }

    /// CSV with header `layer,ratio,accuracy`, a `__baseline__` row first,
    /// and `NA` for skipped points.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SensitivityError> {
        let err = |e: csv::Error| SensitivityError::Parse(e.to_string());
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(["layer", "ratio", "accuracy"])
            .map_err(err)?;
        w.write_record([BASELINE_LAYER, "0", &self.baseline_accuracy.to_string()])
            .map_err(err)?;
        for e in &self.entries {
            let acc = e.accuracy.map_or("NA".to_string(), |a| a.to_string());
            w.write_record([e.layer.as_str(), &e.ratio.to_string(), &acc])
                .map_err(err)?;
        }
        w.flush()
            .map_err(|e| SensitivityError::Parse(e.to_string()))
    }

    /// Parses the CSV form. The CSV carries no method or top-k; the caller
    /// supplies the method tag and top-k defaults to 1.
    pub fn read_csv<R: Read>(input: R, method: Method) -> Result<Self, SensitivityError> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(input);
        let headers = r
            .headers()
            .map_err(|e| SensitivityError::Parse(e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["layer", "ratio", "accuracy"] {
            return Err(SensitivityError::Parse(format!(
                "unexpected header {headers:?}"
            )));
        }
        let mut baseline = None;
        let mut entries = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| SensitivityError::Parse(e.to_string()))?;
            let bad = |what: &str| SensitivityError::Parse(format!("row {}: bad {what}", i + 2));
            let layer = rec.get(0).ok_or_else(|| bad("layer"))?.to_string();
            let ratio: f64 = rec
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("ratio"))?;
            let acc = rec.get(2).ok_or_else(|| bad("accuracy"))?;
            let accuracy = if acc == "NA" {
                None
            } else {
                Some(acc.parse::<f64>().map_err(|_| bad("accuracy"))?)
            };
            if layer == BASELINE_LAYER {
                baseline = accuracy;
            } else {
                entries.push(SensitivityEntry {
                    layer,
                    ratio,
                    accuracy,
                });
            }
        }
        let baseline_accuracy =
            baseline.ok_or_else(|| SensitivityError::Parse("missing baseline row".into()))?;
        let mut ratios: Vec<f64> = Vec::new();
        for e in &entries {
            if !ratios.contains(&e.ratio) {
                ratios.push(e.ratio);
            }
        }
        ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let map = Self {
            method,
            top_k: 1,
            baseline_accuracy,
            ratios,
            entries,
        };
        map.check()?;
        Ok(map)
    }

    /// Each (layer, ratio) at most once; every layer on the same grid.
    pub fn check(&self) -> Result<(), SensitivityError> {
        for layer in self.layers() {
            let mut rs: Vec<f64> = self.curve(layer).iter().map(|p| p.0).collect();
            rs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if rs != self.ratios {
                return Err(SensitivityError::Parse(format!(
                    "layer {layer:?} does not cover the shared ratio grid exactly once"
                )));
            }
        }
        Ok(())
    }
}

/// For each layer, the largest grid ratio whose accuracy is at least
/// `threshold`; 0 when no point qualifies.
pub fn ratios_for_threshold(m: &SensitivityMap, threshold: f64) -> BTreeMap<String, f64> {
    m.layers()
        .into_iter()
        .map(|layer| {
            let best = m
                .curve(layer)
                .into_iter()
                .filter(|&(_, acc)| acc.is_some_and(|a| a >= threshold))
                .map(|(r, _)| r)
                .fold(0.0, f64::max);
            (layer.to_string(), best)
        })
        .collect()
}
