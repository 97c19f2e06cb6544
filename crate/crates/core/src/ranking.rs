//! Filter-importance rankings.
//!
//! Every ranking lists filter indices least-important first, so a pruner
//! removes a prefix of [`FilterRanking::order`]. Ties are broken by ascending
//! filter index everywhere.
//!
//! The sign-split strategies look at each filter's positive and negative
//! weights separately:
//!
//! * **D-Score** sorts the positive sums ascending and the negative sums
//!   descending (both lists nearest zero first), gives each filter its 1-based
//!   position in each list and ranks by the sum of the two positions.
//! * **D-Step** grows a prefix over both sorted lists; a filter enters the
//!   pruning buffer at the first prefix length where it appears in both.
//!   That length equals the larger of its two positions.
//! * **D-Step GM** replaces the sign sums by geometric redundancy: the sum of
//!   Euclidean distances to the other filters, computed separately on the
//!   positive and negative parts, sorted ascending.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{euclidean_distance, WeightTensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankingError {
    #[error("filter has no weights")]
    EmptyFilter,
    #[error("expected a rank-4 conv weight, got shape {0:?}")]
    NotConvWeight(Vec<usize>),
    #[error("buffer size {size} out of range 1..={filters}")]
    BufferSize { size: usize, filters: usize },
    #[error("geometric redundancy needs at least 2 filters, got {0}")]
    TooFewFilters(usize),
    #[error("vectors have unequal lengths")]
    UnequalLengths,
    #[error("unknown method {0:?} (expected l1, l2, dscore, dstep, dstepgm)")]
    UnknownMethod(String),
}

impl RankingError {
    pub fn code(&self) -> &'static str {
        match self {
            RankingError::EmptyFilter => "EmptyFilter",
            RankingError::NotConvWeight(_) => "NotConvWeight",
            RankingError::BufferSize { .. } => "BufferSize",
            RankingError::TooFewFilters(_) => "TooFewFilters",
            RankingError::UnequalLengths => "VectorLength",
            RankingError::UnknownMethod(_) => "UnknownMethod",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "dscore")]
    DScore,
    #[serde(rename = "dstep")]
    DStep,
    #[serde(rename = "dstepgm")]
    DStepGm,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::L1,
        Method::L2,
        Method::DScore,
        Method::DStep,
        Method::DStepGm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::L1 => "l1",
            Method::L2 => "l2",
            Method::DScore => "dscore",
            Method::DStep => "dstep",
            Method::DStepGm => "dstepgm",
        }
    }

    /// Label used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::L1 => "L1-norm",
            Method::L2 => "L2-norm",
            Method::DScore => "D-Score",
            Method::DStep => "D-Step",
            Method::DStepGm => "D-Step GM",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = RankingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| RankingError::UnknownMethod(s.to_string()))
    }
}

/// Sums of the strictly positive and strictly negative weights of one filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignSplit {
    pub s_pos: f64,
    pub s_neg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRanking {
    pub method: Method,
    pub layer: String,
    /// Filter indices, least important first.
    pub order: Vec<usize>,
    /// Per-filter score indexed by filter: the norm for l1/l2, the total
    /// positional score for dscore, the buffer entry step for dstep/dstepgm.
    pub scores: Vec<f64>,
}

impl FilterRanking {
    pub fn filters(&self) -> usize {
        self.order.len()
    }

    /// The `n` least-important filters, sorted ascending by index.
    pub fn prune_set(&self, n: usize) -> Vec<usize> {
        let mut s = self.order[..n.min(self.order.len())].to_vec();
        s.sort_unstable();
        s
    }
}

pub fn sign_sums(weights: &[f32]) -> Result<SignSplit, RankingError> {
    if weights.is_empty() {
        return Err(RankingError::EmptyFilter);
    }
    let mut s_pos = 0.0f64;
    let mut s_neg = 0.0f64;
    for &w in weights {
        if w > 0.0 {
            s_pos += w as f64;
        } else if w < 0.0 {
            s_neg += w as f64;
        }
    }
    Ok(SignSplit { s_pos, s_neg })
}

fn conv_filters(w: &WeightTensor) -> Result<usize, RankingError> {
    if w.rank() != 4 {
        return Err(RankingError::NotConvWeight(w.shape().to_vec()));
    }
    Ok(w.outer())
}

pub fn layer_sign_sums(w: &WeightTensor) -> Result<Vec<SignSplit>, RankingError> {
    let j = conv_filters(w)?;
    (0..j).map(|f| sign_sums(w.slab(f))).collect()
}

/// Indices sorted by `key` under `cmp`, ties by ascending index.
fn sorted_by<F>(n: usize, mut cmp: F) -> Vec<usize>
where
    F: FnMut(usize, usize) -> Ordering,
{
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| cmp(a, b).then(a.cmp(&b)));
    idx
}

fn float_cmp(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).expect("finite scores")
}

/// 1-based position of each filter in `order`.
fn positions(order: &[usize]) -> Vec<usize> {
    let mut pos = vec![0; order.len()];
    for (i, &f) in order.iter().enumerate() {
        pos[f] = i + 1;
    }
    pos
}

fn ascending(scores: &[f64]) -> Vec<usize> {
    sorted_by(scores.len(), |a, b| float_cmp(scores[a], scores[b]))
}

pub fn norm_scores(w: &WeightTensor, p: Norm) -> Result<Vec<f64>, RankingError> {
    let j = conv_filters(w)?;
    Ok((0..j)
        .map(|f| {
            let s = w.slab(f);
            match p {
                Norm::L1 => s.iter().map(|&v| (v as f64).abs()).sum(),
                Norm::L2 => s
                    .iter()
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt(),
            }
        })
        .collect())
}

pub fn rank_norm(layer: &str, w: &WeightTensor, p: Norm) -> Result<FilterRanking, RankingError> {
    let scores = norm_scores(w, p)?;
    Ok(FilterRanking {
        method: if p == Norm::L1 {
            Method::L1
        } else {
            Method::L2
        },
        layer: layer.to_string(),
        order: ascending(&scores),
        scores,
    })
}

/// Positional ranks (1 = nearest zero) in the positive and negative lists.
pub fn sign_positions(splits: &[SignSplit]) -> (Vec<usize>, Vec<usize>) {
    let n = splits.len();
    let pos = sorted_by(n, |a, b| float_cmp(splits[a].s_pos, splits[b].s_pos));
    let neg = sorted_by(n, |a, b| float_cmp(splits[b].s_neg, splits[a].s_neg));
    (positions(&pos), positions(&neg))
}

pub fn rank_dscore(layer: &str, w: &WeightTensor) -> Result<FilterRanking, RankingError> {
    let splits = layer_sign_sums(w)?;
    let (pos, neg) = sign_positions(&splits);
    let totals: Vec<usize> = pos.iter().zip(&neg).map(|(a, b)| a + b).collect();
    Ok(FilterRanking {
        method: Method::DScore,
        layer: layer.to_string(),
        order: sorted_by(totals.len(), |a, b| totals[a].cmp(&totals[b])),
        scores: totals.iter().map(|&t| t as f64).collect(),
    })
}

/// Buffer fill over two positional rankings. A filter's entry step is
/// `max(pos, neg)`: the first prefix length containing it in both lists.
/// The buffer is truncated at `buffer_size`; the rest follow by ascending
/// `pos + neg`.
fn buffered_order(pos: &[usize], neg: &[usize], buffer_size: usize) -> (Vec<usize>, Vec<f64>) {
    let n = pos.len();
    let entry: Vec<usize> = pos.iter().zip(neg).map(|(&a, &b)| a.max(b)).collect();
    let by_entry = sorted_by(n, |a, b| entry[a].cmp(&entry[b]));
    let mut order = by_entry[..buffer_size].to_vec();
    let mut rest = by_entry[buffer_size..].to_vec();
    rest.sort_by(|&a, &b| (pos[a] + neg[a]).cmp(&(pos[b] + neg[b])).then(a.cmp(&b)));
    order.extend(rest);
    (order, entry.iter().map(|&e| e as f64).collect())
}

fn check_buffer(size: usize, filters: usize) -> Result<(), RankingError> {
    if size == 0 || size > filters {
        return Err(RankingError::BufferSize { size, filters });
    }
    Ok(())
}

pub fn rank_dstep(
    layer: &str,
    w: &WeightTensor,
    buffer_size: usize,
) -> Result<FilterRanking, RankingError> {
    let splits = layer_sign_sums(w)?;
    check_buffer(buffer_size, splits.len())?;
    let (pos, neg) = sign_positions(&splits);
    let (order, scores) = buffered_order(&pos, &neg, buffer_size);
    Ok(FilterRanking {
        method: Method::DStep,
        layer: layer.to_string(),
        order,
        scores,
    })
}

/// Sum of Euclidean distances from each vector to every other vector.
/// Smallest score = nearest the geometric median = most redundant.
pub fn gm_distance_scores<V: AsRef<[f32]>>(parts: &[V]) -> Result<Vec<f64>, RankingError> {
    if parts.len() < 2 {
        return Err(RankingError::TooFewFilters(parts.len()));
    }
    let n = parts.len();
    let mut scores = vec![0.0; n];
    for (j, score) in scores.iter_mut().enumerate() {
        for m in (0..n).filter(|&m| m != j) {
            *score += euclidean_distance(parts[j].as_ref(), parts[m].as_ref())
                .map_err(|_| RankingError::UnequalLengths)?;
        }
    }
    Ok(scores)
}

/// Positive and negative parts of every filter, in filter order.
pub type SignParts = (Vec<Vec<f32>>, Vec<Vec<f32>>);

/// Per-filter positive parts (negatives zeroed) and negative parts (positives zeroed).
pub fn sign_parts(w: &WeightTensor) -> Result<SignParts, RankingError> {
    let j = conv_filters(w)?;
    Ok((0..j)
        .map(|f| {
            let s = w.slab(f);
            (
                s.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                s.iter().map(|&v| if v < 0.0 { v } else { 0.0 }).collect(),
            )
        })
        .unzip())
}

pub fn rank_dstep_gm(
    layer: &str,
    w: &WeightTensor,
    buffer_size: usize,
) -> Result<FilterRanking, RankingError> {
    let (pos_parts, neg_parts) = sign_parts(w)?;
    let n = pos_parts.len();
    if n < 2 {
        return Err(RankingError::TooFewFilters(n));
    }
    check_buffer(buffer_size, n)?;
    let pos = positions(&ascending(&gm_distance_scores(&pos_parts)?));
    let neg = positions(&ascending(&gm_distance_scores(&neg_parts)?));
    let (order, scores) = buffered_order(&pos, &neg, buffer_size);
    Ok(FilterRanking {
        method: Method::DStepGm,
        layer: layer.to_string(),
        order,
        scores,
    })
}

/// Ranks one conv layer. `buffer_size` applies to the buffered methods and
/// defaults to the filter count (the whole layer enters the buffer).
pub fn rank_layer(
    method: Method,
    layer: &str,
    w: &WeightTensor,
    buffer_size: Option<usize>,
) -> Result<FilterRanking, RankingError> {
    let buffer = buffer_size.unwrap_or_else(|| if w.rank() == 4 { w.outer() } else { 0 });
    match method {
        Method::L1 => rank_norm(layer, w, Norm::L1),
        Method::L2 => rank_norm(layer, w, Norm::L2),
        Method::DScore => rank_dscore(layer, w),
        Method::DStep => rank_dstep(layer, w, buffer),
        Method::DStepGm => rank_dstep_gm(layer, w, buffer),
    }
}

/// The ranking whose first `n` entries are the filters to remove when
/// pruning `n` filters. Buffered methods use a buffer of exactly `n`.
pub fn rank_for_removal(
    method: Method,
    layer: &str,
    w: &WeightTensor,
    n: usize,
) -> Result<FilterRanking, RankingError> {
    let buffer = match method {
        Method::DStep | Method::DStepGm if w.rank() == 4 => Some(n.clamp(1, w.outer())),
        _ => None,
    };
    rank_layer(method, layer, w, buffer)
}
