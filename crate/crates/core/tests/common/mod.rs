//! Shared test support: random layers and models, fixture paths, and
//! reference oracles that are written independently of the library code.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use prunekit::format::{Attrs, LayerKind, LayerNode, ModelGraph, Padding};
use prunekit::tensor::WeightTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], scale: f32) -> WeightTensor {
    let n = shape.iter().product();
    let data = normal_vec(rng, n).into_iter().map(|v| v * scale).collect();
    WeightTensor::new(shape.to_vec(), data).unwrap()
}

/// A conv layer with `J ∈ [2, 64]` filters, kernels up to 5x5, N(0,1) weights.
pub fn random_layer(rng: &mut impl Rng) -> WeightTensor {
    let j = rng.random_range(2..=64);
    let c = rng.random_range(1..=4);
    let k = rng.random_range(1..=5);
    normal_tensor(rng, &[j, c, k, k], 1.0)
}

/// A layer with repeated filters, exact zeros and sign-flipped copies, so
/// sums tie.
pub fn tied_layer(rng: &mut impl Rng) -> WeightTensor {
    let j = rng.random_range(2..=16);
    let len = rng.random_range(1..=4);
    let pool: Vec<Vec<f32>> = (0..3)
        .map(|_| {
            (0..len)
                .map(|_| rng.random_range(-2i32..=2) as f32 * 0.5)
                .collect()
        })
        .collect();
    let data: Vec<f32> = (0..j)
        .flat_map(|_| {
            let f = &pool[rng.random_range(0..pool.len())];
            let flip = rng.random_bool(0.3);
            f.iter()
                .map(move |&v| if flip { -v } else { v })
                .collect::<Vec<_>>()
        })
        .collect();
    WeightTensor::new(vec![j, 1, 1, len], data).unwrap()
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOpts {
    pub affine: bool,
    pub residual: bool,
    pub bias: bool,
}

pub const PLAIN: ModelOpts = ModelOpts {
    affine: false,
    residual: false,
    bias: true,
};

pub const ALL_KINDS: ModelOpts = ModelOpts {
    affine: true,
    residual: true,
    bias: true,
};

struct Builder {
    nodes: Vec<LayerNode>,
    tensors: BTreeMap<String, WeightTensor>,
}

impl Builder {
    fn push(&mut self, node: LayerNode) -> String {
        let name = node.name.clone();
        self.nodes.push(node);
        name
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        rng: &mut impl Rng,
        name: &str,
        input: &str,
        cin: usize,
        cout: usize,
        k: usize,
        padding: Padding,
        bias: bool,
    ) -> String {
        let mut n = LayerNode::new(name, LayerKind::Conv2d, &[input]);
        n.attrs = Attrs {
            stride: Some(1),
            padding: Some(padding),
            window: None,
        };
        let scale = (2.0 / (cin * k * k) as f32).sqrt();
        self.tensors.insert(
            format!("{name}.w"),
            normal_tensor(rng, &[cout, cin, k, k], scale),
        );
        n.weights.weight = Some(format!("{name}.w"));
        if bias {
            self.tensors
                .insert(format!("{name}.b"), normal_tensor(rng, &[cout], 0.1));
            n.weights.bias = Some(format!("{name}.b"));
        }
        self.push(n)
    }

    fn dense(
        &mut self,
        rng: &mut impl Rng,
        name: &str,
        input: &str,
        din: usize,
        dout: usize,
        bias: bool,
    ) -> String {
        let mut n = LayerNode::new(name, LayerKind::Dense, &[input]);
        self.tensors.insert(
            format!("{name}.w"),
            normal_tensor(rng, &[dout, din], (2.0 / din as f32).sqrt()),
        );
        n.weights.weight = Some(format!("{name}.w"));
        if bias {
            self.tensors
                .insert(format!("{name}.b"), normal_tensor(rng, &[dout], 0.1));
            n.weights.bias = Some(format!("{name}.b"));
        }
        self.push(n)
    }
}

/// A random valid model: 2-4 conv layers (relu after each, optional
/// maxpool/affine/residual block), then flatten or globalavgpool, then a
/// dense head with an optional hidden layer.
pub fn random_model(rng: &mut impl Rng, opts: ModelOpts) -> ModelGraph {
    let mut b = Builder {
        nodes: vec![LayerNode::new("in", LayerKind::Input, &[])],
        tensors: BTreeMap::new(),
    };
    let c0 = rng.random_range(1..=3);
    let (h0, w0) = (rng.random_range(6..=10), rng.random_range(6..=10));
    let (mut h, mut w) = (h0, w0);
    let mut c = c0;
    let mut last = "in".to_string();
    let convs = rng.random_range(2..=4);
    let mut pooled = false;
    for i in 0..convs {
        let cout = rng.random_range(2..=6);
        let k = if rng.random_bool(0.5) { 3 } else { 1 };
        let padding = if k == 1 || h < 5 || w < 5 || rng.random_bool(0.6) {
            Padding::Same
        } else {
            Padding::Valid
        };
        let bias = opts.bias && rng.random_bool(0.7);
        last = b.conv(rng, &format!("conv{i}"), &last, c, cout, k, padding, bias);
        if padding == Padding::Valid {
            h -= k - 1;
            w -= k - 1;
        }
        c = cout;
        if opts.affine && rng.random_bool(0.3) {
            let mut n = LayerNode::new(format!("bn{i}"), LayerKind::Affine, &[&last]);
            b.tensors
                .insert(format!("bn{i}.s"), normal_tensor(rng, &[c], 0.5));
            b.tensors
                .insert(format!("bn{i}.t"), normal_tensor(rng, &[c], 0.1));
            n.weights.scale = Some(format!("bn{i}.s"));
            n.weights.shift = Some(format!("bn{i}.t"));
            last = b.push(n);
        }
        last = b.push(LayerNode::new(
            format!("relu{i}"),
            LayerKind::Relu,
            &[&last],
        ));
        if opts.residual && rng.random_bool(0.3) {
            // the conv feeding the skip path closes the previous stage
            let feeder = format!("conv{i}");
            b.nodes
                .iter_mut()
                .find(|n| n.name == feeder)
                .unwrap()
                .residual_last = true;
            let ic = rng.random_range(2..=4);
            let inner = b.conv(
                rng,
                &format!("res{i}a"),
                &last,
                c,
                ic,
                3,
                Padding::Same,
                opts.bias,
            );
            let r = b.push(LayerNode::new(
                format!("res{i}r"),
                LayerKind::Relu,
                &[&inner],
            ));
            let closing = b.conv(rng, &format!("res{i}b"), &r, ic, c, 3, Padding::Same, false);
            b.nodes.last_mut().unwrap().residual_last = true;
            last = b.push(LayerNode::new(
                format!("res{i}sum"),
                LayerKind::Add,
                &[&last, &closing],
            ));
        }
        if !pooled && h >= 4 && w >= 4 && rng.random_bool(0.4) {
            let mut p = LayerNode::new(format!("pool{i}"), LayerKind::MaxPool2d, &[&last]);
            p.attrs.window = Some(2);
            p.attrs.stride = Some(2);
            last = b.push(p);
            h = (h - 2) / 2 + 1;
            w = (w - 2) / 2 + 1;
            pooled = true;
        }
    }
    let mut d = if rng.random_bool(0.5) {
        last = b.push(LayerNode::new("flat", LayerKind::Flatten, &[&last]));
        c * h * w
    } else {
        last = b.push(LayerNode::new("gap", LayerKind::GlobalAvgPool, &[&last]));
        c
    };
    if rng.random_bool(0.5) {
        let hidden = rng.random_range(3..=8);
        last = b.dense(rng, "fc0", &last, d, hidden, opts.bias);
        last = b.push(LayerNode::new("fc0r", LayerKind::Relu, &[&last]));
        d = hidden;
    }
    let classes = rng.random_range(2..=5);
    b.dense(rng, "head", &last, d, classes, opts.bias);
    ModelGraph {
        input_shape: [c0, h0, w0],
        num_classes: classes,
        nodes: b.nodes,
        tensors: b.tensors,
    }
}

pub fn random_inputs(rng: &mut impl Rng, g: &ModelGraph, n: usize) -> Vec<Vec<f32>> {
    let len = g.input_shape.iter().product();
    (0..n).map(|_| normal_vec(rng, len)).collect()
}

/// Zeroes the given filters (weights and bias) of a conv layer in place.
pub fn zero_filters(g: &mut ModelGraph, layer: &str, filters: &[usize]) {
    let node = g.node(layer).unwrap().clone();
    let wname = node.weights.weight.clone().unwrap();
    let w = &g.tensors[&wname];
    let (shape, slab) = (w.shape().to_vec(), w.slab_len());
    let mut data = w.data().to_vec();
    for &f in filters {
        data[f * slab..(f + 1) * slab].fill(0.0);
    }
    g.tensors
        .insert(wname, WeightTensor::new(shape, data).unwrap());
    if let Some(bname) = node.weights.bias {
        let b = &g.tensors[&bname];
        let mut data = b.data().to_vec();
        for &f in filters {
            data[f] = 0.0;
        }
        g.tensors
            .insert(bname, WeightTensor::new(vec![data.len()], data).unwrap());
    }
}

// ---------------------------------------------------------------------------
// Reference rankings, written as direct transcriptions of the definitions
// with no shared helpers from the library.

/// (sum of strictly positive weights, sum of strictly negative weights)
pub fn oracle_sums(filter: &[f32]) -> (f64, f64) {
    let mut p = 0.0f64;
    let mut n = 0.0f64;
    for &v in filter {
        if v > 0.0 {
            p += v as f64;
        } else if v < 0.0 {
            n += v as f64;
        }
    }
    (p, n)
}

fn filters_of(w: &WeightTensor) -> Vec<Vec<f32>> {
    let j = w.shape()[0];
    let len = w.data().len() / j;
    (0..j)
        .map(|f| w.data()[f * len..(f + 1) * len].to_vec())
        .collect()
}

/// Positional rank (1-based) of every filter in a stable sort by `key`.
fn positions(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    // insertion sort: stable, ties keep index order
    for i in 1..idx.len() {
        let mut k = i;
        while k > 0 && keys[idx[k - 1]] > keys[idx[k]] {
            idx.swap(k - 1, k);
            k -= 1;
        }
    }
    let mut pos = vec![0; keys.len()];
    for (r, &f) in idx.iter().enumerate() {
        pos[f] = r + 1;
    }
    pos
}

/// (positive-list rank, negative-list rank) per filter. The positive list
/// ascends by positive sum; the negative list descends by the signed
/// negative sum, nearest zero first.
pub fn oracle_positions(w: &WeightTensor) -> (Vec<usize>, Vec<usize>) {
    let sums: Vec<(f64, f64)> = filters_of(w).iter().map(|f| oracle_sums(f)).collect();
    let p: Vec<f64> = sums.iter().map(|s| s.0).collect();
    let n: Vec<f64> = sums.iter().map(|s| -s.1).collect();
    (positions(&p), positions(&n))
}

pub fn oracle_dscore(w: &WeightTensor) -> Vec<usize> {
    let (p, n) = oracle_positions(w);
    let total: Vec<f64> = p.iter().zip(&n).map(|(a, b)| (a + b) as f64).collect();
    let r = positions(&total);
    let mut order = vec![0; r.len()];
    for (f, &k) in r.iter().enumerate() {
        order[k - 1] = f;
    }
    order
}

/// Grows both sorted lists one position at a time; a filter enters the
/// buffer at the first step where it sits in both prefixes. Filters entering
/// at the same step go in index order. Returns (order, entry step).
pub fn oracle_buffered(
    pos_rank: &[usize],
    neg_rank: &[usize],
    buffer_size: usize,
) -> (Vec<usize>, Vec<usize>) {
    let j = pos_rank.len();
    let mut entry = vec![0usize; j];
    let mut buffer: Vec<usize> = Vec::new();
    for step in 1..=j {
        for f in 0..j {
            if entry[f] == 0 && pos_rank[f] <= step && neg_rank[f] <= step {
                entry[f] = step;
                buffer.push(f);
            }
        }
    }
    buffer.truncate(buffer_size);
    let mut rest: Vec<usize> = (0..j).filter(|f| !buffer.contains(f)).collect();
    rest.sort_by_key(|&f| (pos_rank[f] + neg_rank[f], f));
    buffer.extend(rest);
    (buffer, entry)
}

pub fn oracle_dstep(w: &WeightTensor, buffer_size: usize) -> (Vec<usize>, Vec<usize>) {
    let (p, n) = oracle_positions(w);
    oracle_buffered(&p, &n, buffer_size)
}

/// Sum of Euclidean distances from each vector to every other, in f64.
pub fn oracle_gm(vs: &[Vec<f32>]) -> Vec<f64> {
    vs.iter()
        .map(|a| {
            vs.iter()
                .map(|b| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| {
                            let d = *x as f64 - *y as f64;
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .sum()
        })
        .collect()
}

pub fn oracle_dstep_gm(w: &WeightTensor, buffer_size: usize) -> (Vec<usize>, Vec<usize>) {
    let fs = filters_of(w);
    let pos: Vec<Vec<f32>> = fs
        .iter()
        .map(|f| f.iter().map(|&v| v.max(0.0)).collect())
        .collect();
    let neg: Vec<Vec<f32>> = fs
        .iter()
        .map(|f| f.iter().map(|&v| v.min(0.0)).collect())
        .collect();
    let (gp, gn) = (oracle_gm(&pos), oracle_gm(&neg));
    oracle_buffered(&positions(&gp), &positions(&gn), buffer_size)
}
