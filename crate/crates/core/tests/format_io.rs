mod common;

use std::fs;

use common::*;
use proptest::prelude::*;
use prunekit::format::{
    blob_path_for, decode_blob, encode_blob, load_dataset, load_model, manifest_json, save_dataset,
    save_model, validate_graph, write_blob, Dataset, LayerKind, ModelGraph, Padding,
};
use prunekit::inference::forward;
use prunekit::tensor::WeightTensor;
use rand::Rng;

fn fixture_net() -> ModelGraph {
    let p = fixture("net.pkm");
    load_model(&p, &blob_path_for(&p)).unwrap()
}

/// One random structural edit; the result may or may not be valid.
fn mutate(g: &mut ModelGraph, r: &mut impl Rng) {
    let i = r.random_range(1..g.nodes.len());
    match r.random_range(0..7) {
        0 => {
            let t = g
                .tensors
                .keys()
                .nth(r.random_range(0..g.tensors.len()))
                .unwrap()
                .clone();
            let old = g.tensors[&t].clone();
            let mut shape = old.shape().to_vec();
            let axis = r.random_range(0..shape.len());
            shape[axis] += 1;
            g.tensors.insert(t, WeightTensor::zeros(shape).unwrap());
        }
        1 => g.nodes[i].inputs = vec![g.nodes[r.random_range(0..g.nodes.len())].name.clone()],
        2 => g.nodes[i].attrs.padding = None,
        3 => g.nodes[i].attrs.stride = Some(r.random_range(0..4)),
        4 => {
            g.nodes.remove(i);
        }
        5 => g.input_shape[r.random_range(0..3)] += 1,
        _ => g.nodes[i].attrs.window = Some(r.random_range(0..12)),
    }
}

#[test]
fn valid_graphs_always_run() {
    let mut r = rng(21);
    let mut checked = 0;
    for _ in 0..300 {
        let mut g = random_model(&mut r, ALL_KINDS);
        assert!(validate_graph(&g).is_empty(), "{:?}", validate_graph(&g));
        for _ in 0..r.random_range(0..3) {
            mutate(&mut g, &mut r);
        }
        if validate_graph(&g).is_empty() {
            let x = random_inputs(&mut r, &g, 1).remove(0);
            let logits = forward(&g, &x).unwrap_or_else(|e| panic!("validated graph failed: {e}"));
            assert_eq!(logits.len(), g.num_classes);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_load_is_identity(seed in any::<u64>()) {
        let g = random_model(&mut rng(seed), ALL_KINDS);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pkm");
        save_model(&g, &p, &blob_path_for(&p)).unwrap();
        let back = load_model(&p, &blob_path_for(&p)).unwrap();
        prop_assert_eq!(back.manifest(), g.manifest());
        for (name, t) in &g.tensors {
            let bits = |w: &WeightTensor| w.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&back.tensors[name]), bits(t));
            prop_assert_eq!(back.tensors[name].shape(), t.shape());
        }
        // saving what was loaded reproduces the same bytes
        let q = dir.path().join("again.pkm");
        save_model(&back, &q, &blob_path_for(&q)).unwrap();
        prop_assert_eq!(fs::read(blob_path_for(&p)).unwrap(), fs::read(blob_path_for(&q)).unwrap());
        prop_assert_eq!(fs::read_to_string(&p).unwrap(), fs::read_to_string(&q).unwrap());
    }

    #[test]
    fn single_byte_corruption_is_detected(seed in any::<u64>(), at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let g = random_model(&mut rng(seed), PLAIN);
        let mut bytes = encode_blob(g.tensors.iter().map(|(k, v)| (k.as_str(), v))).unwrap();
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(decode_blob(&bytes).is_err());
    }
}

#[test]
fn manifest_text_round_trips() {
    let text = fs::read_to_string(fixture("net.pkm")).unwrap();
    assert_eq!(manifest_json(&fixture_net()), text);
}

#[test]
fn empty_path_is_an_io_error() {
    let g = fixture_net();
    let err = save_model(&g, "".as_ref(), "".as_ref()).unwrap_err();
    assert_eq!(err.code(), "Io");
    let err = load_model("".as_ref(), "".as_ref()).unwrap_err();
    assert_eq!(err.code(), "Io");
}

#[test]
fn overwriting_replaces_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pkm");
    let mut r = rng(1);
    let first = random_model(&mut r, PLAIN);
    let second = random_model(&mut r, PLAIN);
    save_model(&first, &p, &blob_path_for(&p)).unwrap();
    save_model(&second, &p, &blob_path_for(&p)).unwrap();
    assert_eq!(load_model(&p, &blob_path_for(&p)).unwrap(), second);
}

#[test]
fn invalid_graphs_are_not_saved() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.pkm");
    let mut g = fixture_net();
    g.tensors.remove("conv1.w");
    let err = save_model(&g, &p, &blob_path_for(&p)).unwrap_err();
    assert_eq!(err.code(), "DanglingTensor");
    assert!(!p.exists());
}

#[test]
fn missing_and_misshapen_tensors_fail_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pkm");
    fs::copy(fixture("net.pkm"), &p).unwrap();
    let mut g = fixture_net();

    g.tensors.remove("conv1.w");
    write_blob(
        &blob_path_for(&p),
        g.tensors.iter().map(|(k, v)| (k.as_str(), v)),
    )
    .unwrap();
    let err = load_model(&p, &blob_path_for(&p)).unwrap_err();
    assert_eq!(err.code(), "DanglingTensor");
    assert!(err.to_string().contains("conv1.w"));

    g.tensors.insert(
        "conv1.w".into(),
        WeightTensor::zeros(vec![16, 2, 3, 3]).unwrap(),
    );
    write_blob(
        &blob_path_for(&p),
        g.tensors.iter().map(|(k, v)| (k.as_str(), v)),
    )
    .unwrap();
    assert_eq!(
        load_model(&p, &blob_path_for(&p)).unwrap_err().code(),
        "ShapeMismatch"
    );
}

#[test]
fn non_finite_weights_are_rejected_on_save() {
    let mut g = fixture_net();
    let w = g.tensors["fc2.b"].clone();
    let mut data = w.data().to_vec();
    data[0] = f32::INFINITY;
    g.tensors.insert(
        "fc2.b".into(),
        WeightTensor::new(w.shape().to_vec(), data).unwrap(),
    );
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pkm");
    assert_eq!(
        save_model(&g, &p, &blob_path_for(&p)).unwrap_err().code(),
        "NonFinite"
    );
}

#[test]
fn unknown_manifest_fields_are_schema_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.pkm");
    fs::copy(fixture("net.pkm.bin"), blob_path_for(&p)).unwrap();
    let text =
        fs::read_to_string(fixture("net.pkm"))
            .unwrap()
            .replacen("\"stride\"", "\"strides\"", 1);
    fs::write(&p, text).unwrap();
    assert_eq!(
        load_model(&p, &blob_path_for(&p)).unwrap_err().code(),
        "Schema"
    );
    fs::write(&p, "{").unwrap();
    assert_eq!(
        load_model(&p, &blob_path_for(&p)).unwrap_err().code(),
        "Schema"
    );
}

#[test]
fn padding_and_kinds_use_their_wire_names() {
    let text = manifest_json(&fixture_net());
    for kind in [
        LayerKind::Conv2d,
        LayerKind::Affine,
        LayerKind::MaxPool2d,
        LayerKind::Flatten,
    ] {
        assert!(
            text.contains(&format!("\"{}\"", kind.as_str())),
            "{}",
            kind.as_str()
        );
    }
    assert_eq!(serde_json::to_string(&Padding::Same).unwrap(), "\"same\"");
}

#[test]
fn datasets_round_trip_and_check_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x.bin"), dir.path().join("y.bin"));
    let d = load_dataset(
        &fixture("net_eval50_inputs.bin"),
        &fixture("net_eval50_labels.bin"),
    )
    .unwrap();
    save_dataset(&d, &x, &y).unwrap();
    assert_eq!(load_dataset(&x, &y).unwrap(), d);
    assert_eq!(d.sample_shape(), [3, 16, 16]);

    let write_labels = |vals: Vec<f32>| {
        let n = vals.len();
        write_blob(&y, [("labels", &WeightTensor::new(vec![n], vals).unwrap())]).unwrap();
    };
    write_labels(vec![0.0; 49]);
    assert_eq!(load_dataset(&x, &y).unwrap_err().code(), "CountMismatch");
    let mut labels = vec![1.0; 50];
    labels[7] = 2.5;
    write_labels(labels.clone());
    assert_eq!(load_dataset(&x, &y).unwrap_err().code(), "NonIntegralLabel");
    labels[7] = -1.0;
    write_labels(labels);
    assert_eq!(load_dataset(&x, &y).unwrap_err().code(), "NegativeLabel");

    let short = Dataset::new(WeightTensor::zeros(vec![2, 1, 1, 1]).unwrap(), vec![0]);
    assert_eq!(short.unwrap_err().code(), "CountMismatch");
}
