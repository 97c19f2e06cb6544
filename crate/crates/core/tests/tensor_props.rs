use proptest::prelude::*;
use prunekit::tensor::{
    drop_entries, drop_input_channels, drop_output_filters, euclidean_distance, slice_filter,
    WeightTensor,
};

fn conv_weight() -> impl Strategy<Value = WeightTensor> {
    (1usize..6, 1usize..6, 1usize..4, 1usize..4).prop_flat_map(|(j, c, kh, kw)| {
        prop::collection::vec(-4.0f32..4.0, j * c * kh * kw)
            .prop_map(move |data| WeightTensor::new(vec![j, c, kh, kw], data).unwrap())
    })
}

/// A strict subset of `0..n`.
fn subset(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(any::<bool>(), n).prop_filter_map("keep at least one", |mask| {
        let picked: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        (picked.len() < mask.len()).then_some(picked)
    })
}

fn weight_and_drops() -> impl Strategy<Value = (WeightTensor, Vec<usize>, Vec<usize>)> {
    conv_weight().prop_flat_map(|w| {
        let (j, c) = (w.shape()[0], w.shape()[1]);
        (Just(w), subset(j), subset(c))
    })
}

proptest! {
    #[test]
    fn output_and_input_drops_commute((w, outs, ins) in weight_and_drops()) {
        let a = drop_input_channels(&drop_output_filters(&w, &outs).unwrap(), &ins).unwrap();
        let b = drop_output_filters(&drop_input_channels(&w, &ins).unwrap(), &outs).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.shape()[0], w.shape()[0] - outs.len());
        prop_assert_eq!(a.shape()[1], w.shape()[1] - ins.len());
    }

    #[test]
    fn surviving_filters_keep_their_order((w, outs, _ins) in weight_and_drops()) {
        let d = drop_output_filters(&w, &outs).unwrap();
        let kept: Vec<usize> = (0..w.shape()[0]).filter(|j| !outs.contains(j)).collect();
        for (new, &old) in kept.iter().enumerate() {
            prop_assert_eq!(d.slab(new), w.slab(old));
            let (a, b) = (slice_filter(&d, new).unwrap(), slice_filter(&w, old).unwrap());
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn dropping_in_two_steps_equals_one(w in conv_weight(), seed in any::<u64>()) {
        let j = w.shape()[0];
        prop_assume!(j >= 3);
        let first = vec![(seed as usize) % j];
        let rest: Vec<usize> = (0..j - 1).filter(|i| (seed >> i) & 1 == 1).take(j - 2).collect();
        let two = drop_output_filters(&drop_output_filters(&w, &first).unwrap(), &rest).unwrap();
        let remaining: Vec<usize> = (0..j).filter(|i| *i != first[0]).collect();
        let mut all = first.clone();
        all.extend(rest.iter().map(|&r| remaining[r]));
        prop_assert_eq!(two, drop_output_filters(&w, &all).unwrap());
    }

    #[test]
    fn distance_is_a_metric(
        a in prop::collection::vec(-10.0f32..10.0, 1..20),
        seed in any::<u64>(),
    ) {
        let shift = |k: u64| -> Vec<f32> {
            a.iter().enumerate().map(|(i, v)| v + (((seed >> ((i as u64 + k) % 60)) & 7) as f32 - 3.5)).collect()
        };
        let (b, c) = (shift(1), shift(7));
        let ab = euclidean_distance(&a, &b).unwrap();
        let bc = euclidean_distance(&b, &c).unwrap();
        let ac = euclidean_distance(&a, &c).unwrap();
        prop_assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab, euclidean_distance(&b, &a).unwrap());
        prop_assert!(ac <= ab + bc + 1e-9);
    }
}

#[test]
fn dropping_every_entry_is_refused() {
    let b = WeightTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(
        drop_entries(&b, &[0, 1, 2]).unwrap_err().code(),
        "LayerEmptied"
    );
    assert_eq!(drop_entries(&b, &[1]).unwrap().data(), &[1.0, 3.0]);
    assert_eq!(
        drop_entries(&b, &[1, 1]).unwrap_err().code(),
        "DuplicateIndex"
    );
}

#[test]
fn unequal_lengths_have_no_distance() {
    assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
}
