use afp_core::nn::{Tape, Tensor};
use afp_core::phantom::{generate_phantom, PhantomSpec};
use afp_core::rng::seeded;
use afp_core::segnet::*;
use afp_core::Error;
use rand::Rng;

fn rand_tensor<T: afp_core::Real>(seed: u64, shape: [usize; 5]) -> Tensor<T> {
    let mut r = seeded(seed);
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| T::of(r.random_range(-2.0..2.0))).collect(),
    )
    .unwrap()
}

#[test]
fn output_shape_follows_input() {
    let cfg = UNetConfig {
        out_labels: 3,
        ..Default::default()
    };
    let m = build_segmenter::<f32>(&cfg, 0).unwrap();
    let out = m.predict(&rand_tensor(1, [1, 1, 32, 32, 32])).unwrap();
    assert_eq!(out.shape(), [1, 3, 32, 32, 32]);
    let err = m.predict(&rand_tensor(1, [1, 1, 33, 33, 33])).unwrap_err();
    assert!(matches!(err, Error::ShapeIncompatible { .. }), "{err:?}");
    assert!(m.param_count() > 0);
}

#[test]
fn seeded_builds_agree() {
    let cfg = UNetConfig::default();
    assert_eq!(
        build_segmenter::<f32>(&cfg, 7).unwrap(),
        build_segmenter::<f32>(&cfg, 7).unwrap()
    );
    assert_ne!(
        build_segmenter::<f32>(&cfg, 7).unwrap(),
        build_segmenter::<f32>(&cfg, 8).unwrap()
    );
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        UNetConfig {
            depth: 1,
            ..Default::default()
        },
        UNetConfig {
            base_channels: 3,
            ..Default::default()
        },
        UNetConfig {
            out_labels: 1,
            ..Default::default()
        },
    ] {
        assert!(build_segmenter::<f32>(&cfg, 0).is_err());
    }
}

#[test]
fn taps_are_non_negative_and_ordered() {
    let m = freeze(build_segmenter::<f32>(&UNetConfig::default(), 2).unwrap());
    let x = rand_tensor::<f32>(3, [1, 1, 16, 16, 16]);
    let taps = FeatureTapConfig::default_for_depth(3);
    let maps = extract_features(&m, &x, &taps).unwrap();
    assert_eq!(maps.len(), 5);
    for (i, map) in maps.iter().enumerate() {
        assert!(map.data().iter().all(|&v| v >= 0.0), "tap {i}");
        let (c, down) = m.block_geometry(i);
        assert_eq!(map.shape(), [1, c, 16 / down, 16 / down, 16 / down]);
    }
    assert_eq!(maps, extract_features(&m, &x, &taps).unwrap());
}

#[test]
fn first_block_tap_shape() {
    let m = freeze(build_segmenter::<f32>(&UNetConfig::default(), 2).unwrap());
    let maps = extract_features(
        &m,
        &rand_tensor(0, [1, 1, 32, 32, 32]),
        &FeatureTapConfig::single("block1"),
    )
    .unwrap();
    // base width 8 at the first level, no downsampling
    assert_eq!(maps.len(), 1);
    assert_eq!(maps[0].shape(), [1, 8, 32, 32, 32]);
}

#[test]
fn unknown_and_empty_taps_fail() {
    let m = freeze(build_segmenter::<f32>(&UNetConfig::default(), 2).unwrap());
    let x = rand_tensor::<f32>(3, [1, 1, 8, 8, 8]);
    for bad in ["block0", "block6", "conv2", ""] {
        let err = extract_features(&m, &x, &FeatureTapConfig::single(bad)).unwrap_err();
        assert!(matches!(err, Error::UnknownTapId(_)), "{bad}: {err:?}");
    }
    let empty = FeatureTapConfig {
        tap_ids: vec![],
        include_prefinal: false,
    };
    assert!(extract_features(&m, &x, &empty).is_err());
}

#[test]
fn extraction_needs_a_frozen_model() {
    let m = build_segmenter::<f32>(&UNetConfig::default(), 2).unwrap();
    let x = rand_tensor::<f32>(3, [1, 1, 8, 8, 8]);
    let err = extract_features(&m, &x, &FeatureTapConfig::default()).unwrap_err();
    assert!(matches!(err, Error::ExtractorNotFrozen));
}

#[test]
fn frozen_model_is_deterministic_and_immutable() {
    let m = freeze(build_segmenter::<f32>(&UNetConfig::default(), 4).unwrap());
    let x = rand_tensor::<f32>(5, [1, 1, 16, 16, 16]);
    let a = m.predict(&x).unwrap();
    let b = m.predict(&x).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
    let mut again = freeze(m.clone());
    assert_eq!(again, m);
    assert!(matches!(again.params_mut(), Err(Error::Frozen)));
}

#[test]
fn prefinal_tap_through_head_reproduces_output() {
    let m = freeze(build_segmenter::<f32>(&UNetConfig::default(), 6).unwrap());
    for seed in 0..3 {
        let x = rand_tensor::<f32>(seed, [1, 1, 16, 16, 16]);
        let taps = FeatureTapConfig {
            tap_ids: vec![],
            include_prefinal: true,
        };
        let pre = extract_features(&m, &x, &taps).unwrap().pop().unwrap();
        assert_eq!(m.head(&pre).unwrap(), m.predict(&x).unwrap());
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let cfg = UNetConfig {
        base_channels: 4,
        ..Default::default()
    };
    let m = freeze(build_segmenter::<f64>(&cfg, 11).unwrap());
    let taps = FeatureTapConfig::default_for_depth(3);
    let ext = TappedSegmenter {
        model: &m,
        taps: &taps,
    };
    let objective = |x: &Tensor<f64>, grad: bool| {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), grad);
        let maps = ext.features(&mut tape, xv).unwrap();
        let terms: Vec<_> = maps.iter().map(|&v| (tape.mean(v), 1.0)).collect();
        let root = tape.weighted_sum(&terms).unwrap();
        let value = tape.value(root).item_value();
        let g = grad.then(|| tape.backward(root).get(xv).unwrap().clone());
        (value, g)
    };
    let x = rand_tensor::<f64>(21, [1, 1, 8, 8, 8]);
    let (_, g) = objective(&x, true);
    let g = g.unwrap();
    let mut r = seeded(22);
    let h = 1e-6;
    for _ in 0..10 {
        let i = r.random_range(0..x.numel());
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (objective(&xp, false).0 - objective(&xm, false).0) / (2.0 * h);
        let rel = (g.data()[i] - fd).abs() / g.data()[i].abs().max(fd.abs()).max(1e-12);
        assert!(rel < 1e-3, "voxel {i}: {} vs {fd}", g.data()[i]);
    }
}

fn phantom_cases(n: u64) -> Vec<SegCase> {
    (0..n)
        .map(|s| {
            let pair = generate_phantom(&PhantomSpec {
                size: [32; 3],
                seed: s,
                tube_radius_range: (1.0, 2.0),
                ..Default::default()
            })
            .unwrap();
            SegCase {
                image: pair.target,
                labels: pair.labels.unwrap(),
            }
        })
        .collect()
}

#[test]
fn zero_epochs_returns_initialisation() {
    let cfg = UNetConfig {
        out_labels: 4,
        ..Default::default()
    };
    let init = build_segmenter::<f32>(&cfg, 9).unwrap();
    let cases = phantom_cases(2);
    let opts = SegTrainOptions {
        epochs: 0,
        ..Default::default()
    };
    let run = train_segmentation(init.clone(), &cases[..1], &cases[1..], &opts).unwrap();
    assert_eq!(run.model.params(), init.params());
    assert_eq!(run.checkpoint.weights, init.params().flatten());
    assert!(run.curve.is_empty());
}

#[test]
fn out_of_range_labels_are_rejected() {
    let m = build_segmenter::<f32>(&UNetConfig::default(), 0).unwrap();
    let cases = phantom_cases(1);
    let opts = SegTrainOptions {
        epochs: 1,
        ..Default::default()
    };
    let err = train_segmentation(m, &cases, &[], &opts).unwrap_err();
    assert!(
        matches!(err, Error::LabelOutOfRange { out_labels: 2, .. }),
        "{err:?}"
    );
}

#[test]
fn training_is_seeded_and_checkpoints_round_trip() {
    let cfg = UNetConfig {
        out_labels: 4,
        ..Default::default()
    };
    let cases = phantom_cases(2);
    let opts = SegTrainOptions {
        epochs: 1,
        patches_per_case: 1,
        patch_size: [16; 3],
        seed: 3,
        ..Default::default()
    };
    let run = |_: u8| {
        train_segmentation(
            build_segmenter(&cfg, 1).unwrap(),
            &cases[..1],
            &cases[1..],
            &opts,
        )
        .unwrap()
    };
    let a = run(0);
    let b = run(1);
    assert_eq!(a.model, b.model);
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.curve.len(), 1);
    let restored = SegModel::<f32>::from_checkpoint(&a.checkpoint).unwrap();
    assert_eq!(restored.params(), a.model.params());
    let mut bad = a.checkpoint.clone();
    bad.weights.pop();
    assert!(matches!(
        SegModel::<f32>::from_checkpoint(&bad),
        Err(Error::CheckpointMismatch(_))
    ));
}
