use gaze_core::data::{
    generate_scenes, generate_synthetic, parse_annotations, GazeAnnotationRecord, InputShape, Split, SyntheticSceneSpec,
};
use gaze_core::field::NormalizedPoint;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn wedge_directions_are_uniform_on_the_circle() {
    let spec = SyntheticSceneSpec {
        seed: 2024,
        ..Default::default()
    };
    let scenes = generate_scenes(&spec, Split::Train, 1000).unwrap();
    let mut bins = [0usize; 8];
    for s in &scenes {
        let a = s.wedge.angle().rem_euclid(std::f64::consts::TAU);
        bins[((a / std::f64::consts::TAU * 8.0) as usize).min(7)] += 1;
    }
    let expected = scenes.len() as f64 / 8.0;
    let stat: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(stat);
    assert!(p > 0.01, "bins {bins:?}, chi2 {stat}, p {p}");
}

#[test]
fn generated_samples_are_bit_identical_across_calls() {
    let spec = SyntheticSceneSpec {
        seed: 9,
        ..Default::default()
    };
    let shape = InputShape { scene: 32, crop: 8 };
    let a = generate_synthetic(&spec, Split::Test, 12, shape).unwrap();
    let b = generate_synthetic(&spec, Split::Test, 12, shape).unwrap();
    assert_eq!(a, b);
    for s in &a {
        assert!((s.direction.norm() - 1.0).abs() < 1e-12);
        assert!(s.scene.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn center_prediction_against_uniform_points() {
    // mean distance from the center of the unit square to a uniform point
    let closed_form = (2f64.sqrt() + (1.0 + 2f64.sqrt()).ln()) / 6.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 200_000;
    let center = NormalizedPoint { x: 0.5, y: 0.5 };
    let mc: f64 = (0..n)
        .map(|_| center.distance(&NormalizedPoint { x: rng.gen(), y: rng.gen() }))
        .sum::<f64>()
        / n as f64;
    assert!((mc - 0.38).abs() < 0.005, "{mc}");
    assert!((mc - closed_form).abs() < 3e-3);
}

fn record() -> impl Strategy<Value = GazeAnnotationRecord> {
    (
        "[a-z]{1,8}\\.png",
        1u32..4000,
        1u32..4000,
        (0.0..0.5f64, 0.0..0.5f64, 0.01..0.5f64, 0.01..0.5f64),
        (0.0..=1.0f64, 0.0..=1.0f64),
        prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64), 1..6),
    )
        .prop_map(|(image, width, height, (x, y, w, h), (cx, cy), gaze)| {
            let split = if gaze.len() == 1 { Split::Train } else { Split::Test };
            GazeAnnotationRecord {
                image,
                width,
                height,
                head_box: [x, y, w, h],
                head_center: [cx, cy],
                gaze: gaze.into_iter().map(|(a, b)| [a, b]).collect(),
                split,
            }
        })
}

proptest! {
    #[test]
    fn annotation_files_round_trip(records in prop::collection::vec(record(), 0..8)) {
        let mut buf = Vec::new();
        gaze_core::data::annotation::write_annotations(&mut buf, &records).unwrap();
        let back = parse_annotations(buf.as_slice(), "mem").unwrap();
        prop_assert_eq!(back, records);
    }

    #[test]
    fn generator_invariants_hold_for_any_seed(seed in any::<u64>(), objects in 1usize..6) {
        let spec = SyntheticSceneSpec { seed, objects, ..Default::default() };
        let cos_tol = spec.tolerance_deg.to_radians().cos();
        for s in generate_scenes(&spec, Split::Train, 4).unwrap() {
            prop_assert!(gaze_core::field::field_value(s.head, s.gaze, s.wedge).unwrap() >= cos_tol - 1e-12);
            prop_assert!(s.gaze.in_unit_square() && s.head.in_unit_square());
            prop_assert!(s.record.validate().is_ok());
            prop_assert_eq!(s.blobs.len(), objects);
        }
    }
}
