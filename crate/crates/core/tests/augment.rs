use std::collections::HashMap;

use dfdetect::augment::{
    apply_transform, color_convert, hsv_to_rgb, offline_augment, offline_count, online_augment, online_rng,
    rgb_to_hsv, ColorDirection, OnlineAugConfig, Sample, TransformKind,
};
use dfdetect::image::ImageTensor;
use dfdetect::manifest::{Source, Split, REAL};
use dfdetect::rng::seeded;
use dfdetect::synth::{generate_dataset, generate_real_image, SynthConfig};
use proptest::prelude::*;

fn image(seed: u64) -> ImageTensor {
    generate_real_image(seed, 16)
}

fn any_transform() -> impl Strategy<Value = (TransformKind, f32)> {
    prop::sample::select(TransformKind::PIPELINES.to_vec()).prop_flat_map(|kind| {
        let (lo, hi) = kind.range();
        (Just(kind), lo..=hi)
    })
}

proptest! {
    #[test]
    fn outputs_stay_in_unit_range(seed in 0u64..1000, (kind, param) in any_transform()) {
        let out = apply_transform(&image(seed), kind, param).unwrap();
        prop_assert!(out.in_unit_range());
    }

    #[test]
    fn flips_are_involutions(seed in 0u64..1000) {
        let img = image(seed);
        for kind in [TransformKind::Hflip, TransformKind::Vflip] {
            let twice = apply_transform(&apply_transform(&img, kind, 0.0).unwrap(), kind, 0.0).unwrap();
            prop_assert_eq!(&twice, &img);
        }
    }

    #[test]
    fn hsv_round_trip(r in 0.0f32..=1.0, g in 0.0f32..=1.0, b in 0.0f32..=1.0) {
        let hsv = rgb_to_hsv([r, g, b]);
        prop_assume!(hsv[1] > 1e-3);
        prop_assert!((0.0..360.0).contains(&hsv[0]));
        let back = hsv_to_rgb(hsv);
        for k in 0..3 {
            prop_assert!((back[k] - [r, g, b][k]).abs() <= 1e-5);
        }
    }

    #[test]
    fn neutral_parameters_are_identities(seed in 0u64..1000) {
        let img = image(seed);
        for (kind, p) in [
            (TransformKind::Brightness, 1.0),
            (TransformKind::Saturation, 1.0),
            (TransformKind::Hue, 0.0),
            (TransformKind::Rotation, 0.0),
        ] {
            let out = apply_transform(&img, kind, p).unwrap();
            for (a, b) in out.data().iter().zip(img.data()) {
                prop_assert!((a - b).abs() <= 1e-6, "{kind:?}");
            }
        }
    }

    #[test]
    fn online_augment_keeps_id_and_label(seed in any::<u64>(), label in 0u8..2) {
        let s = Sample { id: format!("s{seed}"), label, image: image(seed % 97) };
        let (out, _) = online_augment(&s, &OnlineAugConfig { p_aug: 1.0 }, &mut seeded(seed)).unwrap();
        prop_assert_eq!(out.id, s.id);
        prop_assert_eq!(out.label, label);
        prop_assert!(out.image.in_unit_range());
    }
}

#[test]
fn colour_conversion_reference_points() {
    let img = ImageTensor::from_data(1, 2, vec![1.0, 0.0, 0.0, 0.3, 0.3, 0.3]).unwrap();
    let hsv = color_convert(&img, ColorDirection::RgbToHsv);
    assert_eq!(hsv.data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.3]);
    let back = color_convert(&hsv, ColorDirection::HsvToRgb);
    assert_eq!(back.data(), img.data());
}

#[test]
fn one_row_hflip() {
    let img = ImageTensor::from_data(1, 3, vec![0.1, 0.1, 0.1, 0.2, 0.2, 0.2, 0.3, 0.3, 0.3]).unwrap();
    let out = apply_transform(&img, TransformKind::Hflip, 0.0).unwrap();
    assert_eq!(out.data(), &[0.3, 0.3, 0.3, 0.2, 0.2, 0.2, 0.1, 0.1, 0.1]);
}

#[test]
fn pipeline_frequencies_are_uniform() {
    let s = Sample {
        id: "x".into(),
        label: 1,
        image: ImageTensor::filled(4, 4, [0.5, 0.4, 0.3]),
    };
    let cfg = OnlineAugConfig { p_aug: 1.0 };
    let mut rng = seeded(2024);
    let mut counts: HashMap<TransformKind, usize> = HashMap::new();
    let draws = 60_000;
    for _ in 0..draws {
        let (_, kind) = online_augment(&s, &cfg, &mut rng).unwrap();
        *counts.entry(kind.expect("p_aug = 1 always fires")).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    for (kind, c) in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 1.0 / 6.0).abs() <= 0.01, "{kind:?}: {f}");
    }
}

#[test]
fn disabled_online_augmentation_is_identity() {
    let s = Sample {
        id: "x".into(),
        label: 0,
        image: image(3),
    };
    let mut rng = seeded(1);
    for _ in 0..100 {
        let (out, kind) = online_augment(&s, &OnlineAugConfig::disabled(), &mut rng).unwrap();
        assert_eq!(kind, None);
        assert_eq!(out, s);
    }
}

#[test]
fn online_augmentation_is_order_independent() {
    let samples: Vec<Sample> = (0..20)
        .map(|i| Sample {
            id: format!("id{i}"),
            label: 1,
            image: image(i),
        })
        .collect();
    let cfg = OnlineAugConfig::default();
    let run = |order: &[usize]| {
        let mut out: Vec<(usize, Sample)> = order
            .iter()
            .map(|&i| {
                let s = &samples[i];
                (i, online_augment(s, &cfg, &mut online_rng(9, &s.id, 3)).unwrap().0)
            })
            .collect();
        out.sort_by_key(|(i, _)| *i);
        out
    };
    let forward: Vec<usize> = (0..20).collect();
    let backward: Vec<usize> = (0..20).rev().collect();
    assert_eq!(run(&forward), run(&backward));
}

#[test]
fn offline_counts() {
    assert_eq!(offline_count(42_690, 0.5), 21_345);
    // the reference corpus reports 21,335 additional reals from 42,690
    let reference = 21_335.0 / 42_690.0;
    assert!((reference / 0.5 - 1.0f64).abs() < 1e-3);
    assert_eq!(offline_count(2_000, 0.5), 1_000);
    assert_eq!(offline_count(2_000, 0.0), 0);
}

#[test]
fn offline_augmentation_appends_labelled_reals() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        size: 8,
        train_real: 2_000,
        train_fake: 30,
        val_real: 10,
        val_fake: 10,
        ..Default::default()
    };
    let base = generate_dataset(&cfg, 5, dir.path(), 1).unwrap();

    let same = offline_augment(&base, 0.0, 5, &dir.path().join("aug")).unwrap();
    assert_eq!(same, base);

    let out = offline_augment(&base, 0.5, 5, &dir.path().join("aug")).unwrap();
    assert_eq!(out.records[..base.records.len()], base.records[..]);
    let added = &out.records[base.records.len()..];
    assert_eq!(added.len(), 1_000);
    for r in added {
        assert_eq!((r.label, r.source, r.split), (REAL, Source::RealOfflineAug, Split::Train));
        assert!(out.resolve(r).exists());
    }
    out.validate(true).unwrap();

    let again = offline_augment(&base, 0.5, 5, &dir.path().join("aug")).unwrap();
    assert_eq!(again, out);
}
