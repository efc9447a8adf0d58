use std::collections::HashMap;
use std::fs;
use std::path::Path;

use dfdetect::image::ImageTensor;
use dfdetect::manifest::{Source, Split, FAKE, REAL};
use dfdetect::rng::derive_seed;
use dfdetect::synth::{
    generate_dataset, generate_real_image, inject_fake_artifact, FakeKind, FakeMethodSpec, SynthConfig,
};
use proptest::prelude::*;

/// Energy of the red channel's 2-D DFT at frequencies with either index in
/// the upper half of the Nyquist band.
fn high_frequency_energy(img: &ImageTensor) -> f64 {
    let (h, w) = (img.height(), img.width());
    let mut energy = 0.0;
    for u in 0..h {
        for v in 0..w {
            let fu = u.min(h - u);
            let fv = v.min(w - v);
            if fu < h / 4 && fv < w / 4 {
                continue;
            }
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for y in 0..h {
                for x in 0..w {
                    let phase = -2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let p = img.pixel(y, x)[0] as f64;
                    re += p * phase.cos();
                    im += p * phase.sin();
                }
            }
            energy += re * re + im * im;
        }
    }
    energy
}

#[test]
fn different_seeds_give_different_patterns() {
    for s in 0..100u64 {
        let a = generate_real_image(2 * s, 32);
        let b = generate_real_image(2 * s + 1, 32);
        assert!(a.mean_abs_diff(&b) > 0.01, "seeds {} / {}", 2 * s, 2 * s + 1);
        assert_eq!(a, generate_real_image(2 * s, 32));
        assert!(a.in_unit_range());
    }
}

#[test]
fn checker_adds_high_frequency_energy() {
    let flat = ImageTensor::filled(16, 16, [0.5, 0.5, 0.5]);
    let spec = FakeMethodSpec::default_for(FakeKind::CheckerArtifact);
    let out = inject_fake_artifact(&flat, &spec, 3).unwrap();
    let before = high_frequency_energy(&flat);
    let after = high_frequency_energy(&out);
    assert!(after > before, "{after} vs {before}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn injectors_stay_in_range_and_zero_strength_is_identity(
        kind in prop::sample::select(FakeKind::ALL.to_vec()),
        img_seed in any::<u64>(),
        seed in any::<u64>(),
    ) {
        let img = generate_real_image(img_seed, 16);
        let spec = FakeMethodSpec::default_for(kind);
        let out = inject_fake_artifact(&img, &spec, seed).unwrap();
        prop_assert!(out.in_unit_range());
        prop_assert_eq!(&out, &inject_fake_artifact(&img, &spec, seed).unwrap());
        let zero = FakeMethodSpec { strength: 0.0, ..spec };
        prop_assert_eq!(inject_fake_artifact(&img, &zero, seed).unwrap(), img);
    }
}

fn read_tree(dir: &Path) -> HashMap<String, Vec<u8>> {
    let mut out = HashMap::new();
    for sub in ["", "images"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn default_corpus_shape() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let m = generate_dataset(&cfg, 42, dir.path(), 1).unwrap();
    assert_eq!(m.records.len(), 8_800);
    assert_eq!(m.count(|r| r.label == REAL), 2_400);
    assert_eq!(m.count(|r| r.split == Split::Val && r.label == REAL), 400);
    assert_eq!(m.count(|r| r.split == Split::Val && r.label == FAKE), 400);
    for kind in FakeKind::ALL {
        let n = m.count(|r| r.split == Split::Train && r.source == Source::FakeMethod(kind.method_id()));
        assert!(n.abs_diff(1_500) <= 1, "{kind:?}: {n}");
    }
    m.validate(true).unwrap();

    // fakes carry a visible artifact relative to their source pattern
    for r in m.records.iter().filter(|r| r.label == FAKE).take(400) {
        let img = ImageTensor::load_png(&m.resolve(r)).unwrap();
        let source = generate_real_image(derive_seed(42, &["pattern", &r.id]), cfg.size);
        assert!(img.mean_abs_diff(&source) > 0.005, "{}", r.id);
    }
}

#[test]
fn regeneration_is_byte_identical_and_thread_independent() {
    let cfg = SynthConfig {
        size: 16,
        train_real: 60,
        train_fake: 120,
        val_real: 20,
        val_fake: 20,
        train_generated: 10,
        ..Default::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, 7, a.path(), 1).unwrap();
    generate_dataset(&cfg, 7, b.path(), 1).unwrap();
    generate_dataset(&cfg, 7, c.path(), 3).unwrap();
    let ta = read_tree(a.path());
    assert_eq!(ta.len(), 231);
    assert_eq!(ta, read_tree(b.path()));
    assert_eq!(ta, read_tree(c.path()));

    let d = tempfile::tempdir().unwrap();
    generate_dataset(&cfg, 8, d.path(), 1).unwrap();
    assert_ne!(ta, read_tree(d.path()));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = [
        SynthConfig {
            size: 0,
            ..Default::default()
        },
        SynthConfig {
            method_mix: [0.5, 0.5, 0.5, -0.5],
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(generate_dataset(&cfg, 1, dir.path(), 1).is_err());
    }
}
