//! Synthetic corpus: smooth "real" patterns and four artifact injectors that
//! turn a real pattern into a fake from a distinct sub-population.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::manifest::{DatasetManifest, Record, Source, Split, FAKE, REAL};
use crate::rng::{derive_seed, rng_for, seeded};

pub const DEFAULT_SIZE: usize = 32;

/// Smooth pattern: base colour, a radial gradient around a point near the
/// centre and two low-frequency plane waves, all drawn from `seed`.
pub fn generate_real_image(seed: u64, size: usize) -> ImageTensor {
    let mut rng = seeded(seed);
    let s = size as f32;
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let cx = s * rng.random_range(0.4..0.6);
    let cy = s * rng.random_range(0.4..0.6);
    let radial: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.25..0.25));
    let waves: Vec<(f32, f32, f32, [f32; 3])> = (0..2)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let cycles = rng.random_range(0.5..2.0);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let amp: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.03..0.12));
            let k = std::f32::consts::TAU * cycles / s;
            (k * angle.cos(), k * angle.sin(), phase, amp)
        })
        .collect();
    let rmax = (2.0f32).sqrt() * s / 2.0;

    let mut img = ImageTensor::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let r = ((fx - cx).powi(2) + (fy - cy).powi(2)).sqrt() / rmax;
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let mut v = base[c] + radial[c] * (1.0 - 2.0 * r);
                for (kx, ky, phase, amp) in &waves {
                    v += amp[c] * (kx * fx + ky * fy + phase).sin();
                }
                px[c] = v;
            }
            img.set_pixel(y, x, px);
        }
    }
    img.clamp();
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FakeKind {
    BlendSeam,
    CheckerArtifact,
    PatchSwap,
    ColorShift,
}

impl FakeKind {
    pub const ALL: [FakeKind; 4] = [
        FakeKind::BlendSeam,
        FakeKind::CheckerArtifact,
        FakeKind::PatchSwap,
        FakeKind::ColorShift,
    ];

    /// 1-based method id used in manifest sources.
    pub fn method_id(self) -> u8 {
        match self {
            FakeKind::BlendSeam => 1,
            FakeKind::CheckerArtifact => 2,
            FakeKind::PatchSwap => 3,
            FakeKind::ColorShift => 4,
        }
    }

    /// Default strength and the documented admissible range.
    ///
    /// * blend-seam: blend alpha of the foreign band.
    /// * checker-artifact: amplitude of the +-2x2 checkerboard.
    /// * patch-swap: patch side as a fraction of the image side.
    /// * color-shift: relative shift/scale of one channel in the region.
    pub fn strength_range(self) -> (f32, f32, f32) {
        match self {
            FakeKind::BlendSeam => (0.6, 0.0, 1.0),
            FakeKind::CheckerArtifact => (0.08, 0.0, 0.3),
            FakeKind::PatchSwap => (0.3, 0.0, 0.5),
            FakeKind::ColorShift => (0.35, 0.0, 1.0),
        }
    }
}

/// Rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Region {
    fn check(&self, img: &ImageTensor) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.x + self.w > img.width() || self.y + self.h > img.height() {
            return Err(Error::InvalidInput(format!(
                "region {self:?} outside {}x{} image",
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FakeMethodSpec {
    pub kind: FakeKind,
    pub strength: f32,
    /// Explicit region; drawn from the injection seed when absent. For
    /// patch-swap this is the first patch and `second` the other one.
    #[serde(default)]
    pub region: Option<Region>,
    #[serde(default)]
    pub second: Option<Region>,
}

impl FakeMethodSpec {
    pub fn default_for(kind: FakeKind) -> Self {
        Self {
            kind,
            strength: kind.strength_range().0,
            region: None,
            second: None,
        }
    }

    pub fn method_id(&self) -> u8 {
        self.kind.method_id()
    }

    pub fn validate(&self) -> Result<()> {
        let (_, lo, hi) = self.kind.strength_range();
        if !(lo..=hi).contains(&self.strength) {
            return Err(Error::InvalidInput(format!(
                "{:?} strength {} outside [{lo}, {hi}]",
                self.kind, self.strength
            )));
        }
        Ok(())
    }
}

fn random_region<R: Rng>(rng: &mut R, img: &ImageTensor, w: usize, h: usize) -> Region {
    Region {
        x: rng.random_range(0..=img.width() - w),
        y: rng.random_range(0..=img.height() - h),
        w,
        h,
    }
}

/// Apply one artifact injector. Zero strength is the identity.
pub fn inject_fake_artifact(img: &ImageTensor, spec: &FakeMethodSpec, seed: u64) -> Result<ImageTensor> {
    spec.validate()?;
    for r in spec.region.iter().chain(spec.second.iter()) {
        r.check(img)?;
    }
    let mut rng = seeded(seed);
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    let s = spec.strength;
    match spec.kind {
        FakeKind::BlendSeam => {
            let band = spec.region.unwrap_or_else(|| {
                let bw = (w / 4).max(1);
                Region {
                    x: rng.random_range(0..=w - bw),
                    y: 0,
                    w: bw,
                    h,
                }
            });
            let donor = generate_real_image(rng.random(), h.max(w));
            for y in band.y..band.y + band.h {
                for x in band.x..band.x + band.w {
                    let a = img.pixel(y, x);
                    let b = donor.pixel(y, x);
                    out.set_pixel(y, x, std::array::from_fn(|c| (1.0 - s) * a[c] + s * b[c]));
                }
            }
        }
        FakeKind::CheckerArtifact => {
            let region = spec
                .region
                .unwrap_or_else(|| random_region(&mut rng, img, (w / 2).max(1), (h / 2).max(1)));
            for y in region.y..region.y + region.h {
                for x in region.x..region.x + region.w {
                    let sign = if ((y / 2) + (x / 2)) % 2 == 0 { s } else { -s };
                    let p = img.pixel(y, x);
                    out.set_pixel(y, x, p.map(|v| v + sign));
                }
            }
        }
        FakeKind::PatchSwap => {
            let side = ((s * w.min(h) as f32).round() as usize).min(w.min(h) / 2);
            if side == 0 {
                return Ok(out);
            }
            let (a, b) = match (spec.region, spec.second) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    // patches in opposite halves never overlap
                    let a = Region {
                        x: rng.random_range(0..=w / 2 - side),
                        y: rng.random_range(0..=h - side),
                        w: side,
                        h: side,
                    };
                    let b = Region {
                        x: w / 2 + rng.random_range(0..=w - w / 2 - side),
                        y: rng.random_range(0..=h - side),
                        w: side,
                        h: side,
                    };
                    (a, b)
                }
            };
            if a.w != b.w || a.h != b.h {
                return Err(Error::InvalidInput("patch-swap patches differ in size".into()));
            }
            for dy in 0..a.h {
                for dx in 0..a.w {
                    let pa = img.pixel(a.y + dy, a.x + dx);
                    let pb = img.pixel(b.y + dy, b.x + dx);
                    out.set_pixel(a.y + dy, a.x + dx, pb);
                    out.set_pixel(b.y + dy, b.x + dx, pa);
                }
            }
        }
        FakeKind::ColorShift => {
            // mean + (p - mean) is not exactly p in f32
            if s == 0.0 {
                return Ok(out);
            }
            let region = spec
                .region
                .unwrap_or_else(|| random_region(&mut rng, img, (w / 2).max(1), (h / 2).max(1)));
            let channel = rng.random_range(0..3usize);
            let direction = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let n = (region.w * region.h) as f32;
            let mut mean = 0.0f32;
            for y in region.y..region.y + region.h {
                for x in region.x..region.x + region.w {
                    mean += img.pixel(y, x)[channel];
                }
            }
            mean /= n;
            let new_mean = mean + direction * 0.6 * s;
            let scale = 1.0 + s;
            for y in region.y..region.y + region.h {
                for x in region.x..region.x + region.w {
                    let mut p = img.pixel(y, x);
                    p[channel] = new_mean + (p[channel] - mean) * scale;
                    out.set_pixel(y, x, p);
                }
            }
        }
    }
    out.clamp();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub size: usize,
    pub train_real: usize,
    pub train_fake: usize,
    pub val_real: usize,
    pub val_fake: usize,
    /// Extra fakes shared by every model's training set, each from a
    /// randomly chosen injector at a random strength.
    pub train_generated: usize,
    /// Share of fakes per injector, in method-id order.
    pub method_mix: [f64; 4],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: DEFAULT_SIZE,
            train_real: 2000,
            train_fake: 6000,
            val_real: 400,
            val_fake: 400,
            train_generated: 0,
            method_mix: [0.25; 4],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || !self.size.is_multiple_of(8) {
            return Err(Error::config("data.size", "must be a positive multiple of 8"));
        }
        if self.method_mix.iter().any(|&m| !(m >= 0.0)) || self.method_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::config("data.method_mix", "weights must be non-negative with a positive sum"));
        }
        Ok(())
    }
}

/// Split `total` across `weights` by largest remainder.
pub fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

struct Planned {
    record: Record,
    kind: Option<FakeMethodSpec>,
}

fn plan(cfg: &SynthConfig, seed: u64) -> Vec<Planned> {
    let mut out = Vec::new();
    for (split, n_real, n_fake, tag) in [
        (Split::Train, cfg.train_real, cfg.train_fake, "train"),
        (Split::Val, cfg.val_real, cfg.val_fake, "val"),
    ] {
        for i in 0..n_real {
            let id = format!("{tag}-real-{i:05}");
            out.push(Planned {
                record: Record {
                    path: format!("images/{id}.png"),
                    id,
                    label: REAL,
                    source: Source::RealOrig,
                    split,
                },
                kind: None,
            });
        }
        let counts = apportion(n_fake, &cfg.method_mix);
        let mut i = 0;
        for (kind, &count) in FakeKind::ALL.iter().zip(&counts) {
            for _ in 0..count {
                let id = format!("{tag}-fake-m{}-{i:05}", kind.method_id());
                out.push(Planned {
                    record: Record {
                        path: format!("images/{id}.png"),
                        id,
                        label: FAKE,
                        source: Source::FakeMethod(kind.method_id()),
                        split,
                    },
                    kind: Some(FakeMethodSpec::default_for(*kind)),
                });
                i += 1;
            }
        }
    }
    for i in 0..cfg.train_generated {
        let id = format!("train-gen-{i:05}");
        let mut rng = rng_for(seed, &["generated-kind", &id]);
        let kind = FakeKind::ALL[rng.random_range(0..4)];
        let (default, lo, hi) = kind.strength_range();
        let strength = rng.random_range(((lo + default) / 2.0)..=((hi + default) / 2.0));
        out.push(Planned {
            record: Record {
                path: format!("images/{id}.png"),
                id,
                label: FAKE,
                source: Source::FakeGenerated,
                split: Split::Train,
            },
            kind: Some(FakeMethodSpec {
                strength,
                ..FakeMethodSpec::default_for(kind)
            }),
        });
    }
    out
}

/// Image for one planned sample; fakes are injected into their own freshly
/// generated source pattern.
pub fn render_sample(id: &str, spec: Option<&FakeMethodSpec>, size: usize, seed: u64) -> Result<ImageTensor> {
    let base = generate_real_image(derive_seed(seed, &["pattern", id]), size);
    match spec {
        None => Ok(base),
        Some(spec) => inject_fake_artifact(&base, spec, derive_seed(seed, &["inject", id])),
    }
}

/// Render and persist the corpus under `out_dir` (images in `images/`,
/// catalog in `manifest.jsonl`). Output is independent of `threads`.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64, out_dir: &Path, threads: usize) -> Result<DatasetManifest> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let planned = plan(cfg, seed);

    let write_one = |p: &Planned| -> Result<()> {
        let img = render_sample(&p.record.id, p.kind.as_ref(), cfg.size, seed)?;
        img.save_png(&out_dir.join(&p.record.path))
    };
    let threads = threads.max(1);
    if threads == 1 {
        planned.iter().try_for_each(write_one)?;
    } else {
        let chunk = planned.len().div_ceil(threads).max(1);
        std::thread::scope(|scope| {
            let handles: Vec<_> = planned
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().try_for_each(write_one)))
                .collect();
            handles
                .into_iter()
                .try_for_each(|h| h.join().expect("generator thread panicked"))
        })?;
    }

    let manifest = DatasetManifest::new(out_dir, planned.into_iter().map(|p| p.record).collect());
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}
