//! Offline (persisted) and online (per-sample stochastic) augmentation.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::manifest::{DatasetManifest, Record, Source, Split, REAL};
use crate::rng::{derive_seed, rng_for, seeded};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Brightness,
    Hue,
    Saturation,
    Rotation,
    Hflip,
    Vflip,
}

impl TransformKind {
    /// The six single-transform online pipelines, in a fixed order.
    pub const PIPELINES: [TransformKind; 6] = [
        TransformKind::Brightness,
        TransformKind::Hue,
        TransformKind::Saturation,
        TransformKind::Rotation,
        TransformKind::Hflip,
        TransformKind::Vflip,
    ];

    /// Transforms eligible for offline augmentation.
    pub const OFFLINE: [TransformKind; 4] = [
        TransformKind::Rotation,
        TransformKind::Brightness,
        TransformKind::Hue,
        TransformKind::Saturation,
    ];

    /// Admissible parameter range: brightness factor, hue shift in degrees,
    /// saturation factor, rotation in degrees. Flips take no parameter.
    pub fn range(self) -> (f32, f32) {
        match self {
            TransformKind::Brightness => (0.8, 1.2),
            TransformKind::Hue => (-18.0, 18.0),
            TransformKind::Saturation => (0.7, 1.3),
            TransformKind::Rotation => (-15.0, 15.0),
            TransformKind::Hflip | TransformKind::Vflip => (0.0, 0.0),
        }
    }

    pub fn is_flip(self) -> bool {
        matches!(self, TransformKind::Hflip | TransformKind::Vflip)
    }

    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> f32 {
        let (lo, hi) = self.range();
        if self.is_flip() {
            0.0
        } else {
            rng.random_range(lo..=hi)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorDirection {
    RgbToHsv,
    HsvToRgb,
}

/// Hexcone RGB to HSV: `h` in degrees `[0, 360)`, `s`, `v` in `[0, 1]`.
pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    [h.rem_euclid(360.0), s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Pixel-wise colour-space conversion. In HSV form the first channel holds
/// degrees, so the result is not a unit-range image.
pub fn color_convert(img: &ImageTensor, direction: ColorDirection) -> ImageTensor {
    let f = match direction {
        ColorDirection::RgbToHsv => rgb_to_hsv,
        ColorDirection::HsvToRgb => hsv_to_rgb,
    };
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| f([p[0], p[1], p[2]]))
        .collect();
    ImageTensor::from_data(img.height(), img.width(), data).expect("same dimensions")
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

fn rotate(img: &ImageTensor, degrees: f32) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let theta = (degrees as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = ImageTensor::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate the output coordinate back by -theta
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = (sx - x0) as f32;
            let fy = (sy - y0) as f32;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let p00 = img.pixel(reflect(y0, h), reflect(x0, w));
            let p01 = img.pixel(reflect(y0, h), reflect(x0 + 1, w));
            let p10 = img.pixel(reflect(y0 + 1, h), reflect(x0, w));
            let p11 = img.pixel(reflect(y0 + 1, h), reflect(x0 + 1, w));
            let px = std::array::from_fn(|c| {
                let top = p00[c] + fx * (p01[c] - p00[c]);
                let bottom = p10[c] + fx * (p11[c] - p10[c]);
                top + fy * (bottom - top)
            });
            out.set_pixel(y, x, px);
        }
    }
    out.clamp();
    out
}

fn map_hsv(img: &ImageTensor, f: impl Fn([f32; 3]) -> [f32; 3]) -> ImageTensor {
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| {
            let rgb = [p[0], p[1], p[2]];
            let hsv = rgb_to_hsv(rgb);
            let hsv2 = f(hsv);
            if hsv2 == hsv {
                rgb
            } else {
                hsv_to_rgb(hsv2).map(|v| v.clamp(0.0, 1.0))
            }
        })
        .collect();
    ImageTensor::from_data(img.height(), img.width(), data).expect("same dimensions")
}

/// Apply a single transform with an explicit parameter.
pub fn apply_transform(img: &ImageTensor, kind: TransformKind, param: f32) -> Result<ImageTensor> {
    let (lo, hi) = kind.range();
    if !kind.is_flip() && !(lo..=hi).contains(&param) {
        return Err(Error::InvalidInput(format!(
            "{kind:?} parameter {param} outside [{lo}, {hi}]"
        )));
    }
    let (h, w) = (img.height(), img.width());
    let out = match kind {
        TransformKind::Brightness => {
            let data = img.data().iter().map(|v| (v * param).clamp(0.0, 1.0)).collect();
            ImageTensor::from_data(h, w, data)?
        }
        TransformKind::Hue => {
            if param == 0.0 {
                img.clone()
            } else {
                map_hsv(img, |[hh, s, v]| {
                    if s == 0.0 {
                        [hh, s, v]
                    } else {
                        [(hh + param).rem_euclid(360.0), s, v]
                    }
                })
            }
        }
        TransformKind::Saturation => {
            if param == 1.0 {
                img.clone()
            } else {
                map_hsv(img, |[hh, s, v]| [hh, (s * param).clamp(0.0, 1.0), v])
            }
        }
        TransformKind::Rotation => rotate(img, param),
        TransformKind::Hflip => {
            let mut out = img.clone();
            for y in 0..h {
                for x in 0..w {
                    out.set_pixel(y, x, img.pixel(y, w - 1 - x));
                }
            }
            out
        }
        TransformKind::Vflip => {
            let mut out = img.clone();
            for y in 0..h {
                for x in 0..w {
                    out.set_pixel(y, x, img.pixel(h - 1 - y, x));
                }
            }
            out
        }
    };
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineAugConfig {
    pub p_aug: f64,
}

impl Default for OnlineAugConfig {
    fn default() -> Self {
        Self { p_aug: 0.5 }
    }
}

impl OnlineAugConfig {
    pub fn disabled() -> Self {
        Self { p_aug: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_aug) {
            return Err(Error::config("p_aug", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A training sample as seen by the augmentation and training loops.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: u8,
    pub image: ImageTensor,
}

/// With probability `p_aug`, apply one uniformly chosen pipeline with a
/// freshly drawn parameter. Returns the pipeline that fired, if any.
pub fn online_augment<R: Rng + ?Sized>(
    sample: &Sample,
    cfg: &OnlineAugConfig,
    rng: &mut R,
) -> Result<(Sample, Option<TransformKind>)> {
    if !(rng.random::<f64>() < cfg.p_aug) {
        return Ok((sample.clone(), None));
    }
    let kind = TransformKind::PIPELINES[rng.random_range(0..TransformKind::PIPELINES.len())];
    let param = kind.draw(rng);
    let image = apply_transform(&sample.image, kind, param)?;
    Ok((
        Sample {
            id: sample.id.clone(),
            label: sample.label,
            image,
        },
        Some(kind),
    ))
}

/// RNG for one sample in one epoch: independent of batch order and workers.
pub fn online_rng(seed: u64, sample_id: &str, epoch: usize) -> crate::rng::Rng {
    rng_for(seed, &["online-aug", sample_id, &epoch.to_string()])
}

/// Number of offline-augmented copies for `n_real` originals.
pub fn offline_count(n_real: usize, fraction: f64) -> usize {
    (fraction * n_real as f64).floor() as usize
}

/// Augment a seeded random `fraction` of the original real training images
/// with one uniformly chosen offline transform each, write them as PNG into
/// `out_dir`, and return the manifest with the new records appended.
///
/// Record paths stay relative to the manifest root when `out_dir` lies
/// inside it.
pub fn offline_augment(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config("augment.fraction", "must lie in [0, 1]"));
    }
    let originals: Vec<&Record> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Train && r.source == Source::RealOrig)
        .collect();
    let n = offline_count(originals.len(), fraction);
    let mut out = manifest.clone();
    if n == 0 {
        return Ok(out);
    }
    let mut rng = seeded(derive_seed(seed, &["offline-select"]));
    let mut chosen = sample(&mut rng, originals.len(), n).into_vec();
    chosen.sort_unstable();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for idx in chosen {
        let rec = originals[idx];
        let img = ImageTensor::load_png(&manifest.resolve(rec))?;
        let mut rng = rng_for(seed, &["offline-aug", &rec.id]);
        let kind = TransformKind::OFFLINE[rng.random_range(0..TransformKind::OFFLINE.len())];
        let param = kind.draw(&mut rng);
        let aug = apply_transform(&img, kind, param)?;
        let id = format!("{}-aug", rec.id);
        let file = out_dir.join(format!("{id}.png"));
        aug.save_png(&file)?;
        let path = file.strip_prefix(&manifest.root).unwrap_or(&file);
        out.records.push(Record {
            id,
            path: path.to_string_lossy().into_owned(),
            label: REAL,
            source: Source::RealOfflineAug,
            split: Split::Train,
        });
    }
    Ok(out)
}
