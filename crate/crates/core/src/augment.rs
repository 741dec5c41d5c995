//! Training-time augmentations that keep annotations consistent.
//!
//! Photometric operations never touch annotations. Geometric ones warp image
//! and masks with the same transform and recompute `bbox`/`area`.

use image::Rgb;
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::Map;

use crate::dataset::Annotation;
use crate::error::{Error, Result};
use crate::imaging::{Image, Warp};
use crate::mask::{rasterize, round_channel, BinaryMask};
use crate::rng::stream_rng;

/// Minimum fraction of the anchor bbox a crop window must keep.
pub const MIN_ANCHOR_COVERAGE: f64 = 0.5;

/// Default parameter ranges for randomly drawn augmentations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    pub max_sigma: f64,
    pub max_noise: f64,
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub rotation: (f64, f64),
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            max_sigma: 2.0,
            max_noise: 10.0,
            gain: (0.7, 1.3),
            bias: (-25.0, 25.0),
            rotation: (-45.0, 45.0),
        }
    }
}

/// Normalized 1-D Gaussian taps for `sigma`, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflect padding. `sigma == 0` is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut tmp = vec![[0f64; 3]; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (t, kv) in k.iter().enumerate() {
                let sx = reflect(x + t as i64 - r, w);
                let p = img.get_pixel(sx as u32, y as u32).0;
                for c in 0..3 {
                    acc[c] += kv * p[c] as f64;
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = Image::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0f64; 3];
            for (t, kv) in k.iter().enumerate() {
                let sy = reflect(y + t as i64 - r, h) as i64;
                let p = tmp[(sy * w + x) as usize];
                for c in 0..3 {
                    acc[c] += kv * p[c];
                }
            }
            out.put_pixel(x as u32, y as u32, Rgb(acc.map(round_channel)));
        }
    }
    Ok(out)
}

/// Additive white Gaussian noise, i.i.d. per channel, clamped to `[0, 255]`.
pub fn awgn(img: &Image, stddev: f64, seed: u64) -> Result<Image> {
    if !(stddev >= 0.0) || !stddev.is_finite() {
        return Err(Error::invalid(format!("stddev must be >= 0, got {stddev}")));
    }
    if stddev == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = stream_rng(seed, 0x4E01);
    let mut out = img.clone();
    for p in out.pixels_mut() {
        for c in 0..3 {
            let n: f64 = rng.sample(StandardNormal);
            p.0[c] = round_channel(p.0[c] as f64 + stddev * n);
        }
    }
    Ok(out)
}

/// `clamp(gain * v + bias)` per channel.
pub fn exposure_contrast(img: &Image, gain: f64, bias: f64) -> Result<Image> {
    if !(gain > 0.0) || !gain.is_finite() || !bias.is_finite() {
        return Err(Error::invalid(format!("gain must be > 0, got {gain}")));
    }
    let mut out = img.clone();
    for p in out.pixels_mut() {
        p.0 = p.0.map(|v| round_channel(gain * v as f64 + bias));
    }
    Ok(out)
}

fn annotation_from_mask(template: &Annotation, image_id: u64, m: &BinaryMask) -> Option<Annotation> {
    let bbox = m.bbox()?;
    Some(Annotation {
        id: template.id,
        image_id,
        category_id: template.category_id,
        segmentation: m.into(),
        bbox,
        area: m.count() as f64,
        extra: template.extra.clone(),
    })
}

/// Rotate about the image center onto an expanded canvas. Annotations whose
/// rotated mask is empty are dropped.
pub fn rotate_with_annotations(img: &Image, anns: &[Annotation], degrees: f64) -> Result<(Image, Vec<Annotation>)> {
    if !(-45.0..=45.0).contains(&degrees) {
        return Err(Error::invalid(format!("rotation {degrees} outside [-45, 45]")));
    }
    let warp = Warp::new(img.width(), img.height(), 1.0, degrees);
    let out = warp.apply_image(img);
    let mut kept = Vec::new();
    for a in anns {
        let m = rasterize(&a.segmentation, img.width(), img.height())?;
        let r = warp.apply_mask_nearest(&m);
        if let Some(ann) = annotation_from_mask(a, a.image_id, &r) {
            kept.push(ann);
        }
    }
    Ok((out, kept))
}

/// Number of pixels of `[a0, a1)` covered by the window `[p, p + len)`.
fn overlap(p: f64, len: f64, a0: f64, a1: f64) -> f64 {
    ((p + len).min(a1) - p.max(a0)).max(0.0)
}

/// Top-left of a `target` window drawn uniformly among integer offsets whose
/// window keeps at least half of `bbox`. Offsets range over
/// `[0, max(size - target, 0)]` per axis.
pub fn crop_window(size: (u32, u32), bbox: [f64; 4], target: (u32, u32), rng: &mut impl Rng) -> (u32, u32) {
    let (w, h) = size;
    let (tw, th) = target;
    let [bx, by, bw, bh] = bbox;
    let need = MIN_ANCHOR_COVERAGE * bw * bh;

    let xs: Vec<u32> = (0..=w.saturating_sub(tw)).collect();
    let ys: Vec<u32> = (0..=h.saturating_sub(th)).collect();
    let ix: Vec<f64> = xs.iter().map(|&x| overlap(x as f64, tw as f64, bx, bx + bw)).collect();
    let iy: Vec<f64> = ys.iter().map(|&y| overlap(y as f64, th as f64, by, by + bh)).collect();
    let mut iy_sorted = iy.clone();
    iy_sorted.sort_by(f64::total_cmp);
    // Valid y offsets per x: those with ix * iy >= need.
    let per_x: Vec<usize> = ix
        .iter()
        .map(|&a| {
            if a <= 0.0 {
                return 0;
            }
            iy_sorted.len() - iy_sorted.partition_point(|&b| a * b < need)
        })
        .collect();
    let total: usize = per_x.iter().sum();
    if total == 0 {
        // No window keeps half the box (window much smaller than it): center on it.
        let cx = (bx + bw / 2.0 - tw as f64 / 2.0).round().clamp(0.0, w.saturating_sub(tw) as f64);
        let cy = (by + bh / 2.0 - th as f64 / 2.0).round().clamp(0.0, h.saturating_sub(th) as f64);
        return (cx as u32, cy as u32);
    }
    let mut k = rng.random_range(0..total);
    let xi = per_x
        .iter()
        .position(|&n| {
            if k < n {
                true
            } else {
                k -= n;
                false
            }
        })
        .expect("k < total");
    let a = ix[xi];
    let yi = iy
        .iter()
        .enumerate()
        .filter(|(_, &b)| a * b >= need)
        .nth(k)
        .map(|(i, _)| i)
        .expect("k counts valid y offsets");
    (xs[xi], ys[yi])
}

/// Crop a `target_size` window that keeps at least half of a randomly chosen
/// anchor annotation's bbox, uniformly over all such integer windows.
///
/// When the target is larger than the image along an axis, the image is kept
/// whole along it and padded with black at the far edge.
pub fn crop_around_bbox(
    img: &Image,
    anns: &[Annotation],
    target_size: (u32, u32),
    seed: u64,
) -> Result<(Image, Vec<Annotation>)> {
    if anns.is_empty() {
        return Err(Error::invalid("crop needs at least one annotation"));
    }
    let (tw, th) = target_size;
    if target_size.0 == 0 || target_size.1 == 0 {
        return Err(Error::invalid("crop size must be positive"));
    }
    let (w, h) = (img.width(), img.height());
    let mut rng = stream_rng(seed, 0xC209);
    let anchor = &anns[rng.random_range(0..anns.len())];
    let (x0, y0) = crop_window((w, h), anchor.bbox, target_size, &mut rng);

    let mut out = Image::new(tw, th);
    for y in 0..th.min(h - y0) {
        for x in 0..tw.min(w - x0) {
            out.put_pixel(x, y, *img.get_pixel(x0 + x, y0 + y));
        }
    }
    let mut kept = Vec::new();
    for a in anns {
        let m = rasterize(&a.segmentation, w, h)?;
        let c = m.crop(x0 as i64, y0 as i64, tw, th);
        if let Some(ann) = annotation_from_mask(a, a.image_id, &c) {
            kept.push(ann);
        }
    }
    Ok((out, kept))
}

/// The operations the `augment` command can chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    Blur,
    Noise,
    Exposure,
    Rotate,
    Crop,
}

impl std::str::FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "blur" => Ok(AugmentOp::Blur),
            "noise" => Ok(AugmentOp::Noise),
            "exposure" | "contrast" => Ok(AugmentOp::Exposure),
            "rotate" => Ok(AugmentOp::Rotate),
            "crop" => Ok(AugmentOp::Crop),
            other => Err(Error::invalid(format!("unknown augmentation {other:?}"))),
        }
    }
}

/// Apply `ops` in order with parameters drawn from `ranges`, seeded per image.
pub fn apply_chain(
    img: &Image,
    anns: &[Annotation],
    ops: &[AugmentOp],
    ranges: &AugmentRanges,
    crop_size: (u32, u32),
    seed: u64,
    stream: u64,
) -> Result<(Image, Vec<Annotation>)> {
    let mut rng = stream_rng(seed, stream);
    let mut img = img.clone();
    let mut anns = anns.to_vec();
    for op in ops {
        match op {
            AugmentOp::Blur => img = gaussian_blur(&img, rng.random_range(0.0..=ranges.max_sigma))?,
            AugmentOp::Noise => {
                let sd = rng.random_range(0.0..=ranges.max_noise);
                img = awgn(&img, sd, rng.random())?;
            }
            AugmentOp::Exposure => {
                let g = rng.random_range(ranges.gain.0..=ranges.gain.1);
                let b = rng.random_range(ranges.bias.0..=ranges.bias.1);
                img = exposure_contrast(&img, g, b)?;
            }
            AugmentOp::Rotate => {
                let deg = rng.random_range(ranges.rotation.0..=ranges.rotation.1);
                (img, anns) = rotate_with_annotations(&img, &anns, deg)?;
            }
            AugmentOp::Crop => {
                if !anns.is_empty() {
                    (img, anns) = crop_around_bbox(&img, &anns, crop_size, rng.random())?;
                }
            }
        }
    }
    Ok((img, anns))
}

/// Record for an augmented image.
pub fn augmented_record(id: u64, file_name: String, img: &Image) -> crate::dataset::ImageRecord {
    crate::dataset::ImageRecord {
        id,
        file_name,
        width: img.width(),
        height: img.height(),
        extra: Map::new(),
    }
}
