//! Segmentation geometry kernels.
//!
//! Masks are stored row-major. RLE follows the COCO convention: runs are
//! column-major and alternate background/foreground, starting with background.

use image::Rgb;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Default truncation radius for soft masks, in pixels.
pub const DEFAULT_SOFT_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "{} mask bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    /// Mask with the half-open rectangle `[x0, x1) x [y0, y1)` set, clipped to bounds.
    pub fn from_rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        let mut m = Self::new(width, height);
        for y in y0.min(height)..y1.min(height) {
            for x in x0.min(width)..x1.min(width) {
                m.set(x, y, true);
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let w = self.width as usize;
        self.bits[y as usize * w + x as usize] = v;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Tight bounds of the foreground as half-open `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> Option<(u32, u32, u32, u32)> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != u32::MAX).then_some((x0, y0, x1, y1))
    }

    /// Tight bounding box as COCO `[x, y, w, h]`, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<[f64; 4]> {
        self.bounds()
            .map(|(x0, y0, x1, y1)| [x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64])
    }

    /// Copy of the sub-rectangle `[x0, x0+w) x [y0, y0+h)`; pixels outside stay background.
    pub fn crop(&self, x0: i64, y0: i64, w: u32, h: u32) -> BinaryMask {
        let mut out = BinaryMask::new(w, h);
        for y in 0..h {
            let sy = y0 + y as i64;
            if sy < 0 || sy >= self.height as i64 {
                continue;
            }
            for x in 0..w {
                let sx = x0 + x as i64;
                if sx >= 0 && sx < self.width as i64 && self.get(sx as u32, sy as u32) {
                    out.set(x, y, true);
                }
            }
        }
        out
    }

    /// Place `self` at `offset` on a `width x height` canvas, dropping what falls outside.
    pub fn paste_onto(&self, width: u32, height: u32, offset: (i64, i64)) -> BinaryMask {
        let mut out = BinaryMask::new(width, height);
        for y in 0..self.height {
            let ty = offset.1 + y as i64;
            if ty < 0 || ty >= height as i64 {
                continue;
            }
            for x in 0..self.width {
                let tx = offset.0 + x as i64;
                if tx >= 0 && tx < width as i64 && self.get(x, y) {
                    out.set(tx as u32, ty as u32, true);
                }
            }
        }
        out
    }
}

/// Uncompressed COCO RLE. `size` is `[height, width]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

/// A segmentation as stored in annotation and detection files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    /// Flat `[x1, y1, x2, y2, ...]` rings, unioned.
    Polygons(Vec<Vec<f64>>),
    Rle(Rle),
}

impl From<&BinaryMask> for Segmentation {
    fn from(m: &BinaryMask) -> Self {
        Segmentation::Rle(encode_rle(m))
    }
}

pub fn encode_rle(m: &BinaryMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..m.width {
        for y in 0..m.height {
            let b = m.get(x, y);
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        size: [m.height, m.width],
        counts,
    }
}

pub fn decode_rle(rle: &Rle) -> Result<BinaryMask> {
    let [h, w] = rle.size;
    let expected = h as u64 * w as u64;
    let sum: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if sum != expected {
        return Err(Error::RleLength { sum, expected });
    }
    let mut m = BinaryMask::new(w, h);
    let mut k = 0u64;
    for (i, &run) in rle.counts.iter().enumerate() {
        if i % 2 == 1 {
            for idx in k..k + run as u64 {
                let x = (idx / h as u64) as u32;
                let y = (idx % h as u64) as u32;
                m.set(x, y, true);
            }
        }
        k += run as u64;
    }
    Ok(m)
}

/// Fill polygons with the even-odd rule, testing pixel centers. Rings are unioned.
pub fn rasterize_polygons(polygons: &[Vec<f64>], width: u32, height: u32) -> Result<BinaryMask> {
    let mut m = BinaryMask::new(width, height);
    let mut crossings = Vec::new();
    for ring in polygons {
        if ring.len() % 2 != 0 {
            return Err(Error::Polygon(format!(
                "odd coordinate count {}",
                ring.len()
            )));
        }
        if ring.iter().any(|v| !v.is_finite()) {
            return Err(Error::Polygon("non-finite vertex".into()));
        }
        let pts: Vec<(f64, f64)> = ring.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        if pts.len() < 3 {
            continue;
        }
        for y in 0..height {
            let py = y as f64 + 0.5;
            crossings.clear();
            let mut j = pts.len() - 1;
            for i in 0..pts.len() {
                let (xi, yi) = pts[i];
                let (xj, yj) = pts[j];
                if (yi > py) != (yj > py) {
                    crossings.push(xi + (py - yi) * (xj - xi) / (yj - yi));
                }
                j = i;
            }
            if crossings.is_empty() {
                continue;
            }
            crossings.sort_by(f64::total_cmp);
            // A center is inside iff an odd number of crossings lie strictly to its right.
            let n = crossings.len();
            let mut right = 0usize; // crossings[..right] are <= px
            for x in 0..width {
                let px = x as f64 + 0.5;
                while right < n && crossings[right] <= px {
                    right += 1;
                }
                if (n - right) % 2 == 1 {
                    m.set(x, y, true);
                }
            }
        }
    }
    Ok(m)
}

pub fn rasterize(seg: &Segmentation, width: u32, height: u32) -> Result<BinaryMask> {
    match seg {
        Segmentation::Polygons(p) => rasterize_polygons(p, width, height),
        Segmentation::Rle(rle) => {
            if rle.size != [height, width] {
                return Err(Error::RleSize {
                    rle_h: rle.size[0],
                    rle_w: rle.size[1],
                    height,
                    width,
                });
            }
            decode_rle(rle)
        }
    }
}

pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

/// Euclidean distance from each pixel to the nearest background pixel center.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl DistanceField {
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }
}

/// 1-D lower envelope of parabolas (Felzenszwalb & Huttenlocher). `f` holds
/// squared distances, `INF` for "no site"; results are written back into `f`.
fn edt_1d(f: &mut [f64], v: &mut [usize], z: &mut [f64], out: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    let first = match f.iter().position(|&x| x < INF) {
        Some(i) => i,
        None => return,
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= INF {
            continue;
        }
        let intersect = |p: usize| {
            ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
        };
        let mut s = intersect(v[k]);
        // z[0] is -inf, so this never underflows.
        while s <= z[k] {
            k -= 1;
            s = intersect(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
    f.copy_from_slice(&out[..n]);
}

const INF: f64 = 1e30;

/// Exact Euclidean distance transform by the separable squared-distance method.
///
/// A mask without any background is capped at `width + height`.
pub fn distance_transform(m: &BinaryMask) -> DistanceField {
    let (w, h) = (m.width as usize, m.height as usize);
    let mut sq: Vec<f64> = m.bits.iter().map(|&b| if b { INF } else { 0.0 }).collect();
    let n = w.max(h);
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut out = vec![0f64; n];
    let mut col = vec![0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = sq[y * w + x];
        }
        edt_1d(&mut col, &mut v, &mut z, &mut out);
        for y in 0..h {
            sq[y * w + x] = col[y];
        }
    }
    for row in sq.chunks_mut(w.max(1)) {
        edt_1d(row, &mut v, &mut z, &mut out);
    }
    let cap = (m.width + m.height) as f64;
    let values = sq
        .into_iter()
        .map(|d| if d >= INF { cap } else { d.sqrt().min(cap) })
        .collect();
    DistanceField {
        width: m.width,
        height: m.height,
        values,
    }
}

/// Per-pixel opacity in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub width: u32,
    pub height: u32,
    pub alpha: Vec<f64>,
}

impl SoftMask {
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.alpha[y as usize * self.width as usize + x as usize]
    }

    /// Alpha of exactly 0 or 1 from a binary mask.
    pub fn hard(m: &BinaryMask) -> Self {
        SoftMask {
            width: m.width,
            height: m.height,
            alpha: m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Distance transform truncated at `radius` and normalized to `[0, 1]`.
pub fn soft_mask(m: &BinaryMask, radius: f64) -> Result<SoftMask> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::invalid(format!("soft-mask radius must be > 0, got {radius}")));
    }
    let dt = distance_transform(m);
    Ok(SoftMask {
        width: m.width,
        height: m.height,
        alpha: dt.values.iter().map(|&d| (d / radius).min(1.0)).collect(),
    })
}

#[inline]
pub(crate) fn round_channel(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Composite `src` over `dst` at `offset` with per-pixel opacity.
///
/// Channels are mixed in raw 8-bit space and rounded half-up. Source pixels that
/// land outside `dst` are dropped.
pub fn blend(src: &Image, alpha: &SoftMask, dst: &Image, offset: (i64, i64)) -> Result<Image> {
    if src.width() != alpha.width || src.height() != alpha.height {
        return Err(Error::DimensionMismatch(
            src.width(),
            src.height(),
            alpha.width,
            alpha.height,
        ));
    }
    let mut out = dst.clone();
    for y in 0..src.height() {
        let ty = offset.1 + y as i64;
        if ty < 0 || ty >= dst.height() as i64 {
            continue;
        }
        for x in 0..src.width() {
            let tx = offset.0 + x as i64;
            if tx < 0 || tx >= dst.width() as i64 {
                continue;
            }
            let a = alpha.get(x, y);
            if a <= 0.0 {
                continue;
            }
            let s = src.get_pixel(x, y).0;
            let d = dst.get_pixel(tx as u32, ty as u32).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = round_channel(a * s[c] as f64 + (1.0 - a) * d[c] as f64);
            }
            out.put_pixel(tx as u32, ty as u32, Rgb(px));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_dt(m: &BinaryMask) -> Vec<f64> {
        let mut out = Vec::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                let mut best = f64::INFINITY;
                for by in 0..m.height() {
                    for bx in 0..m.width() {
                        if !m.get(bx, by) {
                            let dx = bx as f64 - x as f64;
                            let dy = by as f64 - y as f64;
                            best = best.min((dx * dx + dy * dy).sqrt());
                        }
                    }
                }
                out.push(best);
            }
        }
        out
    }

    #[test]
    fn square_polygon_fills_100_pixels() {
        let sq = vec![vec![10.0, 10.0, 20.0, 10.0, 20.0, 20.0, 10.0, 20.0]];
        let m = rasterize_polygons(&sq, 32, 32).unwrap();
        assert_eq!(m.count(), 100);
        assert_eq!(m.bounds(), Some((10, 10, 20, 20)));
    }

    #[test]
    fn rle_runs_are_column_major() {
        let rle = Rle {
            size: [3, 3],
            counts: vec![4, 2, 3],
        };
        let m = decode_rle(&rle).unwrap();
        let on: Vec<bool> = (0..9).map(|k| m.get(k / 3, k % 3)).collect();
        assert_eq!(on, vec![false, false, false, false, true, true, false, false, false]);
        assert_eq!(encode_rle(&m), rle);
    }

    #[test]
    fn rle_bad_length() {
        let rle = Rle {
            size: [3, 3],
            counts: vec![4, 2],
        };
        assert!(matches!(decode_rle(&rle), Err(Error::RleLength { sum: 6, expected: 9 })));
    }

    #[test]
    fn empty_polygon_list() {
        let m = rasterize(&Segmentation::Polygons(vec![]), 8, 4).unwrap();
        assert!(m.is_empty());
        assert_eq!((m.width(), m.height()), (8, 4));
    }

    #[test]
    fn rle_size_must_match_image() {
        let seg = Segmentation::Rle(Rle {
            size: [2, 2],
            counts: vec![4],
        });
        assert!(matches!(rasterize(&seg, 3, 2), Err(Error::RleSize { .. })));
    }

    #[test]
    fn iou_examples() {
        let a = BinaryMask::from_rect(10, 10, 0, 0, 4, 2);
        let b = BinaryMask::from_rect(10, 10, 2, 0, 6, 2);
        assert_eq!(mask_iou(&a, &b).unwrap(), 4.0 / 12.0);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = BinaryMask::from_rect(10, 10, 6, 6, 8, 8);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        let e = BinaryMask::new(10, 10);
        assert_eq!(mask_iou(&e, &e).unwrap(), 0.0);
        assert!(mask_iou(&a, &BinaryMask::new(9, 10)).is_err());
    }

    #[test]
    fn dt_single_pixel_and_block() {
        let one = BinaryMask::from_rect(5, 5, 2, 2, 3, 3);
        assert_eq!(distance_transform(&one).get(2, 2), 1.0);

        let block = BinaryMask::from_rect(9, 9, 3, 3, 6, 6);
        let dt = distance_transform(&block);
        assert_eq!(dt.values, brute_dt(&block));
        assert_eq!(dt.get(4, 4), 2.0);
        assert_eq!(dt.get(3, 4), 1.0);
        assert_eq!(dt.get(3, 3), 1.0);

        let bg = BinaryMask::new(6, 4);
        assert!(distance_transform(&bg).values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dt_all_foreground_is_capped() {
        let full = BinaryMask::from_rect(4, 3, 0, 0, 4, 3);
        assert!(distance_transform(&full).values.iter().all(|&v| v == 7.0));
    }

    #[test]
    fn soft_mask_examples() {
        let block = BinaryMask::from_rect(9, 9, 3, 3, 6, 6);
        let s = soft_mask(&block, 2.0).unwrap();
        assert_eq!(s.get(4, 4), 1.0);
        assert_eq!(s.get(3, 4), 0.5);
        assert_eq!(s.get(0, 0), 0.0);
        let hard = soft_mask(&block, 1.0).unwrap();
        assert_eq!(hard, SoftMask::hard(&block));
        assert!(soft_mask(&block, 0.0).is_err());
        assert!(soft_mask(&block, -1.0).is_err());
    }

    #[test]
    fn blend_examples() {
        let src = Image::from_pixel(2, 1, Rgb([200, 200, 200]));
        let dst = Image::from_pixel(4, 2, Rgb([100, 100, 100]));
        let alpha = SoftMask {
            width: 2,
            height: 1,
            alpha: vec![0.5, 1.0],
        };
        let out = blend(&src, &alpha, &dst, (1, 1)).unwrap();
        assert_eq!(out.get_pixel(1, 1).0, [150; 3]);
        assert_eq!(out.get_pixel(2, 1).0, [200; 3]);
        assert_eq!(out.get_pixel(0, 0).0, [100; 3]);
        let zero = SoftMask {
            width: 2,
            height: 1,
            alpha: vec![0.0, 0.0],
        };
        assert_eq!(blend(&src, &zero, &dst, (0, 0)).unwrap(), dst);
        // Clipped placement: only the in-bounds column changes.
        let out = blend(&src, &alpha, &dst, (3, 0)).unwrap();
        assert_eq!(out.get_pixel(3, 0).0, [150; 3]);
    }

    fn arb_mask(max: u32) -> impl Strategy<Value = BinaryMask> {
        (1..=max, 1..=max).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), (w * h) as usize)
                .prop_map(move |bits| BinaryMask::from_bits(w, h, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn rle_round_trips(m in arb_mask(24)) {
            prop_assert_eq!(decode_rle(&encode_rle(&m)).unwrap(), m);
        }

        #[test]
        fn iou_symmetric_and_bounded(a in arb_mask(8), seed in any::<u64>()) {
            let bits: Vec<bool> = (0..a.bits().len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let b = BinaryMask::from_bits(a.width(), a.height(), bits).unwrap();
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            if !a.is_empty() {
                prop_assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
            }
        }

        #[test]
        fn dt_is_lipschitz_and_zero_on_background(m in arb_mask(12)) {
            let dt = distance_transform(&m);
            for y in 0..m.height() {
                for x in 0..m.width() {
                    prop_assert_eq!(dt.get(x, y) == 0.0, !m.get(x, y));
                    if x + 1 < m.width() {
                        prop_assert!((dt.get(x, y) - dt.get(x + 1, y)).abs() <= 1.0 + 1e-12);
                    }
                    if y + 1 < m.height() {
                        prop_assert!((dt.get(x, y) - dt.get(x, y + 1)).abs() <= 1.0 + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn blend_is_convex(s in any::<[u8; 3]>(), d in any::<[u8; 3]>(), a in 0.0f64..=1.0) {
            let src = Image::from_pixel(1, 1, Rgb(s));
            let dst = Image::from_pixel(1, 1, Rgb(d));
            let alpha = SoftMask { width: 1, height: 1, alpha: vec![a] };
            let out = blend(&src, &alpha, &dst, (0, 0)).unwrap().get_pixel(0, 0).0;
            for c in 0..3 {
                prop_assert!(out[c] >= s[c].min(d[c]) && out[c] <= s[c].max(d[c]));
            }
        }
    }
}
