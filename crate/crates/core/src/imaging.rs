//! RGB image type, PNG/JPEG I/O and the rotate-and-scale warp shared by
//! transplants and geometric augmentations.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::Result;
use crate::mask::{round_channel, BinaryMask};

pub type Image = RgbImage;

/// Read a PNG or JPEG file as 8-bit RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Rotation about the center followed by uniform scaling, with the output
/// canvas grown to the bounds of the transformed source rectangle.
///
/// Positive angles rotate counter-clockwise as displayed (y axis pointing down).
#[derive(Debug, Clone, Copy)]
pub struct Warp {
    scale: f64,
    cos: f64,
    sin: f64,
    src_w: u32,
    src_h: u32,
    out_w: u32,
    out_h: u32,
}

impl Warp {
    pub fn new(src_w: u32, src_h: u32, scale: f64, degrees: f64) -> Self {
        let rad = degrees.to_radians();
        let (sin, cos) = if degrees == 0.0 { (0.0, 1.0) } else { rad.sin_cos() };
        let fw = src_w as f64 * scale;
        let fh = src_h as f64 * scale;
        // Slack absorbs cos(90deg) != 0 style rounding.
        let out_w = ((fw * cos).abs() + (fh * sin).abs() - 1e-6).ceil().max(1.0) as u32;
        let out_h = ((fw * sin).abs() + (fh * cos).abs() - 1e-6).ceil().max(1.0) as u32;
        Self {
            scale,
            cos,
            sin,
            src_w,
            src_h,
            out_w,
            out_h,
        }
    }

    pub fn out_size(&self) -> (u32, u32) {
        (self.out_w, self.out_h)
    }

    /// Continuous source coordinates seen by the center of output pixel `(u, v)`.
    pub fn source_point(&self, u: u32, v: u32) -> (f64, f64) {
        let dx = u as f64 + 0.5 - self.out_w as f64 / 2.0;
        let dy = v as f64 + 0.5 - self.out_h as f64 / 2.0;
        let x = (self.cos * dx - self.sin * dy) / self.scale;
        let y = (self.sin * dx + self.cos * dy) / self.scale;
        (x + self.src_w as f64 / 2.0, y + self.src_h as f64 / 2.0)
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.src_w as f64 && y < self.src_h as f64
    }

    /// Bilinear resampling; samples that fall outside the source are black.
    pub fn apply_image(&self, src: &Image) -> Image {
        let mut out = Image::new(self.out_w, self.out_h);
        for v in 0..self.out_h {
            for u in 0..self.out_w {
                let (x, y) = self.source_point(u, v);
                if !self.inside(x, y) {
                    continue;
                }
                let px = bilinear(self.src_w, self.src_h, x, y, |sx, sy| {
                    let p = src.get_pixel(sx, sy).0;
                    [p[0] as f64, p[1] as f64, p[2] as f64]
                });
                out.put_pixel(u, v, Rgb(px.map(round_channel)));
            }
        }
        out
    }

    /// Bilinear coverage of the mask thresholded at 0.5.
    pub fn apply_mask_bilinear(&self, m: &BinaryMask) -> BinaryMask {
        let mut out = BinaryMask::new(self.out_w, self.out_h);
        for v in 0..self.out_h {
            for u in 0..self.out_w {
                let (x, y) = self.source_point(u, v);
                if !self.inside(x, y) {
                    continue;
                }
                let cov = bilinear(self.src_w, self.src_h, x, y, |sx, sy| {
                    [if m.get(sx, sy) { 1.0 } else { 0.0 }; 3]
                })[0];
                if cov >= 0.5 {
                    out.set(u, v, true);
                }
            }
        }
        out
    }

    /// Nearest-neighbour resampling for label masks.
    pub fn apply_mask_nearest(&self, m: &BinaryMask) -> BinaryMask {
        let mut out = BinaryMask::new(self.out_w, self.out_h);
        for v in 0..self.out_h {
            for u in 0..self.out_w {
                let (x, y) = self.source_point(u, v);
                if self.inside(x, y) && m.get(x.floor() as u32, y.floor() as u32) {
                    out.set(u, v, true);
                }
            }
        }
        out
    }
}

/// Bilinear interpolation at continuous point `(x, y)` with clamp-to-edge
/// neighbours. Pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
fn bilinear(w: u32, h: u32, x: f64, y: f64, fetch: impl Fn(u32, u32) -> [f64; 3]) -> [f64; 3] {
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let clamp_x = |v: f64| v.clamp(0.0, (w - 1) as f64) as u32;
    let clamp_y = |v: f64| v.clamp(0.0, (h - 1) as f64) as u32;
    let (xa, xb) = (clamp_x(x0), clamp_x(x0 + 1.0));
    let (ya, yb) = (clamp_y(y0), clamp_y(y0 + 1.0));
    if tx == 0.0 && ty == 0.0 {
        return fetch(xa, ya);
    }
    let p00 = fetch(xa, ya);
    let p10 = fetch(xb, ya);
    let p01 = fetch(xa, yb);
    let p11 = fetch(xb, yb);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - tx) + p10[c] * tx;
        let bottom = p01[c] * (1.0 - tx) + p11[c] * tx;
        out[c] = top * (1.0 - ty) + bottom * ty;
    }
    out
}
