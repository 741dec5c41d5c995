//! Copy-paste augmentation: move an annotated object into another image and
//! synthesize its annotation.

use std::collections::HashMap;
use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::dataset::{Annotation, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::imaging::{load_image, Image, Warp};
use crate::mask::{blend, rasterize, soft_mask, BinaryMask, SoftMask, DEFAULT_SOFT_RADIUS};
use crate::rng::stream_rng;

/// Where and how an object lands in the target image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Target-pixel offset of the transformed object's canvas origin.
    pub x: i64,
    pub y: i64,
    #[serde(default = "one")]
    pub scale: f64,
    /// Degrees, counter-clockwise as displayed.
    #[serde(default)]
    pub rotation: f64,
    #[serde(default)]
    pub soft: bool,
    /// Soft-mask truncation radius in pixels.
    #[serde(default = "default_radius")]
    pub radius: f64,
}

fn one() -> f64 {
    1.0
}

fn default_radius() -> f64 {
    DEFAULT_SOFT_RADIUS
}

impl Placement {
    /// No scaling or rotation, hard edges.
    pub fn at(x: i64, y: i64) -> Self {
        Placement {
            x,
            y,
            scale: 1.0,
            rotation: 0.0,
            soft: false,
            radius: DEFAULT_SOFT_RADIUS,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid(format!("scale must be > 0, got {}", self.scale)));
        }
        if !(-180.0..=180.0).contains(&self.rotation) {
            return Err(Error::invalid(format!("rotation {} outside [-180, 180]", self.rotation)));
        }
        if self.soft && !(self.radius > 0.0) {
            return Err(Error::invalid(format!("soft radius must be > 0, got {}", self.radius)));
        }
        Ok(())
    }
}

/// Pixel-aligned crop rectangle covering an annotation's bbox.
pub fn crop_rect(ann: &Annotation, width: u32, height: u32) -> (u32, u32, u32, u32) {
    let [x, y, w, h] = ann.bbox;
    let x0 = x.floor().clamp(0.0, width as f64) as u32;
    let y0 = y.floor().clamp(0.0, height as f64) as u32;
    let x1 = (x + w).ceil().clamp(x0 as f64, width as f64) as u32;
    let y1 = (y + h).ceil().clamp(y0 as f64, height as f64) as u32;
    (x0, y0, x1, y1)
}

/// An object cut out of its source image: the bbox crop and its mask.
#[derive(Debug, Clone)]
pub struct ObjectCrop {
    pub image: Image,
    pub mask: BinaryMask,
    /// Top-left of the crop in the source image.
    pub origin: (u32, u32),
}

pub fn extract_object(src: &Image, ann: &Annotation) -> Result<ObjectCrop> {
    let full = rasterize(&ann.segmentation, src.width(), src.height())?;
    let (x0, y0, x1, y1) = crop_rect(ann, src.width(), src.height());
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::invalid(format!("annotation {} has an empty bbox", ann.id)));
    }
    let image = image::imageops::crop_imm(src, x0, y0, x1 - x0, y1 - y0).to_image();
    let mask = full.crop(x0 as i64, y0 as i64, x1 - x0, y1 - y0);
    Ok(ObjectCrop {
        image,
        mask,
        origin: (x0, y0),
    })
}

/// The object after scaling and rotation, ready to be composited.
#[derive(Debug, Clone)]
pub struct TransformedObject {
    pub image: Image,
    /// Binary footprint: bilinear mask coverage thresholded at 0.5.
    pub mask: BinaryMask,
    pub alpha: SoftMask,
}

pub fn transform_object(obj: &ObjectCrop, p: &Placement) -> Result<TransformedObject> {
    p.check()?;
    let warp = Warp::new(obj.image.width(), obj.image.height(), p.scale, p.rotation);
    let image = warp.apply_image(&obj.image);
    let mask = warp.apply_mask_bilinear(&obj.mask);
    let alpha = if p.soft {
        soft_mask(&mask, p.radius)?
    } else {
        SoftMask::hard(&mask)
    };
    Ok(TransformedObject { image, mask, alpha })
}

/// Composite the annotated object of `src_img` into `dst_img`.
///
/// The returned annotation keeps `id`, `image_id` and `category_id` of `ann`;
/// callers reassign ids. Its segmentation is the RLE of the placed footprint.
pub fn transplant_one(src_img: &Image, ann: &Annotation, dst_img: &Image, p: &Placement) -> Result<(Image, Annotation)> {
    let obj = extract_object(src_img, ann)?;
    let t = transform_object(&obj, p)?;
    let placed = t.mask.paste_onto(dst_img.width(), dst_img.height(), (p.x, p.y));
    let Some(bbox) = placed.bbox() else {
        return Err(Error::OutsideTarget);
    };
    let out = blend(&t.image, &t.alpha, dst_img, (p.x, p.y))?;
    let new_ann = Annotation {
        id: ann.id,
        image_id: ann.image_id,
        category_id: ann.category_id,
        segmentation: (&placed).into(),
        bbox,
        area: placed.count() as f64,
        extra: Map::new(),
    };
    Ok((out, new_ann))
}

/// Random placement policy for batch transplants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementPolicy {
    pub scale_range: (f64, f64),
    pub rotation_range: (f64, f64),
    pub soft: bool,
    pub radius: f64,
    /// Redraws allowed when the object does not fit.
    pub max_retries: usize,
}

impl Default for PlacementPolicy {
    fn default() -> Self {
        PlacementPolicy {
            scale_range: (0.5, 1.5),
            rotation_range: (-45.0, 45.0),
            soft: true,
            radius: DEFAULT_SOFT_RADIUS,
            max_retries: 10,
        }
    }
}

/// Source of decoded images by record.
pub trait ImageSource: Sync {
    fn load(&self, record: &ImageRecord) -> Result<Image>;
}

/// Images read from `root.join(file_name)`.
pub struct DirSource {
    pub root: PathBuf,
}

impl ImageSource for DirSource {
    fn load(&self, record: &ImageRecord) -> Result<Image> {
        load_image(self.root.join(&record.file_name))
    }
}

impl ImageSource for HashMap<u64, Image> {
    fn load(&self, record: &ImageRecord) -> Result<Image> {
        self.get(&record.id)
            .cloned()
            .ok_or(Error::UnknownImage(record.id))
    }
}

/// A composited image produced by a batch.
#[derive(Debug, Clone)]
pub struct Composite {
    pub record: ImageRecord,
    pub image: Image,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub dataset: Dataset,
    pub images: Vec<Composite>,
    /// Draw indices that were skipped because no placement fit.
    pub skipped: Vec<usize>,
}

struct Drawn {
    index: usize,
    target: usize,
    annotation: Annotation,
    image: Image,
}

fn draw_one(
    index: usize,
    src: &Dataset,
    sources: &dyn ImageSource,
    targets: &[Image],
    seed: u64,
    policy: &PlacementPolicy,
) -> Result<Option<Drawn>> {
    let mut rng = stream_rng(seed, index as u64);
    let ann = &src.annotations[rng.random_range(0..src.annotations.len())];
    let target = rng.random_range(0..targets.len());
    let dst = &targets[target];
    let rec = src.image(ann.image_id).ok_or(Error::UnknownImage(ann.image_id))?;
    let src_img = sources.load(rec)?;
    let obj = extract_object(&src_img, ann)?;
    for _ in 0..=policy.max_retries {
        let scale = rng.random_range(policy.scale_range.0..=policy.scale_range.1);
        let rotation = rng.random_range(policy.rotation_range.0..=policy.rotation_range.1);
        let (w, h) = Warp::new(obj.image.width(), obj.image.height(), scale, rotation).out_size();
        if w > dst.width() || h > dst.height() {
            continue;
        }
        let x = rng.random_range(0..=dst.width() - w) as i64;
        let y = rng.random_range(0..=dst.height() - h) as i64;
        let p = Placement {
            x,
            y,
            scale,
            rotation,
            soft: policy.soft,
            radius: policy.radius,
        };
        match transplant_one(&src_img, ann, dst, &p) {
            Ok((image, annotation)) => {
                return Ok(Some(Drawn {
                    index,
                    target,
                    annotation,
                    image,
                }))
            }
            // Scaled below one pixel of coverage; draw again.
            Err(Error::OutsideTarget) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// Draw `count` seeded transplants, one composited image each.
///
/// Draw `i` uses its own random stream derived from `(seed, i)`, so the result
/// does not depend on thread scheduling.
pub fn transplant_batch(
    src: &Dataset,
    sources: &dyn ImageSource,
    targets: &[Image],
    count: usize,
    seed: u64,
    policy: &PlacementPolicy,
) -> Result<BatchOutput> {
    let mut out = Dataset {
        categories: src.categories.clone(),
        ..Default::default()
    };
    if count == 0 {
        return Ok(BatchOutput {
            dataset: out,
            images: Vec::new(),
            skipped: Vec::new(),
        });
    }
    if targets.is_empty() {
        return Err(Error::invalid("no target images"));
    }
    if src.annotations.is_empty() {
        return Err(Error::invalid("source dataset has no annotations"));
    }
    let drawn: Vec<Option<Drawn>> = (0..count)
        .into_par_iter()
        .map(|i| draw_one(i, src, sources, targets, seed, policy))
        .collect::<Result<_>>()?;

    let mut images = Vec::new();
    let mut skipped = Vec::new();
    for (i, d) in drawn.into_iter().enumerate() {
        let Some(d) = d else {
            log::warn!("transplant draw {i}: object does not fit any sampled placement, skipped");
            skipped.push(i);
            continue;
        };
        let id = images.len() as u64 + 1;
        let record = ImageRecord {
            id,
            file_name: format!("transplant_{:05}.png", d.index),
            width: d.image.width(),
            height: d.image.height(),
            extra: [("target_index".to_string(), serde_json::Value::from(d.target))]
                .into_iter()
                .collect(),
        };
        let mut ann = d.annotation;
        ann.id = id;
        ann.image_id = id;
        out.annotations.push(ann);
        out.images.push(record.clone());
        images.push(Composite {
            record,
            image: d.image,
        });
    }
    Ok(BatchOutput {
        dataset: out,
        images,
        skipped,
    })
}
