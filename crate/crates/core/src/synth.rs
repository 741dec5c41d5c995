//! Small synthetic datasets and images for tests and demos.
//!
//! Objects are convex polygons painted in flat colours over a smooth textured
//! background. Every generated annotation has `bbox` and `area` computed from
//! its own rasterization, so the output always validates.

use std::collections::HashMap;

use image::Rgb;
use rand::Rng;
use serde_json::Map;

use crate::dataset::{Annotation, Category, Dataset, ImageRecord, SceneAssignment, SceneTag};
use crate::imaging::Image;
use crate::mask::{rasterize, rasterize_polygons, BinaryMask, Segmentation};
use crate::rng::stream_rng;

/// The 28 top-level litter groups, ordered so that earlier ones are more frequent.
pub const SUPERCATEGORIES: [&str; 28] = [
    "Plastic bag & wrapper",
    "Bottle",
    "Cigarette",
    "Bottle cap",
    "Can",
    "Other plastic",
    "Carton",
    "Cup",
    "Straw",
    "Paper",
    "Broken glass",
    "Styrofoam piece",
    "Pop tab",
    "Lid",
    "Plastic container",
    "Aluminium foil",
    "Plastic utensils",
    "Rope & strings",
    "Paper bag",
    "Scrap metal",
    "Food waste",
    "Squeezable tube",
    "Blister pack",
    "Glass jar",
    "Plastic glooves",
    "Battery",
    "Shoe",
    "Unlabeled litter",
];

pub const SCENE_TAGS: [&str; 7] = ["beach", "street", "grass", "indoor", "sand", "vegetation", "water"];

const RESOLUTIONS: [(u32, u32); 3] = [(160, 120), (120, 160), (200, 150)];

/// 60 categories spread over the 28 supercategories.
pub fn taco_categories() -> Vec<Category> {
    let mut cats = Vec::with_capacity(60);
    for i in 0..60usize {
        let sup = SUPERCATEGORIES[i % 28];
        let n = i / 28 + 1;
        let name = if n == 1 { sup.to_string() } else { format!("{sup} {n}") };
        cats.push(Category {
            id: i as u64 + 1,
            name,
            supercategory: sup.to_string(),
            extra: Map::new(),
        });
    }
    cats
}

/// Convex polygon approximating an ellipse.
fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, sides: usize) -> Vec<f64> {
    (0..sides)
        .flat_map(|k| {
            let t = k as f64 / sides as f64 * std::f64::consts::TAU;
            [cx + rx * t.cos(), cy + ry * t.sin()]
        })
        .collect()
}

/// Annotation with geometry derived from its own rasterization, or `None` if empty.
pub fn annotation_from_polygon(
    id: u64,
    image: &ImageRecord,
    category_id: u64,
    polygon: Vec<f64>,
) -> Option<Annotation> {
    let seg = Segmentation::Polygons(vec![polygon]);
    let m = rasterize(&seg, image.width, image.height).ok()?;
    let bbox = m.bbox()?;
    Some(Annotation {
        id,
        image_id: image.id,
        category_id,
        segmentation: seg,
        bbox,
        area: m.count() as f64,
        extra: Map::new(),
    })
}

fn random_object(
    rng: &mut impl Rng,
    id: u64,
    img: &ImageRecord,
    category_id: u64,
    small: bool,
) -> Annotation {
    loop {
        let (w, h) = (img.width as f64, img.height as f64);
        let max_r = if small { 7.0 } else { (w.min(h) / 4.0).max(6.0) };
        let rx = rng.random_range(3.0..max_r);
        let ry = rng.random_range(3.0..max_r);
        let cx = rng.random_range(rx + 1.0..w - rx - 1.0);
        let cy = rng.random_range(ry + 1.0..h - ry - 1.0);
        let sides = rng.random_range(5..12);
        if let Some(a) = annotation_from_polygon(id, img, category_id, ellipse(cx, cy, rx, ry, sides)) {
            return a;
        }
    }
}

/// A TACO-shaped dataset: 60 categories over 28 supercategories, scene tags, a
/// few image resolutions, and a long-tailed instance distribution where
/// cigarettes are small.
pub fn taco_like(num_images: usize, seed: u64) -> Dataset {
    let categories = taco_categories();
    let mut rng = stream_rng(seed, 0);
    let mut d = Dataset {
        categories,
        scene_tags: SCENE_TAGS
            .iter()
            .enumerate()
            .map(|(i, n)| SceneTag {
                id: i as u64 + 1,
                name: n.to_string(),
            })
            .collect(),
        ..Default::default()
    };
    let weights: Vec<f64> = (0..60).map(|i| 1.0 / (1.0 + (i % 28) as f64)).collect();
    let total: f64 = weights.iter().sum();
    let mut next_ann = 1;
    for i in 0..num_images {
        let (w, h) = RESOLUTIONS[i % RESOLUTIONS.len()];
        let rec = ImageRecord {
            id: i as u64 + 1,
            file_name: format!("batch_{}/{:06}.png", i % 3 + 1, i + 1),
            width: w,
            height: h,
            extra: Map::new(),
        };
        let n_tags = rng.random_range(1..=2);
        for _ in 0..n_tags {
            let tag = rng.random_range(1..=SCENE_TAGS.len() as u64);
            let sa = SceneAssignment {
                image_id: rec.id,
                scene_tag_id: tag,
            };
            if !d.scene_assignments.contains(&sa) {
                d.scene_assignments.push(sa);
            }
        }
        let n_objects = rng.random_range(1..=4);
        for _ in 0..n_objects {
            let mut pick = rng.random_range(0.0..total);
            let mut cat = 0;
            for (k, wt) in weights.iter().enumerate() {
                if pick < *wt {
                    cat = k;
                    break;
                }
                pick -= wt;
            }
            let c = &d.categories[cat];
            let small = c.supercategory == "Cigarette";
            d.annotations.push(random_object(&mut rng, next_ann, &rec, c.id, small));
            next_ann += 1;
        }
        d.images.push(rec);
    }
    d
}

/// One category per supercategory (times `cats_per_super`) and exactly the
/// requested number of annotations per supercategory.
pub fn dataset_with_supercategory_counts(counts: &[(&str, usize)], cats_per_super: usize) -> Dataset {
    let mut rng = stream_rng(0xC0FFEE, 1);
    let mut d = Dataset::default();
    for (s, (name, _)) in counts.iter().enumerate() {
        for j in 0..cats_per_super.max(1) {
            d.categories.push(Category {
                id: (s * cats_per_super.max(1) + j) as u64 + 1,
                name: format!("{name} #{}", j + 1),
                supercategory: name.to_string(),
                extra: Map::new(),
            });
        }
    }
    let mut img_id = 0;
    let mut ann_id = 1;
    for (s, (_, n)) in counts.iter().enumerate() {
        for k in 0..*n {
            if ann_id % 4 == 1 {
                img_id += 1;
                d.images.push(ImageRecord {
                    id: img_id,
                    file_name: format!("{img_id:06}.png"),
                    width: 64,
                    height: 48,
                    extra: Map::new(),
                });
            }
            let rec = d.images.last().unwrap().clone();
            let cat = (s * cats_per_super.max(1) + k % cats_per_super.max(1)) as u64 + 1;
            d.annotations.push(random_object(&mut rng, ann_id, &rec, cat, false));
            ann_id += 1;
        }
    }
    d
}

/// Plain dataset of `n` images with one square object each (useful for split tests).
pub fn grid_dataset(n: usize) -> Dataset {
    let mut d = Dataset {
        categories: vec![Category {
            id: 1,
            name: "Can".into(),
            supercategory: "Can".into(),
            extra: Map::new(),
        }],
        ..Default::default()
    };
    for i in 0..n as u64 {
        let rec = ImageRecord {
            id: i + 1,
            file_name: format!("{:06}.png", i + 1),
            width: 32,
            height: 32,
            extra: Map::new(),
        };
        let poly = vec![8.0, 8.0, 20.0, 8.0, 20.0, 20.0, 8.0, 20.0];
        d.annotations
            .push(annotation_from_polygon(i + 1, &rec, 1, poly).expect("square is non-empty"));
        d.images.push(rec);
    }
    d
}

/// Smooth gradient with speckle, reproducible from `seed`.
pub fn background(width: u32, height: u32, seed: u64) -> Image {
    let mut rng = stream_rng(seed, 2);
    let base: [f64; 3] = [rng.random_range(40.0..200.0), rng.random_range(40.0..200.0), rng.random_range(40.0..200.0)];
    let mut img = Image::new(width, height);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let g = (x as f64 / width.max(1) as f64 - 0.5) * 40.0 + (y as f64 / height.max(1) as f64 - 0.5) * 30.0;
        let n: f64 = rng.random_range(-8.0..8.0);
        *p = Rgb(base.map(|b| (b + g + n).clamp(0.0, 255.0) as u8));
    }
    img
}

fn category_colour(category_id: u64) -> [u8; 3] {
    let h = category_id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    [(h >> 8) as u8 | 0x40, (h >> 24) as u8 | 0x20, (h >> 40) as u8]
}

/// Render an image of the dataset: background plus every annotation filled in
/// its category colour with a light shading gradient.
pub fn render(d: &Dataset, image_id: u64, seed: u64) -> Option<Image> {
    let rec = d.image(image_id)?;
    let mut img = background(rec.width, rec.height, seed ^ image_id.wrapping_mul(31));
    for a in d.annotations_of(image_id) {
        let m = rasterize(&a.segmentation, rec.width, rec.height).ok()?;
        let c = category_colour(a.category_id);
        for y in 0..rec.height {
            for x in 0..rec.width {
                if m.get(x, y) {
                    let shade = ((x + y) % 16) as u8;
                    img.put_pixel(x, y, Rgb(c.map(|v| v.saturating_add(shade))));
                }
            }
        }
    }
    Some(img)
}

pub fn render_all(d: &Dataset, seed: u64) -> HashMap<u64, Image> {
    d.images
        .iter()
        .filter_map(|i| render(d, i.id, seed).map(|img| (i.id, img)))
        .collect()
}

/// Filled convex polygon mask, for tests that need a quick shape.
pub fn polygon_mask(polygon: &[f64], width: u32, height: u32) -> BinaryMask {
    rasterize_polygons(&[polygon.to_vec()], width, height).unwrap_or_else(|_| BinaryMask::new(width, height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::validate;

    #[test]
    fn fixtures_validate() {
        let d = taco_like(40, 3);
        let r = validate(&d);
        assert!(r.is_clean(), "{:?}", r.violations);
        assert_eq!(d.categories.len(), 60);
        let supers: std::collections::HashSet<_> = d.categories.iter().map(|c| &c.supercategory).collect();
        assert_eq!(supers.len(), 28);
        assert!(validate(&grid_dataset(5)).is_clean());
        assert!(validate(&dataset_with_supercategory_counts(&[("A", 5), ("B", 2)], 2)).is_clean());
    }

    #[test]
    fn deterministic() {
        assert_eq!(taco_like(10, 9), taco_like(10, 9));
        let d = taco_like(3, 9);
        assert_eq!(render(&d, 1, 4), render(&d, 1, 4));
    }
}
