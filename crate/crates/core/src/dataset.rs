//! COCO-style annotation dataset with a scene-tag extension.
//!
//! On disk the file is COCO instance JSON plus two optional top-level
//! collections, `scene_tags` (`{id, name}`) and `scene_assignments`
//! (`{image_id, scene_tag_id}`). Fields this crate does not know about are kept
//! in `extra` maps and written back unchanged.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::mask::{rasterize, Segmentation};

/// Relative tolerance between an annotation's `area` and its rasterized pixel count.
pub const AREA_TOLERANCE: f64 = 0.05;
/// Allowed disagreement between `bbox` and the mask's tight bounds, per edge.
pub const BBOX_TOLERANCE_PX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub area: f64,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneTag {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SceneAssignment {
    pub image_id: u64,
    pub scene_tag_id: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scene_tags: Vec<SceneTag>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scene_assignments: Vec<SceneAssignment>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Dataset {
    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category(&self, id: u64) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn image_index(&self) -> HashMap<u64, &ImageRecord> {
        self.images.iter().map(|i| (i.id, i)).collect()
    }

    pub fn category_index(&self) -> HashMap<u64, &Category> {
        self.categories.iter().map(|c| (c.id, c)).collect()
    }

    pub fn annotations_of(&self, image_id: u64) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }

    /// Copy with every collection sorted by id.
    pub fn canonical(&self) -> Dataset {
        let mut d = self.clone();
        d.images.sort_by_key(|i| i.id);
        d.annotations.sort_by_key(|a| a.id);
        d.categories.sort_by_key(|c| c.id);
        d.scene_tags.sort_by_key(|t| t.id);
        d.scene_assignments.sort();
        d
    }

    /// Images restricted to `ids`, with their annotations and scene assignments.
    pub fn subset(&self, ids: &HashSet<u64>) -> Dataset {
        Dataset {
            images: self.images.iter().filter(|i| ids.contains(&i.id)).cloned().collect(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| ids.contains(&a.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
            scene_tags: self.scene_tags.clone(),
            scene_assignments: self
                .scene_assignments
                .iter()
                .filter(|s| ids.contains(&s.image_id))
                .copied()
                .collect(),
            extra: self.extra.clone(),
        }
    }

    pub fn next_annotation_id(&self) -> u64 {
        self.annotations.iter().map(|a| a.id).max().unwrap_or(0) + 1
    }

    pub fn next_image_id(&self) -> u64 {
        self.images.iter().map(|i| i.id).max().unwrap_or(0) + 1
    }
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(bytes.len());
        }
        offset += l.len() + 1;
    }
    bytes.len()
}

/// Parse an annotation file and check that every id reference resolves.
pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let d: Dataset = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    check_references(&d)?;
    Ok(d)
}

fn check_references(d: &Dataset) -> Result<()> {
    let images: HashSet<u64> = d.images.iter().map(|i| i.id).collect();
    let cats: HashSet<u64> = d.categories.iter().map(|c| c.id).collect();
    let tags: HashSet<u64> = d.scene_tags.iter().map(|t| t.id).collect();
    for a in &d.annotations {
        if !images.contains(&a.image_id) {
            return Err(Error::Reference {
                entity: "annotation",
                entity_id: a.id,
                target: "image",
                id: a.image_id,
            });
        }
        if !cats.contains(&a.category_id) {
            return Err(Error::Reference {
                entity: "annotation",
                entity_id: a.id,
                target: "category",
                id: a.category_id,
            });
        }
    }
    for s in &d.scene_assignments {
        if !images.contains(&s.image_id) {
            return Err(Error::Reference {
                entity: "scene assignment for tag",
                entity_id: s.scene_tag_id,
                target: "image",
                id: s.image_id,
            });
        }
        if !tags.contains(&s.scene_tag_id) {
            return Err(Error::Reference {
                entity: "scene assignment for image",
                entity_id: s.image_id,
                target: "scene tag",
                id: s.scene_tag_id,
            });
        }
    }
    Ok(())
}

/// Deterministic pretty JSON, collections ordered by id.
pub fn serialize_dataset(d: &Dataset) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(&d.canonical()).expect("dataset is always serializable");
    out.push(b'\n');
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Image,
    Annotation,
    Category,
    SceneTag,
    SceneAssignment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    DuplicateId,
    DanglingImage,
    DanglingCategory,
    DanglingSceneTag,
    ImageSize,
    EmptyName,
    DuplicateName,
    BboxDegenerate,
    BboxOutOfBounds,
    BboxMismatch,
    AreaNonPositive,
    AreaMismatch,
    BadSegmentation,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).map_err(|_| fmt::Error)?;
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub kind: EntityKind,
    pub id: u64,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} {}: {} ({})", self.kind, self.id, self.rule, self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, rule: Rule) -> usize {
        self.violations.iter().filter(|v| v.rule == rule).count()
    }

    fn push(&mut self, kind: EntityKind, id: u64, rule: Rule, detail: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            id,
            rule,
            detail: detail.into(),
        });
    }
}

fn duplicates<I: IntoIterator<Item = u64>>(ids: I) -> Vec<u64> {
    let mut seen = HashSet::new();
    let mut dup = Vec::new();
    for id in ids {
        if !seen.insert(id) {
            dup.push(id);
        }
    }
    dup
}

/// Check every dataset invariant. Violations are returned as data.
pub fn validate(d: &Dataset) -> ValidationReport {
    use EntityKind as K;
    let mut r = ValidationReport::default();

    for id in duplicates(d.images.iter().map(|i| i.id)) {
        r.push(K::Image, id, Rule::DuplicateId, "image id used more than once");
    }
    for id in duplicates(d.annotations.iter().map(|a| a.id)) {
        r.push(K::Annotation, id, Rule::DuplicateId, "annotation id used more than once");
    }
    for id in duplicates(d.categories.iter().map(|c| c.id)) {
        r.push(K::Category, id, Rule::DuplicateId, "category id used more than once");
    }
    for id in duplicates(d.scene_tags.iter().map(|t| t.id)) {
        r.push(K::SceneTag, id, Rule::DuplicateId, "scene tag id used more than once");
    }

    for img in &d.images {
        if img.width == 0 || img.height == 0 {
            r.push(K::Image, img.id, Rule::ImageSize, format!("{}x{}", img.width, img.height));
        }
    }
    for c in &d.categories {
        if c.name.trim().is_empty() {
            r.push(K::Category, c.id, Rule::EmptyName, "category name is empty");
        }
    }
    let mut tag_names = HashSet::new();
    for t in &d.scene_tags {
        if t.name.trim().is_empty() {
            r.push(K::SceneTag, t.id, Rule::EmptyName, "scene tag name is empty");
        } else if !tag_names.insert(t.name.as_str()) {
            r.push(K::SceneTag, t.id, Rule::DuplicateName, format!("scene tag {:?} repeated", t.name));
        }
    }

    let images = d.image_index();
    let cats: HashSet<u64> = d.categories.iter().map(|c| c.id).collect();
    let tags: HashSet<u64> = d.scene_tags.iter().map(|t| t.id).collect();
    for s in &d.scene_assignments {
        if !images.contains_key(&s.image_id) {
            r.push(K::SceneAssignment, s.image_id, Rule::DanglingImage, format!("image {}", s.image_id));
        }
        if !tags.contains(&s.scene_tag_id) {
            r.push(
                K::SceneAssignment,
                s.image_id,
                Rule::DanglingSceneTag,
                format!("scene tag {}", s.scene_tag_id),
            );
        }
    }

    for a in &d.annotations {
        if !cats.contains(&a.category_id) {
            r.push(K::Annotation, a.id, Rule::DanglingCategory, format!("category {}", a.category_id));
        }
        let Some(img) = images.get(&a.image_id) else {
            r.push(K::Annotation, a.id, Rule::DanglingImage, format!("image {}", a.image_id));
            continue;
        };
        check_geometry(&mut r, a, img);
    }
    r
}

fn check_geometry(r: &mut ValidationReport, a: &Annotation, img: &ImageRecord) {
    use EntityKind as K;
    let [x, y, w, h] = a.bbox;
    let degenerate = !(w > 0.0 && h > 0.0) || a.bbox.iter().any(|v| !v.is_finite());
    if degenerate {
        r.push(K::Annotation, a.id, Rule::BboxDegenerate, format!("bbox {:?}", a.bbox));
    } else if x < 0.0 || y < 0.0 || x + w > img.width as f64 || y + h > img.height as f64 {
        r.push(
            K::Annotation,
            a.id,
            Rule::BboxOutOfBounds,
            format!("bbox {:?} outside {}x{}", a.bbox, img.width, img.height),
        );
    }
    if !(a.area > 0.0) {
        r.push(K::Annotation, a.id, Rule::AreaNonPositive, format!("area {}", a.area));
    }
    if img.width == 0 || img.height == 0 {
        return;
    }
    let mask = match rasterize(&a.segmentation, img.width, img.height) {
        Ok(m) => m,
        Err(e) => {
            r.push(K::Annotation, a.id, Rule::BadSegmentation, e.to_string());
            return;
        }
    };
    let count = mask.count() as f64;
    if a.area > 0.0 && (a.area - count).abs() > AREA_TOLERANCE * count {
        r.push(
            K::Annotation,
            a.id,
            Rule::AreaMismatch,
            format!("area {} but mask has {} px", a.area, count),
        );
    }
    if degenerate {
        return;
    }
    match mask.bbox() {
        Some(tight) => {
            let edges = [
                (x, tight[0]),
                (y, tight[1]),
                (x + w, tight[0] + tight[2]),
                (y + h, tight[1] + tight[3]),
            ];
            if edges.iter().any(|(a, b)| (a - b).abs() > BBOX_TOLERANCE_PX) {
                r.push(
                    K::Annotation,
                    a.id,
                    Rule::BboxMismatch,
                    format!("bbox {:?} vs mask bounds {:?}", a.bbox, tight),
                );
            }
        }
        None => r.push(K::Annotation, a.id, Rule::BboxMismatch, "mask is empty"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Rle;

    fn minimal() -> &'static str {
        r#"{"images":[{"id":1,"file_name":"a.png","width":4,"height":4}],
            "annotations":[],
            "categories":[{"id":1,"name":"Can","supercategory":"Can"}]}"#
    }

    fn square_ann(id: u64, image_id: u64) -> Annotation {
        Annotation {
            id,
            image_id,
            category_id: 1,
            segmentation: Segmentation::Polygons(vec![vec![1.0, 1.0, 3.0, 1.0, 3.0, 3.0, 1.0, 3.0]]),
            bbox: [1.0, 1.0, 2.0, 2.0],
            area: 4.0,
            extra: Map::new(),
        }
    }

    #[test]
    fn parses_minimal() {
        let d = parse_dataset(minimal().as_bytes()).unwrap();
        assert_eq!((d.images.len(), d.annotations.len(), d.categories.len()), (1, 0, 1));
        assert!(validate(&d).is_clean());
    }

    #[test]
    fn dangling_image_reference() {
        let text = r#"{"images":[{"id":1,"file_name":"a.png","width":4,"height":4}],
            "annotations":[{"id":5,"image_id":99,"category_id":1,"segmentation":[],"bbox":[0,0,1,1],"area":1}],
            "categories":[{"id":1,"name":"Can","supercategory":"Can"}]}"#;
        match parse_dataset(text.as_bytes()) {
            Err(Error::Reference { target: "image", id: 99, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_error_reports_offset() {
        let text = b"{\"images\": [}";
        match parse_dataset(text) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 12),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_dataset_serializes_three_collections() {
        let text = String::from_utf8(serialize_dataset(&Dataset::default())).unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 3);
        for key in ["images", "annotations", "categories"] {
            assert_eq!(obj[key], Value::Array(vec![]));
        }
    }

    #[test]
    fn rle_counts_written_verbatim() {
        let mut d = parse_dataset(minimal().as_bytes()).unwrap();
        let mut a = square_ann(1, 1);
        a.segmentation = Segmentation::Rle(Rle {
            size: [4, 4],
            counts: vec![5, 2, 2, 2, 5],
        });
        d.annotations.push(a);
        let text = String::from_utf8(serialize_dataset(&d)).unwrap();
        let compact: String = text.split_whitespace().collect();
        assert!(compact.contains("\"counts\":[5,2,2,2,5]"), "{compact}");
        assert_eq!(serialize_dataset(&d), serialize_dataset(&d));
    }

    #[test]
    fn unknown_fields_survive() {
        let text = r#"{"info":{"year":2020},"images":[{"id":1,"file_name":"a.png","width":4,"height":4,"flickr_url":"x"}],
            "annotations":[],"categories":[{"id":1,"name":"Can","supercategory":"Can"}]}"#;
        let d = parse_dataset(text.as_bytes()).unwrap();
        assert_eq!(d.images[0].extra["flickr_url"], "x");
        let again = parse_dataset(&serialize_dataset(&d)).unwrap();
        assert_eq!(again, d);
        assert_eq!(again.extra["info"]["year"], 2020);
    }

    #[test]
    fn degenerate_bbox_is_reported_once() {
        let mut d = parse_dataset(minimal().as_bytes()).unwrap();
        let mut a = square_ann(1, 1);
        a.bbox[2] = 0.0;
        d.annotations.push(a);
        let r = validate(&d);
        assert_eq!(r.count(Rule::BboxDegenerate), 1);
    }

    #[test]
    fn area_mismatch_detected() {
        let mut d = parse_dataset(minimal().as_bytes()).unwrap();
        d.images[0].width = 20;
        d.images[0].height = 20;
        let mut a = square_ann(1, 1);
        // 10x5 rectangle: 50 px, but the record claims 100.
        a.segmentation = Segmentation::Polygons(vec![vec![0.0, 0.0, 10.0, 0.0, 10.0, 5.0, 0.0, 5.0]]);
        a.bbox = [0.0, 0.0, 10.0, 5.0];
        a.area = 100.0;
        d.annotations.push(a.clone());
        let r = validate(&d);
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.violations[0].rule, Rule::AreaMismatch);
        assert_eq!(r.violations[0].id, 1);

        d.annotations[0].area = 52.0;
        assert!(validate(&d).is_clean());
    }

    #[test]
    fn duplicate_ids_and_tags() {
        let mut d = parse_dataset(minimal().as_bytes()).unwrap();
        d.images.push(d.images[0].clone());
        d.scene_tags = vec![
            SceneTag { id: 1, name: "beach".into() },
            SceneTag { id: 2, name: "beach".into() },
        ];
        d.scene_assignments.push(SceneAssignment { image_id: 1, scene_tag_id: 3 });
        let r = validate(&d);
        assert_eq!(r.count(Rule::DuplicateId), 1);
        assert_eq!(r.count(Rule::DuplicateName), 1);
        assert_eq!(r.count(Rule::DanglingSceneTag), 1);
    }

    #[test]
    fn out_of_bounds_bbox() {
        let mut d = parse_dataset(minimal().as_bytes()).unwrap();
        let mut a = square_ann(1, 1);
        a.bbox = [3.0, 1.0, 2.0, 2.0];
        d.annotations.push(a);
        let r = validate(&d);
        assert_eq!(r.count(Rule::BboxOutOfBounds), 1);
        assert_eq!(r.count(Rule::BboxMismatch), 1);
    }
}
