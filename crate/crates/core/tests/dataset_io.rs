use std::collections::HashSet;

use litterkit::dataset::{parse_dataset, serialize_dataset, validate, Rule};
use litterkit::mask::{rasterize, Segmentation};
use litterkit::stats::{category_counts, scene_tag_proportions, Level};
use litterkit::taxonomy::{build_top_k_mapping, remap};
use litterkit::Error;

const MINI: &[u8] = include_bytes!("fixtures/mini.json");

#[test]
fn fixture_validates() {
    let d = parse_dataset(MINI).unwrap();
    assert_eq!((d.images.len(), d.annotations.len(), d.categories.len()), (2, 3, 4));
    assert!(validate(&d).is_clean(), "{:?}", validate(&d).violations);
    assert!(matches!(d.annotations[0].segmentation, Segmentation::Polygons(_)));
    assert!(matches!(d.annotations[2].segmentation, Segmentation::Rle(_)));
}

#[test]
fn parse_serialize_parse_is_identity() {
    let d = parse_dataset(MINI).unwrap();
    let bytes = serialize_dataset(&d);
    let again = parse_dataset(&bytes).unwrap();
    assert_eq!(again, d.canonical());
    // A second pass is byte-stable.
    assert_eq!(serialize_dataset(&again), bytes);
}

#[test]
fn unknown_fields_survive() {
    let d = parse_dataset(MINI).unwrap();
    let text = String::from_utf8(serialize_dataset(&d)).unwrap();
    for key in ["\"info\"", "\"flickr_url\"", "\"iscrowd\"", "\"scene_assignments\""] {
        assert!(text.contains(key), "{key} dropped");
    }
}

#[test]
fn rle_and_polygon_rasterize_to_their_areas() {
    let d = parse_dataset(MINI).unwrap();
    for a in &d.annotations {
        let img = d.image(a.image_id).unwrap();
        let m = rasterize(&a.segmentation, img.width, img.height).unwrap();
        assert_eq!(m.count() as f64, a.area, "annotation {}", a.id);
        // Polygon bboxes follow the vertices; pixel bounds may sit up to 1 px inside.
        let tight = m.bbox().unwrap();
        assert!(tight.iter().zip(a.bbox).all(|(t, b)| (t - b).abs() <= 1.0), "annotation {}", a.id);
    }
}

#[test]
fn errors_point_at_the_problem() {
    let text = String::from_utf8(MINI.to_vec()).unwrap();
    let broken = text.replacen("\"width\": 12", "\"width\": twelve", 1);
    match parse_dataset(broken.as_bytes()) {
        Err(Error::Parse { offset, .. }) => {
            let at = broken.find("twelve").unwrap();
            assert!(offset >= at && offset <= at + 6, "offset {offset}, token at {at}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
    let dangling = text.replacen("\"category_id\": 4", "\"category_id\": 9", 1);
    assert!(matches!(
        parse_dataset(dangling.as_bytes()),
        Err(Error::Reference { id: 9, .. })
    ));

    let mut d = parse_dataset(MINI).unwrap();
    d.annotations[1].bbox[2] += 2.0;
    d.annotations[2].area = 20.0;
    let r = validate(&d);
    assert_eq!(r.count(Rule::BboxMismatch), 1);
    assert_eq!(r.count(Rule::AreaMismatch), 1);
    assert_eq!(r.violations.len(), 2);
}

#[test]
fn statistics_and_remap_on_the_fixture() {
    let d = parse_dataset(MINI).unwrap();
    let supers = category_counts(&d, Level::Supercategory);
    assert_eq!(supers.get(&["Bottle"]), Some(1.0));
    assert_eq!(supers.total(), 3.0);
    let tags = scene_tag_proportions(&d);
    assert_eq!(tags.get(&["beach"]), Some(1.0));
    assert_eq!(tags.get(&["street"]), Some(0.5));

    // Three supercategories with one annotation each: ties go by name.
    let m = build_top_k_mapping(&d, 2, "Other").unwrap();
    assert_eq!(m.target_classes, ["Bottle", "Can", "Other"]);
    let r = remap(&d, &m).unwrap();
    assert!(validate(&r).is_clean());
    let ids: HashSet<u64> = r.annotations.iter().map(|a| a.category_id).collect();
    assert_eq!(ids, HashSet::from([1, 2, 3]));
    assert_eq!(r.annotations[2].category_id, 3);
}
