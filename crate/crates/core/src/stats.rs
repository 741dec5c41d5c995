//! Dataset statistics as CSV-ready tables.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::taxonomy::TaxonomyMapping;

/// Side-length bin edges for `sqrt(w * h)`; the last bin is open-ended.
pub const SIZE_BIN_EDGES: [f64; 6] = [0.0, 16.0, 32.0, 64.0, 128.0, 256.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Count,
    Proportion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub labels: Vec<String>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramTable {
    /// Names of the label columns.
    pub dimensions: Vec<String>,
    pub value_name: String,
    pub kind: ValueKind,
    pub rows: Vec<HistogramRow>,
}

impl HistogramTable {
    fn new(dimensions: &[&str], value_name: &str, kind: ValueKind) -> Self {
        Self {
            dimensions: dimensions.iter().map(|s| s.to_string()).collect(),
            value_name: value_name.to_string(),
            kind,
            rows: Vec::new(),
        }
    }

    pub fn total(&self) -> f64 {
        self.rows.iter().map(|r| r.value).sum()
    }

    /// Value of the first row whose labels equal `labels`.
    pub fn get(&self, labels: &[&str]) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.labels.iter().map(String::as_str).eq(labels.iter().copied()))
            .map(|r| r.value)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = self.dimensions.clone();
        header.push(self.value_name.clone());
        wr.write_record(&header)?;
        for row in &self.rows {
            let mut rec = row.labels.clone();
            rec.push(match self.kind {
                ValueKind::Count => format!("{}", row.value as u64),
                ValueKind::Proportion => format!("{}", row.value),
            });
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Category,
    Supercategory,
}

fn sorted_desc(counts: BTreeMap<String, u64>) -> Vec<(String, u64)> {
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Annotation counts per category or supercategory, most frequent first.
pub fn category_counts(d: &Dataset, level: Level) -> HistogramTable {
    let cats = d.category_index();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for a in &d.annotations {
        let Some(c) = cats.get(&a.category_id) else { continue };
        let label = match level {
            Level::Category => &c.name,
            Level::Supercategory => &c.supercategory,
        };
        *counts.entry(label.clone()).or_default() += 1;
    }
    let dim = match level {
        Level::Category => "category",
        Level::Supercategory => "supercategory",
    };
    let mut t = HistogramTable::new(&[dim], "annotations", ValueKind::Count);
    t.rows = sorted_desc(counts)
        .into_iter()
        .map(|(l, n)| HistogramRow {
            labels: vec![l],
            value: n as f64,
        })
        .collect();
    t
}

/// Distinct `(width, height)` pairs with image counts and megapixels.
pub fn resolution_distribution(d: &Dataset) -> HistogramTable {
    let mut counts: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for i in &d.images {
        *counts.entry((i.width, i.height)).or_default() += 1;
    }
    let mut v: Vec<_> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut t = HistogramTable::new(&["width", "height", "megapixels"], "images", ValueKind::Count);
    t.rows = v
        .into_iter()
        .map(|((w, h), n)| HistogramRow {
            labels: vec![
                w.to_string(),
                h.to_string(),
                format!("{:.3}", w as f64 * h as f64 / 1e6),
            ],
            value: n as f64,
        })
        .collect();
    t
}

/// Fraction of images carrying each scene tag. Tags are not exclusive, so the
/// fractions may sum to more than one.
pub fn scene_tag_proportions(d: &Dataset) -> HistogramTable {
    let mut t = HistogramTable::new(&["scene_tag"], "proportion", ValueKind::Proportion);
    if d.images.is_empty() {
        return t;
    }
    let images = d.image_index();
    let mut per_tag: HashMap<u64, std::collections::HashSet<u64>> = HashMap::new();
    for s in &d.scene_assignments {
        if images.contains_key(&s.image_id) {
            per_tag.entry(s.scene_tag_id).or_default().insert(s.image_id);
        }
    }
    let n = d.images.len() as f64;
    let mut rows: Vec<HistogramRow> = d
        .scene_tags
        .iter()
        .map(|tag| HistogramRow {
            labels: vec![tag.name.clone()],
            value: per_tag.get(&tag.id).map_or(0, |s| s.len()) as f64 / n,
        })
        .collect();
    rows.sort_by(|a, b| b.value.total_cmp(&a.value).then_with(|| a.labels.cmp(&b.labels)));
    t.rows = rows;
    t
}

pub fn size_bin_label(i: usize) -> String {
    if i + 1 < SIZE_BIN_EDGES.len() {
        format!("[{},{})", SIZE_BIN_EDGES[i], SIZE_BIN_EDGES[i + 1])
    } else {
        format!("[{},inf)", SIZE_BIN_EDGES[i])
    }
}

/// Index of the side-length bin holding `sqrt(w * h)`.
pub fn size_bin(w: f64, h: f64) -> usize {
    let s = (w * h).max(0.0).sqrt();
    SIZE_BIN_EDGES.iter().rposition(|&e| s >= e).unwrap_or(0)
}

/// Per target class, annotation counts by bbox side length.
pub fn bbox_size_histogram(d: &Dataset, m: &TaxonomyMapping) -> Result<HistogramTable> {
    let nbins = SIZE_BIN_EDGES.len();
    let mut counts = vec![vec![0u64; nbins]; m.target_classes.len()];
    for a in &d.annotations {
        let class = m.class_of(a.category_id).ok_or(Error::UncoveredCategory(a.category_id))?;
        counts[class as usize - 1][size_bin(a.bbox[2], a.bbox[3])] += 1;
    }
    let mut t = HistogramTable::new(&["class", "side_bin"], "annotations", ValueKind::Count);
    for (class, row) in m.target_classes.iter().zip(counts) {
        for (i, n) in row.into_iter().enumerate() {
            t.rows.push(HistogramRow {
                labels: vec![class.clone(), size_bin_label(i)],
                value: n as f64,
            });
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{SceneAssignment, SceneTag};
    use crate::synth;
    use crate::taxonomy::{build_top_k_mapping, classless_mapping};

    #[test]
    fn counts_single_category() {
        let mut d = synth::grid_dataset(3);
        d.categories[0].name = "X".into();
        let t = category_counts(&d, Level::Category);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.get(&["X"]), Some(3.0));
        assert!(category_counts(&Dataset::default(), Level::Supercategory).rows.is_empty());
    }

    #[test]
    fn supercategory_rows_partition_annotations() {
        let d = synth::taco_like(200, 1);
        let t = category_counts(&d, Level::Supercategory);
        // Linear-scan oracle.
        let mut oracle: HashMap<&str, u64> = HashMap::new();
        for a in &d.annotations {
            let c = d.category(a.category_id).unwrap();
            *oracle.entry(c.supercategory.as_str()).or_default() += 1;
        }
        assert_eq!(t.rows.len(), oracle.len());
        for r in &t.rows {
            assert_eq!(r.value as u64, oracle[r.labels[0].as_str()]);
        }
        assert_eq!(t.total() as usize, d.annotations.len());
        assert!(t.rows.windows(2).all(|w| w[0].value >= w[1].value));
    }

    #[test]
    fn resolutions() {
        let mut d = synth::grid_dataset(3);
        d.images[0].width = 100;
        d.images[0].height = 100;
        d.images[1].width = 100;
        d.images[1].height = 100;
        d.images[2].width = 200;
        d.images[2].height = 100;
        let t = resolution_distribution(&d);
        assert_eq!(t.get(&["100", "100", "0.010"]), Some(2.0));
        assert_eq!(t.get(&["200", "100", "0.020"]), Some(1.0));
        assert_eq!(t.total(), 3.0);
        assert!(resolution_distribution(&Dataset::default()).rows.is_empty());
    }

    #[test]
    fn scene_tags_multi_label() {
        let mut d = synth::grid_dataset(2);
        d.scene_tags = vec![
            SceneTag { id: 1, name: "beach".into() },
            SceneTag { id: 2, name: "street".into() },
        ];
        d.scene_assignments = vec![
            SceneAssignment { image_id: 1, scene_tag_id: 1 },
            SceneAssignment { image_id: 2, scene_tag_id: 1 },
            SceneAssignment { image_id: 2, scene_tag_id: 2 },
        ];
        let t = scene_tag_proportions(&d);
        assert_eq!(t.get(&["beach"]), Some(1.0));
        assert_eq!(t.get(&["street"]), Some(0.5));
        assert!(t.total() > 1.0);

        // An untagged image only enlarges the denominator.
        let mut d3 = synth::grid_dataset(4);
        d3.scene_tags = d.scene_tags.clone();
        d3.scene_assignments = d.scene_assignments.clone();
        assert_eq!(scene_tag_proportions(&d3).get(&["beach"]), Some(0.5));
    }

    #[test]
    fn size_bins() {
        assert_eq!(size_bin(60.0, 60.0), 2);
        assert_eq!(size_bin_label(2), "[32,64)");
        assert_eq!(size_bin(15.9, 15.9), 0);
        assert_eq!(size_bin(16.0, 16.0), 1);
        assert_eq!(size_bin(300.0, 300.0), 5);
        assert_eq!(size_bin_label(5), "[256,inf)");
    }

    #[test]
    fn bbox_histogram_partitions_each_class() {
        let d = synth::taco_like(120, 5);
        let m = build_top_k_mapping(&d, 9, "Other Litter").unwrap();
        let t = bbox_size_histogram(&d, &m).unwrap();
        for class in &m.target_classes {
            let binned: f64 = t.rows.iter().filter(|r| &r.labels[0] == class).map(|r| r.value).sum();
            let expected = d
                .annotations
                .iter()
                .filter(|a| m.target_of(a.category_id) == Some(class))
                .count();
            assert_eq!(binned as usize, expected, "{class}");
        }
        // Cigarettes are small: all their mass sits below 64 px side length.
        let small: f64 = (0..3).map(|i| t.get(&["Cigarette", &size_bin_label(i)]).unwrap()).sum();
        let all: f64 = t.rows.iter().filter(|r| r.labels[0] == "Cigarette").map(|r| r.value).sum();
        assert!(all > 0.0 && small == all);

        let mut partial = classless_mapping(&d);
        partial.entries.remove(&d.annotations[0].category_id);
        assert!(bbox_size_histogram(&d, &partial).is_err());
    }

    #[test]
    fn csv_quotes_and_header() {
        let mut d = synth::grid_dataset(1);
        d.categories[0].name = "Plastic bag, wrapper".into();
        let csv = category_counts(&d, Level::Category).to_csv();
        assert_eq!(csv, "category,annotations\n\"Plastic bag, wrapper\",1\n");
    }
}
