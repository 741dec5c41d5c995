//! Category remapping into task taxonomies.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::dataset::{Category, Dataset};
use crate::error::{Error, Result};

pub const OTHER_LITTER: &str = "Other Litter";
pub const LITTER: &str = "Litter";

/// Source category id to target class name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyMapping {
    pub entries: BTreeMap<u64, String>,
    pub target_classes: Vec<String>,
}

impl TaxonomyMapping {
    /// Every category maps to itself by name.
    pub fn identity(d: &Dataset) -> Self {
        let mut cats: Vec<&Category> = d.categories.iter().collect();
        cats.sort_by_key(|c| c.id);
        TaxonomyMapping {
            entries: cats.iter().map(|c| (c.id, c.name.clone())).collect(),
            target_classes: cats.iter().map(|c| c.name.clone()).collect(),
        }
    }

    pub fn target_of(&self, category_id: u64) -> Option<&str> {
        self.entries.get(&category_id).map(String::as_str)
    }

    /// 1-based class id of a target class.
    pub fn class_id(&self, name: &str) -> Option<u64> {
        self.target_classes.iter().position(|c| c == name).map(|i| i as u64 + 1)
    }

    pub fn class_of(&self, category_id: u64) -> Option<u64> {
        self.target_of(category_id).and_then(|n| self.class_id(n))
    }

    /// Tab-separated `source name<TAB>target name` lines, grouped by target
    /// class in class order, then by source id.
    pub fn to_tsv(&self, d: &Dataset) -> String {
        let names: HashMap<u64, &str> = d.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
        let mut out = String::new();
        for class in &self.target_classes {
            for (id, _) in self.entries.iter().filter(|(_, t)| *t == class) {
                out.push_str(names.get(id).copied().unwrap_or(""));
                out.push('\t');
                out.push_str(class);
                out.push('\n');
            }
        }
        out
    }

    /// Inverse of [`to_tsv`](Self::to_tsv). Target classes are ordered by first appearance.
    pub fn from_tsv(text: &str, d: &Dataset) -> Result<Self> {
        let by_name: HashMap<&str, u64> = d.categories.iter().map(|c| (c.name.as_str(), c.id)).collect();
        let mut m = TaxonomyMapping {
            entries: BTreeMap::new(),
            target_classes: Vec::new(),
        };
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (src, target) = line
                .split_once('\t')
                .ok_or_else(|| Error::invalid(format!("mapping line {}: expected two tab-separated columns", n + 1)))?;
            let target = target.trim();
            let id = *by_name
                .get(src.trim())
                .ok_or_else(|| Error::invalid(format!("mapping line {}: unknown category {src:?}", n + 1)))?;
            if target.is_empty() {
                return Err(Error::invalid(format!("mapping line {}: empty target", n + 1)));
            }
            if m.entries.insert(id, target.to_string()).is_some() {
                return Err(Error::invalid(format!("mapping line {}: {src:?} mapped twice", n + 1)));
            }
            if !m.target_classes.iter().any(|c| c == target) {
                m.target_classes.push(target.to_string());
            }
        }
        Ok(m)
    }
}

/// Keep the `k` supercategories with the most annotations and merge the rest into `other_name`.
///
/// Ties are broken by ascending supercategory name.
pub fn build_top_k_mapping(d: &Dataset, k: usize, other_name: &str) -> Result<TaxonomyMapping> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if d.annotations.is_empty() {
        return Err(Error::invalid("dataset has no annotations to rank"));
    }
    let supers: HashMap<u64, &str> = d
        .categories
        .iter()
        .map(|c| (c.id, c.supercategory.as_str()))
        .collect();
    let mut counts: BTreeMap<&str, u64> = supers.values().map(|s| (*s, 0)).collect();
    for a in &d.annotations {
        if let Some(s) = supers.get(&a.category_id) {
            *counts.entry(s).or_default() += 1;
        }
    }
    if k > counts.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} supercategories",
            counts.len()
        )));
    }
    let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let top: Vec<String> = ranked[..k].iter().map(|(s, _)| s.to_string()).collect();
    if top.iter().any(|t| t == other_name) {
        return Err(Error::invalid(format!(
            "merge class {other_name:?} collides with a kept supercategory"
        )));
    }
    let entries = d
        .categories
        .iter()
        .map(|c| {
            let target = if top.contains(&c.supercategory) {
                c.supercategory.clone()
            } else {
                other_name.to_string()
            };
            (c.id, target)
        })
        .collect();
    let mut target_classes = top;
    target_classes.push(other_name.to_string());
    Ok(TaxonomyMapping {
        entries,
        target_classes,
    })
}

/// Everything becomes a single `Litter` class.
pub fn classless_mapping(d: &Dataset) -> TaxonomyMapping {
    TaxonomyMapping {
        entries: d.categories.iter().map(|c| (c.id, LITTER.to_string())).collect(),
        target_classes: vec![LITTER.to_string()],
    }
}

/// Rewrite categories to `m.target_classes` (ids `1..=n` in list order).
pub fn remap(d: &Dataset, m: &TaxonomyMapping) -> Result<Dataset> {
    let mut out = d.clone();
    out.categories = m
        .target_classes
        .iter()
        .enumerate()
        .map(|(i, name)| Category {
            id: i as u64 + 1,
            name: name.clone(),
            supercategory: name.clone(),
            extra: Map::new(),
        })
        .collect();
    for a in &mut out.annotations {
        let target = m
            .target_of(a.category_id)
            .ok_or(Error::UncoveredCategory(a.category_id))?;
        a.category_id = m
            .class_id(target)
            .ok_or_else(|| Error::invalid(format!("target {target:?} is not a listed class")))?;
    }
    Ok(out)
}
