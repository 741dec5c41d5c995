//! Instance-segmentation evaluation with pluggable prediction scores.
//!
//! Detections carry a probability vector of length `N + 1` whose last entry is
//! the background probability. They are ranked by one of three scores (see
//! [`ScoreKind`]), greedily matched to ground truth by mask IoU, and summarised
//! as COCO-style 101-point interpolated AP averaged over IoU thresholds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mask::{rasterize, BinaryMask, Segmentation};

pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Tolerance on `sum(probs) == 1`.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;
/// Number of recall points used for interpolation.
pub const RECALL_POINTS: usize = 101;
/// IoU a confusion-matrix match must exceed.
pub const CONFUSION_IOU: f64 = 0.5;

/// `0.50, 0.55, ..., 0.95`.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// How a probability vector is turned into a ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreKind {
    /// Highest class probability.
    Class,
    /// One minus the background probability.
    Litter,
    /// Highest class probability over background probability (plus `epsilon`).
    Ratio { epsilon: f64 },
}

impl ScoreKind {
    pub fn ratio() -> Self {
        ScoreKind::Ratio {
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::Class => "class",
            ScoreKind::Litter => "litter",
            ScoreKind::Ratio { .. } => "ratio",
        }
    }

    /// Column heading used in score tables.
    pub fn title(&self) -> &'static str {
        match self {
            ScoreKind::Class => "Class score",
            ScoreKind::Litter => "Litter score",
            ScoreKind::Ratio { .. } => "Ratio score",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(ScoreKind::Class),
            "litter" => Ok(ScoreKind::Litter),
            "ratio" => Ok(ScoreKind::ratio()),
            _ => Err(Error::invalid(format!("unknown score kind {s:?}"))),
        }
    }
}

fn max_class_prob(probs: &[f64]) -> f64 {
    probs[..probs.len() - 1].iter().copied().fold(0.0, f64::max)
}

/// Ranking score of a probability vector (last entry = background).
pub fn score(probs: &[f64], kind: ScoreKind) -> f64 {
    let bg = probs[probs.len() - 1];
    match kind {
        ScoreKind::Class => max_class_prob(probs),
        ScoreKind::Litter => 1.0 - bg,
        ScoreKind::Ratio { epsilon } => max_class_prob(probs) / (bg + epsilon),
    }
}

/// 1-based argmax over the class entries; ties go to the lowest index.
pub fn predicted_class(probs: &[f64]) -> u64 {
    let mut best = 0;
    for (i, &p) in probs[..probs.len() - 1].iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best as u64 + 1
}

pub fn check_probs(probs: &[f64]) -> Result<()> {
    if probs.len() < 2 {
        return Err(Error::invalid(format!(
            "probability vector needs at least one class and background, got {} entries",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(format!("probabilities must be finite and >= 0: {probs:?}")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::invalid(format!("probabilities sum to {sum}, expected 1")));
    }
    Ok(())
}

/// One predicted instance as stored in a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Optional in files; parse assigns `1..=n` in file order when absent.
    #[serde(default)]
    pub id: u64,
    pub image_id: u64,
    pub segmentation: Segmentation,
    pub probs: Vec<f64>,
}

pub fn parse_detections(bytes: &[u8]) -> Result<Vec<Detection>> {
    let mut dets: Vec<Detection> = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: 0,
        message: e.to_string(),
    })?;
    if dets.iter().all(|d| d.id == 0) {
        for (i, d) in dets.iter_mut().enumerate() {
            d.id = i as u64 + 1;
        }
    }
    let mut seen = HashSet::new();
    for d in &dets {
        if d.id == 0 || !seen.insert(d.id) {
            return Err(Error::invalid(format!("detection id {} is missing or repeated", d.id)));
        }
        check_probs(&d.probs)?;
    }
    Ok(dets)
}

/// Rasterized ground truth with its evaluation class.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub id: u64,
    pub image_id: u64,
    pub class: u64,
    /// `w * h` of the annotation bbox.
    pub bbox_area: f64,
    pub mask: BinaryMask,
    bounds: Option<(u32, u32, u32, u32)>,
    count: u64,
}

impl GroundTruth {
    pub fn new(id: u64, image_id: u64, class: u64, bbox_area: f64, mask: BinaryMask) -> Self {
        let bounds = mask.bounds();
        let count = mask.count();
        Self {
            id,
            image_id,
            class,
            bbox_area,
            mask,
            bounds,
            count,
        }
    }
}

/// Detection with its mask rasterized and its score fixed.
#[derive(Debug, Clone)]
pub struct ScoredDetection {
    pub id: u64,
    pub image_id: u64,
    pub class: u64,
    pub score: f64,
    pub mask: BinaryMask,
    bounds: Option<(u32, u32, u32, u32)>,
    count: u64,
}

impl ScoredDetection {
    pub fn new(id: u64, image_id: u64, class: u64, score: f64, mask: BinaryMask) -> Self {
        let bounds = mask.bounds();
        let count = mask.count();
        Self {
            id,
            image_id,
            class,
            score,
            mask,
            bounds,
            count,
        }
    }
}

/// Mask IoU restricted to the overlap of the two foreground bounds.
fn fast_iou(
    a: &BinaryMask,
    ab: Option<(u32, u32, u32, u32)>,
    ac: u64,
    b: &BinaryMask,
    bb: Option<(u32, u32, u32, u32)>,
    bc: u64,
) -> f64 {
    let (Some(ab), Some(bb)) = (ab, bb) else { return 0.0 };
    let x0 = ab.0.max(bb.0);
    let y0 = ab.1.max(bb.1);
    let x1 = ab.2.min(bb.2);
    let y1 = ab.3.min(bb.3);
    let mut inter = 0u64;
    for y in y0..y1.max(y0) {
        for x in x0..x1.max(x0) {
            inter += (a.get(x, y) && b.get(x, y)) as u64;
        }
    }
    let union = ac + bc - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ground truths of every annotation, classed by `category_id`.
pub fn ground_truths(d: &Dataset) -> Result<Vec<GroundTruth>> {
    let images = d.image_index();
    d.annotations
        .par_iter()
        .map(|a| {
            let img = images.get(&a.image_id).ok_or(Error::UnknownImage(a.image_id))?;
            let mask = rasterize(&a.segmentation, img.width, img.height)?;
            Ok(GroundTruth::new(a.id, a.image_id, a.category_id, a.bbox[2] * a.bbox[3], mask))
        })
        .collect()
}

/// Rasterize detections on their images and score them.
pub fn score_detections(d: &Dataset, dets: &[Detection], kind: ScoreKind) -> Result<Vec<ScoredDetection>> {
    if let ScoreKind::Ratio { epsilon } = kind {
        if !(epsilon > 0.0) {
            return Err(Error::invalid(format!("ratio epsilon must be > 0, got {epsilon}")));
        }
    }
    let images = d.image_index();
    dets.par_iter()
        .map(|det| {
            let img = images.get(&det.image_id).ok_or(Error::UnknownImage(det.image_id))?;
            check_probs(&det.probs)?;
            let mask = rasterize(&det.segmentation, img.width, img.height)?;
            Ok(ScoredDetection::new(
                det.id,
                det.image_id,
                predicted_class(&det.probs),
                score(&det.probs, kind),
                mask,
            ))
        })
        .collect()
}

#[derive(Debug, Clone)]
struct ImageOverlaps {
    gts: Vec<usize>,
    /// Row-major, one row per detection of the image, one column per entry of `gts`.
    iou: Vec<f64>,
}

/// Ground truths, detections and their pairwise mask IoUs.
#[derive(Debug, Clone)]
pub struct EvalSet {
    gts: Vec<GroundTruth>,
    dets: Vec<ScoredDetection>,
    images: BTreeMap<u64, ImageOverlaps>,
    /// (image, row) of each detection.
    det_rows: Vec<(u64, usize)>,
}

/// Matching outcome at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection (input order): matched ground-truth index and IoU.
    pub det_match: Vec<Option<(usize, f64)>>,
    /// Per ground truth (input order): matched detection index.
    pub gt_match: Vec<Option<usize>>,
    /// Detections that took part, as indices.
    pub considered: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchPair {
    pub det_id: u64,
    pub gt_id: u64,
    pub iou: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matches {
    pub pairs: Vec<MatchPair>,
    pub false_positives: Vec<u64>,
    pub false_negatives: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub class_agnostic: bool,
    pub score_kind: ScoreKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: default_iou_thresholds(),
            class_agnostic: false,
            score_kind: ScoreKind::Class,
        }
    }
}

impl EvalConfig {
    pub fn check(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::invalid("no IoU thresholds"));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::invalid("IoU thresholds must lie in (0, 1]"));
        }
        if self.iou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("IoU thresholds must be strictly increasing"));
        }
        if let ScoreKind::Ratio { epsilon } = self.score_kind {
            if !(epsilon > 0.0) {
                return Err(Error::invalid("ratio epsilon must be > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassAp {
    /// Evaluation class id; 0 is the pooled class of class-agnostic runs.
    pub class_id: u64,
    pub name: String,
    pub num_gts: usize,
    pub num_dets: usize,
    /// Percent, averaged over thresholds.
    pub ap: f64,
    /// Percent, one per IoU threshold.
    pub per_threshold: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerEntry {
    pub iou_threshold: f64,
    pub det_id: u64,
    pub image_id: u64,
    pub gt_id: Option<u64>,
    pub iou: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub score_kind: ScoreKind,
    pub class_agnostic: bool,
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassAp>,
    /// Percent; mean over classes that have ground truth.
    pub mean_ap: f64,
    /// Percent; per threshold, mean over classes.
    pub per_threshold: Vec<f64>,
    pub ledger: Vec<LedgerEntry>,
}

impl EvalReport {
    /// Fill class names from a dataset's categories.
    pub fn name_classes(&mut self, d: &Dataset) {
        let cats = d.category_index();
        for c in &mut self.classes {
            if let Some(cat) = cats.get(&c.class_id) {
                c.name = cat.name.clone();
            }
        }
    }

    pub fn class(&self, class_id: u64) -> Option<&ClassAp> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }
}

/// 101-point interpolated AP in `[0, 1]` for detections in rank order.
pub fn interpolated_ap(tp: &[bool], num_gts: usize) -> f64 {
    if num_gts == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gts as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / RECALL_POINTS as f64
}

impl EvalSet {
    /// Pair every detection with the ground truths on its image. Detections on
    /// images outside `image_ids` are rejected.
    pub fn new(image_ids: &HashSet<u64>, gts: Vec<GroundTruth>, dets: Vec<ScoredDetection>) -> Result<Self> {
        for g in &gts {
            if !image_ids.contains(&g.image_id) {
                return Err(Error::UnknownImage(g.image_id));
            }
        }
        for d in &dets {
            if !image_ids.contains(&d.image_id) {
                return Err(Error::UnknownImage(d.image_id));
            }
        }
        let mut by_image: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, g) in gts.iter().enumerate() {
            by_image.entry(g.image_id).or_default().0.push(i);
        }
        for (i, d) in dets.iter().enumerate() {
            by_image.entry(d.image_id).or_default().1.push(i);
        }
        for (g, _) in by_image.values_mut() {
            g.sort_by_key(|&i| gts[i].id);
        }
        let computed: Vec<(u64, Vec<usize>, ImageOverlaps)> = by_image
            .into_par_iter()
            .map(|(image, (gidx, didx))| {
                let mut iou = Vec::with_capacity(gidx.len() * didx.len());
                for &di in &didx {
                    let d = &dets[di];
                    for &gi in &gidx {
                        let g = &gts[gi];
                        if d.mask.width() != g.mask.width() || d.mask.height() != g.mask.height() {
                            return Err(Error::DimensionMismatch(
                                d.mask.width(),
                                d.mask.height(),
                                g.mask.width(),
                                g.mask.height(),
                            ));
                        }
                        iou.push(fast_iou(&d.mask, d.bounds, d.count, &g.mask, g.bounds, g.count));
                    }
                }
                Ok((image, didx, ImageOverlaps { gts: gidx, iou }))
            })
            .collect::<Result<_>>()?;
        let mut det_rows = vec![(0, 0); dets.len()];
        let mut images = BTreeMap::new();
        for (image, didx, ov) in computed {
            for (row, &di) in didx.iter().enumerate() {
                det_rows[di] = (image, row);
            }
            images.insert(image, ov);
        }
        Ok(EvalSet {
            gts,
            dets,
            images,
            det_rows,
        })
    }

    /// Build from a dataset (classes = category ids) and a detections file.
    pub fn from_dataset(d: &Dataset, dets: &[Detection], kind: ScoreKind) -> Result<Self> {
        let ids: HashSet<u64> = d.images.iter().map(|i| i.id).collect();
        Self::new(&ids, ground_truths(d)?, score_detections(d, dets, kind)?)
    }

    /// Replace detection scores, keyed by detection id, keeping masks and IoUs.
    pub fn rescore(&mut self, dets: &[Detection], kind: ScoreKind) -> Result<()> {
        let by_id: HashMap<u64, &Detection> = dets.iter().map(|d| (d.id, d)).collect();
        for d in &mut self.dets {
            let src = by_id
                .get(&d.id)
                .ok_or_else(|| Error::invalid(format!("no probabilities for detection {}", d.id)))?;
            d.score = score(&src.probs, kind);
        }
        Ok(())
    }

    pub fn ground_truths(&self) -> &[GroundTruth] {
        &self.gts
    }

    pub fn detections(&self) -> &[ScoredDetection] {
        &self.dets
    }

    /// Mask IoU of detection `di` against ground truth `gi` (0 on different images).
    pub fn iou(&self, di: usize, gi: usize) -> f64 {
        let (image, row) = self.det_rows[di];
        let ov = &self.images[&image];
        match ov.gts.iter().position(|&g| g == gi) {
            Some(col) => ov.iou[row * ov.gts.len() + col],
            None => 0.0,
        }
    }

    /// Detection indices by score descending, then id ascending.
    fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.dets.len()).collect();
        order.sort_by(|&a, &b| {
            let (da, db) = (&self.dets[a], &self.dets[b]);
            db.score.total_cmp(&da.score).then(da.id.cmp(&db.id))
        });
        order
    }

    fn greedy(&self, iou_t: f64, class_agnostic: bool, strict: bool, keep: impl Fn(&ScoredDetection) -> bool) -> MatchResult {
        let mut det_match = vec![None; self.dets.len()];
        let mut gt_match = vec![None; self.gts.len()];
        let mut considered = Vec::new();
        for di in self.ranked() {
            let d = &self.dets[di];
            if !keep(d) {
                continue;
            }
            considered.push(di);
            let (image, row) = self.det_rows[di];
            let ov = &self.images[&image];
            let ng = ov.gts.len();
            let mut best: Option<(usize, f64)> = None;
            for (col, &gi) in ov.gts.iter().enumerate() {
                if gt_match[gi].is_some() {
                    continue;
                }
                if !class_agnostic && self.gts[gi].class != d.class {
                    continue;
                }
                let iou = ov.iou[row * ng + col];
                let passes = if strict { iou > iou_t } else { iou >= iou_t };
                // Columns are in ascending gt id, so `>` keeps the lowest id on ties.
                if passes && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, iou)) = best {
                gt_match[gi] = Some(di);
                det_match[di] = Some((gi, iou));
            }
        }
        MatchResult {
            det_match,
            gt_match,
            considered,
        }
    }

    /// Greedy matching at `iou_t` (IoU must reach the threshold).
    pub fn match_detections(&self, iou_t: f64, class_agnostic: bool) -> MatchResult {
        self.greedy(iou_t, class_agnostic, false, |_| true)
    }

    /// Summarise a [`MatchResult`] by ids.
    pub fn matches(&self, r: &MatchResult) -> Matches {
        let mut pairs = Vec::new();
        let mut false_positives = Vec::new();
        for &di in &r.considered {
            let d = &self.dets[di];
            match r.det_match[di] {
                Some((gi, iou)) => pairs.push(MatchPair {
                    det_id: d.id,
                    gt_id: self.gts[gi].id,
                    iou,
                    score: d.score,
                }),
                None => false_positives.push(d.id),
            }
        }
        let false_negatives = r
            .gt_match
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_none())
            .map(|(gi, _)| self.gts[gi].id)
            .collect();
        Matches {
            pairs,
            false_positives,
            false_negatives,
        }
    }

    pub fn average_precision(&self, config: &EvalConfig) -> Result<EvalReport> {
        config.check()?;
        let ranked = self.ranked();
        // Evaluation classes and their ground-truth counts.
        let mut classes: BTreeMap<u64, usize> = BTreeMap::new();
        for g in &self.gts {
            let c = if config.class_agnostic { 0 } else { g.class };
            *classes.entry(c).or_default() += 1;
        }
        let class_of = |di: usize| if config.class_agnostic { 0 } else { self.dets[di].class };

        let mut per_class: BTreeMap<u64, Vec<f64>> = classes.keys().map(|&c| (c, Vec::new())).collect();
        let mut ledger = Vec::new();
        for &t in &config.iou_thresholds {
            let m = self.match_detections(t, config.class_agnostic);
            for (&c, &n_gt) in &classes {
                let tp: Vec<bool> = ranked
                    .iter()
                    .filter(|&&di| class_of(di) == c)
                    .map(|&di| m.det_match[di].is_some())
                    .collect();
                per_class.get_mut(&c).expect("class listed").push(interpolated_ap(&tp, n_gt) * 100.0);
            }
            for &di in &ranked {
                let d = &self.dets[di];
                ledger.push(LedgerEntry {
                    iou_threshold: t,
                    det_id: d.id,
                    image_id: d.image_id,
                    gt_id: m.det_match[di].map(|(gi, _)| self.gts[gi].id),
                    iou: m.det_match[di].map_or(0.0, |(_, iou)| iou),
                    score: d.score,
                });
            }
        }

        let nt = config.iou_thresholds.len() as f64;
        let class_aps: Vec<ClassAp> = per_class
            .into_iter()
            .map(|(c, aps)| ClassAp {
                class_id: c,
                name: if c == 0 && config.class_agnostic {
                    "all".to_string()
                } else {
                    c.to_string()
                },
                num_gts: classes[&c],
                num_dets: ranked.iter().filter(|&&di| class_of(di) == c).count(),
                ap: aps.iter().sum::<f64>() / nt,
                per_threshold: aps,
            })
            .collect();
        let nc = class_aps.len() as f64;
        let (mean_ap, per_threshold) = if class_aps.is_empty() {
            (0.0, vec![0.0; config.iou_thresholds.len()])
        } else {
            (
                class_aps.iter().map(|c| c.ap).sum::<f64>() / nc,
                (0..config.iou_thresholds.len())
                    .map(|t| class_aps.iter().map(|c| c.per_threshold[t]).sum::<f64>() / nc)
                    .collect(),
            )
        };
        Ok(EvalReport {
            score_kind: config.score_kind,
            class_agnostic: config.class_agnostic,
            iou_thresholds: config.iou_thresholds.clone(),
            classes: class_aps,
            mean_ap,
            per_threshold,
            ledger,
        })
    }

    /// Confusion matrix over detections scoring above `score_threshold`, matched
    /// class-agnostically with IoU above 0.5.
    ///
    /// Rows are predicted classes, columns ground-truth classes; index 0 is background.
    pub fn confusion_matrix(&self, score_threshold: f64, num_classes: usize) -> Result<ConfusionMatrix> {
        let n = num_classes + 1;
        let check = |c: u64| {
            if c == 0 || c as usize > num_classes {
                Err(Error::ShapeMismatch(format!("class {c} outside 1..={num_classes}")))
            } else {
                Ok(c as usize)
            }
        };
        let r = self.greedy(CONFUSION_IOU, true, true, |d| d.score > score_threshold);
        let mut counts = vec![vec![0u64; n]; n];
        for &di in &r.considered {
            let pred = check(self.dets[di].class)?;
            match r.det_match[di] {
                Some((gi, _)) => counts[pred][check(self.gts[gi].class)?] += 1,
                None => counts[pred][0] += 1,
            }
        }
        for (gi, m) in r.gt_match.iter().enumerate() {
            if m.is_none() {
                counts[0][check(self.gts[gi].class)?] += 1;
            }
        }
        Ok(ConfusionMatrix {
            score_threshold,
            counts,
        })
    }

    /// One row per detection: its score and best IoU against any ground truth on its image.
    pub fn iou_score_scatter(&self) -> Vec<ScoreIouRow> {
        (0..self.dets.len())
            .map(|di| {
                let (image, row) = self.det_rows[di];
                let ov = &self.images[&image];
                let ng = ov.gts.len();
                let best = ov.iou[row * ng..(row + 1) * ng].iter().copied().fold(0.0, f64::max);
                ScoreIouRow {
                    det_id: self.dets[di].id,
                    score: self.dets[di].score,
                    iou: best,
                }
            })
            .collect()
    }

    /// One row per ground truth: bbox area and the best IoU any detection reaches.
    pub fn area_iou_scatter(&self) -> Vec<AreaIouRow> {
        let mut best = vec![0.0f64; self.gts.len()];
        for ov in self.images.values() {
            let ng = ov.gts.len();
            for (k, &iou) in ov.iou.iter().enumerate() {
                let gi = ov.gts[k % ng];
                best[gi] = best[gi].max(iou);
            }
        }
        self.gts
            .iter()
            .zip(best)
            .map(|(g, iou)| AreaIouRow {
                gt_id: g.id,
                area: g.bbox_area,
                iou,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreIouRow {
    pub det_id: u64,
    pub score: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AreaIouRow {
    pub gt_id: u64,
    pub area: f64,
    pub iou: f64,
}

pub fn write_score_scatter<W: std::io::Write>(rows: &[ScoreIouRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["det_id", "score", "iou"])?;
    for r in rows {
        wr.write_record([r.det_id.to_string(), r.score.to_string(), r.iou.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_area_scatter<W: std::io::Write>(rows: &[AreaIouRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["gt_id", "bbox_area", "iou"])?;
    for r in rows {
        wr.write_record([r.gt_id.to_string(), r.area.to_string(), r.iou.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub score_threshold: f64,
    /// `counts[pred][gt]`, index 0 = background.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Each ground-truth column divided by its sum (empty columns stay zero).
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        let n = self.counts.len();
        let col_sums: Vec<u64> = (0..n).map(|c| self.counts.iter().map(|r| r[c]).sum()).collect();
        self.counts
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&col_sums)
                    .map(|(&v, &s)| if s == 0 { 0.0 } else { v as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self, labels: &[String]) -> Result<String> {
        let mut wr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["pred\\gt".to_string(), "BG".to_string()];
        header.extend(labels.iter().cloned());
        wr.write_record(&header)?;
        for (i, row) in self.counts.iter().enumerate() {
            let mut rec = vec![if i == 0 { "BG".to_string() } else { labels.get(i - 1).cloned().unwrap_or_else(|| i.to_string()) }];
            rec.extend(row.iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        let bytes = wr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid("need at least two values for a spread"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(MeanStd { mean, std: var.sqrt() })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1} ± {:.1}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossValSummary {
    pub mean_ap: MeanStd,
    pub per_threshold: Vec<MeanStd>,
    /// `(class id, name, AP)` per class.
    pub classes: Vec<(u64, String, MeanStd)>,
}

/// Mean and sample standard deviation of every AP cell across folds.
pub fn cross_validation_summary(reports: &[EvalReport]) -> Result<CrossValSummary> {
    if reports.len() < 2 {
        return Err(Error::invalid("cross-validation needs at least two reports"));
    }
    let first = &reports[0];
    let shape = |r: &EvalReport| {
        (
            r.iou_thresholds.clone(),
            r.class_agnostic,
            r.classes.iter().map(|c| c.class_id).collect::<Vec<_>>(),
        )
    };
    for (i, r) in reports.iter().enumerate().skip(1) {
        if shape(r) != shape(first) {
            return Err(Error::ShapeMismatch(format!("report {i} differs in thresholds or classes from report 0")));
        }
    }
    let col = |f: &dyn Fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(CrossValSummary {
        mean_ap: col(&|r| r.mean_ap)?,
        per_threshold: (0..first.iou_thresholds.len())
            .map(|t| col(&|r| r.per_threshold[t]))
            .collect::<Result<_>>()?,
        classes: first
            .classes
            .iter()
            .enumerate()
            .map(|(k, c)| Ok((c.class_id, c.name.clone(), col(&|r| r.classes[k].ap)?)))
            .collect::<Result<_>>()?,
    })
}

/// Tasks by score kinds, each cell the cross-fold mean AP.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreTable {
    pub kinds: Vec<ScoreKind>,
    pub rows: Vec<(String, Vec<MeanStd>)>,
}

impl ScoreTable {
    /// `folds[task][kind]` holds one report per fold.
    pub fn from_reports(kinds: &[ScoreKind], tasks: &[(String, Vec<Vec<EvalReport>>)]) -> Result<Self> {
        let mut rows = Vec::new();
        for (task, per_kind) in tasks {
            if per_kind.len() != kinds.len() {
                return Err(Error::ShapeMismatch(format!(
                    "task {task} has {} score columns, expected {}",
                    per_kind.len(),
                    kinds.len()
                )));
            }
            let cells = per_kind
                .iter()
                .map(|reports| Ok(cross_validation_summary(reports)?.mean_ap))
                .collect::<Result<Vec<_>>>()?;
            rows.push((task.clone(), cells));
        }
        Ok(ScoreTable {
            kinds: kinds.to_vec(),
            rows,
        })
    }

    /// Plain-text table, one row per task, one `mean ± std` column per score.
    pub fn render(&self) -> String {
        let mut header = vec!["Dataset".to_string()];
        header.extend(self.kinds.iter().map(|k| k.title().to_string()));
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(task, cells)| {
                let mut r = vec![task.clone()];
                r.extend(cells.iter().map(|c| c.to_string()));
                r
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| {
                std::iter::once(&header)
                    .chain(&body)
                    .map(|r| r[i].chars().count())
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |r: &[String]| {
            let cells: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            cells.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&header);
        for r in &body {
            out.push_str(&line(r));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: u32, y0: u32, x1: u32, y1: u32) -> BinaryMask {
        BinaryMask::from_rect(32, 32, x0, y0, x1, y1)
    }

    fn set(gts: Vec<GroundTruth>, dets: Vec<ScoredDetection>) -> EvalSet {
        let ids: HashSet<u64> = [1, 2].into_iter().collect();
        EvalSet::new(&ids, gts, dets).unwrap()
    }

    fn single(t: f64) -> EvalConfig {
        EvalConfig {
            iou_thresholds: vec![t],
            ..EvalConfig::default()
        }
    }

    #[test]
    fn scores_match_hand_values() {
        let p = [0.7, 0.2, 0.1];
        assert_eq!(score(&p, ScoreKind::Class), 0.7);
        assert!((score(&p, ScoreKind::Litter) - 0.9).abs() < 1e-15);
        assert!((score(&p, ScoreKind::ratio()) - 0.7 / (0.1 + 1e-6)).abs() < 1e-12);
        let bg = [0.0, 0.0, 1.0];
        for k in [ScoreKind::Class, ScoreKind::Litter, ScoreKind::ratio()] {
            assert_eq!(score(&bg, k), 0.0);
        }
        let pure = [1.0, 0.0, 0.0];
        assert_eq!(score(&pure, ScoreKind::Litter), 1.0);
        assert_eq!(score(&pure, ScoreKind::ratio()), 1.0 / 1e-6);
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(predicted_class(&[0.7, 0.2, 0.1]), 1);
        assert_eq!(predicted_class(&[0.4, 0.4, 0.2]), 1);
        assert_eq!(predicted_class(&[0.1, 0.6, 0.3]), 2);
        assert_eq!(predicted_class(&[0.3, 0.7]), 1);
    }

    #[test]
    fn prob_checks() {
        assert!(check_probs(&[0.5, 0.5]).is_ok());
        assert!(check_probs(&[1.0]).is_err());
        assert!(check_probs(&[0.5, 0.6]).is_err());
        assert!(check_probs(&[1.5, -0.5]).is_err());
    }

    #[test]
    fn perfect_and_missing() {
        let g = || vec![GroundTruth::new(1, 1, 1, 100.0, rect(0, 0, 10, 10))];
        let s = set(g(), vec![ScoredDetection::new(1, 1, 1, 0.9, rect(0, 0, 10, 10))]);
        let r = s.average_precision(&EvalConfig::default()).unwrap();
        assert_eq!(r.mean_ap, 100.0);
        let m = s.matches(&s.match_detections(0.5, false));
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.pairs[0].iou, 1.0);

        let none = set(g(), vec![]);
        assert_eq!(none.average_precision(&EvalConfig::default()).unwrap().mean_ap, 0.0);
    }

    #[test]
    fn fp_ranked_above_tp_halves_ap() {
        let s = set(
            vec![GroundTruth::new(1, 1, 1, 100.0, rect(0, 0, 10, 10))],
            vec![
                ScoredDetection::new(1, 1, 1, 0.95, rect(20, 20, 30, 30)),
                ScoredDetection::new(2, 1, 1, 0.9, rect(0, 0, 10, 10)),
            ],
        );
        let r = s.average_precision(&single(0.5)).unwrap();
        assert_eq!(r.mean_ap, 50.0);
    }

    #[test]
    fn greedy_prefers_higher_score() {
        let s = set(
            vec![GroundTruth::new(1, 1, 1, 100.0, rect(0, 0, 10, 10))],
            vec![
                ScoredDetection::new(1, 1, 1, 0.6, rect(0, 0, 10, 10)),
                ScoredDetection::new(2, 1, 1, 0.8, rect(0, 0, 10, 9)),
            ],
        );
        let m = s.matches(&s.match_detections(0.5, false));
        assert_eq!(m.pairs[0].det_id, 2);
        assert_eq!(m.false_positives, vec![1]);
        assert!(m.false_negatives.is_empty());
    }

    #[test]
    fn class_agnostic_crosses_classes() {
        let s = set(
            vec![GroundTruth::new(1, 1, 1, 100.0, rect(0, 0, 10, 10))],
            vec![ScoredDetection::new(1, 1, 2, 0.6, rect(0, 0, 10, 10))],
        );
        assert_eq!(s.matches(&s.match_detections(0.5, false)).pairs.len(), 0);
        assert_eq!(s.matches(&s.match_detections(0.5, true)).pairs.len(), 1);
        let mut cfg = single(0.5);
        let strict = s.average_precision(&cfg).unwrap();
        assert_eq!(strict.mean_ap, 0.0);
        cfg.class_agnostic = true;
        assert_eq!(s.average_precision(&cfg).unwrap().mean_ap, 100.0);
    }

    #[test]
    fn classes_without_gt_are_excluded() {
        let s = set(
            vec![GroundTruth::new(1, 1, 1, 100.0, rect(0, 0, 10, 10))],
            vec![
                ScoredDetection::new(1, 1, 1, 0.9, rect(0, 0, 10, 10)),
                ScoredDetection::new(2, 1, 3, 0.9, rect(20, 20, 25, 25)),
            ],
        );
        let r = s.average_precision(&single(0.5)).unwrap();
        assert_eq!(r.classes.len(), 1);
        assert_eq!(r.mean_ap, 100.0);
    }

    #[test]
    fn unknown_image_rejected() {
        let ids: HashSet<u64> = [1].into_iter().collect();
        let r = EvalSet::new(&ids, vec![], vec![ScoredDetection::new(1, 7, 1, 0.5, rect(0, 0, 1, 1))]);
        assert!(matches!(r, Err(Error::UnknownImage(7))));
    }

    #[test]
    fn config_checks() {
        let mut c = EvalConfig::default();
        assert!(c.check().is_ok());
        c.iou_thresholds = vec![0.5, 0.5];
        assert!(c.check().is_err());
        c.iou_thresholds = vec![0.0];
        assert!(c.check().is_err());
        c.iou_thresholds = vec![0.5];
        c.score_kind = ScoreKind::Ratio { epsilon: 0.0 };
        assert!(c.check().is_err());
    }

    #[test]
    fn confusion_conventions() {
        let s = set(
            vec![
                GroundTruth::new(1, 1, 1, 100.0, rect(0, 0, 10, 10)),
                GroundTruth::new(2, 2, 2, 100.0, rect(0, 0, 10, 10)),
            ],
            vec![
                // Predicted class 2 over a class-1 object, IoU 0.8.
                ScoredDetection::new(1, 1, 2, 20.0, rect(0, 0, 10, 8)),
                // Below threshold: ignored entirely.
                ScoredDetection::new(2, 2, 1, 5.0, rect(20, 20, 30, 30)),
            ],
        );
        let cm = s.confusion_matrix(10.0, 2).unwrap();
        assert_eq!(cm.counts[2][1], 1);
        assert_eq!(cm.counts[0][2], 1);
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.counts[1][0], 0);
        let norm = cm.normalized();
        assert_eq!(norm[2][1], 1.0);
        assert!(s.confusion_matrix(10.0, 1).is_err());
    }

    #[test]
    fn scatters() {
        let s = set(
            vec![
                GroundTruth::new(1, 1, 1, 100.0, rect(0, 0, 10, 10)),
                GroundTruth::new(2, 1, 1, 4.0, rect(20, 20, 22, 22)),
            ],
            vec![
                ScoredDetection::new(1, 1, 1, 0.9, rect(0, 0, 10, 10)),
                ScoredDetection::new(2, 2, 1, 0.3, rect(0, 0, 3, 3)),
            ],
        );
        let a = s.iou_score_scatter();
        assert_eq!(a.len(), 2);
        assert_eq!((a[0].score, a[0].iou), (0.9, 1.0));
        assert_eq!((a[1].score, a[1].iou), (0.3, 0.0));
        let b = s.area_iou_scatter();
        assert_eq!(b.len(), 2);
        assert_eq!((b[0].area, b[0].iou), (100.0, 1.0));
        assert_eq!((b[1].area, b[1].iou), (4.0, 0.0));
    }

    fn report_with(ap: f64) -> EvalReport {
        EvalReport {
            score_kind: ScoreKind::Class,
            class_agnostic: false,
            iou_thresholds: vec![0.5],
            classes: vec![ClassAp {
                class_id: 1,
                name: "Can".into(),
                num_gts: 1,
                num_dets: 1,
                ap,
                per_threshold: vec![ap],
            }],
            mean_ap: ap,
            per_threshold: vec![ap],
            ledger: vec![],
        }
    }

    #[test]
    fn cross_validation_mean_std() {
        let s = cross_validation_summary(&[report_with(10.0), report_with(20.0)]).unwrap();
        assert_eq!(s.mean_ap.mean, 15.0);
        assert!((s.mean_ap.std - 7.0710678118654755).abs() < 1e-12);
        let same = cross_validation_summary(&[report_with(3.0), report_with(3.0)]).unwrap();
        assert_eq!(same.mean_ap.std, 0.0);
        let mut odd = report_with(1.0);
        odd.classes[0].class_id = 2;
        assert!(matches!(
            cross_validation_summary(&[report_with(1.0), odd]),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(cross_validation_summary(&[report_with(1.0)]).is_err());
    }

    #[test]
    fn score_kind_parsing() {
        assert_eq!("ratio".parse::<ScoreKind>().unwrap(), ScoreKind::ratio());
        assert!("best".parse::<ScoreKind>().is_err());
    }

    #[test]
    fn detections_file() {
        let text = br#"[{"image_id":1,"segmentation":[[0,0,4,0,4,4,0,4]],"probs":[0.6,0.3,0.1]},
                        {"image_id":1,"segmentation":{"size":[2,2],"counts":[4]},"probs":[0.2,0.2,0.6]}]"#;
        let dets = parse_detections(text).unwrap();
        assert_eq!(dets.iter().map(|d| d.id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(parse_detections(br#"[{"image_id":1,"segmentation":[],"probs":[0.6,0.6]}]"#).is_err());
    }
}
