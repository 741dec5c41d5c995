//! Subcommand adapters over the library.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use litterkit::augment::{apply_chain, augmented_record, AugmentOp, AugmentRanges};
use litterkit::dataset::{parse_dataset, serialize_dataset, validate as check, Dataset};
use litterkit::eval::{
    parse_detections, write_area_scatter, write_score_scatter, EvalConfig, EvalSet, ScoreKind,
};
use litterkit::imaging::{load_image, save_png, Image};
use litterkit::split::{kfold_splits, Fractions};
use litterkit::stats::{
    bbox_size_histogram, category_counts, resolution_distribution, scene_tag_proportions, Level,
};
use litterkit::taxonomy::{build_top_k_mapping, classless_mapping, remap as remap_dataset, TaxonomyMapping};
use litterkit::transplant::{transplant_batch, DirSource, PlacementPolicy};

use crate::{AugmentArgs, EvaluateArgs, MappingArgs, RemapArgs, ServeArgs, SplitArgs, StatsArgs, TransplantArgs};

/// Bad flags or flag values; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const ANNOTATION_FILE: &str = "annotations.json";

fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    parse_dataset(&bytes).with_context(|| format!("parsing {}", path.display()))
}

/// Parse and refuse to continue on any violation.
fn read_valid_dataset(path: &Path) -> Result<Dataset> {
    let d = read_dataset(path)?;
    let report = check(&d);
    if let Some(first) = report.violations.first() {
        bail!(
            "{} has {} violations, first: {first}; run `validate` for the full list",
            path.display(),
            report.violations.len()
        );
    }
    Ok(d)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn resolve_mapping(d: &Dataset, a: &MappingArgs) -> Result<Option<TaxonomyMapping>> {
    if let Some(path) = &a.mapping {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return Ok(Some(TaxonomyMapping::from_tsv(&text, d)?));
    }
    if a.classless {
        return Ok(Some(classless_mapping(d)));
    }
    match a.top_k {
        Some(k) => Ok(Some(build_top_k_mapping(d, k, &a.other)?)),
        None => Ok(None),
    }
}

pub fn validate(path: &Path) -> Result<ExitCode> {
    let d = read_dataset(path)?;
    let report = check(&d);
    for v in &report.violations {
        println!("{v}");
    }
    println!("{} violations", report.violations.len());
    Ok(if report.is_clean() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn stats(a: &StatsArgs) -> Result<ExitCode> {
    let d = read_dataset(&a.dataset)?;
    let mapping = resolve_mapping(&d, &a.mapping)?.unwrap_or_else(|| TaxonomyMapping::identity(&d));
    let tables = [
        ("categories.csv", category_counts(&d, Level::Category)),
        ("supercategories.csv", category_counts(&d, Level::Supercategory)),
        ("resolutions.csv", resolution_distribution(&d)),
        ("scene_tags.csv", scene_tag_proportions(&d)),
        ("bbox_sizes.csv", bbox_size_histogram(&d, &mapping)?),
    ];
    for (name, t) in &tables {
        write_file(&a.out.join(name), t.to_csv())?;
    }
    println!(
        "{} images, {} annotations, {} categories; tables in {}",
        d.images.len(),
        d.annotations.len(),
        d.categories.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn remap(a: &RemapArgs) -> Result<ExitCode> {
    let d = read_dataset(&a.dataset)?;
    let Some(m) = resolve_mapping(&d, &a.mapping)? else {
        return Err(usage("remap needs one of --top-k, --classless or --mapping"));
    };
    let out = remap_dataset(&d, &m)?;
    write_file(&a.out, serialize_dataset(&out))?;
    if let Some(path) = &a.export_mapping {
        write_file(path, m.to_tsv(&d))?;
    }
    println!("{} categories -> {} classes", d.categories.len(), m.target_classes.len());
    for c in &m.target_classes {
        println!("{c}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn split(a: &SplitArgs, seed: u64) -> Result<ExitCode> {
    let fractions: Fractions = a.fractions.parse().map_err(|e| usage(format!("--fractions: {e}")))?;
    let d = read_dataset(&a.dataset)?;
    let splits = kfold_splits(&d, a.k, fractions, seed).map_err(|e| usage(e.to_string()))?;
    for s in &splits {
        write_file(&a.out.join(format!("fold_{}.txt", s.fold_index)), s.to_text())?;
        println!(
            "fold {}: {} train, {} val, {} test",
            s.fold_index,
            s.train.len(),
            s.val.len(),
            s.test.len()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn transplant(a: &TransplantArgs, seed: u64) -> Result<ExitCode> {
    let d = read_valid_dataset(&a.dataset)?;
    let target_files = image_files(&a.targets)?;
    if target_files.is_empty() && a.count > 0 {
        bail!("no PNG or JPEG images in {}", a.targets.display());
    }
    let targets: Vec<Image> = target_files
        .par_iter()
        .map(|p| load_image(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<_>>()?;
    let policy = PlacementPolicy {
        soft: !a.hard,
        radius: a.radius,
        ..PlacementPolicy::default()
    };
    let sources = DirSource { root: a.images.clone() };
    let mut batch = transplant_batch(&d, &sources, &targets, a.count, seed, &policy)?;
    for rec in &mut batch.dataset.images {
        let idx = rec.extra.get("target_index").and_then(|v| v.as_u64());
        if let Some(name) = idx.and_then(|i| target_files[i as usize].file_name()) {
            rec.extra
                .insert("target_file".into(), name.to_string_lossy().into_owned().into());
        }
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    batch
        .images
        .par_iter()
        .map(|c| Ok(save_png(&c.image, a.out.join(&c.record.file_name))?))
        .collect::<Result<()>>()?;
    write_file(&a.out.join(ANNOTATION_FILE), serialize_dataset(&batch.dataset))?;
    println!(
        "{} transplants written to {}, {} skipped",
        batch.images.len(),
        a.out.display(),
        batch.skipped.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn parse_size(s: &str) -> Result<(u32, u32)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| usage(format!("size {s:?} is not WxH")))?;
    let parse = |v: &str| v.trim().parse::<u32>().ok().filter(|&n| n > 0);
    match (parse(w), parse(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(usage(format!("size {s:?} is not WxH with positive integers"))),
    }
}

pub fn augment(a: &AugmentArgs, seed: u64) -> Result<ExitCode> {
    let ops: Vec<AugmentOp> = a
        .ops
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse().map_err(|e| usage(format!("--ops: {e}"))))
        .collect::<Result<_>>()?;
    if ops.is_empty() {
        return Err(usage("--ops needs at least one operation"));
    }
    let crop = parse_size(&a.crop_size)?;
    let d = read_valid_dataset(&a.dataset)?;
    let mut records: Vec<_> = d.images.iter().collect();
    records.sort_by_key(|r| r.id);
    let jobs: Vec<(usize, usize)> = (0..records.len())
        .flat_map(|i| (0..a.copies).map(move |c| (i, c)))
        .collect();
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let ranges = AugmentRanges::default();
    let results: Vec<_> = jobs
        .par_iter()
        .enumerate()
        .map(|(j, &(i, _))| {
            let rec = records[i];
            let img = load_image(a.images.join(&rec.file_name))
                .with_context(|| format!("loading {}", rec.file_name))?;
            let anns: Vec<_> = d.annotations_of(rec.id).cloned().collect();
            let (out, anns) = apply_chain(&img, &anns, &ops, &ranges, crop, seed, j as u64)?;
            let name = format!("aug_{j:05}.png");
            save_png(&out, a.out.join(&name))?;
            Ok((name, out.dimensions(), rec.id, anns))
        })
        .collect::<Result<_>>()?;

    let mut ds = Dataset {
        categories: d.categories.clone(),
        ..Default::default()
    };
    let mut next_ann = 1;
    for (j, (name, (w, h), src_id, anns)) in results.into_iter().enumerate() {
        let id = j as u64 + 1;
        let mut rec = augmented_record(id, name, &Image::new(w, h));
        rec.extra.insert("source_image_id".into(), src_id.into());
        ds.images.push(rec);
        for mut ann in anns {
            ann.id = next_ann;
            ann.image_id = id;
            next_ann += 1;
            ds.annotations.push(ann);
        }
    }
    write_file(&a.out.join(ANNOTATION_FILE), serialize_dataset(&ds))?;
    println!(
        "{} augmented images, {} annotations written to {}",
        ds.images.len(),
        ds.annotations.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Number of task classes for TACO-10.
const TEN_CLASSES: usize = 10;

/// Ground truth in task classes: the ten classes, or a single litter class.
fn task_dataset(d: Dataset, a: &EvaluateArgs) -> Result<(Dataset, bool)> {
    let explicit = match &a.mapping {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(TaxonomyMapping::from_tsv(&text, &d)?)
        }
        None => None,
    };
    match a.task.as_str() {
        "taco10" => {
            let m = match explicit {
                Some(m) => Some(m),
                None if d.categories.len() == TEN_CLASSES => None,
                None => Some(build_top_k_mapping(&d, TEN_CLASSES - 1, litterkit::taxonomy::OTHER_LITTER)?),
            };
            let d = match m {
                Some(m) => remap_dataset(&d, &m)?,
                None => d,
            };
            if d.categories.len() != TEN_CLASSES {
                bail!("taco10 needs ten classes, the mapping gives {}", d.categories.len());
            }
            Ok((d, false))
        }
        "taco1" => Ok((remap_dataset(&d, &classless_mapping(&d))?, true)),
        other => Err(usage(format!("unknown task {other:?}, expected taco1 or taco10"))),
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<ExitCode> {
    let score_kind = match a.score.parse::<ScoreKind>().map_err(|e| usage(format!("--score: {e}")))? {
        ScoreKind::Ratio { .. } => ScoreKind::Ratio { epsilon: a.eps },
        k => k,
    };
    if !(a.eps > 0.0) {
        return Err(usage(format!("--eps must be > 0, got {}", a.eps)));
    }
    let thresholds: Vec<f64> = match &a.confusion_at {
        Some(s) => s
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| usage(format!("--confusion-at: bad value {t:?}"))))
            .collect::<Result<_>>()?,
        None if matches!(score_kind, ScoreKind::Ratio { .. }) => vec![10.0, 50.0],
        None => vec![0.5],
    };
    let (d, agnostic) = task_dataset(read_dataset(&a.dataset)?, a)?;
    let dets = parse_detections(&fs::read(&a.dets).with_context(|| format!("reading {}", a.dets.display()))?)
        .with_context(|| format!("parsing {}", a.dets.display()))?;
    if !agnostic {
        if let Some(bad) = dets.iter().find(|x| x.probs.len() != TEN_CLASSES + 1) {
            bail!(
                "detection {} has {} probabilities, expected {}",
                bad.id,
                bad.probs.len(),
                TEN_CLASSES + 1
            );
        }
    }
    let set = EvalSet::from_dataset(&d, &dets, score_kind)?;
    let config = EvalConfig {
        class_agnostic: agnostic,
        score_kind,
        ..EvalConfig::default()
    };
    let mut report = set.average_precision(&config)?;
    if !agnostic {
        report.name_classes(&d);
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_file(&a.out.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    let mut buf = Vec::new();
    write_score_scatter(&set.iou_score_scatter(), &mut buf)?;
    write_file(&a.out.join("score_iou.csv"), &buf)?;
    buf.clear();
    write_area_scatter(&set.area_iou_scatter(), &mut buf)?;
    write_file(&a.out.join("area_iou.csv"), &buf)?;
    if !agnostic {
        let labels: Vec<String> = d.categories.iter().map(|c| c.name.clone()).collect();
        for t in &thresholds {
            let cm = set.confusion_matrix(*t, TEN_CLASSES)?;
            write_file(&a.out.join(format!("confusion_{t}.csv")), cm.to_csv(&labels)?)?;
        }
    }

    println!("task {} score {} mAP {:.1}", a.task, score_kind, report.mean_ap);
    for c in &report.classes {
        println!("  {:<24} {:>5.1}  ({} gt, {} det)", c.name, c.ap, c.num_gts, c.num_dets);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn serve(a: &ServeArgs) -> Result<ExitCode> {
    let mut config = litterkit_service::load_config(&a.dataset, &a.images, a.export.clone())?;
    config.mapping = resolve_mapping(&config.dataset, &a.mapping)?;
    let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("--host/--port: {e}")))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let (listener, local) = litterkit_service::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!("serving on http://{local}");
        litterkit_service::serve(config, listener).await?;
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}
