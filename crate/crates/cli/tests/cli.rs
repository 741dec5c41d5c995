use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use litterkit::dataset::{parse_dataset, serialize_dataset, validate, Dataset};
use litterkit::imaging::save_png;
use litterkit::synth;
use litterkit::taxonomy::{build_top_k_mapping, OTHER_LITTER};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_litterkit"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Corpus {
    dir: tempfile::TempDir,
    dataset: Dataset,
}

impl Corpus {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let dataset = synth::taco_like(n, 21);
        for (id, img) in synth::render_all(&dataset, 21) {
            let rec = dataset.image(id).unwrap();
            let path = dir.path().join("images").join(&rec.file_name);
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            save_png(&img, path).unwrap();
        }
        std::fs::write(dir.path().join("annotations.json"), serialize_dataset(&dataset)).unwrap();
        Corpus { dir, dataset }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn validate_reports_and_sets_exit_code() {
    let c = Corpus::new(5);
    let o = run(&["validate", "--dataset", p(&c.path("annotations.json"))]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("0 violations"));

    let mut bad = c.dataset.clone();
    bad.annotations[0].area = 0.0;
    let path = c.path("bad.json");
    std::fs::write(&path, serialize_dataset(&bad)).unwrap();
    let o = run(&["validate", "--dataset", p(&path)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("1 violations"));

    std::fs::write(&path, b"{\"images\": [").unwrap();
    assert_eq!(run(&["validate", "--dataset", p(&path)]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    let c = Corpus::new(12);
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["split"]).status.code(), Some(2));
    let ds = c.path("annotations.json");
    let out = c.path("splits");
    let o = run(&["split", "--dataset", p(&ds), "--out", p(&out), "--fractions", "0.5,0.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["augment", "--dataset", p(&ds), "--images", "x", "--ops", "blur,smear", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .env("LITTERKIT_THREADS", "many")
        .args(["validate", "--dataset", p(&ds)])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn split_is_seeded_and_sized() {
    let c = Corpus::new(100);
    let ds = c.path("annotations.json");
    let a = c.path("a");
    let b = c.path("b");
    for out in [&a, &b] {
        let o = run(&["--seed", "7", "split", "--dataset", p(&ds), "--k", "4", "--out", p(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let fa = read_dir_bytes(&a);
    assert_eq!(fa.len(), 4);
    assert_eq!(fa, read_dir_bytes(&b));
    for (_, bytes) in &fa {
        let text = String::from_utf8_lossy(bytes);
        let count = |part: &str| text.lines().filter(|l| l.ends_with(part)).count();
        assert_eq!((count(" train"), count(" val"), count(" test")), (80, 10, 10));
    }
    let other = c.path("c");
    run(&["--seed", "8", "split", "--dataset", p(&ds), "--k", "4", "--out", p(&other)]);
    assert_ne!(fa, read_dir_bytes(&other));
}

#[test]
fn remap_round_trips_through_the_mapping_file() {
    let c = Corpus::new(60);
    let ds = c.path("annotations.json");
    let out = c.path("taco10.json");
    let map = c.path("taco10.tsv");
    let o = run(&["remap", "--dataset", p(&ds), "--top-k", "9", "--out", p(&out), "--export-mapping", p(&map)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let remapped = parse_dataset(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(remapped.categories.len(), 10);
    assert_eq!(remapped.categories[9].name, OTHER_LITTER);
    assert!(validate(&remapped).is_clean());
    assert_eq!(std::fs::read_to_string(&map).unwrap().lines().count(), 60);

    let again = c.path("again.json");
    assert!(run(&["remap", "--dataset", p(&ds), "--mapping", p(&map), "--out", p(&again)]).status.success());
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());

    let one = c.path("taco1.json");
    assert!(run(&["remap", "--dataset", p(&ds), "--classless", "--out", p(&one)]).status.success());
    assert_eq!(parse_dataset(&std::fs::read(&one).unwrap()).unwrap().categories.len(), 1);
    assert_eq!(run(&["remap", "--dataset", p(&ds), "--out", p(&one)]).status.code(), Some(2));
}

#[test]
fn stats_writes_tables() {
    let c = Corpus::new(30);
    let out = c.path("stats");
    let o = run(&["stats", "--dataset", p(&c.path("annotations.json")), "--out", p(&out), "--top-k", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files: Vec<String> = read_dir_bytes(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        files,
        ["bbox_sizes.csv", "categories.csv", "resolutions.csv", "scene_tags.csv", "supercategories.csv"]
    );
    let cats = std::fs::read_to_string(out.join("categories.csv")).unwrap();
    assert!(cats.starts_with("category,annotations\n"));
    let total: u64 = cats.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap()).sum();
    assert_eq!(total as usize, c.dataset.annotations.len());
}

fn transplant(c: &Corpus, out: &Path, seed: &str, count: &str, threads: Option<&str>) -> Output {
    let targets = c.path("images/batch_1");
    let mut cmd = bin();
    if let Some(t) = threads {
        cmd.env("LITTERKIT_THREADS", t);
    }
    cmd.args([
        "--seed",
        seed,
        "transplant",
        "--dataset",
        p(&c.path("annotations.json")),
        "--images",
        p(&c.path("images")),
        "--targets",
        p(&targets),
        "--count",
        count,
        "--out",
        p(out),
    ])
    .output()
    .unwrap()
}

#[test]
fn transplant_is_deterministic_across_thread_counts() {
    let c = Corpus::new(12);
    let a = c.path("t1");
    let b = c.path("t2");
    assert!(transplant(&c, &a, "3", "24", None).status.success());
    assert!(transplant(&c, &b, "3", "24", Some("1")).status.success());
    let files = read_dir_bytes(&a);
    assert_eq!(files, read_dir_bytes(&b));
    let d = parse_dataset(&std::fs::read(a.join("annotations.json")).unwrap()).unwrap();
    assert_eq!(files.len(), d.images.len() + 1);
    assert!(validate(&d).is_clean());
    assert!(d.images.iter().all(|r| r.extra.contains_key("target_file")));
}

#[test]
fn augment_chain_is_seeded_and_valid() {
    let c = Corpus::new(6);
    let args = |out: &Path, seed: &str| {
        run(&[
            "--seed",
            seed,
            "augment",
            "--dataset",
            p(&c.path("annotations.json")),
            "--images",
            p(&c.path("images")),
            "--ops",
            "blur,noise,exposure,rotate,crop",
            "--crop-size",
            "96x80",
            "--copies",
            "2",
            "--out",
            p(out),
        ])
    };
    let a = c.path("a");
    let o = args(&a, "4");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_dir_bytes(&a), {
        let b = c.path("b");
        args(&b, "4");
        read_dir_bytes(&b)
    });
    let d = parse_dataset(&std::fs::read(a.join("annotations.json")).unwrap()).unwrap();
    assert_eq!(d.images.len(), 12);
    assert!(d.images.iter().all(|r| (r.width, r.height) == (96, 80)));
    assert!(validate(&d).is_clean(), "{:?}", validate(&d).violations);
    assert!(!d.annotations.is_empty());
}

/// Detections equal to the ground truth, confident in the right class.
fn perfect_detections(d: &Dataset) -> Value {
    let m = build_top_k_mapping(d, 9, OTHER_LITTER).unwrap();
    let dets: Vec<Value> = d
        .annotations
        .iter()
        .map(|a| {
            let class = m.class_of(a.category_id).unwrap() as usize;
            let mut probs = vec![0.01; 11];
            probs[class - 1] = 0.9;
            probs[10] = 0.0;
            let rest: f64 = probs.iter().sum::<f64>() - 0.9;
            probs[10] = 0.1 - rest;
            json!({ "image_id": a.image_id, "segmentation": a.segmentation, "probs": probs })
        })
        .collect();
    Value::Array(dets)
}

#[test]
fn evaluate_perfect_detections() {
    let c = Corpus::new(40);
    let dets = c.path("dets.json");
    std::fs::write(&dets, perfect_detections(&c.dataset).to_string()).unwrap();
    let ds = c.path("annotations.json");
    for (task, score) in [("taco10", "class"), ("taco10", "ratio"), ("taco1", "litter")] {
        let out = c.path(&format!("eval_{task}_{score}"));
        let o = run(&[
            "evaluate", "--dataset", p(&ds), "--dets", p(&dets), "--task", task, "--score", score, "--out", p(&out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("mAP 100.0"), "{}", stdout(&o));
        let report: Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
        assert!((report["mean_ap"].as_f64().unwrap() - 100.0).abs() < 1e-9);
        assert!(out.join("score_iou.csv").exists() && out.join("area_iou.csv").exists());
        if task == "taco10" && score == "ratio" {
            assert!(out.join("confusion_10.csv").exists());
            assert!(out.join("confusion_50.csv").exists());
        }
    }
}

#[test]
fn evaluate_rejects_unknown_images() {
    let c = Corpus::new(10);
    let mut dets = perfect_detections(&c.dataset);
    dets[0]["image_id"] = json!(777);
    let path = c.path("dets.json");
    std::fs::write(&path, dets.to_string()).unwrap();
    let o = run(&[
        "evaluate",
        "--dataset",
        p(&c.path("annotations.json")),
        "--dets",
        p(&path),
        "--out",
        p(&c.path("eval")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("777"));
}

#[test]
fn serve_fails_on_a_busy_port() {
    let c = Corpus::new(3);
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port().to_string();
    let o = run(&[
        "serve",
        "--dataset",
        p(&c.path("annotations.json")),
        "--images",
        p(&c.path("images")),
        "--port",
        &port,
    ]);
    assert_eq!(o.status.code(), Some(1));
}
