//! `litterkit` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::UsageError;

#[derive(Parser)]
#[command(name = "litterkit", version, about = "Litter dataset tooling and mask-AP evaluation")]
struct Cli {
    /// Seed for every stochastic operation.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an annotation file and list every violation.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Write dataset statistics as CSV tables.
    Stats(StatsArgs),
    /// Rewrite categories into a task taxonomy.
    Remap(RemapArgs),
    /// Write seeded train/val/test folds.
    Split(SplitArgs),
    /// Paste random annotated objects into target images.
    Transplant(TransplantArgs),
    /// Apply a chain of random photometric and geometric augmentations.
    Augment(AugmentArgs),
    /// Compute mask AP, scatter tables and confusion matrices.
    Evaluate(EvaluateArgs),
    /// Run the local transplanter service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct MappingArgs {
    /// Mapping file: `source category<TAB>target class` per line.
    #[arg(long, conflicts_with_all = ["top_k", "classless"])]
    mapping: Option<PathBuf>,
    /// Keep the K most frequent supercategories, fold the rest into --other.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, default_value = "Other Litter")]
    other: String,
    /// Map every category to a single class.
    #[arg(long, conflicts_with = "top_k")]
    classless: bool,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for the CSV files.
    #[arg(long)]
    out: PathBuf,
    /// Taxonomy for the per-class bbox size table (identity by default).
    #[command(flatten)]
    mapping: MappingArgs,
}

#[derive(Args)]
struct RemapArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    mapping: MappingArgs,
    /// Remapped annotation file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the mapping used.
    #[arg(long)]
    export_mapping: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// train,val,test
    #[arg(long, default_value = "0.8,0.1,0.1")]
    fractions: String,
    /// Directory receiving fold_<i>.txt.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TransplantArgs {
    /// Source annotations.
    #[arg(long)]
    dataset: PathBuf,
    /// Root directory of the source images.
    #[arg(long)]
    images: PathBuf,
    /// Directory of target images (PNG or JPEG).
    #[arg(long)]
    targets: PathBuf,
    #[arg(long)]
    count: usize,
    /// Output directory for composites and annotations.json.
    #[arg(long)]
    out: PathBuf,
    /// Paste with hard edges instead of the soft mask.
    #[arg(long)]
    hard: bool,
    #[arg(long, default_value_t = litterkit::mask::DEFAULT_SOFT_RADIUS)]
    radius: f64,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Comma-separated chain: blur, noise, exposure, rotate, crop.
    #[arg(long)]
    ops: String,
    /// Augmented copies per input image.
    #[arg(long, default_value_t = 1)]
    copies: usize,
    /// Crop window as WxH.
    #[arg(long, default_value = "512x512")]
    crop_size: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Ground-truth annotations.
    #[arg(long)]
    dataset: PathBuf,
    /// Detections: array of {image_id, segmentation, probs}.
    #[arg(long)]
    dets: PathBuf,
    /// taco1 (class-agnostic litter) or taco10 (ten classes).
    #[arg(long, default_value = "taco10")]
    task: String,
    /// class, litter or ratio.
    #[arg(long, default_value = "class")]
    score: String,
    /// Ratio-score denominator offset.
    #[arg(long, default_value_t = litterkit::eval::DEFAULT_EPSILON)]
    eps: f64,
    /// Mapping onto the ten task classes, when the dataset is not already remapped.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Score thresholds for confusion matrices (default 10,50 for ratio, else 0.5).
    #[arg(long)]
    confusion_at: Option<String>,
    /// Output directory for the report and CSV tables.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Export directory for the annotation file and edited images.
    #[arg(long)]
    export: Option<PathBuf>,
    #[command(flatten)]
    mapping: MappingArgs,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("LITTERKIT_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| UsageError(format!("LITTERKIT_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(UsageError("LITTERKIT_THREADS must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    init_threads()?;
    let seed = cli.seed;
    match cli.command {
        Command::Validate { dataset } => commands::validate(&dataset),
        Command::Stats(a) => commands::stats(&a),
        Command::Remap(a) => commands::remap(&a),
        Command::Split(a) => commands::split(&a, seed),
        Command::Transplant(a) => commands::transplant(&a, seed),
        Command::Augment(a) => commands::augment(&a, seed),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Serve(a) => commands::serve(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
