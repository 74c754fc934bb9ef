//! `histmatch` command-line front end.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage error (bad flags, missing
//! input files), 3 data error (unparsable or inconsistent inputs), 4 partial
//! failure (some images in a batch could not be processed).

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::augment::{augment_dataset, AugmentConfig, AugmentRun, EmitUntriggered, ReferencePool};
use crate::dataset::{
    load_fold_assignment, load_manifest, stratified_kfold, write_fold_assignment, DatasetError,
    DatasetManifest, ImageType, Label, ManifestEntry,
};
use crate::hist::{cumulative, Channel, NormalizedHistogram};
use crate::imageio;
use crate::metrics::{
    confusion_matrix, parse_predictions, AggregateReport, MetricReport, MetricsError,
    PredictionRecord,
};
use crate::pipeline::{
    mirrored_path, png_output_path, preprocess_dataset, PreprocessConfig, PreprocessReport,
};
use crate::reference::{
    build_reference_from_paths, load_reference, profile_from_str, save_reference, ReferenceError,
};
use crate::workers::default_workers;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "histmatch",
    version,
    about = "Dataset-average histogram matching toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOptions,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOptions {
    /// Seed for fold shuffling and augmentation streams.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
}

impl GlobalOptions {
    fn workers(&self) -> usize {
        self.workers.map_or_else(default_workers, |w| w as usize)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the dataset-mean reference profile.
    BuildRef(BuildRefArgs),
    /// Match every image to a reference profile, optionally resizing.
    Preprocess(PreprocessArgs),
    /// Randomly match images to members of a reference pool.
    Augment(AugmentArgs),
    /// Write a stratified k-fold assignment.
    Split(SplitArgs),
    /// Score predictions: per-class recall and balanced accuracy.
    Score(ScoreArgs),
    /// Dump a histogram or CDF as `bin,value` CSV.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct BuildRefArgs {
    /// Manifest CSV (`path,label,image_type`).
    pub manifest: PathBuf,
    /// Output profile path.
    #[arg(long)]
    pub out: PathBuf,
    /// Fold assignment CSV used to restrict the images.
    #[arg(long, requires = "train_fold")]
    pub filter_fold: Option<PathBuf>,
    /// Use the training portion for this fold: every image not in it.
    #[arg(long, requires = "filter_fold")]
    pub train_fold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    pub manifest: PathBuf,
    /// Reference profile produced by `build-ref`.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Resize outputs to N x N after matching.
    #[arg(long, value_parser = clap::value_parser!(u32).range(8..))]
    pub resize: Option<u32>,
    /// Replace existing output files.
    #[arg(long)]
    pub overwrite: bool,
    /// Also write `<out>/manifest.csv` listing the produced images.
    #[arg(long)]
    pub emit_manifest: bool,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    pub manifest: PathBuf,
    /// Manifest of reference images to draw from.
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Probability that an image is matched.
    #[arg(long, default_value_t = crate::augment::DEFAULT_PROBABILITY, value_parser = parse_probability)]
    pub prob: f64,
    /// What to do with images that are not matched.
    #[arg(long, default_value_t = EmitUntriggered::Copy)]
    pub emit_untriggered: EmitUntriggered,
    /// Decode the whole pool up front instead of on demand.
    #[arg(long)]
    pub cache_pool: bool,
    #[arg(long)]
    pub overwrite: bool,
    /// Write per-image choices (`path,triggered,pool_index,pool_path`) here.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Also write `<out>/manifest.csv` listing the produced images.
    #[arg(long)]
    pub emit_manifest: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub k: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    #[value(name = "image_type")]
    ImageType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Prediction CSVs (`path,true_label,pred_label`); two or more are
    /// aggregated as mean ± std.
    #[arg(required = true)]
    pub predictions: Vec<PathBuf>,
    /// Report subsets separately.
    #[arg(long, value_enum, requires = "manifest")]
    pub by: Option<GroupBy>,
    /// Manifest giving each path's image type.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// An image or a reference profile.
    pub input: PathBuf,
    #[arg(long, default_value_t = Channel::R)]
    pub channel: Channel,
    /// Dump the CDF instead of the normalized histogram.
    #[arg(long)]
    pub cdf: bool,
    /// Output CSV (default: stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_probability(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("{p} is outside [0, 1]"))
    }
}

/// A failed command: exit code plus message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INTERNAL,
            message: message.into(),
        }
    }
}

type CmdResult = Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(&cli.global);
    match execute(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn init_logging(global: &GlobalOptions) {
    let level = if global.quiet {
        log::LevelFilter::Error
    } else {
        match global.verbose {
            0 => log::LevelFilter::Warn,
            1 => log::LevelFilter::Info,
            _ => log::LevelFilter::Debug,
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .target(env_logger::Target::Stderr)
        .format_timestamp(None)
        .try_init();
}

pub fn execute(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::BuildRef(a) => cmd_build_ref(&cli.global, a),
        Command::Preprocess(a) => cmd_preprocess(&cli.global, a),
        Command::Augment(a) => cmd_augment(&cli.global, a),
        Command::Split(a) => cmd_split(&cli.global, a),
        Command::Score(a) => cmd_score(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::usage(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn read_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    require_file(path, "manifest")?;
    load_manifest(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn reference_failure(e: ReferenceError) -> Failure {
    match e {
        ReferenceError::Io { .. } => Failure::internal(e.to_string()),
        other => Failure::data(other.to_string()),
    }
}

fn cmd_build_ref(global: &GlobalOptions, args: &BuildRefArgs) -> CmdResult {
    let manifest = read_manifest(&args.manifest)?;
    let manifest = match (&args.filter_fold, args.train_fold) {
        (Some(fa_path), Some(fold)) => {
            require_file(fa_path, "fold assignment")?;
            let fa = load_fold_assignment(fa_path)
                .map_err(|e| Failure::data(format!("{}: {e}", fa_path.display())))?;
            if fold >= fa.k() {
                return Err(Failure::usage(format!(
                    "--train-fold {fold} is out of range for {} folds",
                    fa.k()
                )));
            }
            let lookup = fa.lookup();
            if let Some(missing) = manifest
                .entries()
                .iter()
                .find(|e| !lookup.contains_key(e.path.as_str()))
            {
                return Err(Failure::data(format!(
                    "{} has no fold in {}",
                    missing.path,
                    fa_path.display()
                )));
            }
            manifest.filter(|e| lookup[e.path.as_str()] != fold)
        }
        _ => manifest,
    };
    let paths: Vec<PathBuf> = manifest
        .entries()
        .iter()
        .map(|e| manifest.resolve(e))
        .collect();
    log::info!("building reference from {} images", paths.len());
    let profile =
        build_reference_from_paths(&paths, global.workers()).map_err(reference_failure)?;
    save_reference(&profile, &args.out).map_err(reference_failure)?;
    log::info!("wrote {}", args.out.display());
    Ok(EXIT_OK)
}

fn summarize(report: &PreprocessReport, total: usize) -> i32 {
    for (path, err) in &report.failed {
        eprintln!("failed: {path}: {err}");
    }
    eprintln!(
        "{} of {total} processed, {} written, {} failed ({:.2}s)",
        report.processed,
        report.written,
        report.failed.len(),
        report.wall_time
    );
    if report.failed.is_empty() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    }
}

fn write_output_manifest(out_dir: &Path, entries: Vec<ManifestEntry>) -> Result<(), Failure> {
    let path = out_dir.join("manifest.csv");
    let manifest = DatasetManifest::new(entries)
        .map_err(|e| Failure::data(format!("output manifest: {e}")))?;
    let file =
        File::create(&path).map_err(|e| Failure::internal(format!("{}: {e}", path.display())))?;
    manifest
        .write_csv(BufWriter::new(file))
        .map_err(|e| Failure::internal(e.to_string()))
}

fn relative_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn failed_set(report: &PreprocessReport) -> std::collections::HashSet<&str> {
    report.failed.iter().map(|(p, _)| p.as_str()).collect()
}

fn cmd_preprocess(global: &GlobalOptions, args: &PreprocessArgs) -> CmdResult {
    let manifest = read_manifest(&args.manifest)?;
    require_file(&args.reference, "reference profile")?;
    let reference = load_reference(&args.reference).map_err(reference_failure)?;
    let cfg = PreprocessConfig {
        reference,
        resize: args.resize,
        output_dir: args.out.clone(),
        overwrite: args.overwrite,
        workers: global.workers(),
    };
    let report = preprocess_dataset(&manifest, &cfg).map_err(|e| Failure::data(e.to_string()))?;
    if args.emit_manifest {
        let failed = failed_set(&report);
        let entries = manifest
            .entries()
            .iter()
            .filter(|e| !failed.contains(e.path.as_str()))
            .map(|e| ManifestEntry {
                path: relative_string(&png_output_path(Path::new(""), &e.path)),
                ..e.clone()
            })
            .collect();
        write_output_manifest(&args.out, entries)?;
    }
    Ok(summarize(&report, manifest.len()))
}

fn cmd_augment(global: &GlobalOptions, args: &AugmentArgs) -> CmdResult {
    let manifest = read_manifest(&args.manifest)?;
    let pool_manifest = read_manifest(&args.pool)?;
    let pool_paths: Vec<PathBuf> = pool_manifest
        .entries()
        .iter()
        .map(|e| pool_manifest.resolve(e))
        .collect();
    if args.prob > 0.0 && pool_paths.is_empty() {
        return Err(Failure::data(format!(
            "pool manifest {} is empty",
            args.pool.display()
        )));
    }
    let mut pool = ReferencePool::from_paths(pool_paths);
    if args.cache_pool {
        pool = pool
            .cached(global.workers())
            .map_err(|e| Failure::data(e.to_string()))?;
    }
    let cfg = AugmentConfig {
        probability: args.prob,
        seed: global.seed,
        pool,
    };
    let run = AugmentRun {
        output_dir: args.out.clone(),
        overwrite: args.overwrite,
        workers: global.workers(),
        emit_untriggered: args.emit_untriggered,
    };
    let (report, log) =
        augment_dataset(&manifest, &cfg, &run).map_err(|e| Failure::data(e.to_string()))?;
    if let Some(log_path) = &args.log {
        let file = File::create(log_path)
            .map_err(|e| Failure::internal(format!("{}: {e}", log_path.display())))?;
        let names: Vec<&str> = pool_manifest
            .entries()
            .iter()
            .map(|e| e.path.as_str())
            .collect();
        log.write_csv(BufWriter::new(file), &names)
            .map_err(|e| Failure::internal(format!("{}: {e}", log_path.display())))?;
    }
    if args.emit_manifest {
        let failed = failed_set(&report);
        let entries = manifest
            .entries()
            .iter()
            .zip(&log.choices)
            .filter(|(e, _)| !failed.contains(e.path.as_str()))
            .filter_map(|(e, (_, choice))| {
                let rel = match (choice, args.emit_untriggered) {
                    (Some(_), _) => png_output_path(Path::new(""), &e.path),
                    (None, EmitUntriggered::Copy) => mirrored_path(Path::new(""), &e.path),
                    (None, EmitUntriggered::Skip) => return None,
                };
                Some(ManifestEntry {
                    path: relative_string(&rel),
                    ..e.clone()
                })
            })
            .collect();
        write_output_manifest(&args.out, entries)?;
    }
    eprintln!("{} triggered", report.triggered);
    Ok(summarize(&report, manifest.len()))
}

fn cmd_split(global: &GlobalOptions, args: &SplitArgs) -> CmdResult {
    let manifest = read_manifest(&args.manifest)?;
    let fa = stratified_kfold(&manifest, args.k as usize, global.seed).map_err(|e| match e {
        DatasetError::InvalidK(_) => Failure::usage(e.to_string()),
        other => Failure::data(other.to_string()),
    })?;
    let file = File::create(&args.out)
        .map_err(|e| Failure::internal(format!("{}: {e}", args.out.display())))?;
    write_fold_assignment(&fa, BufWriter::new(file))
        .map_err(|e| Failure::internal(e.to_string()))?;
    log::info!("fold sizes: {:?}", fa.fold_sizes());
    Ok(EXIT_OK)
}

fn metrics_failure(path: &Path, e: MetricsError) -> Failure {
    Failure::data(format!("{}: {e}", path.display()))
}

fn report_for(path: &Path, records: &[PredictionRecord]) -> Result<MetricReport, Failure> {
    let cm = confusion_matrix(records, &Label::ALL).map_err(|e| metrics_failure(path, e))?;
    MetricReport::from_matrix(&cm).map_err(|e| metrics_failure(path, e))
}

enum Rendered {
    Single(MetricReport),
    Aggregate(AggregateReport),
}

impl Rendered {
    fn table(&self) -> String {
        match self {
            Rendered::Single(r) => r.to_table(),
            Rendered::Aggregate(a) => a.to_table(),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Rendered::Single(r) => r.to_json(),
            Rendered::Aggregate(a) => a.to_json(),
        }
    }
}

fn render(runs: &[(PathBuf, Vec<PredictionRecord>)]) -> Result<Rendered, Failure> {
    let reports = runs
        .iter()
        .map(|(p, recs)| report_for(p, recs))
        .collect::<Result<Vec<_>, _>>()?;
    if reports.len() == 1 {
        return Ok(Rendered::Single(
            reports.into_iter().next().expect("one report"),
        ));
    }
    AggregateReport::from_reports(&reports)
        .map(Rendered::Aggregate)
        .map_err(|e| Failure::data(e.to_string()))
}

fn cmd_score(args: &ScoreArgs) -> CmdResult {
    let mut runs = Vec::with_capacity(args.predictions.len());
    for path in &args.predictions {
        require_file(path, "predictions file")?;
        let file =
            File::open(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let records = parse_predictions(file).map_err(|e| metrics_failure(path, e))?;
        runs.push((path.clone(), records));
    }

    let mut sections: Vec<(Option<ImageType>, Rendered)> = Vec::new();
    match args.by {
        None => sections.push((None, render(&runs)?)),
        Some(GroupBy::ImageType) => {
            let manifest_path = args.manifest.as_ref().expect("clap enforces --manifest");
            let manifest = read_manifest(manifest_path)?;
            let types: std::collections::HashMap<&str, ImageType> = manifest
                .entries()
                .iter()
                .map(|e| (e.path.as_str(), e.image_type))
                .collect();
            for (path, records) in &runs {
                if let Some(r) = records
                    .iter()
                    .find(|r| !types.contains_key(r.path.as_str()))
                {
                    return Err(Failure::data(format!(
                        "{}: `{}` is not in manifest {}",
                        path.display(),
                        r.path,
                        manifest_path.display()
                    )));
                }
            }
            for t in [ImageType::Canopy, ImageType::LeafFocused] {
                let subset: Vec<(PathBuf, Vec<PredictionRecord>)> = runs
                    .iter()
                    .map(|(p, recs)| {
                        let keep = recs
                            .iter()
                            .filter(|r| types[r.path.as_str()] == t)
                            .cloned()
                            .collect();
                        (p.clone(), keep)
                    })
                    .collect();
                if subset.iter().all(|(_, recs)| recs.is_empty()) {
                    continue;
                }
                sections.push((Some(t), render(&subset)?));
            }
        }
    }

    let stdout = io::stdout();
    let mut out = stdout.lock();
    let written = match args.format {
        ReportFormat::Table => sections.iter().try_for_each(|(t, r)| {
            if let Some(t) = t {
                writeln!(out, "[{t}]")?;
            }
            write!(out, "{}", r.table())
        }),
        ReportFormat::Json => {
            let value = match sections.as_slice() {
                [(None, r)] => r.json(),
                _ => serde_json::Value::Object(
                    sections
                        .iter()
                        .map(|(t, r)| (t.map_or("all".to_string(), |t| t.to_string()), r.json()))
                        .collect(),
                ),
            };
            writeln!(
                out,
                "{}",
                serde_json::to_string_pretty(&value).expect("json value serializes")
            )
        }
    };
    written.map_err(|e| Failure::internal(format!("stdout: {e}")))?;
    Ok(EXIT_OK)
}

fn looks_like_profile(path: &Path, bytes: &[u8]) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"))
        || bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{')
}

fn cmd_inspect(args: &InspectArgs) -> CmdResult {
    require_file(&args.input, "input")?;
    let bytes = fs::read(&args.input)
        .map_err(|e| Failure::usage(format!("{}: {e}", args.input.display())))?;
    let hist: NormalizedHistogram = if looks_like_profile(&args.input, &bytes) {
        let text = String::from_utf8(bytes)
            .map_err(|_| Failure::data(format!("{} is not UTF-8", args.input.display())))?;
        let profile = profile_from_str(&text)
            .map_err(|e| Failure::data(format!("{}: {e}", args.input.display())))?;
        profile.channel(args.channel).clone()
    } else {
        let img =
            imageio::decode_bytes(&bytes, &args.input).map_err(|e| Failure::data(e.to_string()))?;
        let hists = crate::reference::image_normalized_histograms(&img)
            .map_err(|e| Failure::data(e.to_string()))?;
        hists[args.channel.index()].clone()
    };
    let sink: Box<dyn Write> = match &args.out {
        Some(p) => {
            Box::new(BufWriter::new(File::create(p).map_err(|e| {
                Failure::internal(format!("{}: {e}", p.display()))
            })?))
        }
        None => Box::new(io::stdout().lock()),
    };
    let written = if args.cdf {
        cumulative(&hist).write_csv(sink)
    } else {
        hist.write_csv(sink)
    };
    written.map_err(|e| Failure::internal(e.to_string()))?;
    Ok(EXIT_OK)
}
