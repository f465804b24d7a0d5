//! Command-line front end. Exit codes: 0 success, 1 configuration error,
//! 2 I/O or malformed input, 3 numeric failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint;
use crate::dataset::{self, LabeledDataset};
use crate::em::{self, EpochReport, InitStrategy, TrainConfig};
use crate::error::Error;
use crate::head::{self, PooledFeatures, SoftmaxHyper};
use crate::tensor::Tensor;
use crate::viz;

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "patchmix",
    version,
    about = "Learn convolution filters with patch-mixture EM"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a filter bank with batch EM.
    Train(TrainArgs),
    /// Export image-wide pooled activations as CSV.
    Features(FeaturesArgs),
    /// Fit and evaluate a softmax classifier on pooled features.
    Classify(ClassifyArgs),
    /// Write filter images and a tiled grid.
    Viz(VizArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Idx,
    Stl10,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub images: PathBuf,
    /// Additional unlabeled images, appended to the training set.
    #[arg(long)]
    pub images2: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "idx")]
    pub format: Format,
    #[arg(long, default_value_t = 64)]
    pub filters: usize,
    #[arg(long, default_value_t = 20)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 500)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent initializations; the most likely run is kept.
    #[arg(long, default_value_t = 1)]
    pub restarts: usize,
    /// Shuffle samples into batches instead of taking them in order.
    #[arg(long)]
    pub shuffle: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub log_csv: Option<PathBuf>,
    /// Defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, value_enum, default_value = "idx")]
    pub format: Format,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub train_features: PathBuf,
    /// IDX label file or one integer label per line.
    #[arg(long)]
    pub train_labels: PathBuf,
    #[arg(long, requires = "test_labels")]
    pub test_features: Option<PathBuf>,
    #[arg(long, requires = "test_features")]
    pub test_labels: Option<PathBuf>,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint that receives the classifier section.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failed command: message plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::RecordLength { .. }
            | Error::Version(_)
            | Error::CountMismatch { .. } => EXIT_IO,
            Error::NonFinite(_) => EXIT_NUMERIC,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn with_path(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Features(a) => cmd_features(&a),
        Command::Classify(a) => cmd_classify(&a),
        Command::Viz(a) => cmd_viz(&a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load_images(path: &Path, format: Format) -> Result<LabeledDataset, Failure> {
    match format {
        Format::Idx => dataset::load_idx(path, None),
        Format::Stl10 => dataset::load_stl10_binary(path, None),
    }
    .map_err(with_path(path))
}

#[derive(Debug, Serialize)]
struct Fingerprint {
    path: PathBuf,
    bytes: u64,
}

#[derive(Debug, Serialize)]
struct EpochRecord {
    restart: usize,
    epoch: usize,
    loglik: f64,
    seconds: f64,
    starved: usize,
}

/// Everything needed to rerun and audit a training run.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    config: &'a TrainArgs,
    datasets: Vec<Fingerprint>,
    num_images: usize,
    image_shape: [usize; 3],
    seed: u64,
    epochs: Vec<EpochRecord>,
    converged: bool,
}

fn fingerprint(path: &Path) -> Result<Fingerprint, Failure> {
    let meta = fs::metadata(path).map_err(|e| with_path(path)(e.into()))?;
    Ok(Fingerprint {
        path: path.to_path_buf(),
        bytes: meta.len(),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| with_path(parent)(e.into()))?;
    }
    fs::write(path, contents).map_err(|e| with_path(path)(e.into()))
}

pub fn cmd_train(args: &TrainArgs) -> CmdResult {
    let config = TrainConfig {
        num_patches: args.filters,
        patch_size: args.patch_size,
        max_epochs: args.epochs,
        batch_size: args.batch_size,
        convergence_tol: args.tol,
        seed: args.seed,
        shuffle: args.shuffle,
        init: InitStrategy::default(),
        restarts: args.restarts,
    };
    config.validate()?;
    let mut data = load_images(&args.images, args.format)?;
    let mut datasets = vec![fingerprint(&args.images)?];
    if let Some(extra) = &args.images2 {
        data = data.concat(&load_images(extra, args.format)?)?;
        datasets.push(fingerprint(extra)?);
    }
    let (cin, h, w) = data.image_shape();
    if args.patch_size > h.min(w) {
        return Err(Failure::config(format!(
            "patch size {} does not fit inside {h}x{w} images",
            args.patch_size
        )));
    }
    println!(
        "training {} filters of {}x{}x{} on {} images",
        args.filters,
        cin,
        args.patch_size,
        args.patch_size,
        data.len()
    );
    let outcome = em::train(&data, &config, |r: &EpochReport| {
        if args.restarts > 1 && r.epoch == 1 {
            println!("restart {}", r.restart);
        }
        println!(
            "epoch {:>3}  loglik {:.6}  ({:.2}s, {} starved)",
            r.epoch, r.loglik, r.seconds, r.starved
        );
    })?;

    checkpoint::save_model(&outcome.model, &args.out).map_err(with_path(&args.out))?;

    if let Some(log) = &args.log_csv {
        let mut csv = String::from("epoch,unnormalized_marginal_loglik,seconds\n");
        for r in &outcome.epochs {
            writeln!(csv, "{},{},{}", r.epoch, r.loglik, r.seconds).unwrap();
        }
        write_file(log, csv)?;
    }

    let manifest = RunManifest {
        config: args,
        datasets,
        num_images: data.len(),
        image_shape: [cin, h, w],
        seed: args.seed,
        epochs: outcome
            .epochs
            .iter()
            .map(|r| EpochRecord {
                restart: r.restart,
                epoch: r.epoch,
                loglik: r.loglik,
                seconds: r.seconds,
                starved: r.starved,
            })
            .collect(),
        converged: outcome.converged,
    };
    let manifest_path = args.manifest.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".manifest.json");
        PathBuf::from(p)
    });
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&manifest_path, json)?;
    Ok(())
}

pub fn features_csv(features: &PooledFeatures) -> String {
    let k = features.width();
    let mut out = (0..k)
        .map(|i| format!("f{i}"))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in features.values.data().chunks_exact(k) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_features_csv(text: &str) -> Result<PooledFeatures, String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or("empty feature file")?;
    let width = header.split(',').count();
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        let start = values.len();
        for field in line.split(',') {
            let v: f32 = field
                .trim()
                .parse()
                .map_err(|_| format!("row {}: bad value {field:?}", i + 1))?;
            values.push(v);
        }
        if values.len() - start != width {
            return Err(format!(
                "row {} has {} columns, expected {width}",
                i + 1,
                values.len() - start
            ));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err("feature file has no rows".into());
    }
    Tensor::new(&[rows, width], values)
        .map(|values| PooledFeatures { values })
        .map_err(|e| e.to_string())
}

/// IDX label files, or text with one integer per line (an optional
/// non-numeric header line is skipped).
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<usize>, String> {
    if bytes.len() >= 4 && bytes[..4] == dataset::IDX_LABELS_MAGIC.to_be_bytes() {
        return dataset::parse_idx_labels(bytes).map_err(|e| e.to_string());
    }
    let text = std::str::from_utf8(bytes).map_err(|_| "labels are neither IDX nor text")?;
    let mut labels = Vec::new();
    for (i, line) in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
    {
        let field = line.split(',').next().unwrap_or("").trim();
        match field.parse::<usize>() {
            Ok(v) => labels.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(format!("line {}: bad label {field:?}", i + 1)),
        }
    }
    Ok(labels)
}

pub fn cmd_features(args: &FeaturesArgs) -> CmdResult {
    let model = checkpoint::load_model(&args.model).map_err(with_path(&args.model))?;
    let data = load_images(&args.images, args.format)?;
    let (cin, h, w) = data.image_shape();
    if cin != model.channels() {
        return Err(Failure::config(format!(
            "model expects {} channels, images have {cin}",
            model.channels()
        )));
    }
    if model.patch_size() > h.min(w) {
        return Err(Failure::config(format!(
            "model patch size {} does not fit inside {h}x{w} images",
            model.patch_size()
        )));
    }
    let features = head::pool(&model, data.images())?;
    if features.values.data().iter().any(|v| !v.is_finite()) {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: "non-finite pooled feature".into(),
        });
    }
    write_file(&args.out, features_csv(&features))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn read_features(path: &Path) -> Result<PooledFeatures, Failure> {
    parse_features_csv(&read_text(path)?)
        .map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn read_labels(path: &Path) -> Result<Vec<usize>, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    parse_labels(&bytes).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

pub fn cmd_classify(args: &ClassifyArgs) -> CmdResult {
    let train_x = read_features(&args.train_features)?;
    let train_y = read_labels(&args.train_labels)?;
    let test = match (&args.test_features, &args.test_labels) {
        (Some(f), Some(l)) => Some((read_features(f)?, read_labels(l)?)),
        _ => None,
    };
    let max_label = train_y
        .iter()
        .chain(test.iter().flat_map(|(_, y)| y.iter()))
        .copied()
        .max()
        .unwrap_or(0);
    let classes = args.classes.unwrap_or((max_label + 1).max(2));
    if let Some((_, y)) = &test {
        if let Some(&label) = y.iter().find(|&&v| v >= classes) {
            return Err(Error::LabelOutOfRange { label, classes }.into());
        }
    }
    let hyper = SoftmaxHyper {
        learning_rate: args.lr,
        epochs: args.epochs,
        l2: args.l2,
        seed: args.seed,
    };
    let clf = head::fit_softmax(&train_x, &train_y, classes, &hyper)?;
    let train_pred = head::predict(&clf, &train_x)?;
    println!(
        "train accuracy: {:.4}",
        head::accuracy(&train_pred.classes, &train_y)?
    );
    if let Some((x, y)) = &test {
        let pred = head::predict(&clf, x)?;
        println!("test accuracy: {:.4}", head::accuracy(&pred.classes, y)?);
    }
    if let Some(path) = &args.model {
        let model = checkpoint::load_model(path).map_err(with_path(path))?;
        if model.num_patches() != clf.dim() {
            return Err(Failure::config(format!(
                "model has {} filters but features have {} columns",
                model.num_patches(),
                clf.dim()
            )));
        }
        checkpoint::save(path, &model, Some(&clf)).map_err(with_path(path))?;
    }
    Ok(())
}

pub fn cmd_viz(args: &VizArgs) -> CmdResult {
    let model = checkpoint::load_model(&args.model).map_err(with_path(&args.model))?;
    let files = viz::write_filter_images(&model, &args.out).map_err(with_path(&args.out))?;
    println!("wrote {} images to {}", files.len(), args.out.display());
    Ok(())
}
