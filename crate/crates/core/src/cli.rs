//! Command-line entry points: synth, pretrain, train, evaluate, predict,
//! serve and user-add.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    generate_synthetic_dataset, load_dataset, save_mask_dirs, strip_patient_ids, DataError,
    Dataset, Layout, Rle, SynthParams,
};
use crate::engine::{
    build_model, diagnose, list_checkpoints, load_run, pretrain_backbone, read_run_config,
    save_backbone, train, EngineError, Mode, ModelConfig, PretrainOptions, Segmenter,
};
use crate::metrics::{evaluate, EvalConfig, MetricsError};
use crate::reporting::{
    export_loss_series, export_pr_csv, render_overlay, OverlayOptions, ReportError,
};
use crate::service::{add_user_to, AppConfig, DetectionSummary, ServiceError, Store};
use crate::types::{Image, ImageError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const PRETRAINED_FILE: &str = "pretrained_backbone.weights";
pub const LOSS_SERIES_FILE: &str = "loss_series.csv";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const PR_CURVE_FILE: &str = "pr_curve.csv";

#[derive(Debug, Parser)]
#[command(
    name = "tumorseg",
    version,
    about = "Brain-MRI tumor segmentation pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset in the mask-directory layout.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Pretrain a backbone and save it with its manifest.
    Pretrain {
        #[arg(long, default_value = "tinyconv-s")]
        backbone: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train on a dataset, writing one checkpoint per epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pretrained backbone; one is pretrained in-process when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate the latest checkpoint of a run.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnose one image and optionally write its overlay.
    Predict {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long)]
        out_overlay: Option<PathBuf>,
        /// Defaults to the run's detection score threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the REST service until interrupted.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Create a clinician account. The password is read from stdin.
    UserAdd {
        #[arg(long)]
        username: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct ConfigArgs {
    /// TOML file with optional [service] and [model] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override applied after the file, e.g. `model.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::Data(DataError::Config(_)) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Config(_) => CliError::Usage(e.to_string()),
            ServiceError::Engine(e) => e.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { n, seed, out, size } => cmd_synth(n, seed, &out, size),
        Command::Pretrain {
            backbone,
            out,
            steps,
            seed,
        } => cmd_pretrain(&backbone, &out, steps, seed),
        Command::Train {
            data,
            run_dir,
            epochs,
            seed,
            weights,
            cfg,
        } => cmd_train(&data, &run_dir, epochs, seed, weights.as_deref(), &cfg),
        Command::Evaluate { data, run_dir, out } => cmd_evaluate(&data, &run_dir, &out),
        Command::Predict {
            image,
            run_dir,
            out_overlay,
            threshold,
        } => cmd_predict(&image, &run_dir, out_overlay.as_deref(), threshold),
        Command::Serve { cfg } => cmd_serve(&cfg),
        Command::UserAdd { username, cfg } => cmd_user_add(&username, &cfg),
    }
}

/// File config, then `TUMORSEG_*` variables, then `--set` overrides.
pub fn load_app_config(args: &ConfigArgs) -> Result<AppConfig, CliError> {
    let mut app = match &args.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    app.apply_process_env()?;
    apply_overrides(app, &args.overrides)
}

pub fn apply_overrides(app: AppConfig, overrides: &[String]) -> Result<AppConfig, CliError> {
    if overrides.is_empty() {
        return Ok(app);
    }
    let mut tree = toml::Value::try_from(&app).map_err(|e| CliError::Usage(e.to_string()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {item:?} is not KEY=VALUE")))?;
        let (section, field) = key.trim().split_once('.').ok_or_else(|| {
            CliError::Usage(format!(
                "override key {key:?} must look like service.port or model.epochs"
            ))
        })?;
        // TOML literal if it parses as one, otherwise a bare string
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let table = tree
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| CliError::Usage(format!("unknown config section {section:?}")))?;
        table.insert(field.to_string(), value);
    }
    tree.try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid override: {e}")))
}

fn cmd_synth(n: usize, seed: u64, out: &Path, size: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let params = SynthParams {
        height: size,
        width: size,
        ..SynthParams::default()
    };
    let dataset = generate_synthetic_dataset(n, seed, &params)?;
    save_mask_dirs(&dataset, out)?;
    let counts = dataset.class_counts();
    println!(
        "wrote {} scans to {} ({} tumor, {} no tumor)",
        dataset.len(),
        out.display(),
        counts.tumor,
        counts.no_tumor
    );
    Ok(())
}

fn cmd_pretrain(backbone: &str, out: &Path, steps: usize, seed: u64) -> Result<(), CliError> {
    let opts = PretrainOptions {
        steps,
        seed,
        ..PretrainOptions::default()
    };
    let (bb, first, last) = pretrain_backbone(backbone, &opts)?;
    save_backbone(&bb, out)?;
    println!(
        "pretrained {backbone}: proxy loss {first:.4} -> {last:.4}, saved to {}",
        out.display()
    );
    Ok(())
}

fn load_data(root: &Path) -> Result<Dataset, CliError> {
    if !root.is_dir() {
        return Err(CliError::Runtime(format!(
            "dataset directory {} does not exist",
            root.display()
        )));
    }
    Ok(load_dataset(root, Layout::detect(root))?)
}

fn cmd_train(
    data: &Path,
    run_dir: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
    weights: Option<&Path>,
    cfg: &ConfigArgs,
) -> Result<(), CliError> {
    let mut config: ModelConfig = load_app_config(cfg)?.model;
    if let Some(e) = epochs {
        config.epochs = e;
    }
    if let Some(s) = seed {
        config.random_seed = s;
    }
    config.validate_for_training()?;
    // the model never sees patient IDs
    let (dataset, _) = strip_patient_ids(load_data(data)?);
    if !list_checkpoints(run_dir)?.is_empty() {
        return Err(EngineError::RunDirInUse(run_dir.to_path_buf()).into());
    }
    std::fs::create_dir_all(run_dir)?;
    let weights = match weights {
        Some(w) => w.to_path_buf(),
        None => {
            let path = run_dir.join(PRETRAINED_FILE);
            let opts = PretrainOptions {
                seed: config.random_seed,
                ..PretrainOptions::default()
            };
            let (bb, first, last) = pretrain_backbone(&config.backbone_id, &opts)?;
            save_backbone(&bb, &path)?;
            eprintln!(
                "pretrained {} in-process: proxy loss {first:.4} -> {last:.4}",
                config.backbone_id
            );
            path
        }
    };
    let mut model = build_model(&config, &weights, true)?;
    let history = train(&mut model, &dataset, &Dataset::default(), &config, run_dir)?;
    let series = run_dir.join(LOSS_SERIES_FILE);
    export_loss_series(&history, &series)?;
    for r in history.records() {
        emit(&format!(
            "epoch {:>3}  train_loss {:.6}",
            r.epoch_index, r.train_loss
        ));
    }
    println!(
        "trained {} epochs on {} scans; checkpoints in {}, loss series in {}",
        history.len(),
        dataset.len(),
        run_dir.display(),
        series.display()
    );
    Ok(())
}

fn load_model(run_dir: &Path) -> Result<crate::engine::SegmentationModel, CliError> {
    if list_checkpoints(run_dir)?.is_empty() {
        return Err(CliError::Runtime(format!(
            "no checkpoints in {}",
            run_dir.display()
        )));
    }
    let mut model = load_run(run_dir)?;
    model.set_mode(Mode::Inference);
    Ok(model)
}

fn cmd_evaluate(data: &Path, run_dir: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(run_dir)?;
    let dataset = load_data(data)?;
    let report = evaluate(&model, &dataset, &EvalConfig::from(model.config()))?;
    std::fs::create_dir_all(out)?;
    report.write_json(&out.join(EVAL_REPORT_FILE))?;
    export_pr_csv(&report.pr_curve, &out.join(PR_CURVE_FILE))?;
    println!("mean IoU: {:.6}", report.mean_iou);
    println!("AP@{}: {:.6}", report.config.match_iou_threshold, report.ap);
    println!(
        "tp {} fp {} fn {} over {} scans",
        report.counts.tp,
        report.counts.fp,
        report.counts.fn_,
        dataset.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictOutput {
    label: crate::data::Label,
    confidence: f64,
    threshold: f64,
    detections: Vec<DetectionSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    overlay: Option<PathBuf>,
}

fn cmd_predict(
    image: &Path,
    run_dir: &Path,
    out_overlay: Option<&Path>,
    threshold: Option<f64>,
) -> Result<(), CliError> {
    let img = Image::load(image)?;
    let model = load_model(run_dir)?;
    let threshold = threshold.unwrap_or(read_run_config(run_dir)?.detection_score_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!(
            "--threshold must be in [0, 1], got {threshold}"
        )));
    }
    let detections = model.predict(&img)?;
    let diagnosis = diagnose(&detections, threshold);
    let overlay = match out_overlay {
        Some(path) => {
            let art = render_overlay(
                "prediction",
                &img,
                &diagnosis.detections,
                &OverlayOptions::default(),
            )?;
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            art.image.save_png(path)?;
            Some(path.to_path_buf())
        }
        None => None,
    };
    let out = PredictOutput {
        label: diagnosis.label,
        confidence: diagnosis.confidence,
        threshold,
        detections: diagnosis
            .detections
            .iter()
            .map(|d| DetectionSummary {
                bbox: [d.bbox.r0, d.bbox.c0, d.bbox.r1, d.bbox.c1],
                class_label: "tumor".into(),
                score: d.score,
                mask_area: d.mask.area(),
                mask_rle: Rle::encode(&d.mask),
            })
            .collect(),
        overlay,
    };
    emit(&serde_json::to_string_pretty(&out).expect("prediction serializes"));
    Ok(())
}

/// Prints a line, tolerating a closed stdout (e.g. piped into `head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn cmd_serve(cfg: &ConfigArgs) -> Result<(), CliError> {
    let app = load_app_config(cfg)?;
    app.service.validate()?;
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::service::serve(app))?;
    Ok(())
}

fn cmd_user_add(username: &str, cfg: &ConfigArgs) -> Result<(), CliError> {
    let app = load_app_config(cfg)?;
    let mut password = String::new();
    std::io::stdin().lock().read_line(&mut password)?;
    let password = password.trim_end_matches(['\r', '\n']);
    let store = Store::open(&app.service.database_path)?;
    add_user_to(&store, username, password, chrono::Utc::now())?;
    println!("created user {username}");
    Ok(())
}
