//! Operator commands: `train`, `evaluate`, `predict`, `trace`, `gradcheck`, `synth`.
//!
//! Exit codes: 0 success, 2 configuration or input validation, 3 numeric failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HrstError, Result};
use crate::metrics::{evaluate_case, CaseReport, CohortSummary, RegionSpec};
use crate::topology::{shape_trace, Hrstnet, ModelConfig};
use crate::training::{
    finite_difference_check, load_checkpoint, resume, train, Dataset, GradcheckConfig, Sample,
    TrainConfig, BEST_CKPT, LAST_CKPT, LOG_FILE,
};
use crate::volume_io::{
    argmax_labels, generate_synthetic, normalize, read_labels, read_volume, sliding_window_infer,
    write_labels, write_volume, Dims3, SyntheticSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// File extension of the raw volume container.
pub const VOLUME_EXT: &str = "hvol";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";

const BUILD_ID: &str = match option_env!("HRST_BUILD_ID") {
    Some(id) => id,
    None => "unknown",
};

#[derive(Debug, Parser)]
#[command(name = "hrstnet", version, about = "3D Swin high-resolution segmentation engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config file; writes checkpoints, a CSV log and a manifest.
    Train(TrainArgs),
    /// Score predicted label volumes against ground truth.
    Evaluate(EvaluateArgs),
    /// Sliding-window inference with a checkpoint.
    Predict(PredictArgs),
    /// Print the shape trace of a model configuration.
    Trace(TraceArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Write synthetic image/label pairs.
    Synth(SynthArgs),
}

/// Flags that override fields of the model configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelOverrides {
    /// Number of streams (2, 3 or 4).
    #[arg(long)]
    pub variant: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, m: &mut ModelConfig) {
        if let Some(v) = self.variant {
            m.variant = v;
        }
        if let Some(c) = self.embed_dim {
            m.embed_dim = c;
        }
        if let Some(w) = self.window {
            m.window = w;
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training crop, `N` or `DxHxW`.
    #[arg(long)]
    pub roi: Option<Dims3>,
    #[arg(long)]
    pub overlap: Option<f64>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOverrides,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// `brats`, `classes`, or a TOML file with `[[regions]]` tables.
    #[arg(long, default_value = "brats")]
    pub regions: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A volume file, or a directory whose volumes are all predicted.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tile size; defaults to the training crop clipped to the volume.
    #[arg(long)]
    pub roi: Option<Dims3>,
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
    /// Also write the averaged logits under `<out>/logits/`.
    #[arg(long)]
    pub logits: bool,
    /// Skip the per-channel z-score; use when training ran with `normalize = false`.
    #[arg(long)]
    pub raw: bool,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Run config whose `[model]` table is traced; the default model otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "128")]
    pub input: Dims3,
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub model: ModelOverrides,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Writes the full report and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOverrides,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML file with synthetic-spec fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dims: Option<Dims3>,
    #[arg(long, default_value_t = 1)]
    pub cases: usize,
}

/// Where training cases come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with `images/` and `labels/` holding same-named volumes.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Generate cases in memory instead of reading them.
    pub synthetic: Option<SyntheticData>,
    /// Per-channel z-score of every image before use.
    pub normalize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: None,
            val_dir: None,
            synthetic: None,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    pub train_cases: usize,
    pub val_cases: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::default(),
            train_cases: 1,
            val_cases: 0,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HrstError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            HrstError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
            .map_err(|e| HrstError::Config(format!("{}: {e}", path.display())))
    }
}

/// One per run, written next to the run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub build_id: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            command: command.into(),
            config: serde_json::to_value(config).expect("config serialises"),
            seeds: BTreeMap::new(),
            build_id: format!("{}-{}", env!("CARGO_PKG_VERSION"), BUILD_ID),
            started: now(),
            finished: String::new(),
            outputs: Vec::new(),
        }
    }

    fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished = now();
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("manifest serialises");
        fs::write(&path, text).map_err(|e| HrstError::io(&path, e))
    }
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
            Err(HrstError::io("<stdout>", e))
        }
        _ => Ok(()),
    }
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &HrstError) -> i32 {
    match e {
        HrstError::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// Caps the global worker pool at `HRST_NUM_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("HRST_NUM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| HrstError::Config(format!("HRST_NUM_THREADS must be >= 1, got `{v}`")))?;
    // a second call in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match init_threads().and_then(|_| run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Trace(a) => cmd_trace(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HrstError::io(dir, e))
}

/// Volume files directly inside `dir`, keyed by file name, sorted.
fn list_volumes(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| HrstError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| HrstError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == VOLUME_EXT) {
            let name = path.file_name().expect("file").to_string_lossy().into_owned();
            out.insert(name, path);
        }
    }
    Ok(out)
}

fn case_name(file: &str) -> &str {
    file.strip_suffix(&format!(".{VOLUME_EXT}")).unwrap_or(file)
}

/// Case file names present in exactly one of the two listings.
fn unmatched(a: &BTreeMap<String, PathBuf>, b: &BTreeMap<String, PathBuf>) -> Vec<String> {
    let ka: BTreeSet<&String> = a.keys().collect();
    let kb: BTreeSet<&String> = b.keys().collect();
    ka.symmetric_difference(&kb).map(|s| s.to_string()).collect()
}

fn load_case_dir(dir: &Path, model: &ModelConfig, norm: bool) -> Result<Vec<Sample>> {
    let images = list_volumes(&dir.join(IMAGES_DIR))?;
    let labels = list_volumes(&dir.join(LABELS_DIR))?;
    let odd = unmatched(&images, &labels);
    if !odd.is_empty() {
        return Err(HrstError::Config(format!(
            "{}: images and labels do not pair up: {}",
            dir.display(),
            odd.join(", ")
        )));
    }
    images
        .iter()
        .map(|(name, img)| {
            let image = read_volume(img)?;
            let labels = read_labels(&labels[name], Some(model.num_classes))?;
            Ok(Sample {
                image: if norm { normalize(&image) } else { image },
                labels,
            })
        })
        .collect()
}

fn synthetic_cases(s: &SyntheticData, model: &ModelConfig, norm: bool) -> Result<Dataset> {
    let make = |i: usize| -> Result<Sample> {
        let spec = SyntheticSpec {
            seed: s.spec.seed.wrapping_add(i as u64),
            channels: model.in_channels,
            num_classes: model.num_classes,
            ..s.spec.clone()
        };
        let g = generate_synthetic(&spec)?;
        Ok(Sample {
            image: if norm { normalize(&g.image) } else { g.image },
            labels: g.labels,
        })
    };
    let n = s.train_cases;
    Ok(Dataset {
        train: (0..n).map(make).collect::<Result<_>>()?,
        val: (n..n + s.val_cases).map(make).collect::<Result<_>>()?,
    })
}

/// Builds the dataset a run config describes.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.data;
    match (&d.synthetic, &d.train_dir) {
        (Some(_), Some(_)) => Err(HrstError::Config(
            "data: set either `synthetic` or `train_dir`, not both".into(),
        )),
        (Some(s), None) => synthetic_cases(s, &cfg.model, d.normalize),
        (None, Some(dir)) => Ok(Dataset {
            train: load_case_dir(dir, &cfg.model, d.normalize)?,
            val: match &d.val_dir {
                Some(v) => load_case_dir(v, &cfg.model, d.normalize)?,
                None => Vec::new(),
            },
        }),
        (None, None) => Err(HrstError::Config(
            "data: one of `synthetic` or `train_dir` is required".into(),
        )),
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(&a.config)?;
    a.model.apply(&mut cfg.model);
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(r) = a.roi {
        cfg.train.crop = r.0;
    }
    if let Some(o) = a.overlap {
        cfg.train.overlap = o;
    }
    cfg.model.validate()?;
    cfg.train.validate(&cfg.model)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
    create_dir(&out)?;
    let data = load_dataset(&cfg)?;

    let mut manifest = RunManifest::new("train", &cfg);
    manifest.seeds.insert("train".into(), cfg.train.seed);
    if let Some(s) = &cfg.data.synthetic {
        manifest.seeds.insert("synthetic".into(), s.spec.seed);
    }
    let outcome = match &a.resume {
        Some(p) => {
            let mut ckpt = load_checkpoint(p)?;
            if ckpt.model != cfg.model {
                return Err(HrstError::Config(format!(
                    "{} was trained with a different model config",
                    p.display()
                )));
            }
            ckpt.train = Some(cfg.train.clone());
            resume(ckpt, &data, Some(&out))?
        }
        None => train(&cfg.train, &cfg.model, &data, Some(&out))?,
    };
    manifest.outputs = vec![out.join(LAST_CKPT), out.join(LOG_FILE)];
    if outcome.best.is_some() {
        manifest.outputs.push(out.join(BEST_CKPT));
    }
    manifest.finish(&out)?;
    if let Some(r) = outcome.log.last() {
        emit(&format!(
            "trained {} steps, final loss {:.5}, best val dsc {}\n",
            r.step + 1,
            r.loss,
            outcome
                .last
                .best_val_dsc
                .map_or("n/a".into(), |d| format!("{d:.4}"))
        ))?;
    }
    Ok(EXIT_OK)
}

fn parse_regions(arg: &str, classes: usize) -> Result<RegionSpec> {
    let spec = match arg {
        "brats" => RegionSpec::brats(1, 2, 3),
        "classes" => RegionSpec::per_class(classes),
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| HrstError::Config(format!("cannot read region spec {path}: {e}")))?;
            toml::from_str(&text).map_err(|e| HrstError::Config(format!("{path}: {e}")))?
        }
    };
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<i32> {
    let pred = list_volumes(&a.pred)?;
    let gt = list_volumes(&a.gt)?;
    let odd = unmatched(&pred, &gt);
    if !odd.is_empty() {
        return Err(HrstError::Config(format!(
            "unmatched cases between {} and {}: {}",
            a.pred.display(),
            a.gt.display(),
            odd.join(", ")
        )));
    }
    if pred.is_empty() {
        return Err(HrstError::Config(format!(
            "no .{VOLUME_EXT} files in {}",
            a.pred.display()
        )));
    }
    let pairs: Vec<(&String, &PathBuf)> = pred.iter().collect();
    let loaded = pairs
        .par_iter()
        .map(|(name, p)| Ok((read_labels(p, None)?, read_labels(&gt[*name], None)?)))
        .collect::<Result<Vec<_>>>()?;
    let classes = loaded
        .iter()
        .map(|(p, g)| p.num_classes().max(g.num_classes()))
        .max()
        .unwrap_or(2)
        .max(2);
    let spec = parse_regions(&a.regions, classes)?;
    let reports = pairs
        .par_iter()
        .zip(loaded.par_iter())
        .map(|((name, _), (p, g))| evaluate_case(case_name(name), p, g, &spec))
        .collect::<Result<Vec<CaseReport>>>()?;
    let cohort = CohortSummary::from_cases(&reports)?;

    create_dir(&a.out)?;
    let mut csv = reports[0].csv_header();
    csv.push('\n');
    for r in &reports {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    csv.push_str(&cohort.csv_row());
    csv.push('\n');
    let csv_path = a.out.join("per_case.csv");
    fs::write(&csv_path, &csv).map_err(|e| HrstError::io(&csv_path, e))?;
    let json_path = a.out.join("cases.json");
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "cases": reports,
        "cohort": cohort,
    }))
    .expect("reports serialise");
    fs::write(&json_path, json).map_err(|e| HrstError::io(&json_path, e))?;

    let mut manifest = RunManifest::new(
        "evaluate",
        &serde_json::json!({
            "pred": a.pred,
            "gt": a.gt,
            "regions": spec,
        }),
    );
    manifest.outputs = vec![csv_path, json_path];
    manifest.finish(&a.out)?;
    emit(&csv)?;
    Ok(EXIT_OK)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let train_cfg = ckpt.train.clone().unwrap_or_default();
    let norm = !a.raw;
    let net = Hrstnet::from_params(ckpt.model.clone(), ckpt.params)?;
    let inputs = if a.input.is_dir() {
        list_volumes(&a.input)?
    } else {
        let name = a
            .input
            .file_name()
            .ok_or_else(|| HrstError::Config(format!("bad input path {}", a.input.display())))?
            .to_string_lossy()
            .into_owned();
        BTreeMap::from([(name, a.input.clone())])
    };
    create_dir(&a.out)?;
    if a.logits {
        create_dir(&a.out.join("logits"))?;
    }
    let mut outputs = Vec::new();
    for (name, path) in &inputs {
        let raw = read_volume(path)?;
        let image = if norm { normalize(&raw) } else { raw };
        let dims = image.dims();
        let roi = match a.roi {
            Some(r) => r.0,
            None => [0, 1, 2].map(|i| train_cfg.crop[i].min(dims[i])),
        };
        if ckpt.model.check_input_dims(roi).is_err() {
            let trace = shape_trace(&ckpt.model, roi)?;
            return Err(HrstError::Config(format!(
                "{name}: roi {roi:?} is invalid: {}",
                trace.violations.join("; ")
            )));
        }
        let logits = sliding_window_infer(&net, &image, roi, a.overlap)?;
        let labels = argmax_labels(&logits)?;
        let out = a.out.join(format!("{}.{VOLUME_EXT}", case_name(name)));
        write_labels(&labels, &out)?;
        outputs.push(out);
        if a.logits {
            let lp = a.out.join("logits").join(format!("{}.{VOLUME_EXT}", case_name(name)));
            write_volume(&logits, &lp)?;
            outputs.push(lp);
        }
    }
    let mut manifest = RunManifest::new(
        "predict",
        &serde_json::json!({
            "checkpoint": a.checkpoint,
            "input": a.input,
            "roi": a.roi.map(|r| r.0),
            "overlap": a.overlap,
            "normalize": norm,
            "model": ckpt.model,
        }),
    );
    manifest.outputs = outputs;
    manifest.finish(&a.out)?;
    emit(&format!(
        "predicted {} volume(s) into {}\n",
        inputs.len(),
        a.out.display()
    ))?;
    Ok(EXIT_OK)
}

pub fn cmd_trace(a: &TraceArgs) -> Result<i32> {
    let mut model = match &a.config {
        Some(p) => RunConfig::load(p)?.model,
        None => ModelConfig::default(),
    };
    a.model.apply(&mut model);
    let trace = shape_trace(&model, a.input.0)?;
    if a.json {
        emit(&format!("{}\n", trace.to_json()))?;
    } else {
        emit(&trace.to_string())?;
    }
    Ok(if trace.violations.is_empty() {
        EXIT_OK
    } else {
        EXIT_CONFIG
    })
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let mut cfg = GradcheckConfig::default();
    a.model.apply(&mut cfg.model);
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.tolerance {
        cfg.tolerance = t;
    }
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    let mut manifest = RunManifest::new(
        "gradcheck",
        &serde_json::json!({
            "model": cfg.model,
            "tolerance": cfg.tolerance,
            "samples": cfg.samples,
            "step": cfg.step,
            "jitter": cfg.jitter,
        }),
    );
    manifest.seeds.insert("gradcheck".into(), cfg.seed);
    let report = finite_difference_check(&cfg)?;
    emit(&report.summary())?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("gradcheck.json");
        let json = serde_json::to_string_pretty(&report).expect("report serialises");
        fs::write(&path, json).map_err(|e| HrstError::io(&path, e))?;
        manifest.outputs.push(path);
        manifest.finish(out)?;
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_NUMERIC })
}

pub fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| {
                HrstError::Config(format!("cannot read synth spec {}: {e}", p.display()))
            })?;
            toml::from_str(&text)
                .map_err(|e| HrstError::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(d) = a.dims {
        spec.dims = d.0;
    }
    spec.validate()?;
    let (img_dir, lab_dir) = (a.out.join(IMAGES_DIR), a.out.join(LABELS_DIR));
    create_dir(&img_dir)?;
    create_dir(&lab_dir)?;
    let mut manifest = RunManifest::new(
        "synth",
        &serde_json::json!({ "spec": spec, "cases": a.cases }),
    );
    let mut blobs = BTreeMap::new();
    for i in 0..a.cases {
        let seed = spec.seed.wrapping_add(i as u64);
        let g = generate_synthetic(&SyntheticSpec {
            seed,
            ..spec.clone()
        })?;
        let file = format!("case_{i:03}.{VOLUME_EXT}");
        write_volume(&g.image, img_dir.join(&file))?;
        write_labels(&g.labels, lab_dir.join(&file))?;
        manifest.seeds.insert(format!("case_{i:03}"), seed);
        manifest.outputs.push(img_dir.join(&file));
        manifest.outputs.push(lab_dir.join(&file));
        blobs.insert(format!("case_{i:03}"), g.blobs);
    }
    let blob_path = a.out.join("blobs.json");
    let json = serde_json::to_string_pretty(&blobs).expect("blobs serialise");
    fs::write(&blob_path, json).map_err(|e| HrstError::io(&blob_path, e))?;
    manifest.outputs.push(blob_path);
    manifest.finish(&a.out)?;
    emit(&format!(
        "wrote {} case(s) to {}\n",
        a.cases,
        a.out.display()
    ))?;
    Ok(EXIT_OK)
}
