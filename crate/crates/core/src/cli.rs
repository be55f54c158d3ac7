//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input (bad flags, config or data
//! files), 2 runtime failure. Every successful command appends one JSON
//! line to `provenance.jsonl` in its output directory:
//! `{"command", "config_hash", "seed", "tool", "version"}` where
//! `config_hash` is the SHA-256 of the resolved settings as JSON.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compositor::{generate_mixed_batch, write_mixed, PasteParams, TrainingSample};
use crate::error::{Error, Result};
use crate::io::{self, ClassMap, ManifestRecord};
use crate::labels::LabelMap;
use crate::losses::{LossPreset, LossWeights};
use crate::metrics::{evaluate, streaming_eval, BinaryEvalSet, ConfusionMatrix, MetricsReport, DEFAULT_BINS};
use crate::model::{CheckpointMeta, ToyModel};
use crate::negatives::{filter_catalog, ClassMapping, NegativeCatalog, NegativePool, NegativeSample};
use crate::scoring::{score_map, ScoreKind};
use crate::shapes::{self, make_negatives, make_shapes_dataset, negative_class_mapping, ShapesConfig};
use crate::trainer::{toy_paste_params, train_toy, TrainConfig};

pub const WORKERS_ENV: &str = "ANOSEG_WORKERS";
pub const PROVENANCE_FILE: &str = "provenance.jsonl";

#[derive(Parser, Debug)]
#[command(name = "anoseg", version, about = "Dense anomaly detection toolkit for semantic segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
pub enum Command {
    /// Render the synthetic shapes dataset and its negative pool.
    MakeShapes(MakeShapesArgs),
    /// Drop negative samples that contain any excluded class.
    FilterNegatives(FilterArgs),
    /// Paste synthetic outliers into every image of a manifest.
    Generate(GenerateArgs),
    /// Train the toy segmentation model.
    TrainToy(TrainArgs),
    /// Write per-pixel anomaly score maps for a manifest.
    Score(ScoreArgs),
    /// Compute AP, FPR@95, AUROC and mIoU.
    Eval(EvalArgs),
    /// Collect evaluated runs into a CSV table and score-map previews.
    Report(ReportArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct Common {
    /// TOML config file; flags take precedence over its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: config, then $ANOSEG_WORKERS, then 1).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct MakeShapesArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct FilterArgs {
    /// Negative catalog (JSON Lines).
    #[arg(long)]
    pub catalog: PathBuf,
    /// Negative class mapping (JSON object: name -> {id, excluded}).
    #[arg(long)]
    pub mapping: PathBuf,
    /// Output catalog path.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub classes: PathBuf,
    /// Filtered negative catalog.
    #[arg(long)]
    pub catalog: PathBuf,
    /// Only records with this split tag.
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, required = true)]
    pub seed: Option<u64>,
    /// Training manifest; without it the shapes dataset is rendered in memory.
    #[arg(long, requires = "classes")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Remix with these negatives every epoch. In-memory shapes data always
    /// remixes with the built-in negative pool.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<LossPreset>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub beta3: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated score kinds (msp, ml, nll, hybrid).
    #[arg(long, value_delimiter = ',')]
    pub kinds: Option<Vec<ScoreKind>>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    /// A single score map (raw f32 with a `.json` sidecar).
    #[arg(long, requires = "labels", conflicts_with = "index")]
    pub scores: Option<PathBuf>,
    /// Ground-truth label map for `--scores`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// `scores.jsonl` written by `score`.
    #[arg(long, required_unless_present = "scores")]
    pub index: Option<PathBuf>,
    /// Class map used to validate labels.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Histogram approximation instead of an exact sort.
    #[arg(long)]
    pub streaming: bool,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Serialize)]
pub struct ReportArgs {
    /// Comma-separated run directories, each holding `eval.json`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub runs: Vec<PathBuf>,
    /// CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also render min-max normalized score maps here.
    #[arg(long)]
    pub png_dir: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

/// Config file schema. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub shapes: ShapesConfig,
    pub paste: Option<PasteParams>,
    pub train: TrainConfig,
    pub scores: Option<Vec<ScoreKind>>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    fn paste(&self) -> PasteParams {
        self.paste.clone().unwrap_or_else(toy_paste_params)
    }
}

fn workers(common: &Common, cfg: &CliConfig) -> Result<usize> {
    if let Some(w) = common.workers.or(cfg.workers) {
        return Ok(w.max(1));
    }
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map(|w| w.max(1))
            .map_err(|_| Error::InvalidParameter(format!("{WORKERS_ENV}='{v}' is not a worker count"))),
        Err(_) => Ok(1),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("input file {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("directory {} does not exist", path.display())))
    }
}

#[derive(Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config_hash: String,
    seed: Option<u64>,
    tool: &'a str,
    version: &'a str,
}

fn config_hash<T: Serialize>(settings: &T) -> String {
    let json = serde_json::to_vec(settings).expect("settings serialize");
    hex::encode(Sha256::digest(&json))
}

fn record_provenance<T: Serialize>(dir: &Path, command: &str, seed: Option<u64>, settings: &T) -> Result<()> {
    io::append_json_line(
        &dir.join(PROVENANCE_FILE),
        &Provenance {
            command,
            config_hash: config_hash(settings),
            seed,
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
        },
    )
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Parse `args` (program name first) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::MakeShapes(a) => cmd_make_shapes(&a),
        Command::FilterNegatives(a) => cmd_filter(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::TrainToy(a) => cmd_train(&a),
        Command::Score(a) => cmd_score(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn load_config(common: &Common) -> Result<CliConfig> {
    if let Some(p) = &common.config {
        require_file(p)?;
    }
    CliConfig::load(common.config.as_deref())
}

fn cmd_make_shapes(a: &MakeShapesArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let seed = a.seed.expect("clap enforces --seed");
    let ds = make_shapes_dataset(&cfg.shapes, seed)?;
    let mut records = Vec::new();
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, s) in samples.iter().enumerate() {
            let image = PathBuf::from(format!("{split}/{i:05}.png"));
            let label = PathBuf::from(format!("{split}/{i:05}_labels.png"));
            io::write_image(&a.out.join(&image), &s.image)?;
            io::write_label_map(&a.out.join(&label), &s.labels)?;
            records.push(ManifestRecord {
                image,
                label,
                split: split.into(),
            });
        }
    }
    io::write_manifest(&a.out.join("manifest.jsonl"), &records)?;
    cfg.shapes.class_map().save(&a.out.join("classes.json"))?;

    let neg_dir = a.out.join("negatives");
    let mut samples = Vec::new();
    for (name, image, labels) in make_negatives(&cfg.shapes, seed)? {
        let image_path = neg_dir.join(format!("{name}.png"));
        let label_path = neg_dir.join(format!("{name}_labels.png"));
        io::write_image(&image_path, &image)?;
        io::write_label_map(&label_path, &labels)?;
        samples.push(NegativeSample {
            image: image_path,
            label: label_path,
            present_classes: labels.ids.iter().copied().collect(),
        });
    }
    NegativeCatalog::new("negatives", samples).save(&neg_dir.join("catalog.jsonl"))?;
    io::write_json(&neg_dir.join("class_mapping.json"), &negative_class_mapping())?;
    log::info!("wrote {} train, {} test images to {}", ds.train.len(), ds.test.len(), a.out.display());
    record_provenance(&a.out, "make-shapes", Some(seed), &(&cfg.shapes, seed))
}

fn cmd_filter(a: &FilterArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    require_file(&a.catalog)?;
    require_file(&a.mapping)?;
    let catalog = NegativeCatalog::load(&a.catalog)?;
    let mapping = ClassMapping::load(&a.mapping)?;
    let excluded = mapping.excluded_ids();
    let filtered = filter_catalog(&catalog, &excluded);
    let mut abs = filtered.clone();
    for s in &mut abs.samples {
        s.image = std::path::absolute(&s.image).map_err(|e| Error::io(&s.image, e))?;
        s.label = std::path::absolute(&s.label).map_err(|e| Error::io(&s.label, e))?;
    }
    let out = std::path::absolute(&a.out).map_err(|e| Error::io(&a.out, e))?;
    abs.save(&out)?;
    log::info!("kept {} of {} negative samples", filtered.len(), catalog.len());
    record_provenance(&parent_dir(&a.out), "filter-negatives", cfg.seed, &(&mapping, &excluded))
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let seed = a.seed.expect("clap enforces --seed");
    for p in [&a.manifest, &a.classes, &a.catalog] {
        require_file(p)?;
    }
    let workers = workers(&a.common, &cfg)?;
    let params = cfg.paste();
    params.validate()?;
    let mut manifest = io::load_manifest(&a.manifest)?;
    if let Some(split) = &a.split {
        manifest = manifest.split(split);
    }
    let classmap = ClassMap::load(&a.classes)?;
    let pool = NegativePool::load(&NegativeCatalog::load(&a.catalog)?)?;
    let results = generate_mixed_batch(&manifest, &classmap, &pool, &params, seed, workers)?;
    let mut records = Vec::new();
    let mut failures = 0;
    for (i, (rec, result)) in manifest.records.iter().zip(results).enumerate() {
        match result {
            Ok(mixed) => {
                let stem = format!("{i:05}");
                write_mixed(&a.out, &stem, &mixed)?;
                records.push(ManifestRecord {
                    image: format!("{stem}.png").into(),
                    label: format!("{stem}_labels.png").into(),
                    split: rec.split.clone(),
                });
            }
            Err(e) => {
                log::error!("record {} ({}): {e}", i, rec.image.display());
                failures += 1;
            }
        }
    }
    io::write_manifest(&a.out.join("manifest.jsonl"), &records)?;
    classmap.save(&a.out.join("classes.json"))?;
    record_provenance(&a.out, "generate", Some(seed), &(&params, &a.split, seed))?;
    if failures > 0 {
        return Err(Error::Empty(format!("{failures} of {} records failed", manifest.len())));
    }
    Ok(())
}

fn load_samples(manifest_path: &Path, classes: &Path, split: &str) -> Result<(Vec<TrainingSample>, ClassMap)> {
    let manifest = io::load_manifest(manifest_path)?.split(split);
    if manifest.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} has no records with split '{split}'",
            manifest_path.display()
        )));
    }
    let classmap = ClassMap::load(classes)?;
    let samples = manifest
        .records
        .iter()
        .map(|r| {
            let image = io::read_image(&manifest.resolve(&r.image))?;
            let labels = io::read_label_map(&manifest.resolve(&r.label), &classmap)?;
            TrainingSample::new(image, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, classmap))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    let seed = a.seed.expect("clap enforces --seed");
    for p in [&a.manifest, &a.classes, &a.catalog].into_iter().flatten() {
        require_file(p)?;
    }
    let mut tc = cfg.train.clone();
    if let Some(p) = &cfg.paste {
        tc.paste = p.clone();
    }
    if let Some(p) = a.preset {
        tc.preset = p;
    }
    if a.beta1.is_some() || a.beta2.is_some() || a.beta3.is_some() {
        let base = tc.loss_weights();
        tc.weights = Some(LossWeights::new(
            a.beta1.unwrap_or(base.beta1),
            a.beta2.unwrap_or(base.beta2),
            a.beta3.unwrap_or(base.beta3),
        )?);
    }
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if let Some(lr) = a.lr {
        tc.lr = lr;
    }
    tc.model_seed = seed;
    tc.data_seed = seed;
    tc.workers = workers(&a.common, &cfg)?;
    tc.validate()?;

    let (train, num_classes, pool) = match (&a.manifest, &a.classes) {
        (Some(m), Some(c)) => {
            let (samples, classmap) = load_samples(m, c, &a.split)?;
            let pool = match &a.catalog {
                Some(cat) => Some(NegativePool::load(&NegativeCatalog::load(cat)?)?),
                None => None,
            };
            (samples, classmap.num_inliers(), pool)
        }
        _ => {
            let ds = make_shapes_dataset(&cfg.shapes, seed)?;
            let pool = match &a.catalog {
                Some(cat) => NegativePool::load(&NegativeCatalog::load(cat)?)?,
                None => shapes::negative_pool(&cfg.shapes, seed)?,
            };
            (ds.train, cfg.shapes.num_classes, Some(pool))
        }
    };
    let run = train_toy(&train, num_classes, pool.as_ref(), &tc)?;
    let meta = CheckpointMeta {
        preset: tc.preset.name().into(),
        model_seed: tc.model_seed,
        data_seed: tc.data_seed,
        epochs: tc.epochs,
    };
    run.model.save(&a.out.join("model.ckpt"), &meta)?;
    io::write_json(&a.out.join("history.json"), &run.history)?;
    let mut settings = tc.clone();
    settings.workers = 0;
    record_provenance(&a.out, "train-toy", Some(seed), &(&settings, &a.split, &cfg.shapes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreIndexRecord {
    pub image: String,
    pub kind: ScoreKind,
    /// Relative to the index file.
    pub scores: PathBuf,
    pub prediction: PathBuf,
    /// Absolute path of the ground-truth label map.
    pub labels: PathBuf,
    pub num_classes: usize,
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    require_file(&a.model)?;
    require_file(&a.manifest)?;
    let (model, meta) = ToyModel::load(&a.model)?;
    let kinds = a
        .kinds
        .clone()
        .or_else(|| cfg.scores.clone())
        .unwrap_or_else(|| ScoreKind::ALL.to_vec());
    let manifest = io::load_manifest(&a.manifest)?.split(&a.split);
    if manifest.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "{} has no records with split '{}'",
            a.manifest.display(),
            a.split
        )));
    }
    let mut index = Vec::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        let image = io::read_image(&manifest.resolve(&rec.image))?;
        let (volume, ood) = model.forward(&image)?;
        let stem = format!("{i:05}");
        let pred_rel = PathBuf::from(format!("maps/{stem}_pred.png"));
        io::write_label_map(
            &a.out.join(&pred_rel),
            &LabelMap::new(volume.height, volume.width, volume.argmax())?,
        )?;
        for &kind in &kinds {
            let map = score_map(&volume, Some(&ood), kind)?;
            let rel = PathBuf::from(format!("maps/{stem}_{}.f32", kind.name()));
            io::write_score_map(&a.out.join(&rel), &map, kind.name())?;
            index.push(ScoreIndexRecord {
                image: rec.image.display().to_string(),
                kind,
                scores: rel,
                prediction: pred_rel.clone(),
                labels: std::path::absolute(manifest.resolve(&rec.label)).map_err(|e| Error::io(&rec.label, e))?,
                num_classes: model.dims.num_classes,
            });
        }
    }
    let mut text = String::new();
    for r in &index {
        text.push_str(&serde_json::to_string(r).expect("index record serializes"));
        text.push('\n');
    }
    io::write_bytes(&a.out.join("scores.jsonl"), text.as_bytes())?;
    record_provenance(&a.out, "score", Some(meta.model_seed), &(&kinds, &a.split, &meta))
}

/// One row per score kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub score: ScoreKind,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

fn eval_set(set: &BinaryEvalSet, scores_with_labels: impl Fn() -> Vec<(f64, bool)>, a: &EvalArgs) -> Result<MetricsReport> {
    if a.streaming {
        streaming_eval(scores_with_labels(), a.bins)
    } else {
        evaluate(set)
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    if let Some(c) = &a.classes {
        require_file(c)?;
    }
    let out_dir = parent_dir(&a.out);
    if let (Some(scores), Some(labels)) = (&a.scores, &a.labels) {
        require_file(scores)?;
        require_file(labels)?;
        let (map, _) = io::read_score_map(scores)?;
        let (classmap, k) = match &a.classes {
            Some(c) => {
                let cm = ClassMap::load(c)?;
                let k = cm.num_inliers();
                (cm, k)
            }
            None => (ClassMap::inliers(254), 254),
        };
        let gt = io::read_label_map(labels, &classmap)?;
        if (gt.height, gt.width) != (map.height, map.width) {
            return Err(Error::DimensionMismatch(format!(
                "scores {}x{} vs labels {}x{}",
                map.height, map.width, gt.height, gt.width
            )));
        }
        let mut set = BinaryEvalSet::default();
        set.extend_from_map(&map.values, &gt, k)?;
        let report = eval_set(&set, || set.scores.iter().copied().zip(set.labels.iter().copied()).collect(), a)?;
        io::write_json(&a.out, &report)?;
        return record_provenance(&out_dir, "eval", cfg.seed, &(a.streaming, a.bins));
    }

    let index_path = a.index.as_ref().expect("clap enforces --index or --scores");
    require_file(index_path)?;
    let root = parent_dir(index_path);
    let text = std::fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let mut by_kind: BTreeMap<ScoreKind, BinaryEvalSet> = BTreeMap::new();
    let mut confusion: Option<ConfusionMatrix> = None;
    let mut seen_pred = std::collections::BTreeSet::new();
    let class_override = a.classes.as_deref().map(ClassMap::load).transpose()?;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreIndexRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: index_path.clone(),
            line: line_no + 1,
            message: e.to_string(),
        })?;
        let k = rec.num_classes;
        let classmap = class_override.clone().unwrap_or_else(|| ClassMap::inliers(k));
        let gt = io::read_label_map(&rec.labels, &classmap)?;
        let (map, _) = io::read_score_map(&root.join(&rec.scores))?;
        by_kind.entry(rec.kind).or_default().extend_from_map(&map.values, &gt, k)?;
        if seen_pred.insert(rec.prediction.clone()) {
            let pred = io::read_label_map(&root.join(&rec.prediction), &ClassMap::inliers(k))?;
            confusion.get_or_insert_with(|| ConfusionMatrix::new(k)).add(&pred, &gt)?;
        }
    }
    if by_kind.is_empty() {
        return Err(Error::Empty(format!("no records in {}", index_path.display())));
    }
    let iou = confusion.map(|c| c.iou()).transpose()?;
    let mut entries = Vec::new();
    for (kind, set) in &by_kind {
        let mut report = eval_set(set, || set.scores.iter().copied().zip(set.labels.iter().copied()).collect(), a)?;
        if let Some((miou, per_class)) = &iou {
            report = report.with_miou(*miou, per_class.clone());
        }
        entries.push(EvalEntry {
            score: *kind,
            metrics: report,
        });
    }
    io::write_json(&a.out, &entries)?;
    record_provenance(&out_dir, "eval", cfg.seed, &(a.streaming, a.bins, &a.classes))
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.6}")
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let cfg = load_config(&a.common)?;
    for run in &a.runs {
        require_dir(run)?;
        require_file(&run.join("eval.json"))?;
    }
    let mut csv = String::from("run,score,AP,FPR95,AUROC,mIoU\n");
    for run in &a.runs {
        let name = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        let entries: Vec<EvalEntry> = io::read_json(&run.join("eval.json"))?;
        for e in &entries {
            let m = &e.metrics;
            csv.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                e.score,
                fmt_metric(m.ap),
                fmt_metric(m.fpr_at_95),
                fmt_metric(m.auroc),
                m.miou.map(fmt_metric).unwrap_or_default()
            ));
        }
        if let Some(png_dir) = &a.png_dir {
            let index = run.join("scores.jsonl");
            if !index.is_file() {
                continue;
            }
            let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let rec: ScoreIndexRecord = serde_json::from_str(line).map_err(|e| Error::format(&index, e.to_string()))?;
                let (map, _) = io::read_score_map(&run.join(&rec.scores))?;
                let stem = rec.scores.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                io::write_score_png(&png_dir.join(&name).join(format!("{stem}.png")), &map)?;
            }
        }
    }
    io::write_bytes(&a.out, csv.as_bytes())?;
    record_provenance(&parent_dir(&a.out), "report", cfg.seed, &a.runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_sections_parse() {
        let text = r#"
            seed = 3
            workers = 2
            scores = ["ml", "hybrid"]
            [shapes]
            num_train = 10
            [train]
            preset = "sd"
            epochs = 2
            [paste]
            hist_match = false
        "#;
        let cfg: CliConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.shapes.num_train, 10);
        assert_eq!(cfg.train.preset, LossPreset::Sd);
        assert_eq!(cfg.scores, Some(vec![ScoreKind::MaxLogit, ScoreKind::Hybrid]));
        assert!(!cfg.paste().hist_match);
        assert!(toml::from_str::<CliConfig>("bogus = 1").is_err());
    }

    #[test]
    fn missing_seed_is_a_usage_error() {
        assert_eq!(run(["anoseg", "generate", "--manifest", "m", "--classes", "c", "--catalog", "k", "--out", "o"]), 1);
        assert_eq!(run(["anoseg", "no-such-command"]), 1);
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash(&(1, "a")), config_hash(&(1, "a")));
        assert_ne!(config_hash(&(1, "a")), config_hash(&(2, "a")));
    }
}
