// SPDX-License-Identifier: Apache-2.0

//! The `ria` command line.
//!
//! Every subcommand writes only under its `--out` directory and records what
//! it wrote in `manifest.json` there. Exit codes: 0 success, 2 usage,
//! 3 configuration, 4 data or input, 5 stale detection cache.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, Checkpoint};
use crate::data::{ensure_parent, generate_synthetic, read_png, save_image_folder, stratified_split, write_png};
use crate::data::{Dataset, DatasetSpec, SyntheticSpec};
use crate::detector::{self, DetectionCache, ExtractorKind, Lost};
use crate::error::{Result, RiaError};
use crate::gradcam::{self, ClassChoice, Heatmap};
use crate::loss;
use crate::model::ClassifierModel;
use crate::noise::{self, MaskSource, NoiseReport, NoiseSweep};
use crate::render::{self, Canvas};
use crate::saliency::{self, BBox, RectF};
use crate::train::{self, Objective, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DETECTIONS_FILE: &str = "detections.tsv";
pub const BOXES_FILE: &str = "boxes.jsonl";

#[derive(Parser, Debug)]
#[command(name = "ria", version, about = "Grad-CAM attention supervision with unsupervised object boxes")]
struct Cli {
    /// Log filter, e.g. `info`, `debug` or `ria_core=trace`.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic shapes dataset as an image folder.
    GenData(GenDataArgs),
    /// Run the object detector over a dataset and write the detection cache.
    Detect(DetectArgs),
    /// Train a classifier (warmup with cross-entropy, then cross-entropy plus RIA).
    Train(TrainArgs),
    /// Write Grad-CAM overlays, raw heatmaps and box records.
    Explain(ExplainArgs),
    /// Measure accuracy under foreground and background noise and compute RFS.
    EvalNoise(EvalNoiseArgs),
    /// Render baseline and RIA Grad-CAM overlays side by side.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set loss.beta=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Image folder dataset; replaces the configured dataset.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::load(self.config.as_deref(), &self.set)?;
        if let Some(path) = &self.data {
            cfg.dataset = DatasetSpec::Folder { path: path.clone() };
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    /// Image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Background texture amplitude.
    #[arg(long)]
    texture: Option<f64>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Seed expansion size.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    extractor: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum ObjectiveArg {
    Ria,
    CrossEntropy,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run into the same `--out`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total number of epochs, warmup included.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Grad-CAM binarization threshold.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Existing detection cache (written by `detect`).
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// PNG images to explain. Without any, samples of the configured dataset's validation split are used.
    #[arg(long)]
    image: Vec<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of dataset samples to explain.
    #[arg(long, default_value_t = 16)]
    limit: usize,
    /// Explain this class instead of the top-1 prediction.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Also write one JSON box record per image.
    #[arg(long)]
    boxes: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
enum SplitArg {
    Val,
    All,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum MaskSourceArg {
    GroundTruth,
    DetectorBox,
}

#[derive(Args, Debug)]
struct EvalNoiseArgs {
    /// Checkpoint to evaluate. Repeat for a comparison; the first is the reference.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    /// Display name per checkpoint, in the same order.
    #[arg(long)]
    name: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated noise levels starting at 0.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    mask_source: Option<MaskSourceArg>,
    /// Noise seed; defaults to the configured seed.
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Detection cache for the detector-box mask source.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    ria: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of validation samples shown.
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    threshold: Option<f64>,
    /// Pixel magnification of the panels.
    #[arg(long, default_value_t = 3)]
    scale: usize,
}

/// One produced file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub producer: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RiaError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn relative(dir: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(dir).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Merges `paths` into the manifest of `dir`, replacing older entries for the same files.
fn write_manifest(dir: &Path, producer: &str, config_hash: &str, paths: &[PathBuf]) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let mut entries: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    if path.exists() {
        match Manifest::read(&path) {
            Ok(m) => entries.extend(m.artifacts.into_iter().map(|e| (e.path.clone(), e))),
            Err(e) => log::warn!("replacing unreadable manifest: {e}"),
        }
    }
    for p in paths {
        let rel = relative(dir, p);
        entries.insert(
            rel.clone(),
            ManifestEntry {
                path: rel,
                producer: producer.to_string(),
                config_hash: config_hash.to_string(),
            },
        );
    }
    let manifest = Manifest {
        artifacts: entries.into_values().collect(),
    };
    ensure_parent(&path)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| RiaError::io(&path, e))?;
    Ok(path)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

fn header(producer: &str, seed: u64, config_hash: &str) {
    log::info!(
        "ria {} {producer}: seed {seed}, config hash {config_hash}, checkpoint format {}, cache format {}",
        env!("CARGO_PKG_VERSION"),
        String::from_utf8_lossy(checkpoint::MAGIC),
        detector::CACHE_MAGIC.trim_start_matches("# "),
    );
}

fn init_logging(filter: &str) {
    let _ = env_logger::Builder::new()
        .parse_filters(filter)
        .format_target(false)
        .try_init();
}

/// Parses `args` (program name first), runs the subcommand and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging(&cli.log_level);
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Detect(a) => detect(a),
        Command::Train(a) => train_cmd(a),
        Command::Explain(a) => explain(a),
        Command::EvalNoise(a) => eval_noise(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        classes: a.classes.unwrap_or(d.classes),
        per_class: a.per_class.unwrap_or(d.per_class),
        size: a.size.unwrap_or(d.size),
        seed: a.seed.unwrap_or(d.seed),
        texture: a.texture.unwrap_or(d.texture),
    };
    let hash = hash_json(&spec)?;
    header("gen-data", spec.seed, &hash);
    let ds = generate_synthetic(&spec)?;
    let mut written = save_image_folder(&ds, &a.out)?;
    let spec_path = a.out.join("dataset.toml");
    let text = toml::to_string(&spec).map_err(|e| RiaError::Serde(e.to_string()))?;
    fs::write(&spec_path, text).map_err(|e| RiaError::io(&spec_path, e))?;
    written.push(spec_path);
    log::info!("wrote {} samples in {} classes to {}", ds.len(), ds.num_classes(), a.out.display());
    write_manifest(&a.out, "gen-data", &hash, &written)?;
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(p) = a.patch_size {
        cfg.detector.patch_size = p;
    }
    if let Some(k) = a.k {
        cfg.detector.k = k;
    }
    if let Some(e) = &a.extractor {
        cfg.detector.extractor = e.parse::<ExtractorKind>()?;
    }
    cfg.validate()?;
    let hash = cfg.hash();
    header("detect", cfg.seed, &hash);
    let ds = cfg.dataset.load()?;
    let lost = Lost::new(&cfg.detector)?;
    let ids: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
    let cache = detector::precompute_cache(&ids, |i| Ok(ds.samples[i].image_f64()), &lost)?;
    let path = a.out.join(DETECTIONS_FILE);
    cache.save(&path)?;
    let fallbacks = cache.entries.values().filter(|e| e.fallback).count();
    log::info!(
        "detector fingerprint {}; {} images, {fallbacks} fallbacks",
        lost.fingerprint(),
        cache.len()
    );
    let with_gt: Vec<f64> = ds
        .samples
        .iter()
        .filter_map(|s| Some(loss::iou(&cache.get(&s.id)?.bbox, &s.bbox?)))
        .collect();
    if !with_gt.is_empty() {
        log::info!(
            "mean detector-box IoU against ground truth: {:.3}",
            with_gt.iter().sum::<f64>() / with_gt.len() as f64
        );
    }
    write_manifest(&a.out, "detect", &hash, &[path])?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.total_epochs = v;
    }
    if let Some(v) = a.warmup {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.alpha {
        cfg.loss.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = a.lambda {
        cfg.loss.lambda = v;
    }
    if let Some(v) = a.threshold {
        cfg.loss.threshold = v;
    }
    if let Some(v) = a.lr {
        cfg.optimizer.lr = Some(v);
    }
    if let Some(v) = &a.template {
        cfg.model.template = v.clone();
    }
    if let Some(v) = a.objective {
        cfg.objective = match v {
            ObjectiveArg::Ria => Objective::Ria,
            ObjectiveArg::CrossEntropy => Objective::CrossEntropy,
        };
    }
    if let Some(v) = &a.cache {
        cfg.cache_path = Some(v.clone());
    }
    cfg.validate()?;
    if let Some(p) = &cfg.cache_path {
        if cfg.objective == Objective::Ria && !p.exists() {
            return Err(RiaError::Data(format!(
                "detection cache {} does not exist; run `ria detect` or omit the cache path",
                p.display()
            )));
        }
    }
    let hash = cfg.hash();
    header("train", cfg.seed, &hash);
    let outcome = train::train(&cfg, &a.out, a.resume.as_deref())?;
    if let Some(last) = outcome.epochs.last() {
        log::info!(
            "finished: train acc {:.3}, val acc {}, val box IoU {}",
            last.train_acc,
            last.val_acc.map_or("-".into(), |v| format!("{v:.3}")),
            last.val_box_iou.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    write_manifest(&a.out, "train", &hash, &outcome.artifacts)?;
    Ok(())
}

/// File-name stem for an image id, unique within `seen`.
fn stem_for(id: &str, seen: &mut BTreeSet<String>) -> String {
    let base = id.strip_suffix(".png").unwrap_or(id).replace(['/', '\\'], "_");
    let mut name = base.clone();
    let mut n = 1;
    while !seen.insert(name.clone()) {
        n += 1;
        name = format!("{base}_{n}");
    }
    name
}

fn check_image_size(model: &ClassifierModel, id: &str, image: &ndarray::Array3<u8>) -> Result<()> {
    let size = model.config().input_size;
    let (c, h, w) = image.dim();
    if (c, h, w) != (3, size, size) {
        return Err(RiaError::Input(format!(
            "{id} is {w}x{h}, the model expects {size}x{size} RGB images"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct BoxRecord<'a> {
    image_id: &'a str,
    class_index: usize,
    hard_box: Option<BBox>,
    soft_rect: Option<RectF>,
    component_count: usize,
    score: Option<f64>,
}

fn explain(a: ExplainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let threshold = a.threshold.unwrap_or(cfg.loss.threshold);
    saliency::check_threshold(threshold)?;
    let model = checkpoint::load_model(&a.checkpoint)?;
    let hash = hash_json(&(
        cfg.hash(),
        &a.checkpoint,
        &a.image,
        a.limit,
        a.class,
        threshold,
        a.boxes,
    ))?;
    header("explain", cfg.seed, &hash);

    let mut items: Vec<(String, ndarray::Array3<u8>, Option<BBox>)> = Vec::new();
    if a.image.is_empty() {
        let ds = cfg.dataset.load()?;
        let (_, val) = stratified_split(&ds, cfg.val_fraction, cfg.seed)?;
        for &i in val.iter().take(a.limit) {
            let s = &ds.samples[i];
            items.push((s.id.clone(), s.image.clone(), s.bbox));
        }
    } else {
        for p in &a.image {
            let id = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            items.push((id, read_png(p)?, None));
        }
    }
    if let Some(c) = a.class {
        if c >= model.config().num_classes {
            return Err(RiaError::Input(format!(
                "class {c} is out of range for a {}-class model",
                model.config().num_classes
            )));
        }
    }

    let mut written = Vec::new();
    let mut seen = BTreeSet::new();
    let mut records = String::new();
    for (id, image, gt) in &items {
        check_image_size(&model, id, image)?;
        let x = image.mapv(|v| v as f64 / 255.0);
        let choice = a.class.map_or(ClassChoice::Top1, ClassChoice::Class);
        let hm = gradcam::gradcam(&model, &x, choice)?;
        let hard = saliency::hard_box(&hm.values, threshold)?;
        let soft = saliency::soft_box_values(&hm.values, cfg.loss.tau, threshold, cfg.loss.kappa)?
            .map(|sb| saliency::soft_box_to_rect(&sb));
        let stem = stem_for(id, &mut seen);

        let mut canvas = Canvas::from_image(render::overlay(image, &hm.values, 0.5));
        if let Some(b) = gt {
            canvas.draw_box(b, render::GREEN);
        }
        if let Some(sel) = &hard.selection {
            canvas.draw_box(&sel.bbox, render::RED);
        }
        let overlay_path = a.out.join("overlays").join(format!("{stem}.png"));
        write_png(&overlay_path, &canvas.pixels)?;
        let heat_path = a.out.join("heatmaps").join(format!("{stem}.heatmap"));
        gradcam::write_heatmap_file(&heat_path, &hm, id)?;
        written.push(overlay_path);
        written.push(heat_path);

        let rec = BoxRecord {
            image_id: id,
            class_index: hm.class_index,
            hard_box: hard.selection.as_ref().map(|s| s.bbox),
            soft_rect: soft,
            component_count: hard.component_count,
            score: hard.selection.as_ref().map(|s| s.score),
        };
        records.push_str(&serde_json::to_string(&rec)?);
        records.push('\n');
    }
    if a.boxes {
        let path = a.out.join(BOXES_FILE);
        ensure_parent(&path)?;
        fs::write(&path, records).map_err(|e| RiaError::io(&path, e))?;
        written.push(path);
    }
    log::info!("explained {} images into {}", items.len(), a.out.display());
    write_manifest(&a.out, "explain", &hash, &written)?;
    Ok(())
}

fn eval_indices(ds: &Dataset, cfg: &TrainConfig, split: SplitArg) -> Result<Vec<usize>> {
    Ok(match split {
        SplitArg::Val => stratified_split(ds, cfg.val_fraction, cfg.seed)?.1,
        SplitArg::All => (0..ds.len()).collect(),
    })
}

/// Model names: explicit ones, else the checkpoint stem (or its directory for `model.ckpt`).
fn model_names(checkpoints: &[PathBuf], names: &[String]) -> Result<Vec<String>> {
    if !names.is_empty() {
        if names.len() != checkpoints.len() {
            return Err(RiaError::Config(format!(
                "{} names given for {} checkpoints",
                names.len(),
                checkpoints.len()
            )));
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(RiaError::Config("model names must be unique".into()));
        }
        return Ok(names.to_vec());
    }
    let mut seen = BTreeSet::new();
    Ok(checkpoints
        .iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let parent = p
                .parent()
                .and_then(|d| d.file_name())
                .map(|s| s.to_string_lossy().into_owned());
            let base = match parent {
                Some(d) if stem == "model" => d,
                _ => stem,
            };
            stem_for(&base, &mut seen)
        })
        .collect())
}

fn eval_noise(a: EvalNoiseArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let sigmas = a.sigmas.clone().unwrap_or_else(|| noise::DEFAULT_SIGMAS.to_vec());
    noise::check_sigmas(&sigmas)?;
    let names = model_names(&a.checkpoint, &a.name)?;
    let ds = cfg.dataset.load()?;
    let mask_source = match a.mask_source {
        Some(MaskSourceArg::GroundTruth) => MaskSource::GroundTruth,
        Some(MaskSourceArg::DetectorBox) => MaskSource::DetectorBox,
        None => MaskSource::default_for(&ds),
    };
    let sweep = NoiseSweep {
        sigma_levels: sigmas,
        mask_source,
        seed: a.noise_seed.unwrap_or(cfg.seed),
    };
    let hash = hash_json(&(
        cfg.hash(),
        &a.checkpoint,
        &names,
        &sweep.sigma_levels,
        mask_source,
        sweep.seed,
        a.split,
        &a.cache,
    ))?;
    header("eval-noise", sweep.seed, &hash);
    log::info!("mask source: {mask_source}");
    let indices = eval_indices(&ds, &cfg, a.split)?;

    let mut written = Vec::new();
    let cache: Option<DetectionCache> = if mask_source == MaskSource::DetectorBox {
        let lost = Lost::new(&cfg.detector)?;
        Some(match &a.cache {
            Some(p) => detector::load_cache(p, &lost.fingerprint())?,
            None => {
                let path = a.out.join(DETECTIONS_FILE);
                let (cache, fresh) = train::load_or_build_cache(&cfg.detector, &ds, &path)?;
                if fresh {
                    written.push(path);
                }
                cache
            }
        })
    } else {
        None
    };

    let mut reports: Vec<NoiseReport> = Vec::new();
    for (path, name) in a.checkpoint.iter().zip(&names) {
        let model = checkpoint::load_model(path)?;
        let r = noise::noise_report(&model, name, &ds, &indices, &sweep, cache.as_ref())?;
        log::info!(
            "{name}: clean acc {:.3}, aggregate RFS {:.4}, fg {:?}, bg {:?}",
            r.clean_accuracy(),
            r.aggregate_rfs,
            r.a_fg,
            r.a_bg
        );
        let rpath = a.out.join(format!("noise_report_{name}.json"));
        ensure_parent(&rpath)?;
        fs::write(&rpath, serde_json::to_string_pretty(&r)? + "\n").map_err(|e| RiaError::io(&rpath, e))?;
        written.push(rpath);
        reports.push(r);
    }
    written.extend(noise::write_comparison(&reports, &a.out)?);
    write_manifest(&a.out, "eval-noise", &hash, &written)?;
    Ok(())
}

/// Up to `count` indices, cycling through classes so every class appears early.
fn spread_by_class(ds: &Dataset, indices: &[usize], count: usize) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(ds.samples[i].label).or_default().push(i);
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < count {
        let before = out.len();
        for list in by_class.values() {
            if let Some(&i) = list.get(round) {
                if out.len() < count {
                    out.push(i);
                }
            }
        }
        if out.len() == before {
            break;
        }
        round += 1;
    }
    out
}

fn scale_box(b: &BBox, s: usize) -> BBox {
    BBox {
        x_min: b.x_min * s,
        y_min: b.y_min * s,
        x_max: (b.x_max + 1) * s - 1,
        y_max: (b.y_max + 1) * s - 1,
    }
}

fn panel(image: &ndarray::Array3<u8>, hm: Option<&Heatmap>, boxes: &[(BBox, render::Rgb)], scale: usize) -> ndarray::Array3<u8> {
    let base = match hm {
        Some(h) => render::overlay(image, &h.values, 0.5),
        None => image.clone(),
    };
    let mut c = Canvas::from_image(render::upscale(&base, scale));
    for (b, color) in boxes {
        c.draw_box(&scale_box(b, scale), *color);
    }
    c.pixels
}

#[derive(Serialize)]
struct ReportSummaryRow {
    model: String,
    count: usize,
    accuracy: f64,
    ce: f64,
    box_iou: Option<f64>,
}

#[derive(Serialize)]
struct ReportSampleRow {
    image_id: String,
    label: usize,
    baseline_pred: usize,
    ria_pred: usize,
    baseline_box_iou: Option<f64>,
    ria_box_iou: Option<f64>,
}

fn report(a: ReportArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let threshold = a.threshold.unwrap_or(cfg.loss.threshold);
    saliency::check_threshold(threshold)?;
    if a.scale == 0 || a.count == 0 {
        return Err(RiaError::Config("scale and count must be positive".into()));
    }
    let hash = hash_json(&(cfg.hash(), &a.baseline, &a.ria, a.count, threshold, a.scale))?;
    header("report", cfg.seed, &hash);
    let base = Checkpoint::load(&a.baseline)?.to_model()?;
    let ria = Checkpoint::load(&a.ria)?.to_model()?;
    let ds = cfg.dataset.load()?;
    let (_, val) = stratified_split(&ds, cfg.val_fraction, cfg.seed)?;

    let mut written = Vec::new();
    let summary_path = a.out.join("report_summary.csv");
    let mut summary = Vec::new();
    for (name, model) in [("baseline", &base), ("ria", &ria)] {
        let e = train::evaluate(model, &ds, &val, threshold)?;
        log::info!(
            "{name}: val acc {:.3}, box IoU {}",
            e.accuracy,
            e.box_iou.map_or("-".into(), |v| format!("{v:.3}"))
        );
        summary.push(ReportSummaryRow {
            model: name.into(),
            count: e.count,
            accuracy: e.accuracy,
            ce: e.ce,
            box_iou: e.box_iou,
        });
    }
    train::write_csv(&summary_path, &summary)?;
    written.push(summary_path);

    let chosen = spread_by_class(&ds, &val, a.count);
    let mut rows = Vec::new();
    let mut samples = Vec::new();
    for &i in &chosen {
        let s = &ds.samples[i];
        check_image_size(&base, &s.id, &s.image)?;
        check_image_size(&ria, &s.id, &s.image)?;
        let x = s.image_f64();
        let hb = gradcam::gradcam(&base, &x, ClassChoice::Top1)?;
        let hr = gradcam::gradcam(&ria, &x, ClassChoice::Top1)?;
        let bb = saliency::hard_box(&hb.values, threshold)?.selection.map(|s| s.bbox);
        let rb = saliency::hard_box(&hr.values, threshold)?.selection.map(|s| s.bbox);
        let gt: Vec<(BBox, render::Rgb)> = s.bbox.iter().map(|b| (*b, render::GREEN)).collect();
        let with = |b: Option<BBox>| gt.iter().copied().chain(b.map(|b| (b, render::RED))).collect::<Vec<_>>();
        rows.push(render::hstack(
            &[
                panel(&s.image, None, &gt, a.scale),
                panel(&s.image, Some(&hb), &with(bb), a.scale),
                panel(&s.image, Some(&hr), &with(rb), a.scale),
            ],
            4,
        ));
        let iou = |b: Option<BBox>| s.bbox.map(|g| b.map_or(0.0, |b| loss::iou(&b, &g)));
        samples.push(ReportSampleRow {
            image_id: s.id.clone(),
            label: s.label,
            baseline_pred: hb.class_index,
            ria_pred: hr.class_index,
            baseline_box_iou: iou(bb),
            ria_box_iou: iou(rb),
        });
    }
    let samples_path = a.out.join("report_samples.csv");
    train::write_csv(&samples_path, &samples)?;
    written.push(samples_path);

    if !rows.is_empty() {
        let grid = render::vstack(&rows, 4);
        let (_, _, w) = grid.dim();
        let side = (w - 8) / 3;
        let mut title = Canvas::new(w, 20, render::WHITE);
        for (k, label) in ["IMAGE", "BASELINE", "RIA"].iter().enumerate() {
            let x = (k * (side + 4) + side / 2) as i64 - Canvas::text_width(label, 2) / 2;
            title.text(x, 4, label, 2, render::BLACK);
        }
        let figure = render::vstack(&[title.pixels, grid], 2);
        let fig_path = a.out.join("gradcam_comparison.png");
        write_png(&fig_path, &figure)?;
        written.push(fig_path);
    }
    let mut f = Vec::new();
    writeln!(
        f,
        "green: ground-truth box; red: Grad-CAM box at threshold {threshold}; columns: image, baseline, RIA"
    )
    .map_err(|e| RiaError::io(&a.out, e))?;
    let legend = a.out.join("gradcam_comparison.txt");
    ensure_parent(&legend)?;
    fs::write(&legend, f).map_err(|e| RiaError::io(&legend, e))?;
    written.push(legend);
    write_manifest(&a.out, "report", &hash, &written)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_unique_and_flat() {
        let mut seen = BTreeSet::new();
        assert_eq!(stem_for("00_disk/00001.png", &mut seen), "00_disk_00001");
        assert_eq!(stem_for("00_disk/00001.png", &mut seen), "00_disk_00001_2");
    }

    #[test]
    fn default_model_names() {
        let names = model_names(&["runs/base/model.ckpt".into(), "x/ria.ckpt".into()], &[]).unwrap();
        assert_eq!(names, ["base", "ria"]);
        let dup = model_names(&["a/model.ckpt".into(), "b/a.ckpt".into()], &[]).unwrap();
        assert_eq!(dup, ["a", "a_2"]);
        assert!(model_names(&["a.ckpt".into()], &["x".into(), "y".into()]).is_err());
    }

    #[test]
    fn manifest_merges_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        write_manifest(d, "a", "h1", &[d.join("z.txt"), d.join("sub/y.txt")]).unwrap();
        write_manifest(d, "b", "h2", &[d.join("z.txt")]).unwrap();
        let m = Manifest::read(&d.join(MANIFEST_FILE)).unwrap();
        let paths: Vec<&str> = m.artifacts.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, ["sub/y.txt", "z.txt"]);
        assert_eq!(m.artifacts[1].producer, "b");
    }

    #[test]
    fn usage_errors_exit_with_2() {
        assert_eq!(run(["ria", "frobnicate"]), 2);
        assert_eq!(run(["ria", "train", "--no-such-flag"]), 2);
        assert_eq!(run(["ria", "--help"]), 0);
    }

    #[test]
    fn class_spread_cycles_through_labels() {
        let ds = generate_synthetic(&SyntheticSpec {
            classes: 3,
            per_class: 3,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        let idx: Vec<usize> = (0..ds.len()).collect();
        let picked = spread_by_class(&ds, &idx, 4);
        let labels: Vec<usize> = picked.iter().map(|&i| ds.samples[i].label).collect();
        assert_eq!(labels, [0, 1, 2, 0]);
    }
}
