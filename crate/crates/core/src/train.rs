// SPDX-License-Identifier: Apache-2.0

//! Two-stage training: cross-entropy only for the warmup epochs, then
//! cross-entropy plus the RIA term on the top-1 class's Grad-CAM.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::data::{ensure_parent, stratified_split, Dataset, DatasetSpec};
use crate::detector::{self, DetectionCache, Lost, LostConfig};
use crate::error::{Result, RiaError};
use crate::gradcam;
use crate::loss::{self, LossConfig};
use crate::model::{argmax_rows, ClassifierModel, ModelConfig};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::saliency::{self, BBox};
use crate::tensor::{self, Tensor};

pub const STEP_METRICS_FILE: &str = "metrics_steps.csv";
pub const EPOCH_METRICS_FILE: &str = "metrics_epochs.csv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const DEFAULT_CACHE_FILE: &str = "detections.tsv";

const EVAL_BATCH: usize = 64;

fn default_template() -> String {
    "tiny-cnn-3block".into()
}
fn default_true() -> bool {
    true
}
fn default_warmup() -> usize {
    10
}
fn default_total() -> usize {
    50
}
fn default_batch() -> usize {
    32
}
fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub capture_layer: Option<String>,
    #[serde(default = "default_true")]
    pub bias: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            template: default_template(),
            capture_layer: None,
            bias: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Cross-entropy plus the RIA term after warmup.
    Ria,
    /// Cross-entropy only; the detector cache is never consulted.
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_total")]
    pub total_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    /// Detector cache; defaults to `detections.tsv` in the output directory.
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub detector: LostConfig,
}

fn default_objective() -> Objective {
    Objective::Ria
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            warmup_epochs: default_warmup(),
            total_epochs: default_total(),
            batch_size: default_batch(),
            val_fraction: default_val_fraction(),
            objective: default_objective(),
            cache_path: None,
            model: ModelSection::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerSpec::default(),
            dataset: DatasetSpec::default(),
            detector: LostConfig::default(),
        }
    }
}

/// Parses a `key=value` override. The value is read as a TOML value when
/// possible (numbers, booleans, quoted strings, arrays) and as a bare string otherwise.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| RiaError::Config(format!("override {s:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(RiaError::Config(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets a dotted key inside a TOML table, creating intermediate tables.
pub fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| RiaError::Config(format!("override key {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads an optional config file and applies `key=value` overrides on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| RiaError::io(p, e))?;
                toml::from_str::<toml::Table>(&text)?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_dotted(&mut table, &k, v)?;
        }
        let cfg: TrainConfig = toml::Value::Table(table).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(RiaError::Config(format!(
                "warmup_epochs ({}) exceeds total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(RiaError::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(RiaError::Config(format!("val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        self.loss.validate()?;
        self.optimizer.resolve(&self.model.template)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| RiaError::Serde(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_config(&self, num_classes: usize, input_size: usize) -> ModelConfig {
        ModelConfig {
            template: self.model.template.clone(),
            num_classes,
            input_channels: 3,
            input_size,
            seed: self.seed,
            capture_layer: self.model.capture_layer.clone(),
            bias: self.model.bias,
        }
    }

    /// β in effect during `epoch` (0-based).
    pub fn beta_at(&self, epoch: usize) -> f64 {
        if self.objective == Objective::CrossEntropy || epoch < self.warmup_epochs {
            0.0
        } else {
            self.loss.beta
        }
    }
}

/// One optimizer step. RIA-derived columns are empty when the term was not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub ria: f64,
    pub iou_hat: Option<f64>,
    pub diag: Option<f64>,
    pub ria_hard: Option<f64>,
    pub skip_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: String,
    pub beta: f64,
    pub train_total: f64,
    pub train_ce: f64,
    pub train_ria: f64,
    pub train_acc: f64,
    pub skip_rate: f64,
    pub val_acc: Option<f64>,
    pub val_ce: Option<f64>,
    pub val_box_iou: Option<f64>,
}

/// Accuracy, mean cross-entropy and Grad-CAM localization on a sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub accuracy: f64,
    pub ce: f64,
    /// Mean IoU between the top-1 Grad-CAM hard box and the ground-truth box,
    /// over samples that have one; a heatmap without a box scores 0.
    pub box_iou: Option<f64>,
}

/// Evaluates `model` on `indices` of `ds` with threshold `t` for the hard boxes.
pub fn evaluate(model: &ClassifierModel, ds: &Dataset, indices: &[usize], t: f64) -> Result<EvalSummary> {
    let (mut correct, mut ce_sum) = (0usize, 0.0);
    let (mut iou_sum, mut iou_n) = (0.0, 0usize);
    for chunk in indices.chunks(EVAL_BATCH) {
        let images = ds.batch(chunk)?;
        let (logits, maps) = gradcam::gradcam_with_logits(model, &images, None)?;
        let pred = argmax_rows(&logits);
        for (row, &i) in chunk.iter().enumerate() {
            let s = &ds.samples[i];
            correct += usize::from(pred[row] == s.label);
            ce_sum += row_cross_entropy(&logits, row, s.label);
            if let Some(gt) = s.bbox {
                let hb = saliency::hard_box(&maps[row].values, t)?;
                iou_sum += hb.selection.map_or(0.0, |sel| loss::iou(&sel.bbox, &gt));
                iou_n += 1;
            }
        }
    }
    let n = indices.len().max(1) as f64;
    Ok(EvalSummary {
        count: indices.len(),
        accuracy: correct as f64 / n,
        ce: ce_sum / n,
        box_iou: (iou_n > 0).then(|| iou_sum / iou_n as f64),
    })
}

fn row_cross_entropy(logits: &Array2<f64>, row: usize, label: usize) -> f64 {
    let r = logits.row(row);
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - r[label]
}

struct StepStats {
    record: StepRecord,
    correct: usize,
}

/// Everything a training run needs besides its configuration.
pub struct TrainInputs<'a> {
    pub dataset: &'a Dataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Detector boxes; required when the objective is RIA.
    pub cache: Option<&'a DetectionCache>,
}

pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Files written, in order.
    pub artifacts: Vec<PathBuf>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    inputs: TrainInputs<'a>,
    model: ClassifierModel,
    optimizer: Optimizer,
    steps: Vec<StepRecord>,
    epochs: Vec<EpochRecord>,
    start_epoch: usize,
    warned_missing: BTreeSet<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, inputs: TrainInputs<'a>) -> Result<Self> {
        cfg.validate()?;
        let ds = inputs.dataset;
        let first = ds
            .samples
            .first()
            .ok_or_else(|| RiaError::Data("dataset is empty".into()))?;
        if first.height() != first.width() {
            return Err(RiaError::Data(format!(
                "images must be square, got {}x{}",
                first.width(),
                first.height()
            )));
        }
        if inputs.train_indices.is_empty() {
            return Err(RiaError::Data("training split is empty".into()));
        }
        if cfg.objective == Objective::Ria && inputs.cache.is_none() {
            return Err(RiaError::Config("the RIA objective needs a detector cache".into()));
        }
        let model = ClassifierModel::build(&cfg.model_config(ds.num_classes(), first.height()))?;
        let optimizer = Optimizer::new(cfg.optimizer.resolve(&cfg.model.template)?);
        Ok(Trainer {
            cfg,
            inputs,
            model,
            optimizer,
            steps: Vec::new(),
            epochs: Vec::new(),
            start_epoch: 0,
            warned_missing: BTreeSet::new(),
        })
    }

    /// Continues from a checkpoint written after epoch `k`; earlier metric
    /// records are kept and later ones dropped.
    pub fn resume(&mut self, ck: &Checkpoint, steps: Vec<StepRecord>, epochs: Vec<EpochRecord>) -> Result<()> {
        if ck.model_config != *self.model.config() {
            return Err(RiaError::Checkpoint(
                "checkpoint model configuration does not match the training configuration".into(),
            ));
        }
        self.model = ck.to_model()?;
        self.optimizer = ck
            .optimizer
            .clone()
            .ok_or_else(|| RiaError::Checkpoint("checkpoint has no optimizer state".into()))?;
        self.start_epoch = ck.epoch;
        self.steps = steps.into_iter().filter(|r| r.epoch < ck.epoch).collect();
        self.epochs = epochs.into_iter().filter(|r| r.epoch < ck.epoch).collect();
        if self.steps.len() != ck.step {
            return Err(RiaError::Checkpoint(format!(
                "metric log has {} steps before epoch {}, checkpoint says {}",
                self.steps.len(),
                ck.epoch,
                ck.step
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> &ClassifierModel {
        &self.model
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order = self.inputs.train_indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        order
    }

    fn target_box(&mut self, id: &str) -> Option<BBox> {
        let entry = self.inputs.cache.and_then(|c| c.get(id)).map(|e| e.bbox);
        if entry.is_none() && self.warned_missing.insert(id.to_string()) {
            log::warn!("no detector box for {id}; its RIA term is skipped");
        }
        entry
    }

    fn step(&mut self, batch: &[usize], epoch: usize) -> Result<StepStats> {
        let ds = self.inputs.dataset;
        let images = ds.batch(batch)?;
        let labels: Vec<usize> = batch.iter().map(|&i| ds.samples[i].label).collect();
        let (h, w) = (images.dim().2, images.dim().3);
        let cfg = self.cfg.loss.clone();
        let use_ria = self.cfg.objective == Objective::Ria && epoch >= self.cfg.warmup_epochs;
        let beta = self.cfg.beta_at(epoch);
        let boxes: Vec<Option<BBox>> = if use_ria {
            batch.iter().map(|&i| self.target_box(&ds.samples[i].id)).collect()
        } else {
            Vec::new()
        };

        let params = self.model.param_tensors(true);
        let (record, correct, grads) = tensor::with_grad_mode(true, || -> Result<_> {
            let x = Tensor::constant(images.into_dyn());
            let (logits, a) = self.model.forward_graph(&x, &params);
            let logit_values = logits.value().clone().into_dimensionality().expect("2-D logits");
            let pred = argmax_rows(&logit_values);
            let correct = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let ce = logits.cross_entropy(&labels);
            let mut total = ce.mul_scalar(cfg.alpha);
            let mut record = StepRecord {
                step: self.steps.len(),
                epoch,
                total: 0.0,
                ce: ce.item(),
                ria: 0.0,
                iou_hat: None,
                diag: None,
                ria_hard: None,
                skip_rate: 0.0,
            };
            if use_ria {
                let selected = logits.select_per_row(&pred).sum_all();
                let da = tensor::grad(&selected, &[&a], true)
                    .pop()
                    .flatten()
                    .unwrap_or_else(|| Tensor::constant(ArrayD::zeros(a.value().raw_dim())));
                let (maps, peaks) = gradcam::heatmaps_graph(&a, &da, (h, w));
                let soft = loss::ria_soft_batch(&maps, Some(&peaks), &boxes, &cfg);
                total = total.add(&soft.batch_mean.mul_scalar(beta));
                record.ria = soft.batch_mean.item();
                record.skip_rate = soft.skipped.iter().filter(|s| **s).count() as f64 / batch.len() as f64;
                let (mut iou_hat, mut diag, mut hard, mut n) = (0.0, 0.0, 0.0, 0usize);
                for (i, b_od) in boxes.iter().enumerate() {
                    let Some(b_od) = b_od else { continue };
                    if soft.skipped[i] {
                        continue;
                    }
                    let values = maps.value().slice(s![i, 0, .., ..]).to_owned();
                    let Some(sel) = saliency::hard_box(&values, cfg.threshold)?.selection else { continue };
                    iou_hat += loss::iou_hat(b_od, &sel.bbox);
                    diag += loss::diag_penalty(&sel.bbox, &cfg, (w, h));
                    hard += loss::ria_hard(b_od, &sel.bbox, &cfg, (w, h));
                    n += 1;
                }
                if n > 0 {
                    let n = n as f64;
                    record.iou_hat = Some(iou_hat / n);
                    record.diag = Some(diag / n);
                    record.ria_hard = Some(hard / n);
                }
            }
            record.total = total.item();
            let leaves: Vec<&Tensor> = params.values().collect();
            let grads: BTreeMap<String, ArrayD<f64>> = params
                .keys()
                .zip(tensor::grad(&total, &leaves, false))
                .filter_map(|(k, g)| g.map(|g| (k.clone(), g.value().clone())))
                .collect();
            Ok((record, correct, grads))
        })?;
        if !record.total.is_finite() {
            return Err(RiaError::Data(format!("non-finite loss at step {}", record.step)));
        }
        self.optimizer.step(&mut self.model, &grads)?;
        Ok(StepStats { record, correct })
    }

    fn run_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let order = self.epoch_order(epoch);
        let batch_size = self.cfg.batch_size;
        let (mut total, mut ce, mut ria, mut skip, mut correct) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut n_steps = 0usize;
        for batch in order.chunks(batch_size) {
            let st = self.step(batch, epoch)?;
            total += st.record.total;
            ce += st.record.ce;
            ria += st.record.ria;
            skip += st.record.skip_rate;
            correct += st.correct;
            n_steps += 1;
            self.steps.push(st.record);
        }
        let k = n_steps.max(1) as f64;
        let (val_acc, val_ce, val_box_iou) = if self.inputs.val_indices.is_empty() {
            (None, None, None)
        } else {
            let ev = evaluate(&self.model, self.inputs.dataset, &self.inputs.val_indices, self.cfg.loss.threshold)?;
            (Some(ev.accuracy), Some(ev.ce), ev.box_iou)
        };
        let stage = match self.cfg.objective {
            Objective::CrossEntropy => "cross-entropy",
            Objective::Ria if epoch < self.cfg.warmup_epochs => "warmup",
            Objective::Ria => "ria",
        };
        Ok(EpochRecord {
            epoch,
            stage: stage.into(),
            beta: self.cfg.beta_at(epoch),
            train_total: total / k,
            train_ce: ce / k,
            train_ria: ria / k,
            train_acc: correct as f64 / order.len() as f64,
            skip_rate: skip / k,
            val_acc,
            val_ce,
            val_box_iou,
        })
    }

    fn checkpoint(&self, epochs_done: usize) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            train_config: Some(serde_json::to_value(&self.cfg).expect("config serializes")),
            epoch: epochs_done,
            step: self.steps.len(),
            params: self.model.params().clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }

    /// Runs the remaining epochs. With `out_dir`, writes a checkpoint after
    /// every epoch and keeps both metric files up to date.
    pub fn run(mut self, out_dir: Option<&Path>) -> Result<TrainOutcome> {
        let mut artifacts = Vec::new();
        for epoch in self.start_epoch..self.cfg.total_epochs {
            let started = std::time::Instant::now();
            let rec = self.run_epoch(epoch)?;
            log::info!(
                "epoch {}/{} [{}] loss {:.4} ce {:.4} ria {:.4} train acc {:.3} val acc {} val box IoU {} ({:.1}s)",
                epoch + 1,
                self.cfg.total_epochs,
                rec.stage,
                rec.train_total,
                rec.train_ce,
                rec.train_ria,
                rec.train_acc,
                rec.val_acc.map_or("-".into(), |v| format!("{v:.3}")),
                rec.val_box_iou.map_or("-".into(), |v| format!("{v:.3}")),
                started.elapsed().as_secs_f64()
            );
            self.epochs.push(rec);
            if let Some(dir) = out_dir {
                let path = dir.join("checkpoints").join(format!("epoch_{:03}.ckpt", epoch + 1));
                self.checkpoint(epoch + 1).save(&path)?;
                write_csv(&dir.join(STEP_METRICS_FILE), &self.steps)?;
                write_csv(&dir.join(EPOCH_METRICS_FILE), &self.epochs)?;
                artifacts.push(path);
            }
        }
        if let Some(dir) = out_dir {
            let final_path = dir.join(FINAL_CHECKPOINT);
            self.checkpoint(self.cfg.total_epochs).save(&final_path)?;
            write_csv(&dir.join(STEP_METRICS_FILE), &self.steps)?;
            write_csv(&dir.join(EPOCH_METRICS_FILE), &self.epochs)?;
            artifacts.push(dir.join(STEP_METRICS_FILE));
            artifacts.push(dir.join(EPOCH_METRICS_FILE));
            artifacts.push(final_path);
        }
        Ok(TrainOutcome {
            model: self.model,
            steps: self.steps,
            epochs: self.epochs,
            artifacts,
        })
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| RiaError::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> RiaError {
    RiaError::Data(format!("{}: {e}", path.display()))
}

/// Builds the detector described by `cfg` and loads its cache from `path`,
/// computing and saving it over the whole dataset when the file is absent.
/// Returns the cache and whether it was freshly written.
pub fn load_or_build_cache(cfg: &LostConfig, ds: &Dataset, path: &Path) -> Result<(DetectionCache, bool)> {
    let lost = Lost::new(cfg)?;
    if path.exists() {
        return Ok((detector::load_cache(path, &lost.fingerprint())?, false));
    }
    log::info!("building detector cache for {} images at {}", ds.len(), path.display());
    let ids: Vec<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
    let cache = detector::precompute_cache(&ids, |i| Ok(ds.samples[i].image_f64()), &lost)?;
    cache.save(path)?;
    Ok((cache, true))
}

/// Loads the dataset, splits it, prepares the detector cache and trains.
/// `resume` continues from a checkpoint inside `out_dir`'s run.
pub fn train(cfg: &TrainConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let ds = cfg.dataset.load()?;
    let (train_idx, val_idx) = stratified_split(&ds, cfg.val_fraction, cfg.seed)?;
    let mut artifacts = Vec::new();
    let cache = if cfg.objective == Objective::Ria {
        let path = cfg.cache_path.clone().unwrap_or_else(|| out_dir.join(DEFAULT_CACHE_FILE));
        let (cache, fresh) = load_or_build_cache(&cfg.detector, &ds, &path)?;
        if fresh {
            artifacts.push(path);
        }
        Some(cache)
    } else {
        None
    };
    let config_path = out_dir.join("train_config.toml");
    ensure_parent(&config_path)?;
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| RiaError::io(&config_path, e))?;
    artifacts.push(config_path);

    let mut trainer = Trainer::new(
        cfg.clone(),
        TrainInputs {
            dataset: &ds,
            train_indices: train_idx,
            val_indices: val_idx,
            cache: cache.as_ref(),
        },
    )?;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        let steps = read_csv(&out_dir.join(STEP_METRICS_FILE))?;
        let epochs = read_csv(&out_dir.join(EPOCH_METRICS_FILE))?;
        trainer.resume(&ck, steps, epochs)?;
        log::info!("resuming after epoch {} (step {})", ck.epoch, ck.step);
    }
    let mut outcome = trainer.run(Some(out_dir))?;
    artifacts.append(&mut outcome.artifacts);
    outcome.artifacts = artifacts;
    Ok(outcome)
}
