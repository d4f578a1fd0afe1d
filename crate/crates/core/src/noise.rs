// SPDX-License-Identifier: Apache-2.0

//! Accuracy under region-restricted Gaussian noise and the relative
//! foreground sensitivity (RFS) score.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_png, Dataset};
use crate::detector::DetectionCache;
use crate::error::{Result, RiaError};
use crate::model::ClassifierModel;
use crate::render::{self, Series};
use crate::train::write_csv;

pub const DEFAULT_SIGMAS: [f64; 5] = [0.0, 0.05, 0.1, 0.2, 0.4];
pub const ACCURACY_FILE: &str = "noise_accuracy.csv";
pub const RFS_BY_SIGMA_FILE: &str = "rfs_by_sigma.csv";
pub const RFS_SUMMARY_FILE: &str = "rfs_summary.csv";

const BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Foreground,
    Background,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Foreground => "foreground",
            Region::Background => "background",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSource {
    GroundTruth,
    DetectorBox,
}

impl MaskSource {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskSource::GroundTruth => "ground-truth",
            MaskSource::DetectorBox => "detector-box",
        }
    }

    /// Ground-truth masks when every sample has one, detector boxes otherwise.
    pub fn default_for(ds: &Dataset) -> Self {
        if !ds.is_empty() && ds.samples.iter().all(|s| s.mask.is_some()) {
            MaskSource::GroundTruth
        } else {
            MaskSource::DetectorBox
        }
    }
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskSource {
    type Err = RiaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground-truth" => Ok(MaskSource::GroundTruth),
            "detector-box" => Ok(MaskSource::DetectorBox),
            other => Err(RiaError::Config(format!(
                "unknown mask source {other:?} (expected ground-truth or detector-box)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub region: Region,
    pub sigma_levels: Vec<f64>,
    pub mask_source: MaskSource,
    pub seed: u64,
}

/// Checks that the grid is ascending, non-negative, finite and starts at 0.
pub fn check_sigmas(sigmas: &[f64]) -> Result<()> {
    if sigmas.first() != Some(&0.0) {
        return Err(RiaError::Config("sigma levels must start with 0".into()));
    }
    if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(RiaError::Config(format!("sigma levels must be finite and non-negative: {sigmas:?}")));
    }
    if sigmas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(RiaError::Config(format!("sigma levels must be strictly ascending: {sigmas:?}")));
    }
    Ok(())
}

/// SplitMix64 step, used to derive independent per-sample seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one (sigma level, sample) pair.
pub fn derive_seed(seed: u64, sigma_index: usize, sample_index: usize) -> u64 {
    mix(mix(mix(seed) ^ sigma_index as u64) ^ sample_index as u64)
}

/// Adds i.i.d. `N(0, sigma²)` noise to every channel of the pixels in `region`
/// and clips to `[0, 1]`. Pixels outside the region are copied unchanged.
pub fn add_region_noise(
    image: &Array3<f64>,
    mask: &Array2<bool>,
    sigma: f64,
    region: Region,
    seed: u64,
) -> Result<Array3<f64>> {
    let (_, h, w) = image.dim();
    if mask.dim() != (h, w) {
        return Err(RiaError::Input(format!(
            "mask is {:?} but the image plane is {:?}",
            mask.dim(),
            (h, w)
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(RiaError::Input(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    let mut out = image.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let inside = region == Region::Foreground;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for mut plane in out.axis_iter_mut(Axis(0)) {
        for ((y, x), v) in plane.indexed_iter_mut() {
            if mask[[y, x]] == inside {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + sigma * z).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Foreground masks for `indices`, from the dataset or from cached detections.
pub fn region_masks(
    ds: &Dataset,
    indices: &[usize],
    source: MaskSource,
    detections: Option<&DetectionCache>,
) -> Result<Vec<Array2<bool>>> {
    indices
        .iter()
        .map(|&i| {
            let s = &ds.samples[i];
            match source {
                MaskSource::GroundTruth => s.mask.clone().ok_or_else(|| {
                    RiaError::Config(format!(
                        "sample {} has no ground-truth mask; use the detector-box mask source",
                        s.id
                    ))
                }),
                MaskSource::DetectorBox => {
                    let cache = detections.ok_or_else(|| {
                        RiaError::Config("the detector-box mask source needs a detection cache".into())
                    })?;
                    let entry = cache
                        .get(&s.id)
                        .ok_or_else(|| RiaError::Data(format!("no cached detection for {}", s.id)))?;
                    Ok(entry.bbox.rasterize(s.width(), s.height()))
                }
            }
        })
        .collect()
}

/// Accuracy at each sigma level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub region: Region,
    pub sigmas: Vec<f64>,
    pub accuracy: Vec<f64>,
}

fn correct_count(
    model: &ClassifierModel,
    ds: &Dataset,
    indices: &[usize],
    masks: &[Array2<bool>],
    sigma_index: usize,
    sigma: f64,
    spec: &NoiseSpec,
) -> Result<usize> {
    let mut correct = 0;
    for (chunk, mchunk) in indices.chunks(BATCH).zip(masks.chunks(BATCH)) {
        let first = &ds.samples[chunk[0]];
        let mut batch = Array4::zeros((chunk.len(), 3, first.height(), first.width()));
        for (row, (&i, mask)) in chunk.iter().zip(mchunk).enumerate() {
            let img = ds.samples[i].image_f64();
            let seed = derive_seed(spec.seed, sigma_index, i);
            let noisy = add_region_noise(&img, mask, sigma, spec.region, seed)?;
            batch.index_axis_mut(Axis(0), row).assign(&noisy);
        }
        let pred = model.predict(&batch)?;
        correct += chunk.iter().zip(pred).filter(|(&i, p)| ds.samples[i].label == *p).count();
    }
    Ok(correct)
}

/// Classifies every sample of `indices` once per sigma level after corrupting
/// `spec.region`. Work is split across threads; results do not depend on the split.
pub fn accuracy_under_noise(
    model: &ClassifierModel,
    ds: &Dataset,
    indices: &[usize],
    spec: &NoiseSpec,
    detections: Option<&DetectionCache>,
) -> Result<AccuracyCurve> {
    check_sigmas(&spec.sigma_levels)?;
    if indices.is_empty() {
        return Err(RiaError::Input("no samples to evaluate".into()));
    }
    let masks = region_masks(ds, indices, spec.mask_source, detections)?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = indices.len().div_ceil(threads).max(1);
    let mut accuracy = Vec::with_capacity(spec.sigma_levels.len());
    for (k, &sigma) in spec.sigma_levels.iter().enumerate() {
        let parts: Vec<Result<usize>> = std::thread::scope(|s| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .zip(masks.chunks(chunk))
                .map(|(ic, mc)| s.spawn(move || correct_count(model, ds, ic, mc, k, sigma, spec)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("noise worker panicked")).collect()
        });
        let mut correct = 0;
        for p in parts {
            correct += p?;
        }
        accuracy.push(correct as f64 / indices.len() as f64);
    }
    Ok(AccuracyCurve {
        region: spec.region,
        sigmas: spec.sigma_levels.clone(),
        accuracy,
    })
}

/// Relative foreground sensitivity: background accuracy minus foreground accuracy.
pub fn rfs(a_bg: f64, a_fg: f64) -> f64 {
    a_bg - a_fg
}

/// Mean RFS over the nonzero sigma levels; 0 when there are none.
pub fn aggregate_rfs(sigmas: &[f64], rfs_per_sigma: &[f64]) -> f64 {
    let vals: Vec<f64> = sigmas
        .iter()
        .zip(rfs_per_sigma)
        .filter(|(s, _)| **s > 0.0)
        .map(|(_, r)| *r)
        .collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub model_id: String,
    pub dataset_id: String,
    pub mask_source: MaskSource,
    pub seed: u64,
    pub count: usize,
    pub sigmas: Vec<f64>,
    pub a_fg: Vec<f64>,
    pub a_bg: Vec<f64>,
    pub rfs_per_sigma: Vec<f64>,
    pub aggregate_rfs: f64,
}

impl NoiseReport {
    pub fn clean_accuracy(&self) -> f64 {
        self.a_fg[0]
    }
}

/// Settings shared by the foreground and background sweeps.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSweep {
    pub sigma_levels: Vec<f64>,
    pub mask_source: MaskSource,
    pub seed: u64,
}

/// Runs both region sweeps and assembles the report.
pub fn noise_report(
    model: &ClassifierModel,
    model_id: &str,
    ds: &Dataset,
    indices: &[usize],
    sweep: &NoiseSweep,
    detections: Option<&DetectionCache>,
) -> Result<NoiseReport> {
    let spec = |region| NoiseSpec {
        region,
        sigma_levels: sweep.sigma_levels.clone(),
        mask_source: sweep.mask_source,
        seed: sweep.seed,
    };
    let fg = accuracy_under_noise(model, ds, indices, &spec(Region::Foreground), detections)?;
    let bg = accuracy_under_noise(model, ds, indices, &spec(Region::Background), detections)?;
    let rfs_per_sigma: Vec<f64> = bg.accuracy.iter().zip(&fg.accuracy).map(|(b, f)| rfs(*b, *f)).collect();
    Ok(NoiseReport {
        model_id: model_id.to_string(),
        dataset_id: ds.fingerprint(),
        mask_source: sweep.mask_source,
        seed: sweep.seed,
        count: indices.len(),
        aggregate_rfs: aggregate_rfs(&sweep.sigma_levels, &rfs_per_sigma),
        sigmas: sweep.sigma_levels.clone(),
        a_fg: fg.accuracy,
        a_bg: bg.accuracy,
        rfs_per_sigma,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub model: String,
    pub region: Region,
    pub sigma: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfsSigmaRow {
    pub model: String,
    pub sigma: f64,
    pub a_fg: f64,
    pub a_bg: f64,
    pub rfs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfsSummaryRow {
    pub model: String,
    pub clean_accuracy: f64,
    pub aggregate_rfs: f64,
    /// Difference to the first (reference) report; empty for the reference itself.
    pub delta_rfs: Option<f64>,
    pub mask_source: MaskSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub accuracy: Vec<AccuracyRow>,
    pub by_sigma: Vec<RfsSigmaRow>,
    pub summary: Vec<RfsSummaryRow>,
}

/// Tabulates reports; the first one is the reference for the RFS deltas.
pub fn compare_models(reports: &[NoiseReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| RiaError::Input("no reports to compare".into()))?;
    for r in &reports[1..] {
        if r.sigmas != first.sigmas {
            return Err(RiaError::Input(format!(
                "sigma grids differ: {:?} vs {:?}",
                first.sigmas, r.sigmas
            )));
        }
        if r.dataset_id != first.dataset_id || r.count != first.count {
            return Err(RiaError::Input(format!(
                "reports cover different data ({} vs {})",
                first.model_id, r.model_id
            )));
        }
        if r.mask_source != first.mask_source {
            return Err(RiaError::Input("reports use different mask sources".into()));
        }
    }
    let mut accuracy = Vec::new();
    let mut by_sigma = Vec::new();
    let mut summary = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        for (region, values) in [(Region::Foreground, &r.a_fg), (Region::Background, &r.a_bg)] {
            for (&sigma, &acc) in r.sigmas.iter().zip(values) {
                accuracy.push(AccuracyRow {
                    model: r.model_id.clone(),
                    region,
                    sigma,
                    accuracy: acc,
                });
            }
        }
        for k in 0..r.sigmas.len() {
            by_sigma.push(RfsSigmaRow {
                model: r.model_id.clone(),
                sigma: r.sigmas[k],
                a_fg: r.a_fg[k],
                a_bg: r.a_bg[k],
                rfs: r.rfs_per_sigma[k],
            });
        }
        summary.push(RfsSummaryRow {
            model: r.model_id.clone(),
            clean_accuracy: r.clean_accuracy(),
            aggregate_rfs: r.aggregate_rfs,
            delta_rfs: (i > 0).then_some(r.aggregate_rfs - first.aggregate_rfs),
            mask_source: r.mask_source,
        });
    }
    Ok(Comparison {
        accuracy,
        by_sigma,
        summary,
    })
}

/// Writes the comparison tables and plots into `dir`; returns the paths written.
pub fn write_comparison(reports: &[NoiseReport], dir: &Path) -> Result<Vec<PathBuf>> {
    let cmp = compare_models(reports)?;
    let mut written = Vec::new();
    let tables = [ACCURACY_FILE, RFS_BY_SIGMA_FILE, RFS_SUMMARY_FILE].map(|name| dir.join(name));
    write_csv(&tables[0], &cmp.accuracy)?;
    write_csv(&tables[1], &cmp.by_sigma)?;
    write_csv(&tables[2], &cmp.summary)?;
    written.extend(tables);
    for region in [Region::Foreground, Region::Background] {
        let series: Vec<Series> = reports
            .iter()
            .map(|r| {
                let acc = if region == Region::Foreground { &r.a_fg } else { &r.a_bg };
                Series {
                    name: r.model_id.clone(),
                    points: r.sigmas.iter().copied().zip(acc.iter().copied()).collect(),
                }
            })
            .collect();
        let title = format!("{} NOISE", region.as_str());
        let chart = render::line_chart(&title, "SIGMA", "ACCURACY", &series, (0.0, 1.0));
        let path = dir.join(format!("accuracy_{}.png", region.as_str()));
        write_png(&path, &chart.pixels)?;
        written.push(path);
    }
    let bars: Vec<(String, f64)> = reports.iter().map(|r| (r.model_id.clone(), r.aggregate_rfs)).collect();
    let path = dir.join("rfs.png");
    write_png(&path, &render::bar_chart("RFS", &bars).pixels)?;
    written.push(path);
    Ok(written)
}
