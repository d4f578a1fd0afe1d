// SPDX-License-Identifier: Apache-2.0

//! Unsupervised single-object localization from patch similarities (LOST).
//!
//! Patches are compared by the dot product of their feature vectors. The
//! patch with the fewest positive similarities becomes the seed, it is
//! expanded with low-degree patches that correlate with it, and the box
//! around the seed's 8-connected region of the resulting mask is returned.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RiaError};
use crate::saliency::{self, BBox};

pub const DEFAULT_PATCH_SIZE: usize = 2;
pub const DEFAULT_EXPANSION: usize = 100;

/// Relative weights of the chroma and texture dimensions in [`PatchStats`] features.
const CHROMA_WEIGHT: f64 = 2.0;
const GRADIENT_WEIGHT: f64 = 0.25;

pub const CACHE_MAGIC: &str = "# ria-detections v1";

/// Per-patch feature vectors on a `rows × cols` grid, in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub features: Array2<f64>,
    pub grid: (usize, usize),
    pub patch_size: usize,
}

impl PatchFeatures {
    pub fn new(features: Array2<f64>, grid: (usize, usize), patch_size: usize) -> Result<Self> {
        if grid.0 * grid.1 != features.nrows() {
            return Err(RiaError::Input(format!(
                "grid {}x{} does not match {} patches",
                grid.0,
                grid.1,
                features.nrows()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(RiaError::Input("patch features must be finite".into()));
        }
        Ok(PatchFeatures {
            features,
            grid,
            patch_size,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A frozen mapping from an image `(C, H, W)` to patch features.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &'static str;
    fn patch_size(&self) -> usize;
    fn extract(&self, image: &Array3<f64>) -> Result<PatchFeatures>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractorKind {
    /// Mean color, chroma and gradient energy per patch, standardized per image.
    PatchStats,
    /// Raw mean color per patch.
    MeanColor,
}

impl ExtractorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtractorKind::PatchStats => "patch-stats",
            ExtractorKind::MeanColor => "mean-color",
        }
    }

    pub fn build(self, patch_size: usize) -> Result<Box<dyn FeatureExtractor>> {
        if patch_size == 0 {
            return Err(RiaError::Config("patch_size must be positive".into()));
        }
        Ok(match self {
            ExtractorKind::PatchStats => Box::new(PatchStats { patch_size }),
            ExtractorKind::MeanColor => Box::new(MeanColor { patch_size }),
        })
    }
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExtractorKind {
    type Err = RiaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch-stats" => Ok(ExtractorKind::PatchStats),
            "mean-color" => Ok(ExtractorKind::MeanColor),
            other => Err(RiaError::Config(format!(
                "unknown feature extractor {other:?} (expected patch-stats or mean-color)"
            ))),
        }
    }
}

/// Pads `(C, H, W)` by edge replication up to multiples of `patch`.
fn pad_to_grid(image: &Array3<f64>, patch: usize) -> (Array3<f64>, (usize, usize)) {
    let (c, h, w) = image.dim();
    let rows = h.div_ceil(patch);
    let cols = w.div_ceil(patch);
    if rows * patch == h && cols * patch == w {
        return (image.clone(), (rows, cols));
    }
    let padded = Array3::from_shape_fn((c, rows * patch, cols * patch), |(ch, y, x)| {
        image[[ch, y.min(h - 1), x.min(w - 1)]]
    });
    (padded, (rows, cols))
}

fn check_image(image: &Array3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(RiaError::Input(format!("empty image {c}x{h}x{w}")));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(RiaError::Input("image contains non-finite values".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct MeanColor {
    pub patch_size: usize,
}

impl FeatureExtractor for MeanColor {
    fn name(&self) -> &'static str {
        ExtractorKind::MeanColor.as_str()
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn extract(&self, image: &Array3<f64>) -> Result<PatchFeatures> {
        check_image(image)?;
        let p = self.patch_size;
        let (img, (rows, cols)) = pad_to_grid(image, p);
        let c = img.dim().0;
        let mut feats = Array2::zeros((rows * cols, c));
        for r in 0..rows {
            for q in 0..cols {
                for ch in 0..c {
                    let block = img.slice(ndarray::s![ch, r * p..(r + 1) * p, q * p..(q + 1) * p]);
                    feats[[r * cols + q, ch]] = block.mean().unwrap_or(0.0);
                }
            }
        }
        PatchFeatures::new(feats, (rows, cols), p)
    }
}

#[derive(Clone, Debug)]
pub struct PatchStats {
    pub patch_size: usize,
}

impl FeatureExtractor for PatchStats {
    fn name(&self) -> &'static str {
        ExtractorKind::PatchStats.as_str()
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn extract(&self, image: &Array3<f64>) -> Result<PatchFeatures> {
        check_image(image)?;
        let p = self.patch_size;
        let (img, (rows, cols)) = pad_to_grid(image, p);
        let (c, h, w) = img.dim();
        let gray = img.mean_axis(Axis(0)).expect("non-empty channels");
        let mut feats = Array2::zeros((rows * cols, c + 2));
        for r in 0..rows {
            for q in 0..cols {
                let i = r * cols + q;
                let (y0, x0) = (r * p, q * p);
                let (mut hi, mut lo) = (f64::MIN, f64::MAX);
                for ch in 0..c {
                    let mean = img.slice(ndarray::s![ch, y0..y0 + p, x0..x0 + p]).mean().unwrap_or(0.0);
                    feats[[i, ch]] = mean;
                    hi = hi.max(mean);
                    lo = lo.min(mean);
                }
                feats[[i, c]] = hi - lo;
                let mut energy = 0.0;
                for y in y0..y0 + p {
                    for x in x0..x0 + p {
                        energy += (gray[[y, (x + 1).min(w - 1)]] - gray[[y, x]]).abs();
                        energy += (gray[[(y + 1).min(h - 1), x]] - gray[[y, x]]).abs();
                    }
                }
                feats[[i, c + 1]] = energy / (p * p) as f64;
            }
        }
        // Standardize each dimension over the image's patches so that the dot
        // product compares patches relative to the image's typical patch.
        for mut col in feats.columns_mut() {
            let mean = col.mean().unwrap_or(0.0);
            let std = col.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0).sqrt();
            if std > 1e-9 {
                col.mapv_inplace(|v| (v - mean) / std);
            } else {
                col.fill(0.0);
            }
        }
        feats.column_mut(c).mapv_inplace(|v| v * CHROMA_WEIGHT);
        feats.column_mut(c + 1).mapv_inplace(|v| v * GRADIENT_WEIGHT);
        PatchFeatures::new(feats, (rows, cols), p)
    }
}

/// Pairwise dot products and the number of positive off-diagonal entries per patch.
#[derive(Clone, Debug)]
pub struct SimilarityGraph {
    pub sims: Array2<f64>,
    pub degree: Vec<usize>,
}

impl SimilarityGraph {
    pub fn from_features(f: &PatchFeatures) -> Self {
        Self::from_sims(f.features.dot(&f.features.t()))
    }

    pub fn from_sims(sims: Array2<f64>) -> Self {
        let n = sims.nrows();
        let degree = (0..n)
            .map(|p| (0..n).filter(|&q| q != p && sims[[p, q]] > 0.0).count())
            .collect();
        SimilarityGraph { sims, degree }
    }

    pub fn len(&self) -> usize {
        self.degree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.degree.is_empty()
    }

    pub fn adjacency(&self) -> Array2<bool> {
        let n = self.len();
        Array2::from_shape_fn((n, n), |(p, q)| p != q && self.sims[[p, q]] > 0.0)
    }
}

/// Patch with the smallest degree; the lowest index wins ties.
pub fn select_seed(graph: &SimilarityGraph) -> Result<usize> {
    if graph.len() < 2 {
        return Err(RiaError::Input(format!("need at least 2 patches, got {}", graph.len())));
    }
    Ok((0..graph.len()).min_by_key(|&p| (graph.degree[p], p)).expect("non-empty"))
}

/// The seed followed by up to `k` of its positively correlated patches, lowest degree first.
pub fn expand_seed(graph: &SimilarityGraph, seed: usize, k: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..graph.len())
        .filter(|&q| q != seed && graph.sims[[seed, q]] > 0.0)
        .collect();
    candidates.sort_by_key(|&q| (graph.degree[q], q));
    candidates.truncate(k);
    let mut set = vec![seed];
    set.extend(candidates);
    set
}

/// Patch `q` is foreground when its similarities to the seed set sum to a positive value.
pub fn object_mask(graph: &SimilarityGraph, seed_set: &[usize]) -> Vec<bool> {
    (0..graph.len())
        .map(|q| seed_set.iter().map(|&s| graph.sims[[q, s]]).sum::<f64>() > 0.0)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// The image was degenerate and the full-image box was returned.
    pub fallback: bool,
    pub seed: Option<usize>,
    /// Patch-level foreground mask in raster order (empty on fallback).
    pub mask: Vec<bool>,
}

/// Runs seed selection, expansion, masking and box extraction on given features.
pub fn detect_from_features(f: &PatchFeatures, image_size: (usize, usize), k: usize) -> Result<Detection> {
    let (width, height) = image_size;
    let fallback = || Detection {
        bbox: BBox::full(width, height),
        fallback: true,
        seed: None,
        mask: Vec::new(),
    };
    if f.len() < 2 {
        return Ok(fallback());
    }
    let first = f.features.row(0);
    let uniform = f
        .features
        .rows()
        .into_iter()
        .all(|r| r.iter().zip(first.iter()).all(|(a, b)| (a - b).abs() <= 1e-12));
    if uniform {
        return Ok(fallback());
    }
    let graph = SimilarityGraph::from_features(f);
    let seed = select_seed(&graph)?;
    let seeds = expand_seed(&graph, seed, k);
    let mask = object_mask(&graph, &seeds);
    if !mask[seed] {
        return Ok(fallback());
    }
    let (rows, cols) = f.grid;
    let grid = Array2::from_shape_fn((rows, cols), |(r, c)| mask[r * cols + c]);
    let (sr, sc) = (seed / cols, seed % cols);
    let comp = saliency::components_of(&grid)
        .into_iter()
        .find(|c| c.pixels.contains(&(sr, sc)))
        .expect("seed lies in the mask");
    let p = f.patch_size;
    let b = comp.bbox;
    let bbox = BBox::new(
        (b.x_min * p).min(width - 1),
        (b.y_min * p).min(height - 1),
        ((b.x_max + 1) * p).min(width) - 1,
        ((b.y_max + 1) * p).min(height) - 1,
    )?;
    Ok(Detection {
        bbox,
        fallback: false,
        seed: Some(seed),
        mask,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LostConfig {
    #[serde(default = "default_extractor")]
    pub extractor: ExtractorKind,
    #[serde(default = "default_patch_size")]
    pub patch_size: usize,
    #[serde(default = "default_expansion")]
    pub k: usize,
}

fn default_extractor() -> ExtractorKind {
    ExtractorKind::PatchStats
}
fn default_patch_size() -> usize {
    DEFAULT_PATCH_SIZE
}
fn default_expansion() -> usize {
    DEFAULT_EXPANSION
}

impl Default for LostConfig {
    fn default() -> Self {
        LostConfig {
            extractor: default_extractor(),
            patch_size: default_patch_size(),
            k: default_expansion(),
        }
    }
}

/// A configured detector.
pub struct Lost {
    extractor: Box<dyn FeatureExtractor>,
    k: usize,
}

impl Lost {
    pub fn new(config: &LostConfig) -> Result<Self> {
        Ok(Lost {
            extractor: config.extractor.build(config.patch_size)?,
            k: config.k,
        })
    }

    pub fn with_extractor(extractor: Box<dyn FeatureExtractor>, k: usize) -> Self {
        Lost { extractor, k }
    }

    pub fn patch_features(&self, image: &Array3<f64>) -> Result<PatchFeatures> {
        self.extractor.extract(image)
    }

    pub fn detect(&self, image: &Array3<f64>) -> Result<Detection> {
        let f = self.extractor.extract(image)?;
        let (_, h, w) = image.dim();
        detect_from_features(&f, (w, h), self.k)
    }

    /// Hex SHA-256 over everything that determines the detector's output.
    pub fn fingerprint(&self) -> String {
        let desc = format!(
            "lost;extractor={};patch_size={};k={};similarity=dot",
            self.extractor.name(),
            self.extractor.patch_size(),
            self.k
        );
        let digest = Sha256::digest(desc.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub bbox: BBox,
    pub fallback: bool,
}

/// Precomputed detector boxes keyed by image id.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionCache {
    pub fingerprint: String,
    pub entries: BTreeMap<String, CacheEntry>,
}

impl DetectionCache {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        DetectionCache {
            fingerprint: fingerprint.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: &str) -> Option<&CacheEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: &str, entry: CacheEntry) -> Result<()> {
        if id.is_empty() || id.contains(['\t', '\n', '\r']) {
            return Err(RiaError::Data(format!("image id {id:?} cannot be stored in a detection cache")));
        }
        self.entries.insert(id.to_string(), entry);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{CACHE_MAGIC} fingerprint={}\n", self.fingerprint);
        for (id, e) in &self.entries {
            let b = e.bbox;
            s.push_str(&format!(
                "{id}\t{}\t{}\t{}\t{}\t{}\n",
                b.x_min,
                b.y_min,
                b.x_max,
                b.y_max,
                u8::from(e.fallback)
            ));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        let fingerprint = header
            .strip_prefix(CACHE_MAGIC)
            .and_then(|rest| rest.trim().strip_prefix("fingerprint="))
            .ok_or_else(|| RiaError::Data("detection cache is missing its header line".into()))?;
        let mut cache = DetectionCache::new(fingerprint);
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || RiaError::Data(format!("detection cache line {}: malformed record {line:?}", n + 2));
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 6 {
                return Err(bad());
            }
            let nums: Vec<usize> = fields[1..5]
                .iter()
                .map(|v| v.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            let fallback = match fields[5] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            let bbox = BBox::new(nums[0], nums[1], nums[2], nums[3]).map_err(|_| bad())?;
            cache.insert(fields[0], CacheEntry { bbox, fallback })?;
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| RiaError::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| RiaError::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| RiaError::io(path, e))
    }

    /// Reads a cache without checking its fingerprint.
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RiaError::io(path, e))?;
        Self::parse(&text)
    }
}

/// Reads a cache and checks that it was produced by a detector with `fingerprint`.
pub fn load_cache(path: &Path, fingerprint: &str) -> Result<DetectionCache> {
    let cache = DetectionCache::read(path)?;
    if cache.fingerprint != fingerprint {
        return Err(RiaError::StaleCache {
            expected: fingerprint.to_string(),
            found: cache.fingerprint,
        });
    }
    Ok(cache)
}

/// Detects every image, spreading the work over the available cores.
/// `image(i)` yields the `i`-th image of `ids` as `(C, H, W)` in `[0, 1]`.
pub fn precompute_cache<F>(ids: &[&str], image: F, detector: &Lost) -> Result<DetectionCache>
where
    F: Fn(usize) -> Result<Array3<f64>> + Sync,
{
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(ids.len().max(1));
    let chunk = ids.len().div_ceil(threads).max(1);
    let image = &image;
    let results: Vec<Result<Vec<Detection>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..ids.len())
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(ids.len());
                s.spawn(move || (start..end).map(|i| detector.detect(&image(i)?)).collect())
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("detector thread panicked")).collect()
    });
    let mut cache = DetectionCache::new(detector.fingerprint());
    let mut names = ids.iter();
    for part in results {
        for det in part? {
            let id = names.next().expect("one detection per image");
            if det.fallback {
                log::warn!("detector fell back to the full image for {id}");
            }
            cache.insert(
                id,
                CacheEntry {
                    bbox: det.bbox,
                    fallback: det.fallback,
                },
            )?;
        }
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn graph(sims: Array2<f64>) -> SimilarityGraph {
        SimilarityGraph::from_sims(sims)
    }

    #[test]
    fn grid_arithmetic() {
        let img = Array3::from_elem((3, 64, 64), 0.3);
        let f = PatchStats { patch_size: 8 }.extract(&img).unwrap();
        assert_eq!(f.grid, (8, 8));
        assert_eq!(f.len(), 64);
        let odd = Array3::from_elem((3, 20, 17), 0.3);
        assert_eq!(MeanColor { patch_size: 8 }.extract(&odd).unwrap().grid, (3, 3));
    }

    #[test]
    fn mean_color_features_are_patch_means() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            if c == 0 && x >= 2 {
                1.0
            } else if c == 2 && y < 2 {
                0.5
            } else {
                0.0
            }
        });
        let f = MeanColor { patch_size: 2 }.extract(&img).unwrap();
        let expected = array![[0.0, 0.0, 0.5], [1.0, 0.0, 0.5], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        assert_eq!(f.features, expected);
    }

    #[test]
    fn extraction_is_deterministic() {
        let img = Array3::from_shape_fn((3, 32, 32), |(c, y, x)| ((c * 7 + y * 3 + x * 5) % 11) as f64 / 11.0);
        let e = PatchStats { patch_size: 8 };
        assert_eq!(e.extract(&img).unwrap(), e.extract(&img).unwrap());
    }

    #[test]
    fn seed_examples() {
        let mut s = Array2::from_elem((4, 4), 1.0);
        for q in 1..4 {
            s[[0, q]] = -1.0;
            s[[q, 0]] = -1.0;
        }
        assert_eq!(select_seed(&graph(s)).unwrap(), 0);

        // Degrees (3, 1, 2, 2): edges 0-1, 0-2, 0-3, 2-3.
        let s = array![
            [1.0, 1.0, 1.0, 1.0],
            [1.0, 1.0, -1.0, -1.0],
            [1.0, -1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0, 1.0],
        ];
        let g = graph(s);
        assert_eq!(g.degree, vec![3, 1, 2, 2]);
        assert_eq!(select_seed(&g).unwrap(), 1);

        assert_eq!(select_seed(&graph(Array2::from_elem((5, 5), 0.3))).unwrap(), 0);
        assert!(select_seed(&graph(Array2::from_elem((1, 1), 1.0))).is_err());
    }

    #[test]
    fn expansion_examples() {
        let mut s = Array2::from_elem((4, 4), -1.0);
        for i in 0..4 {
            s[[i, i]] = 1.0;
        }
        assert_eq!(expand_seed(&graph(s), 0, 100), vec![0]);

        // Seed 0 with positive neighbors 1, 2, 3 of degrees 3, 1, 2.
        let s = array![
            [1.0, 1.0, 1.0, 1.0, -1.0],
            [1.0, 1.0, -1.0, 1.0, 1.0],
            [1.0, -1.0, 1.0, -1.0, -1.0],
            [1.0, 1.0, -1.0, 1.0, -1.0],
            [-1.0, 1.0, -1.0, -1.0, 1.0],
        ];
        let g = graph(s);
        assert_eq!(&g.degree[1..4], &[3, 1, 2]);
        assert_eq!(expand_seed(&g, 0, 2), vec![0, 2, 3]);
        assert_eq!(expand_seed(&g, 0, 10), vec![0, 2, 3, 1]);
    }

    #[test]
    fn mask_examples() {
        let f = array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.5]];
        let g = SimilarityGraph::from_features(&PatchFeatures::new(f, (1, 3), 1).unwrap());
        let m = object_mask(&g, &[0]);
        assert_eq!(m, vec![true, false, true]);
    }

    fn planted(rows: usize, cols: usize, r: (usize, usize), c: (usize, usize)) -> PatchFeatures {
        let f = Array2::from_shape_fn((rows * cols, 2), |(i, d)| {
            let (y, x) = (i / cols, i % cols);
            let fg = y >= r.0 && y <= r.1 && x >= c.0 && x <= c.1;
            match (fg, d) {
                (true, 0) => 1.0,
                (true, _) => -0.2,
                (false, 0) => -0.2,
                (false, _) => 1.0,
            }
        });
        PatchFeatures::new(f, (rows, cols), 8).unwrap()
    }

    #[test]
    fn planted_object_box() {
        let f = planted(8, 8, (2, 4), (3, 5));
        let d = detect_from_features(&f, (64, 64), 100).unwrap();
        assert!(!d.fallback);
        assert_eq!(d.bbox, BBox::new(24, 16, 47, 39).unwrap());
    }

    #[test]
    fn uniform_image_falls_back() {
        let img = Array3::from_elem((3, 32, 32), 0.4);
        for kind in [ExtractorKind::PatchStats, ExtractorKind::MeanColor] {
            let lost = Lost::new(&LostConfig {
                extractor: kind,
                ..Default::default()
            })
            .unwrap();
            let d = lost.detect(&img).unwrap();
            assert!(d.fallback);
            assert_eq!(d.bbox, BBox::full(32, 32));
        }
    }

    fn square_image() -> Array3<f64> {
        Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
            let inside = (16..40).contains(&y) && (24..48).contains(&x);
            let noise = ((y * 31 + x * 17 + c * 7) % 13) as f64 / 130.0;
            if inside {
                [0.9, 0.1, 0.1][c]
            } else {
                0.3 + noise
            }
        })
    }

    #[test]
    fn finds_colored_square() {
        let lost = Lost::new(&LostConfig::default()).unwrap();
        let img = square_image();
        let d = lost.detect(&img).unwrap();
        assert!(!d.fallback);
        assert_eq!(d.bbox, BBox::new(24, 16, 47, 39).unwrap());
        assert_eq!(lost.detect(&img).unwrap(), d);
    }

    #[test]
    fn unknown_extractor_is_config_error() {
        assert!(matches!("dino".parse::<ExtractorKind>(), Err(RiaError::Config(_))));
        assert!(ExtractorKind::PatchStats.build(0).is_err());
    }

    #[test]
    fn cache_roundtrip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.tsv");
        let lost = Lost::new(&LostConfig::default()).unwrap();
        let imgs: Vec<Array3<f64>> = (0..10)
            .map(|i| {
                let mut im = square_image();
                im[[0, i, i]] = 0.0;
                im
            })
            .collect();
        let names: Vec<String> = (0..10).map(|i| format!("img_{i:03}")).collect();
        let ids: Vec<&str> = names.iter().map(|n| n.as_str()).collect();
        let cache = precompute_cache(&ids, |i| Ok(imgs[i].clone()), &lost).unwrap();
        assert_eq!(cache.len(), 10);
        cache.save(&path).unwrap();
        let loaded = load_cache(&path, &lost.fingerprint()).unwrap();
        assert_eq!(loaded, cache);

        let other = Lost::new(&LostConfig {
            patch_size: 16,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(
            load_cache(&path, &other.fingerprint()),
            Err(RiaError::StaleCache { .. })
        ));
    }

    #[test]
    fn cache_rejects_bad_records() {
        assert!(DetectionCache::parse("nope\n").is_err());
        let head = format!("{CACHE_MAGIC} fingerprint=abc\n");
        assert!(DetectionCache::parse(&format!("{head}a\t1\t2\t3\n")).is_err());
        assert!(DetectionCache::parse(&format!("{head}a\t5\t0\t3\t3\t0\n")).is_err());
        assert!(DetectionCache::parse(&format!("{head}a\t0\t0\t3\t3\t2\n")).is_err());
        let ok = DetectionCache::parse(&format!("{head}a\t0\t0\t3\t3\t1\n")).unwrap();
        assert!(ok.get("a").unwrap().fallback);
        let mut c = DetectionCache::new("x");
        assert!(c.insert("a\tb", CacheEntry { bbox: BBox::full(2, 2), fallback: false }).is_err());
    }
}
