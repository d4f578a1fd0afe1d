// SPDX-License-Identifier: Apache-2.0

//! Datasets: a seeded synthetic shapes generator and an image-folder loader.
//!
//! Images are stored as 8-bit RGB `(3, H, W)` and converted to `[0, 1]`
//! floats on use, so a generated dataset written to PNG and read back is
//! pixel-identical.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RiaError};
use crate::saliency::BBox;

/// Name of the optional box file at the root of an image folder.
pub const BOXES_FILE: &str = "boxes.tsv";
/// Suffix of ground-truth mask images stored next to their image.
pub const MASK_SUFFIX: &str = ".mask.png";

pub const SHAPE_NAMES: [&str; 10] = [
    "disk", "square", "triangle", "diamond", "cross", "ring", "ellipse", "saltire", "hexagon", "crescent",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable identifier: the image path relative to the dataset root.
    pub id: String,
    /// 8-bit RGB, `(3, H, W)`.
    pub image: Array3<u8>,
    pub label: usize,
    pub mask: Option<Array2<bool>>,
    pub bbox: Option<BBox>,
}

impl Sample {
    /// Pixel values in `[0, 1]`.
    pub fn image_f64(&self) -> Array3<f64> {
        self.image.mapv(|v| v as f64 / 255.0)
    }

    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Short content hash of ids and labels.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update([0]);
            h.update(s.label.to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
        }
    }

    /// Stacks the given samples into a `(N, 3, H, W)` batch in `[0, 1]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Array4<f64>> {
        let first = self
            .samples
            .get(*indices.first().ok_or_else(|| RiaError::Input("empty batch".into()))?)
            .ok_or_else(|| RiaError::Input("batch index out of range".into()))?;
        let (c, h, w) = first.image.dim();
        let mut out = Array4::zeros((indices.len(), c, h, w));
        for (row, &i) in indices.iter().enumerate() {
            let s = &self.samples[i];
            if s.image.dim() != (c, h, w) {
                return Err(RiaError::Input(format!(
                    "sample {} is {:?}, expected {:?}",
                    s.id,
                    s.image.dim(),
                    (c, h, w)
                )));
            }
            out.index_axis_mut(Axis(0), row).assign(&s.image.mapv(|v| v as f64 / 255.0));
        }
        Ok(out)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

fn default_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    200
}
fn default_size() -> usize {
    64
}
fn default_texture() -> f64 {
    0.12
}

/// Parameters of the synthetic shapes dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Amplitude of the background texture.
    #[serde(default = "default_texture")]
    pub texture: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: default_classes(),
            per_class: default_per_class(),
            size: default_size(),
            seed: 0,
            texture: default_texture(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=SHAPE_NAMES.len()).contains(&self.classes) {
            return Err(RiaError::Config(format!(
                "synthetic classes must be in 2..={}, got {}",
                SHAPE_NAMES.len(),
                self.classes
            )));
        }
        if self.size < 16 {
            return Err(RiaError::Config(format!("synthetic image size must be at least 16, got {}", self.size)));
        }
        if self.per_class == 0 {
            return Err(RiaError::Config("per_class must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.texture) {
            return Err(RiaError::Config(format!("texture must be in [0, 0.5], got {}", self.texture)));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPE_NAMES[..self.classes]
            .iter()
            .enumerate()
            .map(|(i, n)| format!("{i:02}_{n}"))
            .collect()
    }
}

/// Whether normalized coordinates `(u, v)` in `[-1, 1]²` fall inside shape `class`.
fn inside_shape(class: usize, u: f64, v: f64) -> bool {
    let r2 = u * u + v * v;
    match class {
        0 => r2 <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.85,
        2 => (-0.85..=0.85).contains(&v) && u.abs() <= (v + 0.85) / 1.7,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        5 => (0.3..=1.0).contains(&r2),
        6 => u * u + (v / 0.55).powi(2) <= 1.0,
        7 => (u.abs() - v.abs()).abs() <= 0.3 && u.abs() <= 0.9 && v.abs() <= 0.9,
        8 => v.abs() <= 0.866 && u.abs() * 0.866 + v.abs() * 0.5 <= 0.866,
        9 => r2 <= 1.0 && (u - 0.45).powi(2) + v * v > 0.55,
        _ => unreachable!("class index checked by SyntheticSpec::validate"),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One synthetic sample: textured background plus one class-specific shape.
fn synth_sample(spec: &SyntheticSpec, class: usize, index: usize) -> (Array3<u8>, Array2<bool>) {
    let n = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream((class * spec.per_class + index) as u64 + 1);

    // Background: muted base color with a few random sinusoidal gratings and pixel noise.
    let base = hsv_to_rgb(rng.random_range(0.0..360.0), rng.random_range(0.0..0.25), rng.random_range(0.35..0.65));
    let waves: Vec<(f64, f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let freq = rng.random_range(0.1..0.6);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = spec.texture * rng.random_range(0.3..1.0);
            let tint = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
            (angle.cos() * freq, angle.sin() * freq, phase, amp, tint)
        })
        .collect();

    // Foreground placement and color.
    let min_size = (n as f64 * 0.25).max(6.0);
    let max_size = n as f64 * 0.5;
    let size = rng.random_range(min_size..max_size);
    let half = size / 2.0;
    let cx = rng.random_range(half..n as f64 - half);
    let cy = rng.random_range(half..n as f64 - half);
    let hue = class as f64 * 360.0 / spec.classes as f64 + rng.random_range(-8.0..8.0);
    let color = hsv_to_rgb(hue, rng.random_range(0.7..1.0), rng.random_range(0.75..1.0));
    let shade = rng.random_range(0.0..0.15);

    let mut image = Array3::zeros((3, n, n));
    let mut mask = Array2::from_elem((n, n), false);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let u = (px - cx) / half;
            let v = (py - cy) / half;
            let fg = inside_shape(class, u, v);
            mask[[y, x]] = fg;
            let jitter: f64 = rng.random_range(-0.03..0.03);
            for c in 0..3 {
                let value = if fg {
                    color[c] * (1.0 - shade * (u + v).clamp(-1.0, 1.0)) + jitter
                } else {
                    let tex: f64 = waves
                        .iter()
                        .map(|(fx, fy, ph, amp, tint)| amp * tint[c] * (fx * px + fy * py + ph).sin())
                        .sum();
                    base[c] + tex + jitter
                };
                image[[c, y, x]] = quantize(value);
            }
        }
    }
    (image, mask)
}

/// Tight box around the set pixels, or `None` for an empty mask.
pub fn mask_bbox(mask: &Array2<bool>) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for ((y, x), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        b = Some(match b {
            None => BBox {
                x_min: x,
                y_min: y,
                x_max: x,
                y_max: y,
            },
            Some(b) => BBox {
                x_min: b.x_min.min(x),
                y_min: b.y_min.min(y),
                x_max: b.x_max.max(x),
                y_max: b.y_max.max(y),
            },
        });
    }
    b
}

/// Generates `classes × per_class` samples with ground-truth masks and boxes.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let names = spec.class_names();
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for (class, name) in names.iter().enumerate() {
        for index in 0..spec.per_class {
            let (image, mask) = synth_sample(spec, class, index);
            let bbox = mask_bbox(&mask).expect("shapes cover at least one pixel");
            samples.push(Sample {
                id: format!("{name}/{index:05}.png"),
                image,
                label: class,
                mask: Some(mask),
                bbox: Some(bbox),
            });
        }
    }
    Ok(Dataset {
        samples,
        class_names: names,
    })
}

/// Stratified split: within each class a seeded shuffle sends the first
/// `round(n·val_fraction)` samples to validation. Returns sorted index lists.
pub fn stratified_split(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(RiaError::Config(format!("val_fraction must be in [0, 1), got {val_fraction}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn read_png(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)
        .map_err(|source| RiaError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c]
    }))
}

pub fn write_png(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(RiaError::Input(format!("expected 3 channels, got {c}")));
    }
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([0, 1, 2].map(|ch| image[[ch, y as usize, x as usize]]))
    });
    ensure_parent(path)?;
    buf.save(path).map_err(|source| RiaError::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn read_mask(path: &Path) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|source| RiaError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] > 127
    }))
}

fn write_mask(path: &Path, mask: &Array2<bool>) -> Result<()> {
    let (h, w) = mask.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[[y as usize, x as usize]] { 255 } else { 0 }])
    });
    ensure_parent(path)?;
    buf.save(path).map_err(|source| RiaError::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RiaError::io(dir, e))?;
    }
    Ok(())
}

fn mask_path(image_path: &Path) -> PathBuf {
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    image_path.with_file_name(format!("{stem}{MASK_SUFFIX}"))
}

/// Writes a dataset in the folder layout read by [`load_image_folder`].
/// Returns the paths of every file written.
pub fn save_image_folder(ds: &Dataset, root: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for s in &ds.samples {
        let path = root.join(&s.id);
        write_png(&path, &s.image)?;
        written.push(path.clone());
        if let Some(mask) = &s.mask {
            let mp = mask_path(&path);
            write_mask(&mp, mask)?;
            written.push(mp);
        }
    }
    let boxes_path = root.join(BOXES_FILE);
    let mut f = fs::File::create(&boxes_path).map_err(|e| RiaError::io(&boxes_path, e))?;
    for s in &ds.samples {
        if let Some(b) = s.bbox {
            writeln!(f, "{}\t{}\t{}\t{}\t{}", s.id, b.x_min, b.y_min, b.x_max, b.y_max)
                .map_err(|e| RiaError::io(&boxes_path, e))?;
        }
    }
    written.push(boxes_path);
    Ok(written)
}

fn read_boxes(path: &Path) -> Result<BTreeMap<String, BBox>> {
    let text = fs::read_to_string(path).map_err(|e| RiaError::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || RiaError::Data(format!("{}:{}: malformed box record", path.display(), n + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad());
        }
        let v: Vec<usize> = f[1..]
            .iter()
            .map(|x| x.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        out.insert(f[0].to_string(), BBox::new(v[0], v[1], v[2], v[3]).map_err(|_| bad())?);
    }
    Ok(out)
}

fn is_image_file(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(MASK_SUFFIX) {
        return false;
    }
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png")
    )
}

/// Loads `root/<class>/<image>.png` with optional `<image>.mask.png` sidecars
/// and an optional `boxes.tsv`. Classes are the sorted subdirectory names.
/// Unreadable images are skipped with a warning.
pub fn load_image_folder(root: &Path) -> Result<Dataset> {
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| RiaError::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(RiaError::Config(format!("{} has no class subdirectories", root.display())));
    }
    let boxes_path = root.join(BOXES_FILE);
    let boxes = if boxes_path.exists() {
        read_boxes(&boxes_path)?
    } else {
        BTreeMap::new()
    };

    let mut class_names = Vec::new();
    let mut samples = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| RiaError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        let before = samples.len();
        for path in files {
            let id = format!("{name}/{}", path.file_name().and_then(|n| n.to_str()).unwrap_or_default());
            let image = match read_png(&path) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            let (_, h, w) = image.dim();
            let mp = mask_path(&path);
            let mask = if mp.exists() {
                let m = read_mask(&mp)?;
                if m.dim() != (h, w) {
                    return Err(RiaError::Data(format!(
                        "mask {} is {:?}, image is {:?}",
                        mp.display(),
                        m.dim(),
                        (h, w)
                    )));
                }
                Some(m)
            } else {
                None
            };
            let bbox = boxes.get(&id).copied().or_else(|| mask.as_ref().and_then(mask_bbox));
            if let Some(b) = bbox {
                if !b.fits(w, h) {
                    return Err(RiaError::Data(format!("box for {id} lies outside the {w}x{h} image")));
                }
            }
            samples.push(Sample {
                id,
                image,
                label,
                mask,
                bbox,
            });
        }
        if samples.len() == before {
            return Err(RiaError::Config(format!("class directory {} has no readable images", dir.display())));
        }
        class_names.push(name);
    }
    Ok(Dataset { samples, class_names })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Folder { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(s) => generate_synthetic(s),
            DatasetSpec::Folder { path } => load_image_folder(path),
        }
    }
}
