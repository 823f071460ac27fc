//! Synthetic dataset generation, on-disk loading and training augmentations.
//!
//! Three classes of procedural grayscale "scan-like" images on an elliptical
//! phantom: plain (normal), phantom plus one small bright disc at a random
//! interior position (focal lesion — the localized signal that rewards
//! patch-level analysis), and phantom plus band-pass texture over the whole
//! interior (diffuse). Generation is deterministic per seed; datasets are
//! stored as PGM files with a labels CSV and a meta JSON.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::pgm;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["normal", "focal_lesion", "diffuse_texture"];
pub const NUM_CLASSES: usize = 3;

const BACKGROUND: f64 = 0.08;
/// Smooth within-phantom intensity modulation shared by every class; it
/// carries no label information but dominates the coarse-grid statistics,
/// so the diffuse class is separable by fine grain rather than by energy.
const LOWFREQ_BLUR: f64 = 5.0;
const LOWFREQ_AMPLITUDE: (f64, f64) = (0.05, 0.09);
const TEXTURE_AMPLITUDE: (f64, f64) = (0.12, 0.18);
const TEXTURE_BLUR_FINE: f64 = 0.8;
const TEXTURE_BLUR_COARSE: f64 = 2.4;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub image_size: (usize, usize),
    pub samples_per_class: usize,
    /// Disc radius range in pixels, drawn uniformly.
    pub lesion_radius: (f64, f64),
    /// Additive disc brightness range, drawn uniformly.
    pub lesion_contrast: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            image_size: (64, 64),
            samples_per_class: 100,
            lesion_radius: (3.0, 5.0),
            lesion_contrast: (0.25, 0.45),
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let (h, w) = self.image_size;
        let max_r = self.lesion_radius.1.ceil() as usize;
        if h < 4 * max_r || w < 4 * max_r {
            return Err(DataError::Dataset(format!(
                "image {h}x{w} too small for lesion radius up to {max_r}"
            )));
        }
        if self.samples_per_class == 0 {
            return Err(DataError::Dataset("samples_per_class must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor,
    pub label: usize,
    pub id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Default)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub split: SplitIndices,
    pub class_names: Vec<String>,
    /// (mean, std) over training-split pixels, used to standardize inputs.
    pub normalization: (f64, f64),
    pub seed: u64,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.split.train,
            Split::Val => &self.split.val,
            Split::Test => &self.split.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Metadata stored beside the images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub class_names: Vec<String>,
    pub generator: SyntheticConfig,
    pub seed: u64,
    pub normalization_mean: f64,
    pub normalization_std: f64,
}

// ---- generation ---------------------------------------------------------------

struct Phantom {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    body: f64,
    edge: f64,
}

impl Phantom {
    fn rho(&self, y: f64, x: f64) -> f64 {
        let dy = (y - self.cy) / self.ay;
        let dx = (x - self.cx) / self.ax;
        (dy * dy + dx * dx).sqrt()
    }

    fn intensity(&self, y: f64, x: f64) -> f64 {
        let rho = self.rho(y, x);
        let t = (1.0 - rho) / self.edge;
        let sig = 1.0 / (1.0 + (-t).exp());
        // mild interior vignette so plain brightness statistics vary
        let vignette = 1.0 - 0.10 * rho * rho;
        BACKGROUND + (self.body * vignette - BACKGROUND) * sig
    }
}

fn draw_phantom(h: usize, w: usize, rng: &mut RngState) -> Phantom {
    let side = h.min(w) as f64;
    Phantom {
        cy: h as f64 / 2.0 + rng.uniform_in(-2.0, 2.0),
        cx: w as f64 / 2.0 + rng.uniform_in(-2.0, 2.0),
        ay: rng.uniform_in(0.40, 0.50) * side,
        ax: rng.uniform_in(0.40, 0.50) * side,
        body: rng.uniform_in(0.40, 0.60),
        edge: 0.06,
    }
}

fn gaussian_blur(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (2.5 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut sum = 0.0;
    for i in -radius..=radius {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for k in &mut kernel {
        *k /= sum;
    }
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += kv * field[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn render_sample(cfg: &SyntheticConfig, label: usize, rng: &mut RngState) -> Tensor {
    let (h, w) = cfg.image_size;
    let phantom = draw_phantom(h, w, rng);

    let low_amp = rng.uniform_in(LOWFREQ_AMPLITUDE.0, LOWFREQ_AMPLITUDE.1);
    let white: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
    let low = gaussian_blur(&white, h, w, LOWFREQ_BLUR);
    let low_rms = (low.iter().map(|v| v * v).sum::<f64>() / low.len() as f64)
        .sqrt()
        .max(1e-9);

    let mut img = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let rho = phantom.rho(y as f64, x as f64);
            let interior = 1.0 / (1.0 + (-(1.0 - rho) / phantom.edge).exp());
            img[y * w + x] = phantom.intensity(y as f64, x as f64)
                + interior * low_amp * low[y * w + x] / low_rms;
        }
    }

    match label {
        1 => {
            // one bright disc, interior to the phantom and away from borders
            let radius = rng.uniform_in(cfg.lesion_radius.0, cfg.lesion_radius.1);
            let contrast = rng.uniform_in(cfg.lesion_contrast.0, cfg.lesion_contrast.1);
            let border = radius.ceil() + 2.0;
            let (cy, cx) = loop {
                let cy = rng.uniform_in(border, h as f64 - border);
                let cx = rng.uniform_in(border, w as f64 - border);
                if phantom.rho(cy, cx) < 0.62 {
                    break (cy, cx);
                }
            };
            for y in 0..h {
                for x in 0..w {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    // soft 1px falloff at the rim
                    let t = (radius - d).clamp(-1.0, 1.0) * 2.5;
                    let mask = 1.0 / (1.0 + (-t).exp());
                    img[y * w + x] += contrast * mask;
                }
            }
        }
        2 => {
            // band-pass blotches over the whole interior
            let amp = rng.uniform_in(TEXTURE_AMPLITUDE.0, TEXTURE_AMPLITUDE.1);
            let white: Vec<f64> = (0..h * w).map(|_| rng.normal()).collect();
            let fine = gaussian_blur(&white, h, w, TEXTURE_BLUR_FINE);
            let coarse = gaussian_blur(&white, h, w, TEXTURE_BLUR_COARSE);
            let band: Vec<f64> = fine.iter().zip(&coarse).map(|(f, c)| f - c).collect();
            let rms = (band.iter().map(|v| v * v).sum::<f64>() / band.len() as f64).sqrt();
            for y in 0..h {
                for x in 0..w {
                    let rho = phantom.rho(y as f64, x as f64);
                    if rho < 1.0 {
                        img[y * w + x] += amp * band[y * w + x] / rms;
                    }
                }
            }
        }
        _ => {}
    }

    for v in &mut img {
        *v = (*v + cfg.noise_sigma * rng.normal()).clamp(0.0, 1.0);
    }
    Tensor::new(vec![h, w, 1], img).unwrap()
}

/// Stratified 60/20/20 split, deterministic in the seed.
fn stratified_split(labels: &[usize], seed: u64) -> SplitIndices {
    let mut split = SplitIndices::default();
    for class in 0..NUM_CLASSES {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        let mut rng = RngState::with_stream(seed, &format!("split/{class}"));
        rng.shuffle(&mut idx);
        let n = idx.len();
        let n_train = (n * 6) / 10;
        let n_val = (n * 2) / 10;
        split.train.extend(&idx[..n_train]);
        split.val.extend(&idx[n_train..n_train + n_val]);
        split.test.extend(&idx[n_train + n_val..]);
    }
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    split
}

fn train_stats(samples: &[Sample], train: &[usize]) -> Result<(f64, f64), DataError> {
    if train.is_empty() {
        return Err(DataError::Dataset(
            "training split is empty; increase samples_per_class".into(),
        ));
    }
    Ok(train_stats_inner(samples, train))
}

fn train_stats_inner(samples: &[Sample], train: &[usize]) -> (f64, f64) {
    let mut count = 0usize;
    let mut mean = 0.0;
    for &i in train {
        for &v in samples[i].image.data() {
            mean += v;
            count += 1;
        }
    }
    mean /= count as f64;
    let mut var = 0.0;
    for &i in train {
        for &v in samples[i].image.data() {
            var += (v - mean) * (v - mean);
        }
    }
    var /= count as f64;
    (mean, var.sqrt().max(1e-8))
}

/// Generate the full dataset in memory.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let root = RngState::with_stream(cfg.seed, "synth");
    let mut samples = Vec::with_capacity(NUM_CLASSES * cfg.samples_per_class);
    for class in 0..NUM_CLASSES {
        for i in 0..cfg.samples_per_class {
            let mut rng = root.fork("sample", &[class as u64, i as u64]);
            samples.push(Sample {
                image: render_sample(cfg, class, &mut rng),
                label: class,
                id: format!("c{class}_{i:04}"),
            });
        }
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let split = stratified_split(&labels, cfg.seed);
    let normalization = train_stats(&samples, &split.train)?;
    Ok(Dataset {
        samples,
        split,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        normalization,
        seed: cfg.seed,
    })
}

// ---- disk I/O -------------------------------------------------------------------

/// Write `images/*.pgm`, `labels.csv` and `meta.json` under `dir`.
pub fn write_dataset(dataset: &Dataset, cfg: &SyntheticConfig, dir: &Path) -> Result<(), DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| DataError::Io {
        path: images.display().to_string(),
        source: e,
    })?;
    let mut csv = String::from("id,filename,label\n");
    for s in &dataset.samples {
        let filename = format!("{}.pgm", s.id);
        pgm::write_pgm(&images.join(&filename), &s.image)?;
        csv.push_str(&format!("{},{},{}\n", s.id, filename, s.label));
    }
    let labels_path = dir.join("labels.csv");
    fs::write(&labels_path, csv).map_err(|e| DataError::Io {
        path: labels_path.display().to_string(),
        source: e,
    })?;
    let meta = DatasetMeta {
        class_names: dataset.class_names.clone(),
        generator: cfg.clone(),
        seed: dataset.seed,
        normalization_mean: dataset.normalization.0,
        normalization_std: dataset.normalization.1,
    };
    let meta_path = dir.join("meta.json");
    let body = serde_json::to_string_pretty(&meta).map_err(|e| DataError::Dataset(e.to_string()))?;
    fs::write(&meta_path, body).map_err(|e| DataError::Io {
        path: meta_path.display().to_string(),
        source: e,
    })?;
    Ok(())
}

/// Load a dataset directory: decode PGMs to [0,1], resize to `target` when
/// given, recompute the split from the stored seed and normalization stats
/// from the training split. Per-file problems are collected and reported
/// together.
pub fn load_dataset(dir: &Path, target: Option<(usize, usize)>) -> Result<Dataset, DataError> {
    let labels_path = dir.join("labels.csv");
    let csv = fs::read_to_string(&labels_path).map_err(|e| DataError::Io {
        path: labels_path.display().to_string(),
        source: e,
    })?;
    let meta: DatasetMeta = {
        let meta_path = dir.join("meta.json");
        let body = fs::read_to_string(&meta_path).map_err(|e| DataError::Io {
            path: meta_path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&body).map_err(|e| DataError::Dataset(format!("bad meta.json: {e}")))?
    };
    let num_classes = meta.class_names.len();

    let mut samples = Vec::new();
    let mut problems = Vec::new();
    let mut seen_ids = HashSet::new();
    for (lineno, line) in csv.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "id,filename,label" {
                problems.push(format!("line 1: bad header {line:?}"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            problems.push(format!("line {}: expected 3 fields, got {}", lineno + 1, fields.len()));
            continue;
        }
        let (id, filename, label_str) = (fields[0], fields[1], fields[2]);
        if !seen_ids.insert(id.to_string()) {
            problems.push(format!("line {}: duplicate id {id}", lineno + 1));
            continue;
        }
        let label: usize = match label_str.trim().parse() {
            Ok(l) if l < num_classes => l,
            _ => {
                problems.push(format!(
                    "line {}: label {label_str:?} out of range for {num_classes} classes",
                    lineno + 1
                ));
                continue;
            }
        };
        let path = dir.join("images").join(filename);
        let image = match pgm::read_pgm(&path) {
            Ok(img) => img,
            Err(e) => {
                problems.push(format!("{}: {e}", path.display()));
                continue;
            }
        };
        let image = match target {
            Some((th, tw)) if image.shape() != [th, tw] => {
                crate::patch::bilinear_resize(&image, (th, tw))
            }
            _ => image,
        };
        let (h, w) = (image.shape()[0], image.shape()[1]);
        samples.push(Sample {
            image: image.reshaped(vec![h, w, 1]).unwrap(),
            label,
            id: id.to_string(),
        });
    }
    if !problems.is_empty() {
        return Err(DataError::LoadSummary(problems));
    }
    if samples.is_empty() {
        return Err(DataError::Dataset(format!(
            "dataset at {} contains zero samples",
            dir.display()
        )));
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let split = stratified_split(&labels, meta.seed);
    let normalization = train_stats(&samples, &split.train)?;
    Ok(Dataset {
        samples,
        split,
        class_names: meta.class_names,
        normalization,
        seed: meta.seed,
    })
}

// ---- augmentation ------------------------------------------------------------------

/// One draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotate_deg: f64,
    pub shift: (isize, isize),
    pub contrast: f64,
    pub brightness: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            flip_h: false,
            flip_v: false,
            rotate_deg: 0.0,
            shift: (0, 0),
            contrast: 1.0,
            brightness: 1.0,
        }
    }

    /// Flips are fair coins; rotation ±10°, translation ±5% of size,
    /// contrast and brightness scales ±10%.
    pub fn draw(rng: &mut RngState, h: usize, w: usize) -> Self {
        let max_dy = (h as f64 * 0.05).floor() as i64;
        let max_dx = (w as f64 * 0.05).floor() as i64;
        AugmentParams {
            flip_h: rng.below(2) == 1,
            flip_v: rng.below(2) == 1,
            rotate_deg: rng.uniform_in(-10.0, 10.0),
            shift: (
                (rng.below((2 * max_dy + 1) as u64) as i64 - max_dy) as isize,
                (rng.below((2 * max_dx + 1) as u64) as i64 - max_dx) as isize,
            ),
            contrast: rng.uniform_in(0.9, 1.1),
            brightness: rng.uniform_in(0.9, 1.1),
        }
    }
}

/// Apply augmentation with explicit parameters. Geometry is a single
/// bilinear resample (skipped entirely when the transform is the identity);
/// photometry is contrast about the image mean, then brightness, then a clip
/// to [0,1].
pub fn augment_with(sample: &Sample, params: &AugmentParams) -> Sample {
    let (h, w) = (sample.image.shape()[0], sample.image.shape()[1]);
    let src = sample.image.data();
    let mut img: Vec<f64> = src.to_vec();

    if params.flip_h {
        for y in 0..h {
            img[y * w..(y + 1) * w].reverse();
        }
    }
    if params.flip_v {
        for y in 0..h / 2 {
            for x in 0..w {
                img.swap(y * w + x, (h - 1 - y) * w + x);
            }
        }
    }

    if params.rotate_deg != 0.0 || params.shift != (0, 0) {
        let theta = params.rotate_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (ty, tx) = (params.shift.0 as f64, params.shift.1 as f64);
        let input = img.clone();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 - cy - ty;
                let dx = x as f64 - cx - tx;
                let sy = cos * dy + sin * dx + cy;
                let sx = -sin * dy + cos * dx + cx;
                img[y * w + x] = bilinear_at(&input, h, w, sy, sx);
            }
        }
    }

    if params.contrast != 1.0 || params.brightness != 1.0 {
        let mean: f64 = img.iter().sum::<f64>() / img.len() as f64;
        for v in &mut img {
            *v = ((*v - mean) * params.contrast + mean) * params.brightness;
            *v = v.clamp(0.0, 1.0);
        }
    }

    Sample {
        image: Tensor::new(vec![h, w, 1], img).unwrap(),
        label: sample.label,
        id: sample.id.clone(),
    }
}

/// Draw parameters from the stream and apply them.
pub fn augment(sample: &Sample, rng: &mut RngState) -> Sample {
    let (h, w) = (sample.image.shape()[0], sample.image.shape()[1]);
    let params = AugmentParams::draw(rng, h, w);
    augment_with(sample, &params)
}

fn bilinear_at(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < 0.0 || x < 0.0 || y > (h - 1) as f64 || x > (w - 1) as f64 {
        return 0.0;
    }
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
    let bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}
