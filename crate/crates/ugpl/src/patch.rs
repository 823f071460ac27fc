//! Uncertainty-guided patch extraction.
//!
//! The normalized uncertainty map is upsampled to input resolution and K
//! diverse high-uncertainty P×P patches are selected greedily: pick the best
//! location, suppress a margin-extended region around it, repeat. Selection
//! is either the best window mean (computed with a summed-area table) or the
//! argmax pixel clamped into bounds; suppression is either a hard binary mask
//! or a multiplicative Gaussian bump. When everything is suppressed, a
//! uniformly random valid location is used and flagged.
//!
//! [`brute_force_reference`] re-derives the same contract by exhaustive scan
//! and serves as the oracle for [`extract_patches`].

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suppression {
    HardMask,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    WindowMean,
    PixelArgmax,
}

/// Extraction parameters. `diversity_lambda` documents the explicit
/// distance-penalty weight of the selection objective; suppression is the
/// mechanism actually evaluated, so the value is carried but unused.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchExtractConfig {
    pub patch_size: usize,
    pub num_patches: usize,
    pub margin: usize,
    pub suppression: Suppression,
    pub gaussian_sigma: f64,
    pub selection: Selection,
    pub diversity_lambda: f64,
}

impl Default for PatchExtractConfig {
    fn default() -> Self {
        let patch_size = 16;
        PatchExtractConfig {
            patch_size,
            num_patches: 3,
            margin: patch_size / 4,
            suppression: Suppression::HardMask,
            gaussian_sigma: patch_size as f64 / 2.0,
            selection: Selection::WindowMean,
            diversity_lambda: 0.0,
        }
    }
}

impl PatchExtractConfig {
    pub fn validate(&self, image_h: usize, image_w: usize) -> Result<(), TensorError> {
        if self.patch_size == 0 || self.patch_size > image_h.min(image_w) {
            return Err(TensorError::Domain {
                op: "extract_patches",
                reason: format!(
                    "patch size {} invalid for {}x{} image",
                    self.patch_size, image_h, image_w
                ),
            });
        }
        if self.num_patches == 0 {
            return Err(TensorError::Domain {
                op: "extract_patches",
                reason: "num_patches must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// K extracted patches with their selection metadata. Coordinates are
/// (x, y) top-left pixel positions.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub patches: Vec<Tensor>,
    pub coords: Vec<(usize, usize)>,
    pub fallback_used: Vec<bool>,
    pub scores: Vec<f64>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Bilinear upsampling with corner-aligned sampling. Errors if the target is
/// smaller than the source on either axis.
pub fn upsample_map(map: &Tensor, target: (usize, usize)) -> Result<Tensor, TensorError> {
    let shape = map.shape();
    if shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "upsample_map",
            shape: shape.to_vec(),
            reason: "expected [h, w]".into(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(TensorError::Domain {
            op: "upsample_map",
            reason: format!("target {th}x{tw} smaller than source {h}x{w}"),
        });
    }
    Ok(bilinear_resize(map, target))
}

/// Corner-aligned bilinear resample to any target size (used by upsampling,
/// border-clip recovery and dataset loading).
pub fn bilinear_resize(map: &Tensor, target: (usize, usize)) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (th, tw) = target;
    let src = map.data();
    let scale_y = if th > 1 { (h - 1) as f64 / (th - 1) as f64 } else { 0.0 };
    let scale_x = if tw > 1 { (w - 1) as f64 / (tw - 1) as f64 } else { 0.0 };
    let mut out = vec![0.0; th * tw];
    for ty in 0..th {
        let sy = ty as f64 * scale_y;
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for tx in 0..tw {
            let sx = tx as f64 * scale_x;
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[ty * tw + tx] = top * (1.0 - fy) + bottom * fy;
        }
    }
    Tensor::new(vec![th, tw], out).unwrap()
}

/// Working state shared by the fast and brute-force implementations: the
/// suppressed uncertainty surface and, in hard-mask mode, the binary mask.
struct SuppressState {
    h: usize,
    w: usize,
    field: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl SuppressState {
    fn new(upsampled: &Tensor, suppression: Suppression) -> Self {
        let (h, w) = (upsampled.shape()[0], upsampled.shape()[1]);
        SuppressState {
            h,
            w,
            field: upsampled.data().to_vec(),
            mask: matches!(suppression, Suppression::HardMask).then(|| vec![false; h * w]),
        }
    }

    /// Current selectable value at a pixel (V in the greedy loop).
    fn value(&self, y: usize, x: usize) -> f64 {
        match &self.mask {
            Some(m) if m[y * self.w + x] => 0.0,
            _ => self.field[y * self.w + x],
        }
    }

    fn max_value(&self) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for y in 0..self.h {
            for x in 0..self.w {
                best = best.max(self.value(y, x));
            }
        }
        best
    }

    /// Suppress the margin-extended region around a selected top-left.
    fn suppress(&mut self, y: usize, x: usize, cfg: &PatchExtractConfig) {
        let p = cfg.patch_size;
        let m = cfg.margin;
        let y0 = y.saturating_sub(m);
        let x0 = x.saturating_sub(m);
        let y1 = (y + p + m).min(self.h);
        let x1 = (x + p + m).min(self.w);
        match &mut self.mask {
            Some(mask) => {
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        mask[yy * self.w + xx] = true;
                    }
                }
            }
            None => {
                // Gaussian bump, peak 1 at the patch center, truncated at the
                // margin-extended window.
                let cy = y as f64 + (p as f64 - 1.0) / 2.0;
                let cx = x as f64 + (p as f64 - 1.0) / 2.0;
                let two_sigma_sq = 2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let dy = yy as f64 - cy;
                        let dx = xx as f64 - cx;
                        let g = (-(dy * dy + dx * dx) / two_sigma_sq).exp();
                        self.field[yy * self.w + xx] *= 1.0 - g;
                    }
                }
            }
        }
    }
}

fn fallback_threshold(suppression: Suppression) -> f64 {
    match suppression {
        Suppression::HardMask => 0.0,
        Suppression::Gaussian => 1e-12,
    }
}

/// Uniformly random valid top-left. Draws y then x; both implementations
/// share this so their rng consumption agrees exactly.
fn random_top_left(state: &SuppressState, p: usize, rng: &mut RngState) -> (usize, usize) {
    let y = rng.below((state.h - p + 1) as u64) as usize;
    let x = rng.below((state.w - p + 1) as u64) as usize;
    (y, x)
}

fn window_mean_at(state: &SuppressState, y: usize, x: usize, p: usize) -> f64 {
    let mut sum = 0.0;
    for yy in y..y + p {
        for xx in x..x + p {
            sum += state.value(yy, xx);
        }
    }
    sum / (p * p) as f64
}

/// Selection of one top-left; returns (y, x, score). Strict `>` comparisons
/// keep the first (lexicographically smallest) location on ties.
fn select_fast(state: &SuppressState, cfg: &PatchExtractConfig) -> (usize, usize, f64) {
    let p = cfg.patch_size;
    match cfg.selection {
        Selection::WindowMean => {
            // summed-area table over the current V
            let (h, w) = (state.h, state.w);
            let mut sat = vec![0.0; (h + 1) * (w + 1)];
            for y in 0..h {
                let mut row_acc = 0.0;
                for x in 0..w {
                    row_acc += state.value(y, x);
                    sat[(y + 1) * (w + 1) + (x + 1)] = sat[y * (w + 1) + (x + 1)] + row_acc;
                }
            }
            let area = (p * p) as f64;
            let mut best = (0usize, 0usize, f64::NEG_INFINITY);
            for y in 0..=h - p {
                for x in 0..=w - p {
                    let s = sat[(y + p) * (w + 1) + (x + p)] - sat[y * (w + 1) + (x + p)]
                        - sat[(y + p) * (w + 1) + x]
                        + sat[y * (w + 1) + x];
                    let mean = s / area;
                    if mean > best.2 {
                        best = (y, x, mean);
                    }
                }
            }
            best
        }
        Selection::PixelArgmax => select_pixel_argmax(state, p),
    }
}

/// Exhaustive selection with no summed-area table: every valid window mean is
/// accumulated directly.
fn select_brute(state: &SuppressState, cfg: &PatchExtractConfig) -> (usize, usize, f64) {
    let p = cfg.patch_size;
    match cfg.selection {
        Selection::WindowMean => {
            let mut best = (0usize, 0usize, f64::NEG_INFINITY);
            for y in 0..=state.h - p {
                for x in 0..=state.w - p {
                    let mean = window_mean_at(state, y, x, p);
                    if mean > best.2 {
                        best = (y, x, mean);
                    }
                }
            }
            best
        }
        Selection::PixelArgmax => select_pixel_argmax(state, p),
    }
}

/// Argmax pixel used as top-left, clamped so the patch fits.
fn select_pixel_argmax(state: &SuppressState, p: usize) -> (usize, usize, f64) {
    let mut best = (0usize, 0usize, f64::NEG_INFINITY);
    for y in 0..state.h {
        for x in 0..state.w {
            let v = state.value(y, x);
            if v > best.2 {
                best = (y, x, v);
            }
        }
    }
    let y = best.0.min(state.h - p);
    let x = best.1.min(state.w - p);
    (y, x, best.2)
}

fn cut_patch(image: &Tensor, y: usize, x: usize, p: usize) -> Tensor {
    let w = image.shape()[1];
    let src = image.data();
    let mut out = Vec::with_capacity(p * p);
    for yy in y..y + p {
        out.extend_from_slice(&src[yy * w + x..yy * w + x + p]);
    }
    let patch = Tensor::new(vec![p, p], out).unwrap();
    // Clamped coordinates always yield a full-size patch; the resize path is
    // a safety net for clipped extractions.
    let patch = if patch.shape() == [p, p] {
        patch
    } else {
        bilinear_resize(&patch, (p, p))
    };
    patch.reshaped(vec![p, p, 1]).unwrap()
}

fn extract_impl(
    image: &Tensor,
    umap: &Tensor,
    cfg: &PatchExtractConfig,
    rng: &mut RngState,
    select: fn(&SuppressState, &PatchExtractConfig) -> (usize, usize, f64),
) -> Result<PatchSet, TensorError> {
    let ishape = image.shape();
    if ishape.len() != 3 || ishape[2] != 1 {
        return Err(TensorError::InvalidShape {
            op: "extract_patches",
            shape: ishape.to_vec(),
            reason: "expected [H, W, 1] image".into(),
        });
    }
    let (h, w) = (ishape[0], ishape[1]);
    cfg.validate(h, w)?;
    let image_hw = Tensor::new(vec![h, w], image.data().to_vec()).unwrap();
    let upsampled = upsample_map(umap, (h, w))?;
    let mut state = SuppressState::new(&upsampled, cfg.suppression);

    let p = cfg.patch_size;
    let mut set = PatchSet {
        patches: Vec::with_capacity(cfg.num_patches),
        coords: Vec::with_capacity(cfg.num_patches),
        fallback_used: Vec::with_capacity(cfg.num_patches),
        scores: Vec::with_capacity(cfg.num_patches),
    };
    for _ in 0..cfg.num_patches {
        let threshold = fallback_threshold(cfg.suppression);
        let (y, x, score, fallback) = if state.max_value() > threshold {
            let (y, x, score) = select(&state, cfg);
            (y, x, score, false)
        } else {
            let (y, x) = random_top_left(&state, p, rng);
            let score = match cfg.selection {
                Selection::WindowMean => window_mean_at(&state, y, x, p),
                Selection::PixelArgmax => state.value(y, x),
            };
            (y, x, score, true)
        };
        state.suppress(y, x, cfg);
        set.patches.push(cut_patch(&image_hw, y, x, p));
        set.coords.push((x, y));
        set.fallback_used.push(fallback);
        set.scores.push(score);
    }
    Ok(set)
}

/// Greedy uncertainty-guided extraction (summed-area-table selection).
pub fn extract_patches(
    image: &Tensor,
    umap: &Tensor,
    cfg: &PatchExtractConfig,
    rng: &mut RngState,
) -> Result<PatchSet, TensorError> {
    extract_impl(image, umap, cfg, rng, select_fast)
}

/// Exhaustive-scan reference with the identical contract; the test oracle for
/// [`extract_patches`].
pub fn brute_force_reference(
    image: &Tensor,
    umap: &Tensor,
    cfg: &PatchExtractConfig,
    rng: &mut RngState,
) -> Result<PatchSet, TensorError> {
    extract_impl(image, umap, cfg, rng, select_brute)
}

/// Deterministic grid of K patch top-lefts ignoring the uncertainty map.
/// K = 3 lands on image thirds along the main diagonal; square K uses the
/// √K×√K centered grid; otherwise the first K cells of the ⌈√K⌉ grid.
pub fn fixed_grid_coords(h: usize, w: usize, p: usize, k: usize) -> Vec<(usize, usize)> {
    let clamp = |cy: f64, cx: f64| -> (usize, usize) {
        let y = (cy - p as f64 / 2.0).round().max(0.0) as usize;
        let x = (cx - p as f64 / 2.0).round().max(0.0) as usize;
        (x.min(w - p), y.min(h - p))
    };
    if k == 3 {
        return (0..3)
            .map(|i| {
                let f = (2 * i + 1) as f64 / 6.0;
                clamp(f * h as f64, f * w as f64)
            })
            .collect();
    }
    let g = (k as f64).sqrt().ceil() as usize;
    let mut coords = Vec::with_capacity(k);
    'outer: for gy in 0..g {
        for gx in 0..g {
            if coords.len() == k {
                break 'outer;
            }
            let cy = (2 * gy + 1) as f64 * h as f64 / (2 * g) as f64;
            let cx = (2 * gx + 1) as f64 * w as f64 / (2 * g) as f64;
            coords.push(clamp(cy, cx));
        }
    }
    coords
}

/// Cut patches at fixed coordinates (used by the fixed-grid and random-map
/// ablations as well as by callers that already know the locations).
pub fn patches_at(image: &Tensor, coords: &[(usize, usize)], p: usize) -> PatchSet {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let image_hw = Tensor::new(vec![h, w], image.data().to_vec()).unwrap();
    PatchSet {
        patches: coords
            .iter()
            .map(|&(x, y)| cut_patch(&image_hw, y, x, p))
            .collect(),
        coords: coords.to_vec(),
        fallback_used: vec![false; coords.len()],
        scores: vec![0.0; coords.len()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeros_map(h: usize, w: usize) -> Tensor {
        Tensor::zeros(vec![h, w])
    }

    fn image(h: usize, w: usize) -> Tensor {
        Tensor::new(
            vec![h, w, 1],
            (0..h * w).map(|i| (i % 97) as f64 / 96.0).collect(),
        )
        .unwrap()
    }

    fn cfg(p: usize, k: usize) -> PatchExtractConfig {
        PatchExtractConfig {
            patch_size: p,
            num_patches: k,
            margin: p / 4,
            ..PatchExtractConfig::default()
        }
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let m = Tensor::full(vec![3, 3], 0.4);
        let up = upsample_map(&m, (9, 9)).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));

        let one = Tensor::full(vec![1, 1], 0.7);
        let up = upsample_map(&one, (5, 4)).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn upsample_matches_closed_form_rows() {
        // [[0,1],[0,1]] to 2x4 → each row [0, 1/3, 2/3, 1]
        let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = upsample_map(&m, (2, 4)).unwrap();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in up.data().chunks_exact(4) {
            for (a, b) in row.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_rejects_shrinking() {
        let m = zeros_map(4, 4);
        assert!(upsample_map(&m, (3, 4)).is_err());
    }

    #[test]
    fn zero_map_falls_back_deterministically() {
        let img = image(32, 32);
        let map = zeros_map(8, 8);
        let c = cfg(8, 2);
        let mut r1 = RngState::with_stream(9, "patch");
        let set1 = extract_patches(&img, &map, &c, &mut r1).unwrap();
        let mut r2 = RngState::with_stream(9, "patch");
        let set2 = extract_patches(&img, &map, &c, &mut r2).unwrap();
        assert!(set1.fallback_used.iter().all(|&f| f));
        assert_eq!(set1.coords, set2.coords);
        for (x, y) in set1.coords {
            assert!(x <= 32 - 8 && y <= 32 - 8);
        }
    }

    #[test]
    fn delta_peak_window_mean_picks_smallest_covering_top_left() {
        let img = image(32, 32);
        let mut map = zeros_map(32, 32);
        map.set_at(&[10, 10], 1.0);
        let c = cfg(8, 1);
        let mut rng = RngState::new(0);
        let set = extract_patches(&img, &map, &c, &mut rng).unwrap();
        assert_eq!(set.coords, vec![(3, 3)]);
        assert!(!set.fallback_used[0]);
        // brute force agrees over all 625 valid windows
        let mut rng = RngState::new(0);
        let brute = brute_force_reference(&img, &map, &c, &mut rng).unwrap();
        assert_eq!(brute.coords, set.coords);
    }

    #[test]
    fn two_peaks_selected_in_height_order() {
        let img = image(32, 32);
        let mut map = zeros_map(32, 32);
        map.set_at(&[4, 4], 1.0);
        map.set_at(&[24, 24], 0.8);
        let mut c = cfg(8, 2);
        c.margin = 2;
        let mut rng = RngState::new(0);
        let set = extract_patches(&img, &map, &c, &mut rng).unwrap();
        let covers = |(x, y): (usize, usize), py: usize, px: usize| {
            y <= py && py < y + 8 && x <= px && px < x + 8
        };
        assert!(covers(set.coords[0], 4, 4), "{:?}", set.coords);
        assert!(covers(set.coords[1], 24, 24), "{:?}", set.coords);
        assert!(set.scores[0] >= set.scores[1]);
        let mut rng = RngState::new(0);
        let brute = brute_force_reference(&img, &map, &c, &mut rng).unwrap();
        assert_eq!(brute.coords, set.coords);
        assert_eq!(brute.fallback_used, set.fallback_used);
    }

    #[test]
    fn corner_peak_pixel_argmax_clamps() {
        let img = image(16, 16);
        let mut map = zeros_map(16, 16);
        map.set_at(&[15, 15], 1.0);
        let mut c = cfg(8, 1);
        c.selection = Selection::PixelArgmax;
        let mut rng = RngState::new(1);
        let set = extract_patches(&img, &map, &c, &mut rng).unwrap();
        assert_eq!(set.coords, vec![(8, 8)]);
        let mut rng = RngState::new(1);
        let brute = brute_force_reference(&img, &map, &c, &mut rng).unwrap();
        assert_eq!(brute.coords, set.coords);
    }

    #[test]
    fn oversized_patch_is_config_error() {
        let img = image(16, 16);
        let map = zeros_map(4, 4);
        let c = cfg(17, 1);
        let mut rng = RngState::new(1);
        assert!(extract_patches(&img, &map, &c, &mut rng).is_err());
    }

    #[test]
    fn extreme_configs_stay_in_bounds() {
        let mut rng = RngState::new(77);
        for &(h, w, p, k) in &[(16usize, 24usize, 16usize, 9usize), (17, 17, 4, 25), (32, 8, 8, 6)] {
            let img = image(h, w);
            let map = Tensor::new(
                vec![h / 2, w / 2],
                (0..(h / 2) * (w / 2))
                    .map(|i| ((i * 37) % 101) as f64 / 100.0)
                    .collect(),
            )
            .unwrap();
            for suppression in [Suppression::HardMask, Suppression::Gaussian] {
                let c = PatchExtractConfig {
                    patch_size: p,
                    num_patches: k,
                    margin: p / 4,
                    suppression,
                    ..PatchExtractConfig::default()
                };
                let set = extract_patches(&img, &map, &c, &mut rng).unwrap();
                assert_eq!(set.len(), k);
                for (i, &(x, y)) in set.coords.iter().enumerate() {
                    assert!(x + p <= w && y + p <= h, "oob at {i}: ({x},{y})");
                    assert_eq!(set.patches[i].shape(), &[p, p, 1]);
                }
            }
        }
    }

    #[test]
    fn hard_mask_scores_non_increasing() {
        let mut rng = RngState::new(5);
        let img = image(32, 32);
        let map = Tensor::new(
            vec![16, 16],
            (0..256).map(|i| ((i * 13) % 89) as f64 / 88.0).collect(),
        )
        .unwrap();
        let c = cfg(8, 3);
        let set = extract_patches(&img, &map, &c, &mut rng).unwrap();
        assert!(set.fallback_used.iter().all(|&f| !f));
        for pair in set.scores.windows(2) {
            assert!(pair[0] >= pair[1], "{:?}", set.scores);
        }
    }

    #[test]
    fn fixed_grid_k3_is_diagonal_thirds() {
        let coords = fixed_grid_coords(64, 64, 16, 3);
        // centers at 64/6, 64/2, 5·64/6 → top-lefts ≈ 3, 24, 45
        assert_eq!(coords, vec![(3, 3), (24, 24), (45, 45)]);
    }

    #[test]
    fn fixed_grid_k4_is_2x2() {
        let coords = fixed_grid_coords(64, 64, 16, 4);
        assert_eq!(coords, vec![(8, 8), (40, 8), (8, 40), (40, 40)]);
    }

    #[test]
    fn patches_at_cuts_expected_pixels() {
        let img = image(8, 8);
        let set = patches_at(&img, &[(2, 3)], 4);
        assert_eq!(set.patches[0].at(&[0, 0, 0]), img.at(&[3, 2, 0]));
        assert_eq!(set.patches[0].at(&[3, 3, 0]), img.at(&[6, 5, 0]));
    }
}
