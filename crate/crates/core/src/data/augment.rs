//! Train and eval image pipelines.
//!
//! Images enter as `[C, H, W]` values in [0, 1] (see
//! [`Dataset::image_unit`](super::Dataset::image_unit)) and leave as
//! `[C, out, out]` float32 normalized per channel by mean 0.5 and std 0.5.
//!
//! Resizing is bilinear with the half-pixel ("align corners = false")
//! convention: output pixel `i` samples source coordinate
//! `(i + 0.5) · in / out − 0.5`, clamped at 0, with the right/bottom
//! neighbour clamped to the last row or column. Resizing to the same size is
//! the identity.

use std::str::FromStr;

use clear_tensor::Rng;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentMode {
    Train,
    Eval,
}

impl FromStr for AugmentMode {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(AugmentMode::Train),
            "eval" => Ok(AugmentMode::Eval),
            _ => Err(CoreError::input(format!("unknown augment mode `{s}` (train, eval)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Side length of the square output.
    pub output_size: usize,
    /// Range of the crop area as a fraction of the image area.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Range of the crop aspect ratio width / height, sampled log-uniformly.
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub flip_p: f64,
    pub mean: f64,
    pub std: f64,
}

impl AugmentConfig {
    pub fn new(output_size: usize) -> Self {
        AugmentConfig {
            output_size,
            scale_min: 0.6,
            scale_max: 1.0,
            ratio_min: 3.0 / 4.0,
            ratio_max: 4.0 / 3.0,
            flip_p: 0.5,
            mean: 0.5,
            std: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_size == 0 {
            return Err(CoreError::input("augment output size must be positive"));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return Err(CoreError::input(format!(
                "crop scale range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0 < self.ratio_min && self.ratio_min <= self.ratio_max) {
            return Err(CoreError::input(format!(
                "crop ratio range [{}, {}] must satisfy 0 < min <= max",
                self.ratio_min, self.ratio_max
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(CoreError::input(format!("flip probability {} outside [0, 1]", self.flip_p)));
        }
        if !(self.std > 0.0) {
            return Err(CoreError::input(format!("normalization std {} must be positive", self.std)));
        }
        Ok(())
    }
}

/// Crop window `(top, left, height, width)`.
pub type Window = (usize, usize, usize, usize);

/// Random resized crop window: up to 10 draws of (area, log-ratio), then a
/// centred crop of the whole image clipped to the ratio range.
pub fn crop_window(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Window {
    let area = (h * w) as f64;
    let (lr0, lr1) = (cfg.ratio_min.ln(), cfg.ratio_max.ln());
    for _ in 0..10 {
        let target = area * rng.uniform_range(cfg.scale_min, cfg.scale_max);
        let ratio = rng.uniform_range(lr0, lr1).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.below((h - ch + 1) as u64) as usize;
            let left = rng.below((w - cw + 1) as u64) as usize;
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.ratio_min {
        (((w as f64 / cfg.ratio_min).round() as usize).clamp(1, h), w)
    } else if in_ratio > cfg.ratio_max {
        (h, ((h as f64 * cfg.ratio_max).round() as usize).clamp(1, w))
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn source_taps(out: usize, len: usize, start: usize) -> Vec<(usize, usize, f64)> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (start + i0, start + i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinearly resizes the window `win` of a `[C, H, W]` image to
/// `[C, out_h, out_w]`.
pub fn resize_bilinear(image: &[f32], dims: [usize; 3], win: Window, out_h: usize, out_w: usize) -> Vec<f64> {
    let [c, _, w] = dims;
    let (top, left, ch, cw) = win;
    let rows = source_taps(out_h, ch, top);
    let cols = source_taps(out_w, cw, left);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in image.chunks_exact(dims[1] * w).take(c) {
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let p = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
                let bottom = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
                out.push(top + fy * (bottom - top));
            }
        }
    }
    out
}

fn normalize(v: &[f64], cfg: &AugmentConfig) -> Vec<f32> {
    v.iter()
        .map(|&x| ((x - cfg.mean) / cfg.std).clamp(-1.0, 1.0) as f32)
        .collect()
}

/// Runs the pipeline on one `[C, H, W]` image of unit-scaled values.
///
/// Train: random resized crop, horizontal flip with probability `flip_p`,
/// normalize. Eval: resize of the full image, normalize. Eval mode draws
/// nothing from `rng`. Outputs are clamped to [-1, 1], which only matters
/// for float inputs outside [0, 1].
pub fn augment(image: &[f32], dims: [usize; 3], cfg: &AugmentConfig, rng: &mut Rng, mode: AugmentMode) -> Vec<f32> {
    let [c, h, w] = dims;
    debug_assert_eq!(image.len(), c * h * w);
    let s = cfg.output_size;
    match mode {
        AugmentMode::Eval => normalize(&resize_bilinear(image, dims, (0, 0, h, w), s, s), cfg),
        AugmentMode::Train => {
            let win = crop_window(h, w, cfg, rng);
            let mut v = resize_bilinear(image, dims, win, s, s);
            if rng.bernoulli(cfg.flip_p) {
                v.chunks_exact_mut(s).for_each(|row| row.reverse());
            }
            normalize(&v, cfg)
        }
    }
}
