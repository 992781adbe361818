//! Two-view stochastic augmentation pipeline.
//!
//! Pipeline order: random resized crop, horizontal flip, color jitter,
//! grayscale, optional gaussian blur. Pixels are clamped to [0, 1] after each
//! transform. Per-sample RNG streams are derived from
//! (global seed, epoch, sample index, view index), so results are identical
//! regardless of iteration order or worker count.
//!
//! Jitter semantics (the contract; no framework is replicated exactly):
//! brightness multiplies by `f`, contrast blends against the image luma mean,
//! saturation blends each pixel against its own luma, hue rotates in HSV.
//! Single-channel images skip saturation/hue and treat grayscale as identity.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{CoclError, Result};

/// One image: channels-first pixel grid in [0, 1] plus a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub label: u32,
}

impl ImageSample {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f64>, label: u32) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(CoclError::dimension(format!(
                "pixel buffer length {} does not match {channels}x{height}x{width}",
                pixels.len()
            )));
        }
        Ok(ImageSample {
            channels,
            height,
            width,
            pixels,
            label,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.pixels[(c * self.height + y) * self.width + x] = v;
    }

    /// Flattened pixel row for MLP input.
    pub fn flat(&self) -> &[f64] {
        &self.pixels
    }

    fn clamp_unit(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    /// Per-pixel luma (0.299, 0.587, 0.114 for 3 channels; identity for 1).
    fn luma(&self, y: usize, x: usize) -> f64 {
        if self.channels >= 3 {
            0.299 * self.at(0, y, x) + 0.587 * self.at(1, y, x) + 0.114 * self.at(2, y, x)
        } else {
            self.at(0, y, x)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlurConfig {
    /// Std-dev drawn uniformly from this range; kernel is 7x7.
    pub sigma_range: (f64, f64),
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugConfig {
    /// Crop area fraction range, within (0, 1].
    pub crop_scale: (f64, f64),
    pub target_size: (usize, usize),
    pub flip_prob: f64,
    pub jitter: JitterConfig,
    pub grayscale_prob: f64,
    pub blur: Option<BlurConfig>,
}

impl AugConfig {
    /// Defaults matching the standard contrastive recipe, with a mid-range
    /// crop scale suited to synthetic data.
    pub fn new(target_size: (usize, usize)) -> Self {
        AugConfig {
            crop_scale: (0.5, 1.0),
            target_size,
            flip_prob: 0.5,
            jitter: JitterConfig {
                brightness: 0.4,
                contrast: 0.4,
                saturation: 0.4,
                hue: 0.1,
                prob: 0.8,
            },
            grayscale_prob: 0.2,
            blur: None,
        }
    }

    /// A pipeline that is the identity map: useful for tests and ablations.
    pub fn identity(target_size: (usize, usize)) -> Self {
        AugConfig {
            crop_scale: (1.0, 1.0),
            target_size,
            flip_prob: 0.0,
            jitter: JitterConfig {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
                prob: 0.0,
            },
            grayscale_prob: 0.0,
            blur: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(CoclError::config(format!(
                "crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter.prob", self.jitter.prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoclError::config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(CoclError::config("target size must be positive"));
        }
        if let Some(b) = &self.blur {
            if !(0.0..=1.0).contains(&b.prob) || b.sigma_range.0 <= 0.0 || b.sigma_range.0 > b.sigma_range.1 {
                return Err(CoclError::config("invalid blur config"));
            }
        }
        Ok(())
    }
}

/// splitmix64 step; the standard way to spread correlated seed words.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic per-view seed from (global seed, epoch, sample index, view index).
pub fn view_seed(global_seed: u64, epoch: u64, sample_index: u64, view_index: u64) -> u64 {
    let mut state = global_seed;
    let mut out = splitmix64(&mut state);
    state ^= epoch.wrapping_mul(0x9e3779b97f4a7c15);
    out ^= splitmix64(&mut state);
    state ^= sample_index.wrapping_mul(0xc2b2ae3d27d4eb4f);
    out ^= splitmix64(&mut state);
    state ^= view_index.wrapping_mul(0x165667b19e3779f9);
    out ^= splitmix64(&mut state);
    out
}

/// Bilinear lookup with zero fill outside the grid.
pub(crate) fn bilinear_at(s: &ImageSample, c: usize, y: f64, x: f64) -> f64 {
    let get = |yy: i64, xx: i64| -> f64 {
        if yy < 0 || xx < 0 || yy >= s.height as i64 || xx >= s.width as i64 {
            0.0
        } else {
            s.at(c, yy as usize, xx as usize)
        }
    };
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let (y0, x0) = (y0 as i64, x0 as i64);
    get(y0, x0) * (1.0 - dy) * (1.0 - dx)
        + get(y0, x0 + 1) * (1.0 - dy) * dx
        + get(y0 + 1, x0) * dy * (1.0 - dx)
        + get(y0 + 1, x0 + 1) * dy * dx
}

/// Resize a crop window `(top, left, h, w)` of `s` to `target` by bilinear
/// interpolation. Sampling uses pixel-center alignment, so a same-size
/// full-frame "resize" is the identity.
fn resize_window(
    s: &ImageSample,
    top: usize,
    left: usize,
    h: usize,
    w: usize,
    target: (usize, usize),
) -> ImageSample {
    let (th, tw) = target;
    let mut out = ImageSample {
        channels: s.channels,
        height: th,
        width: tw,
        pixels: vec![0.0; s.channels * th * tw],
        label: s.label,
    };
    for c in 0..s.channels {
        for oy in 0..th {
            let sy = (oy as f64 + 0.5) * h as f64 / th as f64 - 0.5 + top as f64;
            for ox in 0..tw {
                let sx = (ox as f64 + 0.5) * w as f64 / tw as f64 - 0.5 + left as f64;
                // Clamp sample coordinates into the source frame; crop
                // windows are inside the image so this only trims the 0.5px
                // boundary overshoot.
                let sy = sy.clamp(0.0, s.height as f64 - 1.0);
                let sx = sx.clamp(0.0, s.width as f64 - 1.0);
                out.set(c, oy, ox, bilinear_at(s, c, sy, sx));
            }
        }
    }
    out
}

/// Random crop of area fraction in `scale_range` and aspect ratio in
/// [3/4, 4/3], resized to `target`. Falls back to a full-frame center crop
/// after 10 rejected proposals.
pub fn random_resized_crop(
    s: &ImageSample,
    scale_range: (f64, f64),
    target: (usize, usize),
    rng: &mut ChaCha12Rng,
) -> ImageSample {
    let (ih, iw) = (s.height, s.width);
    let area = (ih * iw) as f64;
    for _ in 0..10 {
        let frac = if scale_range.0 == scale_range.1 {
            scale_range.0
        } else {
            rng.random_range(scale_range.0..scale_range.1)
        };
        let aspect = rng.random_range(0.75..(4.0 / 3.0));
        let target_area = area * frac;
        let w = (target_area * aspect).sqrt().round() as usize;
        let h = (target_area / aspect).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= iw && h <= ih {
            let top = if h < ih { rng.random_range(0..=(ih - h)) } else { 0 };
            let left = if w < iw { rng.random_range(0..=(iw - w)) } else { 0 };
            let mut out = resize_window(s, top, left, h, w, target);
            out.clamp_unit();
            return out;
        }
    }
    let mut out = resize_window(s, 0, 0, ih, iw, target);
    out.clamp_unit();
    out
}

pub fn horizontal_flip(s: &ImageSample) -> ImageSample {
    let mut out = s.clone();
    for c in 0..s.channels {
        for y in 0..s.height {
            for x in 0..s.width {
                out.set(c, y, x, s.at(c, y, s.width - 1 - x));
            }
        }
    }
    out
}

pub fn grayscale(s: &ImageSample) -> ImageSample {
    if s.channels < 3 {
        return s.clone();
    }
    let mut out = s.clone();
    for y in 0..s.height {
        for x in 0..s.width {
            let g = s.luma(y, x);
            for c in 0..s.channels {
                out.set(c, y, x, g);
            }
        }
    }
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let v = max;
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation, hue, in that fixed order. All four
/// factors are always drawn so the RNG stream does not depend on channel
/// count; saturation/hue are no-ops for single-channel inputs.
pub fn color_jitter(s: &ImageSample, cfg: &JitterConfig, rng: &mut ChaCha12Rng) -> ImageSample {
    let draw = |rng: &mut ChaCha12Rng, strength: f64| -> f64 {
        if strength == 0.0 {
            1.0
        } else {
            rng.random_range((1.0 - strength).max(0.0)..1.0 + strength)
        }
    };
    let fb = draw(rng, cfg.brightness);
    let fc = draw(rng, cfg.contrast);
    let fs = draw(rng, cfg.saturation);
    let dh = if cfg.hue == 0.0 {
        0.0
    } else {
        rng.random_range(-cfg.hue..cfg.hue)
    };

    let mut out = s.clone();
    // Brightness.
    for p in &mut out.pixels {
        *p *= fb;
    }
    out.clamp_unit();
    // Contrast against the image luma mean.
    let mut mean = 0.0;
    for y in 0..out.height {
        for x in 0..out.width {
            mean += out.luma(y, x);
        }
    }
    mean /= (out.height * out.width) as f64;
    for p in &mut out.pixels {
        *p = (*p - mean) * fc + mean;
    }
    out.clamp_unit();
    if s.channels >= 3 {
        // Saturation: blend against per-pixel luma.
        for y in 0..out.height {
            for x in 0..out.width {
                let g = out.luma(y, x);
                for c in 0..out.channels {
                    let v = g + (out.at(c, y, x) - g) * fs;
                    out.set(c, y, x, v);
                }
            }
        }
        out.clamp_unit();
        // Hue rotation in HSV.
        if dh != 0.0 {
            for y in 0..out.height {
                for x in 0..out.width {
                    let (h, sat, v) = rgb_to_hsv(out.at(0, y, x), out.at(1, y, x), out.at(2, y, x));
                    let (r, g, b) = hsv_to_rgb(h + dh, sat, v);
                    out.set(0, y, x, r);
                    out.set(1, y, x, g);
                    out.set(2, y, x, b);
                }
            }
            out.clamp_unit();
        }
    }
    out
}

/// 7x7 gaussian blur with reflect padding.
pub fn gaussian_blur(s: &ImageSample, sigma: f64) -> ImageSample {
    const K: i64 = 3; // kernel radius for 7x7
    let mut kernel = [[0.0f64; 7]; 7];
    let mut total = 0.0;
    for (iy, row) in kernel.iter_mut().enumerate() {
        for (ix, k) in row.iter_mut().enumerate() {
            let dy = iy as f64 - K as f64;
            let dx = ix as f64 - K as f64;
            *k = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *k;
        }
    }
    for row in kernel.iter_mut() {
        for k in row.iter_mut() {
            *k /= total;
        }
    }

    let reflect = |v: i64, n: i64| -> usize {
        let mut v = v;
        if v < 0 {
            v = -v - 1;
        }
        if v >= n {
            v = 2 * n - 1 - v;
        }
        v.clamp(0, n - 1) as usize
    };

    let mut out = s.clone();
    for c in 0..s.channels {
        for y in 0..s.height as i64 {
            for x in 0..s.width as i64 {
                let mut acc = 0.0;
                for (iy, row) in kernel.iter().enumerate() {
                    let sy = reflect(y + iy as i64 - K, s.height as i64);
                    for (ix, k) in row.iter().enumerate() {
                        let sx = reflect(x + ix as i64 - K, s.width as i64);
                        acc += k * s.at(c, sy, sx);
                    }
                }
                out.set(c, y as usize, x as usize, acc);
            }
        }
    }
    out.clamp_unit();
    out
}

fn apply_pipeline(s: &ImageSample, cfg: &AugConfig, rng: &mut ChaCha12Rng) -> ImageSample {
    let mut img = random_resized_crop(s, cfg.crop_scale, cfg.target_size, rng);
    if cfg.flip_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.flip_prob {
        img = horizontal_flip(&img);
    }
    if cfg.jitter.prob > 0.0 && rng.random_range(0.0..1.0) < cfg.jitter.prob {
        img = color_jitter(&img, &cfg.jitter, rng);
    }
    if cfg.grayscale_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.grayscale_prob {
        img = grayscale(&img);
    }
    if let Some(blur) = &cfg.blur {
        if blur.prob > 0.0 && rng.random_range(0.0..1.0) < blur.prob {
            let sigma = if blur.sigma_range.0 == blur.sigma_range.1 {
                blur.sigma_range.0
            } else {
                rng.random_range(blur.sigma_range.0..blur.sigma_range.1)
            };
            img = gaussian_blur(&img, sigma);
        }
    }
    img
}

/// Two independent pipeline draws of one sample.
pub fn two_views(s: &ImageSample, cfg: &AugConfig, rng_seed: u64) -> Result<(ImageSample, ImageSample)> {
    cfg.validate()?;
    let mut state = rng_seed;
    let seed_a = splitmix64(&mut state);
    let seed_b = splitmix64(&mut state);
    let mut rng_a = ChaCha12Rng::seed_from_u64(seed_a);
    let mut rng_b = ChaCha12Rng::seed_from_u64(seed_b);
    Ok((
        apply_pipeline(s, cfg, &mut rng_a),
        apply_pipeline(s, cfg, &mut rng_b),
    ))
}

/// Augment (sample, seed) pairs across up to `workers` threads. Seeding is
/// per sample, so the output does not depend on the worker count.
pub fn augment_batch(
    items: &[(&ImageSample, u64)],
    cfg: &AugConfig,
    workers: usize,
) -> Result<Vec<(ImageSample, ImageSample)>> {
    cfg.validate()?;
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 || items.len() < 2 {
        return items.iter().map(|(s, seed)| two_views(s, cfg, *seed)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let mut results: Vec<Option<Vec<(ImageSample, ImageSample)>>> = Vec::new();
    results.resize_with(workers, || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (wi, part) in items.chunks(chunk).enumerate() {
            handles.push((wi, scope.spawn(move || {
                part.iter()
                    .map(|(s, seed)| two_views(s, cfg, *seed))
                    .collect::<Result<Vec<_>>>()
            })));
        }
        for (wi, h) in handles {
            results[wi] = Some(h.join().expect("augmentation worker panicked")?);
        }
        Ok::<(), CoclError>(())
    })?;
    Ok(results.into_iter().flatten().flatten().collect())
}
