//! Raster augmentations, including forward-diffusion Gaussian noise.
//!
//! Every augmentation is a pure function of `(spec, image)`: the spec's seed
//! keys the only random stream. Geometric transforms keep the raster shape and
//! clamp to `[0, 1]`. Diffusion noise returns unclamped values and records the
//! raster's `(min, max)` on the output image.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng;
use crate::world::ToyImage;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("crop {crop}x{crop} larger than {width}x{height} raster")]
    CropTooLarge { crop: usize, width: usize, height: usize },
    #[error("noise step {step} outside 0..={max}")]
    NoiseStep { step: usize, max: usize },
    #[error("invalid augmentation parameter: {0}")]
    Param(String),
    #[error("distortion strength needs a non-empty sample")]
    EmptySample,
}

pub type Result<T> = std::result::Result<T, AugmentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Identity,
    RandFlip,
    RandResizedCrop,
    RandomCrop,
    CenterCrop,
    RandomAffine,
    RandomInvert,
    DiffusionNoise,
    MocoRecipe,
}

/// Kind-specific knobs; unset fields fall back to the defaults below.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degrees: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invert_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_step: Option<usize>,
}

const DEFAULT_FLIP_PROB: f64 = 0.5;
const DEFAULT_SCALE: (f64, f64) = (0.25, 1.0);
const MOCO_SCALE: (f64, f64) = (0.2, 1.0);
const DEFAULT_RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
const DEFAULT_DEGREES: f64 = 15.0;
const DEFAULT_TRANSLATE: f64 = 0.1;
const DEFAULT_INVERT_PROB: f64 = 0.5;
const MOCO_INVERT_PROB: f64 = 0.2;

/// Weak and strong diffusion presets.
pub const DIFFUSION_WEAK_STEP: usize = 500;
pub const DIFFUSION_STRONG_STEP: usize = 800;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    #[serde(default)]
    pub params: AugmentParams,
    #[serde(default)]
    pub seed: u64,
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind, seed: u64) -> Self {
        Self {
            kind,
            params: AugmentParams::default(),
            seed,
        }
    }

    pub fn identity() -> Self {
        Self::new(AugmentKind::Identity, 0)
    }

    pub fn flip(prob: f64, seed: u64) -> Self {
        let mut spec = Self::new(AugmentKind::RandFlip, seed);
        spec.params.flip_prob = Some(prob);
        spec
    }

    pub fn diffusion(step: usize, seed: u64) -> Self {
        let mut spec = Self::new(AugmentKind::DiffusionNoise, seed);
        spec.params.noise_step = Some(step);
        spec
    }

    pub fn diffusion_weak(seed: u64) -> Self {
        Self::diffusion(DIFFUSION_WEAK_STEP, seed)
    }

    pub fn diffusion_strong(seed: u64) -> Self {
        Self::diffusion(DIFFUSION_STRONG_STEP, seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let p = &self.params;
        for (name, v) in [("flip_prob", p.flip_prob), ("invert_prob", p.invert_prob)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(AugmentError::Param(format!("{name} must lie in [0, 1]")));
                }
            }
        }
        if let Some((lo, hi)) = p.scale {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return Err(AugmentError::Param("scale must satisfy 0 < lo <= hi <= 1".into()));
            }
        }
        if let Some((lo, hi)) = p.ratio {
            if !(lo > 0.0 && lo <= hi) {
                return Err(AugmentError::Param("ratio must satisfy 0 < lo <= hi".into()));
            }
        }
        if p.crop_size == Some(0) {
            return Err(AugmentError::Param("crop_size must be positive".into()));
        }
        if self.kind == AugmentKind::DiffusionNoise {
            let step = p
                .noise_step
                .ok_or_else(|| AugmentError::Param("diffusion_noise requires noise_step".into()))?;
            if step > schedule.steps() {
                return Err(AugmentError::NoiseStep {
                    step,
                    max: schedule.steps(),
                });
            }
        }
        Ok(())
    }

    /// Short label for reports, e.g. `diffusion_noise(t=800)`.
    pub fn label(&self) -> String {
        let name = serde_json::to_value(self.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        match (self.kind, self.params.noise_step) {
            (AugmentKind::DiffusionNoise, Some(t)) => format!("{name}(t={t})"),
            _ => name,
        }
    }
}

/// DDPM forward-process schedule: `alpha_bar(t) = prod_{s<=t} (1 - beta_s)`,
/// with `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linear in `t` from `beta_start` (t = 1) to `beta_end` (t = steps).
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(AugmentError::Param(
                "schedule needs steps >= 1 and 0 < beta_start <= beta_end < 1".into(),
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=steps`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

impl Default for NoiseSchedule {
    /// 1000 steps, beta from 1e-4 to 0.02.
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// `x_t = sqrt(alpha_bar_t) * x_0 + sqrt(1 - alpha_bar_t) * eps`, `eps ~ N(0, 1)`.
pub fn diffuse(image: &ToyImage, t: usize, seed: u64, schedule: &NoiseSchedule) -> Result<ToyImage> {
    if t > schedule.steps() {
        return Err(AugmentError::NoiseStep {
            step: t,
            max: schedule.steps(),
        });
    }
    if t == 0 {
        return Ok(image.clone());
    }
    let ab = schedule.alpha_bar(t);
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut rng = rng(seed);
    let pixels: Vec<f64> = image
        .pixels()
        .iter()
        .map(|&x| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            signal * x + noise * eps
        })
        .collect();
    let range = pixels.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
        (lo.min(p), hi.max(p))
    });
    Ok(image.with_pixels(pixels, Some(range)))
}

struct Raster<'a> {
    data: &'a [f64],
    w: usize,
    h: usize,
}

impl Raster<'_> {
    fn at(&self, x: isize, y: isize) -> f64 {
        if x < 0 || y < 0 || x >= self.w as isize || y >= self.h as isize {
            0.0
        } else {
            self.data[y as usize * self.w + x as usize]
        }
    }

    /// Bilinear sample at continuous pixel-center coordinates; zero outside.
    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x0 + 1, y0) * fx;
        let bottom = self.at(x0, y0 + 1) * (1.0 - fx) + self.at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

fn flip_horizontal(data: &[f64], w: usize) -> Vec<f64> {
    data.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Crops `[x0, x0 + cw) x [y0, y0 + ch)` and resizes back to `w x h`.
fn crop_resize(data: &[f64], w: usize, h: usize, x0: usize, y0: usize, cw: usize, ch: usize) -> Vec<f64> {
    let src = Raster { data, w, h };
    let mut out = Vec::with_capacity(w * h);
    for oy in 0..h {
        for ox in 0..w {
            let sx = x0 as f64 + (ox as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
            let sy = y0 as f64 + (oy as f64 + 0.5) * ch as f64 / h as f64 - 0.5;
            let sx = sx.clamp(x0 as f64, (x0 + cw - 1) as f64);
            let sy = sy.clamp(y0 as f64, (y0 + ch - 1) as f64);
            out.push(src.bilinear(sx, sy));
        }
    }
    out
}

fn resized_crop(
    data: &[f64],
    w: usize,
    h: usize,
    scale: (f64, f64),
    ratio: (f64, f64),
    rng: &mut crate::rng::Rng,
) -> Vec<f64> {
    let area = (w * h) as f64;
    let (log_lo, log_hi) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let aspect = if log_hi > log_lo {
            rng.random_range(log_lo..=log_hi).exp()
        } else {
            ratio.0
        };
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let x0 = rng.random_range(0..=w - cw);
            let y0 = rng.random_range(0..=h - ch);
            return crop_resize(data, w, h, x0, y0, cw, ch);
        }
    }
    data.to_vec()
}

fn affine(data: &[f64], w: usize, h: usize, degrees: f64, translate: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let angle = if degrees > 0.0 {
        rng.random_range(-degrees..=degrees).to_radians()
    } else {
        0.0
    };
    let max_dx = translate * w as f64;
    let max_dy = translate * h as f64;
    let dx = if max_dx > 0.0 {
        rng.random_range(-max_dx..=max_dx).round()
    } else {
        0.0
    };
    let dy = if max_dy > 0.0 {
        rng.random_range(-max_dy..=max_dy).round()
    } else {
        0.0
    };
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let src = Raster { data, w, h };
    let mut out = Vec::with_capacity(w * h);
    for oy in 0..h {
        for ox in 0..w {
            // inverse map: undo translation, then rotate by -angle about the center
            let (px, py) = (ox as f64 - dx - cx, oy as f64 - dy - cy);
            let sx = c * px + s * py + cx;
            let sy = -s * px + c * py + cy;
            out.push(src.bilinear(sx, sy));
        }
    }
    out
}

fn checked_crop(crop: usize, w: usize, h: usize) -> Result<usize> {
    if crop > w || crop > h {
        Err(AugmentError::CropTooLarge {
            crop,
            width: w,
            height: h,
        })
    } else {
        Ok(crop)
    }
}

/// Applies `spec` to `image` with the default noise schedule.
pub fn apply(spec: &AugmentSpec, image: &ToyImage) -> Result<ToyImage> {
    apply_with_schedule(spec, image, &NoiseSchedule::default())
}

pub fn apply_with_schedule(spec: &AugmentSpec, image: &ToyImage, schedule: &NoiseSchedule) -> Result<ToyImage> {
    spec.validate(schedule)?;
    let (w, h) = (image.raster_width(), image.raster_height());
    let data = image.pixels();
    let p = &spec.params;
    let mut rng = rng(spec.seed);
    let out = match spec.kind {
        AugmentKind::Identity => return Ok(image.clone()),
        AugmentKind::DiffusionNoise => {
            let step = p.noise_step.expect("validated");
            return diffuse(image, step, spec.seed, schedule);
        }
        AugmentKind::RandFlip => {
            if rng.random::<f64>() < p.flip_prob.unwrap_or(DEFAULT_FLIP_PROB) {
                flip_horizontal(data, w)
            } else {
                data.to_vec()
            }
        }
        AugmentKind::RandResizedCrop => resized_crop(
            data,
            w,
            h,
            p.scale.unwrap_or(DEFAULT_SCALE),
            p.ratio.unwrap_or(DEFAULT_RATIO),
            &mut rng,
        ),
        AugmentKind::RandomCrop => {
            let crop = checked_crop(p.crop_size.unwrap_or(w * 3 / 4), w, h)?;
            let x0 = rng.random_range(0..=w - crop);
            let y0 = rng.random_range(0..=h - crop);
            crop_resize(data, w, h, x0, y0, crop, crop)
        }
        AugmentKind::CenterCrop => {
            let crop = checked_crop(p.crop_size.unwrap_or(w * 3 / 4), w, h)?;
            crop_resize(data, w, h, (w - crop) / 2, (h - crop) / 2, crop, crop)
        }
        AugmentKind::RandomAffine => affine(
            data,
            w,
            h,
            p.degrees.unwrap_or(DEFAULT_DEGREES),
            p.translate.unwrap_or(DEFAULT_TRANSLATE),
            &mut rng,
        ),
        AugmentKind::RandomInvert => {
            if rng.random::<f64>() < p.invert_prob.unwrap_or(DEFAULT_INVERT_PROB) {
                data.iter().map(|v| 1.0 - v).collect()
            } else {
                data.to_vec()
            }
        }
        AugmentKind::MocoRecipe => {
            // resized crop, then inversion with small probability, then flip
            let mut x = resized_crop(
                data,
                w,
                h,
                p.scale.unwrap_or(MOCO_SCALE),
                p.ratio.unwrap_or(DEFAULT_RATIO),
                &mut rng,
            );
            if rng.random::<f64>() < p.invert_prob.unwrap_or(MOCO_INVERT_PROB) {
                x.iter_mut().for_each(|v| *v = 1.0 - *v);
            }
            if rng.random::<f64>() < p.flip_prob.unwrap_or(DEFAULT_FLIP_PROB) {
                x = flip_horizontal(&x, w);
            }
            x
        }
    };
    let clamped = out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(image.with_pixels(clamped, None))
}

fn l2(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Mean of `||apply(spec, x) - x|| / ||x||` over the images with non-zero norm.
pub fn distortion_strength(spec: &AugmentSpec, sample: &[ToyImage]) -> Result<f64> {
    if sample.is_empty() {
        return Err(AugmentError::EmptySample);
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for image in sample {
        let norm = l2(image.pixels());
        if norm == 0.0 {
            continue;
        }
        let out = apply(spec, image)?;
        let diff: Vec<f64> = out.pixels().iter().zip(image.pixels()).map(|(a, b)| a - b).collect();
        total += l2(&diff) / norm;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}
