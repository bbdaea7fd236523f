//! Image perturbation families with severity schedules and phase splits.
//!
//! Fifteen perturbation families operate on grayscale images (rank-2 tensors
//! with values in [0, 1]). Each family exposes a parameter-level function
//! (identity at zero distortion) plus a severity schedule: severities 1..=5
//! index a linear parameter progression, so distortion grows monotonically.
//!
//! Families are partitioned into three disjoint phase splits so that the
//! perturbations seen at meta-test time are never seen during training or
//! model selection:
//!
//! * train — GaussNoise, DefocusBlur, GlassBlur, Snow, Frost, Contrast, Elastic
//! * val   — ShotNoise, MotionBlur, Fog, Pixelate
//! * test  — ImpulseNoise, ZoomBlur, Brightness, Quantize
//!
//! All randomness comes from the caller's RNG, so a fixed seed reproduces a
//! perturbation bit-for-bit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
// Required for no_std builds; when dev-dependencies pull std into the crate
// graph, std's inherent float methods shadow the trait and the import idles.
#[allow(unused_imports)]
use num_traits::Float;

/// One of the fifteen perturbation families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    GaussNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    ZoomBlur,
    GlassBlur,
    Snow,
    Frost,
    Fog,
    Brightness,
    Contrast,
    Elastic,
    Pixelate,
    /// Coarse quantization of pixel levels (block-DCT-free JPEG stand-in).
    Quantize,
}

impl Family {
    pub const ALL: [Family; 15] = [
        Family::GaussNoise,
        Family::ShotNoise,
        Family::ImpulseNoise,
        Family::DefocusBlur,
        Family::MotionBlur,
        Family::ZoomBlur,
        Family::GlassBlur,
        Family::Snow,
        Family::Frost,
        Family::Fog,
        Family::Brightness,
        Family::Contrast,
        Family::Elastic,
        Family::Pixelate,
        Family::Quantize,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::GaussNoise => "gauss_noise",
            Family::ShotNoise => "shot_noise",
            Family::ImpulseNoise => "impulse_noise",
            Family::DefocusBlur => "defocus_blur",
            Family::MotionBlur => "motion_blur",
            Family::ZoomBlur => "zoom_blur",
            Family::GlassBlur => "glass_blur",
            Family::Snow => "snow",
            Family::Frost => "frost",
            Family::Fog => "fog",
            Family::Brightness => "brightness",
            Family::Contrast => "contrast",
            Family::Elastic => "elastic",
            Family::Pixelate => "pixelate",
            Family::Quantize => "quantize",
        }
    }

    pub fn from_name(name: &str) -> Option<Family> {
        Family::ALL.iter().copied().find(|f| f.name() == name)
    }
}

/// A family plus severity in 1..=5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub family: Family,
    pub severity: u8,
}

impl ShiftSpec {
    pub fn new(family: Family, severity: u8) -> Result<ShiftSpec> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Domain(format!("severity {severity} outside 1..=5")));
        }
        Ok(ShiftSpec { family, severity })
    }
}

/// Which disjoint family pool an episode draws its shifts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Val,
    Test,
}

/// The disjoint family pool of a phase. Pools cover all fifteen families and
/// share no member.
pub fn phase_split(phase: Phase) -> &'static [Family] {
    match phase {
        Phase::Train => &[
            Family::GaussNoise,
            Family::DefocusBlur,
            Family::GlassBlur,
            Family::Snow,
            Family::Frost,
            Family::Contrast,
            Family::Elastic,
        ],
        Phase::Val => &[Family::ShotNoise, Family::MotionBlur, Family::Fog, Family::Pixelate],
        Phase::Test => &[
            Family::ImpulseNoise,
            Family::ZoomBlur,
            Family::Brightness,
            Family::Quantize,
        ],
    }
}

// ── severity schedules (linear parameter progressions) ──────────────────

const GAUSS_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.16, 0.20];
const SHOT_COUNT: [f64; 5] = [48.0, 38.0, 28.0, 18.0, 8.0];
const IMPULSE_FRAC: [f64; 5] = [0.02, 0.04, 0.06, 0.08, 0.10];
const DEFOCUS_RADIUS: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
const MOTION_LEN: [usize; 5] = [2, 3, 4, 5, 6];
const ZOOM_LEVELS: [usize; 5] = [1, 2, 3, 4, 5];
const GLASS_ITERS: [usize; 5] = [1, 2, 3, 4, 5];
const SNOW_DENSITY: [f64; 5] = [0.03, 0.06, 0.09, 0.12, 0.15];
const FROST_COVER: [f64; 5] = [0.08, 0.16, 0.24, 0.32, 0.40];
const FOG_BLEND: [f64; 5] = [0.15, 0.25, 0.35, 0.45, 0.55];
const BRIGHT_DELTA: [f64; 5] = [0.06, 0.12, 0.18, 0.24, 0.30];
const CONTRAST_FACTOR: [f64; 5] = [0.84, 0.68, 0.52, 0.36, 0.20];
const ELASTIC_AMP: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 2.5];
const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 5, 6];
const QUANTIZE_LEVELS: [usize; 5] = [18, 14, 10, 6, 2];

/// Apply a perturbation at the given severity. The input must be a rank-2
/// tensor; the output has the same shape with all values clamped to [0, 1].
/// Deterministic given the RNG state.
pub fn apply_shift<R: Rng + ?Sized>(img: &Tensor, spec: ShiftSpec, rng: &mut R) -> Result<Tensor> {
    if img.rank() != 2 {
        return Err(Error::Shape(format!(
            "apply_shift: rank-2 image required, got {:?}",
            img.shape()
        )));
    }
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::Domain(format!("severity {} outside 1..=5", spec.severity)));
    }
    let s = (spec.severity - 1) as usize;
    let out = match spec.family {
        Family::GaussNoise => gaussian_noise(img, GAUSS_SIGMA[s], rng),
        Family::ShotNoise => shot_noise(img, SHOT_COUNT[s], rng),
        Family::ImpulseNoise => impulse_noise(img, IMPULSE_FRAC[s], rng),
        Family::DefocusBlur => defocus_blur(img, DEFOCUS_RADIUS[s]),
        Family::MotionBlur => motion_blur(img, MOTION_LEN[s], rng),
        Family::ZoomBlur => zoom_blur(img, ZOOM_LEVELS[s]),
        Family::GlassBlur => glass_blur(img, GLASS_ITERS[s], rng),
        Family::Snow => snow(img, SNOW_DENSITY[s], rng),
        Family::Frost => frost(img, FROST_COVER[s], rng),
        Family::Fog => fog(img, FOG_BLEND[s], rng),
        Family::Brightness => brightness_shift(img, BRIGHT_DELTA[s]),
        Family::Contrast => contrast_scale(img, CONTRAST_FACTOR[s]),
        Family::Elastic => elastic_warp(img, ELASTIC_AMP[s], rng),
        Family::Pixelate => pixelate(img, PIXELATE_BLOCK[s]),
        Family::Quantize => quantize_levels(img, QUANTIZE_LEVELS[s]),
    };
    out.assert_finite("apply_shift")?;
    Ok(out)
}

// ── parameter-level family implementations ──────────────────────────────
// Each is the identity at zero distortion (sigma 0, factor 1, delta 0, ...).

/// Additive Gaussian noise with standard deviation `sigma`.
pub fn gaussian_noise<R: Rng + ?Sized>(img: &Tensor, sigma: f64, rng: &mut R) -> Tensor {
    if sigma == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    map_clamped(img, |p| p + normal.sample(rng))
}

/// Photon-count (Poisson) noise: each pixel is resampled as
/// `Poisson(p * count) / count`. Smaller counts mean stronger noise.
pub fn shot_noise<R: Rng + ?Sized>(img: &Tensor, count: f64, rng: &mut R) -> Tensor {
    map_clamped(img, |p| {
        let lambda = p.max(0.0) * count;
        if lambda <= 0.0 {
            0.0
        } else {
            Poisson::new(lambda).expect("positive lambda").sample(rng) / count
        }
    })
}

/// Salt-and-pepper noise: each pixel is forced to 0 or 1 with probability
/// `fraction`.
pub fn impulse_noise<R: Rng + ?Sized>(img: &Tensor, fraction: f64, rng: &mut R) -> Tensor {
    map_clamped(img, |p| {
        if rng.random::<f64>() < fraction {
            if rng.random::<bool>() {
                1.0
            } else {
                0.0
            }
        } else {
            p
        }
    })
}

/// Disk-kernel blur with the given radius (in pixels). Radius 0 is identity.
pub fn defocus_blur(img: &Tensor, radius: f64) -> Tensor {
    if radius <= 0.0 {
        return img.clone();
    }
    let r = radius.ceil() as i64;
    let size = (2 * r + 1) as usize;
    let mut kernel = vec![0.0; size * size];
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            if (dy * dy + dx * dx) as f64 <= radius * radius {
                kernel[((dy + r) as usize) * size + (dx + r) as usize] = 1.0;
                total += 1.0;
            }
        }
    }
    for k in kernel.iter_mut() {
        *k /= total;
    }
    convolve_clamped(img, &kernel, size, size)
}

/// Straight-line blur of the given length at a random orientation.
pub fn motion_blur<R: Rng + ?Sized>(img: &Tensor, length: usize, rng: &mut R) -> Tensor {
    if length <= 1 {
        return img.clone();
    }
    let angle = rng.random::<f64>() * core::f64::consts::PI;
    let (sin, cos) = (angle.sin(), angle.cos());
    let half = (length - 1) as f64 / 2.0;
    let r = half.ceil() as i64;
    let size = (2 * r + 1) as usize;
    let mut kernel = vec![0.0; size * size];
    // Dense taps along the segment with bilinear splatting, so the kernel
    // support grows smoothly (and distortion monotonically) with length.
    let taps = 8 * length;
    for i in 0..=taps {
        let t = -half + (i as f64 / taps as f64) * 2.0 * half;
        let fy = t * sin + r as f64;
        let fx = t * cos + r as f64;
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let y1 = (y0 + 1).min(size - 1);
        let x1 = (x0 + 1).min(size - 1);
        kernel[y0 * size + x0] += (1.0 - ty) * (1.0 - tx);
        kernel[y0 * size + x1] += (1.0 - ty) * tx;
        kernel[y1 * size + x0] += ty * (1.0 - tx);
        kernel[y1 * size + x1] += ty * tx;
    }
    let total: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= total;
    }
    convolve_clamped(img, &kernel, size, size)
}

/// Box-pyramid zoom stand-in: the mean of box blurs with radii 0..=levels.
pub fn zoom_blur(img: &Tensor, levels: usize) -> Tensor {
    if levels == 0 {
        return img.clone();
    }
    let (h, w) = dims(img);
    let mut acc = vec![0.0; h * w];
    for r in 0..=levels {
        let blurred = box_blur(img, r);
        for (a, b) in acc.iter_mut().zip(blurred.data()) {
            *a += b;
        }
    }
    let n = (levels + 1) as f64;
    Tensor::from_vec(&[h, w], acc.iter().map(|a| (a / n).clamp(0.0, 1.0)).collect())
        .expect("zoom blur output")
}

/// Glass-like distortion: repeatedly swap each pixel with a random 8-neighbor
/// in raster order.
pub fn glass_blur<R: Rng + ?Sized>(img: &Tensor, iterations: usize, rng: &mut R) -> Tensor {
    let (h, w) = dims(img);
    let mut data = img.data().to_vec();
    for _ in 0..iterations {
        for y in 0..h {
            for x in 0..w {
                let dy = rng.random_range(-1i64..=1);
                let dx = rng.random_range(-1i64..=1);
                let ny = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                let nx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                data.swap(y * w + x, ny * w + nx);
            }
        }
    }
    Tensor::from_vec(&[h, w], data).expect("glass blur output")
}

/// Sparse bright specks: each pixel is pushed toward white with probability
/// `density`.
pub fn snow<R: Rng + ?Sized>(img: &Tensor, density: f64, rng: &mut R) -> Tensor {
    map_clamped(img, |p| {
        if rng.random::<f64>() < density {
            let speck = 0.85 + 0.15 * rng.random::<f64>();
            p.max(speck)
        } else {
            p
        }
    })
}

/// Occlusive frost: the brightest `cover` fraction of a smooth random field
/// is overlaid with translucent white.
pub fn frost<R: Rng + ?Sized>(img: &Tensor, cover: f64, rng: &mut R) -> Tensor {
    if cover <= 0.0 {
        return img.clone();
    }
    let (h, w) = dims(img);
    let field = smooth_field(h, w, 4, rng);
    // Exact coverage: threshold at the (1 - cover) quantile of the field.
    let mut sorted = field.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let k = (((1.0 - cover) * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    let thresh = sorted[k];
    let alpha = 0.65;
    let data = img
        .data()
        .iter()
        .zip(&field)
        .map(|(p, f)| {
            if *f >= thresh {
                ((1.0 - alpha) * p + alpha * 0.8).clamp(0.0, 1.0)
            } else {
                *p
            }
        })
        .collect();
    Tensor::from_vec(&[h, w], data).expect("frost output")
}

/// Haze: blend toward a bright smooth random field with weight `blend`.
pub fn fog<R: Rng + ?Sized>(img: &Tensor, blend: f64, rng: &mut R) -> Tensor {
    if blend <= 0.0 {
        return img.clone();
    }
    let (h, w) = dims(img);
    let field = smooth_field(h, w, 4, rng);
    let data = img
        .data()
        .iter()
        .zip(&field)
        .map(|(p, f)| {
            let fogval = 0.65 + 0.35 * (f + 1.0) / 2.0;
            ((1.0 - blend) * p + blend * fogval).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::from_vec(&[h, w], data).expect("fog output")
}

/// Uniform brightness shift by `delta`.
pub fn brightness_shift(img: &Tensor, delta: f64) -> Tensor {
    map_clamped(img, |p| p + delta)
}

/// Mean-preserving contrast scaling: `mean + factor * (p - mean)`.
/// Factor 1 is the identity.
pub fn contrast_scale(img: &Tensor, factor: f64) -> Tensor {
    let mean = img.sum() / img.len() as f64;
    map_clamped(img, |p| mean + factor * (p - mean))
}

/// Smooth random displacement field with the given amplitude (in pixels),
/// sampled bilinearly.
pub fn elastic_warp<R: Rng + ?Sized>(img: &Tensor, amplitude: f64, rng: &mut R) -> Tensor {
    if amplitude == 0.0 {
        return img.clone();
    }
    let (h, w) = dims(img);
    let dy = smooth_field(h, w, 4, rng);
    let dx = smooth_field(h, w, 4, rng);
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let fy = y as f64 + amplitude * dy[y * w + x];
            let fx = x as f64 + amplitude * dx[y * w + x];
            data.push(bilinear(img, fy, fx).clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(&[h, w], data).expect("elastic output")
}

/// Average-pool `block`-sized tiles and repeat the mean across each tile.
/// Block 1 is the identity.
pub fn pixelate(img: &Tensor, block: usize) -> Tensor {
    if block <= 1 {
        return img.clone();
    }
    let (h, w) = dims(img);
    let mut out = vec![0.0; h * w];
    let mut y = 0;
    while y < h {
        let yend = (y + block).min(h);
        let mut x = 0;
        while x < w {
            let xend = (x + block).min(w);
            let mut total = 0.0;
            for yy in y..yend {
                for xx in x..xend {
                    total += img.data()[yy * w + xx];
                }
            }
            let mean = total / ((yend - y) * (xend - x)) as f64;
            for yy in y..yend {
                for xx in x..xend {
                    out[yy * w + xx] = mean;
                }
            }
            x = xend;
        }
        y = yend;
    }
    Tensor::from_vec(&[h, w], out).expect("pixelate output")
}

/// Quantize pixel values to `levels` evenly spaced levels (levels >= 2).
pub fn quantize_levels(img: &Tensor, levels: usize) -> Tensor {
    let l = levels.max(2) as f64 - 1.0;
    map_clamped(img, |p| (p * l).round() / l)
}

// ── shared raster helpers ───────────────────────────────────────────────

fn dims(img: &Tensor) -> (usize, usize) {
    (img.shape()[0], img.shape()[1])
}

fn map_clamped(img: &Tensor, mut f: impl FnMut(f64) -> f64) -> Tensor {
    let data = img.data().iter().map(|p| f(*p).clamp(0.0, 1.0)).collect();
    Tensor::from_vec(img.shape(), data).expect("clamped map output")
}

/// Convolve with a dense kernel, clamping coordinates at the borders.
fn convolve_clamped(img: &Tensor, kernel: &[f64], kh: usize, kw: usize) -> Tensor {
    let (h, w) = dims(img);
    let (cy, cx) = (kh as i64 / 2, kw as i64 / 2);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for ky in 0..kh as i64 {
                for kx in 0..kw as i64 {
                    let sy = (y + ky - cy).clamp(0, h as i64 - 1) as usize;
                    let sx = (x + kx - cx).clamp(0, w as i64 - 1) as usize;
                    acc += kernel[(ky * kw as i64 + kx) as usize] * img.data()[sy * w + sx];
                }
            }
            out.push(acc.clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(&[h, w], out).expect("convolution output")
}

/// Mean filter over a (2r+1)^2 window with clamped borders. Radius 0 is a copy.
fn box_blur(img: &Tensor, radius: usize) -> Tensor {
    if radius == 0 {
        return img.clone();
    }
    let size = 2 * radius + 1;
    let kernel = vec![1.0 / (size * size) as f64; size * size];
    convolve_clamped(img, &kernel, size, size)
}

/// Bilinear sample with coordinates clamped into the image.
fn bilinear(img: &Tensor, fy: f64, fx: f64) -> f64 {
    let (h, w) = dims(img);
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = fy - y0 as f64;
    let tx = fx - x0 as f64;
    let p00 = img.data()[y0 * w + x0];
    let p01 = img.data()[y0 * w + x1];
    let p10 = img.data()[y1 * w + x0];
    let p11 = img.data()[y1 * w + x1];
    p00 * (1.0 - ty) * (1.0 - tx) + p01 * (1.0 - ty) * tx + p10 * ty * (1.0 - tx) + p11 * ty * tx
}

/// Smooth random field in [-1, 1]: a coarse grid of uniform draws,
/// bilinearly upsampled to (h, w).
fn smooth_field<R: Rng + ?Sized>(h: usize, w: usize, cells: usize, rng: &mut R) -> Vec<f64> {
    let gh = cells + 1;
    let gw = cells + 1;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let gy = y as f64 / (h - 1).max(1) as f64 * (gh - 1) as f64;
            let gx = x as f64 / (w - 1).max(1) as f64 * (gw - 1) as f64;
            let y0 = gy.floor() as usize;
            let x0 = gx.floor() as usize;
            let y1 = (y0 + 1).min(gh - 1);
            let x1 = (x0 + 1).min(gw - 1);
            let ty = gy - y0 as f64;
            let tx = gx - x0 as f64;
            let v = grid[y0 * gw + x0] * (1.0 - ty) * (1.0 - tx)
                + grid[y0 * gw + x1] * (1.0 - ty) * tx
                + grid[y1 * gw + x0] * ty * (1.0 - tx)
                + grid[y1 * gw + x1] * ty * tx;
            out.push(v);
        }
    }
    out
}
