//! Procedural dataset and episode sampling.
//!
//! The dataset is a synthetic grayscale image collection: five pattern types
//! (oriented bars, rings, checkerboards, blobs, linear gradients) crossed with
//! per-type variants give `n_classes` visually distinct classes; per-item
//! jitter (position, angle, contrast, pixel noise) makes items within a class
//! vary. Classes are split by fraction into meta-train / validation / test
//! groups with disjoint labels.
//!
//! Episodes pair an N-way K-shot support set with a query set. Both sets are
//! perturbed: an episode first draws a pool of at most `max_shifts` family+
//! severity combinations from its phase's family split, then every support
//! and query instance independently draws one member of the pool and is
//! perturbed by it. `max_shifts = 0` yields a clean (unperturbed) episode,
//! used by diagnostics and tests.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shifts::{apply_shift, phase_split, Phase, ShiftSpec};
use crate::tensor::Tensor;
// Required for no_std builds; when dev-dependencies pull std into the crate
// graph, std's inherent float methods shadow the trait and the import idles.
#[allow(unused_imports)]
use num_traits::Float;

/// Fractions of classes assigned to the train/val/test label splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.6, val: 0.2, test: 0.2 }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<SplitFractions> {
        let s = SplitFractions { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let sum = self.train + self.val + self.test;
        if !(self.train > 0.0 && self.val > 0.0 && self.test > 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }

    /// Number of classes in each split; every split gets at least one class.
    pub fn counts(&self, n_classes: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        if n_classes < 3 {
            return Err(Error::Config(format!("need at least 3 classes, got {n_classes}")));
        }
        let n_train = ((self.train * n_classes as f64).round() as usize).max(1);
        let n_val = ((self.val * n_classes as f64).round() as usize).max(1);
        if n_train + n_val + 1 > n_classes {
            return Err(Error::Config(format!(
                "split {}/{}/{} leaves no test classes out of {n_classes}",
                self.train, self.val, self.test
            )));
        }
        Ok((n_train, n_val, n_classes - n_train - n_val))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub split: SplitFractions,
}

/// In-memory dataset: per-class image lists plus the class split.
#[derive(Clone, Debug)]
pub struct Dataset {
    height: usize,
    width: usize,
    by_class: Vec<Vec<Tensor>>,
    split: SplitFractions,
}

impl Dataset {
    /// Assemble a dataset from per-class image lists (all rank-2, same shape).
    pub fn from_class_images(
        height: usize,
        width: usize,
        by_class: Vec<Vec<Tensor>>,
        split: SplitFractions,
    ) -> Result<Dataset> {
        split.counts(by_class.len())?;
        for (c, imgs) in by_class.iter().enumerate() {
            if imgs.is_empty() {
                return Err(Error::Config(format!("class {c} has no items")));
            }
            for img in imgs {
                if img.shape() != [height, width] {
                    return Err(Error::Shape(format!(
                        "class {c}: image shape {:?} vs dataset {height}x{width}",
                        img.shape()
                    )));
                }
            }
        }
        Ok(Dataset { height, width, by_class, split })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_classes(&self) -> usize {
        self.by_class.len()
    }

    pub fn split(&self) -> SplitFractions {
        self.split
    }

    pub fn class_images(&self, class: usize) -> &[Tensor] {
        &self.by_class[class]
    }

    /// Global class ids belonging to a phase. Classes are assigned
    /// contiguously: train first, then val, then test.
    pub fn phase_classes(&self, phase: Phase) -> core::ops::Range<usize> {
        let (n_train, n_val, _) = self.split.counts(self.n_classes()).expect("validated at construction");
        match phase {
            Phase::Train => 0..n_train,
            Phase::Val => n_train..n_train + n_val,
            Phase::Test => n_train + n_val..self.n_classes(),
        }
    }

    /// Clean meta-train items as (image, label) pairs, labels re-indexed to
    /// 0..n_train_classes for the classifier head.
    pub fn train_items(&self) -> Vec<(&Tensor, usize)> {
        let range = self.phase_classes(Phase::Train);
        let base = range.start;
        let mut items = Vec::new();
        for c in range {
            for img in &self.by_class[c] {
                items.push((img, c - base));
            }
        }
        items
    }
}

// ── procedural generation ───────────────────────────────────────────────

/// Generate the synthetic dataset. Requires `height, width >= 8`,
/// `n_classes >= 3`, and at least one item per class; deterministic given the
/// RNG state.
pub fn gen_dataset<R: Rng + ?Sized>(cfg: &DatasetConfig, rng: &mut R) -> Result<Dataset> {
    if cfg.height < 8 || cfg.width < 8 {
        return Err(Error::Config(format!(
            "image size {}x{} below the 8x8 minimum",
            cfg.height, cfg.width
        )));
    }
    if cfg.per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    cfg.split.counts(cfg.n_classes)?;
    let variants = cfg.n_classes.div_ceil(10) * 2;
    let mut by_class = Vec::with_capacity(cfg.n_classes);
    for class in 0..cfg.n_classes {
        let mut items = Vec::with_capacity(cfg.per_class);
        for _ in 0..cfg.per_class {
            items.push(render_item(class, variants, cfg.height, cfg.width, rng)?);
        }
        by_class.push(items);
    }
    Dataset::from_class_images(cfg.height, cfg.width, by_class, cfg.split)
}

/// One jittered item of a class. Pattern type = (class / 2) mod 5, so
/// neighbouring classes share a type and differ only in a variant parameter
/// (variant index = class mod 2 + 2 * (class div 10)). Any contiguous run of
/// five or more classes therefore contains same-type pairs, which keeps
/// few-shot episodes from being solvable by pattern type alone.
fn render_item<R: Rng + ?Sized>(
    class: usize,
    variants: usize,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let ptype = (class / 2) % 5;
    let v = ((class % 2) + 2 * (class / 10)) as f64;
    let nv = variants as f64;
    let background = 0.12 + 0.12 * rng.random::<f64>();
    let amplitude = 0.55 + 0.20 * rng.random::<f64>();
    let jx = (rng.random::<f64>() * 2.0 - 1.0) * 2.0; // +-2 px position jitter
    let jy = (rng.random::<f64>() * 2.0 - 1.0) * 2.0;
    let ja = (rng.random::<f64>() * 2.0 - 1.0) * 0.12; // +-0.12 rad angle jitter
    let jp = rng.random::<f64>() - 0.5; // generic +-0.5 parameter jitter
    let noise_sigma = 0.04;

    let hh = h as f64;
    let ww = w as f64;
    let cy = hh / 2.0 + jy;
    let cx = ww / 2.0 + jx;

    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let yf = y as f64;
            let xf = x as f64;
            let pat = match ptype {
                // Oriented bars: stripe direction encodes the variant.
                0 => {
                    let angle = core::f64::consts::PI * (v + 0.3) / nv + ja;
                    let s = (xf - cx) * angle.cos() + (yf - cy) * angle.sin();
                    let period = (4.6 + 0.6 * jp) * hh / 16.0;
                    let t = (s / period).fract().abs();
                    if t < 0.45 || t > 0.95 {
                        1.0
                    } else {
                        0.0
                    }
                }
                // Rings: radius encodes the variant.
                1 => {
                    let radius = (0.13 + 0.26 * v / nv.max(1.0) + 0.02 * jp) * hh;
                    let d = ((yf - cy).powi(2) + (xf - cx).powi(2)).sqrt();
                    let width = 1.3 * (hh / 16.0).powi(2);
                    (-(d - radius).powi(2) / width).exp()
                }
                // Checkerboards: cell size encodes the variant.
                2 => {
                    let cell = (2.0 + v) * hh / 16.0;
                    let a = (((xf + jx) / cell).floor() + ((yf + jy) / cell).floor()) as i64;
                    if a.rem_euclid(2) == 0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                // Blobs: position around the center encodes the variant.
                3 => {
                    let angle = core::f64::consts::TAU * v / nv + ja;
                    let by = cy + 0.18 * hh * angle.sin();
                    let bx = cx + 0.18 * ww * angle.cos();
                    let sigma = 0.15 * hh;
                    let d2 = (yf - by).powi(2) + (xf - bx).powi(2);
                    (-d2 / (2.0 * sigma * sigma)).exp()
                }
                // Linear gradients: direction encodes the variant.
                _ => {
                    let angle = core::f64::consts::PI * v / nv + 0.4 + ja;
                    let s = (xf - cx) * angle.cos() + (yf - cy) * angle.sin();
                    let span = (hh + ww) / 2.0;
                    ((s / span) + 0.5).clamp(0.0, 1.0)
                }
            };
            let noise = (rng.random::<f64>() * 2.0 - 1.0) * noise_sigma;
            data.push((background + amplitude * pat + noise).clamp(0.0, 1.0));
        }
    }
    Tensor::from_vec(&[h, w], data)
}

// ── episodes ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpisodeParams {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Maximum size of the episode's shift pool; 0 means a clean episode.
    pub max_shifts: usize,
}

#[derive(Clone, Debug)]
pub struct EpisodeItem {
    pub image: Tensor,
    /// Episode-local class index in 0..n_way.
    pub class_idx: usize,
    /// Class id in the full dataset.
    pub global_class: usize,
    /// The perturbation applied to this instance, if any.
    pub shift: Option<ShiftSpec>,
}

#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// The family+severity pool this episode's instances drew from.
    pub shift_pool: Vec<ShiftSpec>,
    pub phase: Phase,
    pub params: EpisodeParams,
}

/// Sample an episode from the given phase: choose `n_way` classes, split
/// `k_shot` support + `n_query` query items per class without replacement,
/// draw a shift pool of at most `max_shifts` family+severity combinations
/// from the phase's family split, then perturb every instance with an
/// independently drawn pool member.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    phase: Phase,
    params: EpisodeParams,
    rng: &mut R,
) -> Result<Episode> {
    if params.n_way < 2 {
        return Err(Error::Sampling(format!("n_way must be >= 2, got {}", params.n_way)));
    }
    if params.k_shot == 0 || params.n_query == 0 {
        return Err(Error::Sampling("k_shot and n_query must be >= 1".into()));
    }
    let classes: Vec<usize> = ds.phase_classes(phase).collect();
    if classes.len() < params.n_way {
        return Err(Error::Sampling(format!(
            "phase {:?} has {} classes, episode wants {}-way",
            phase,
            classes.len(),
            params.n_way
        )));
    }
    let need = params.k_shot + params.n_query;
    let chosen = index::sample(rng, classes.len(), params.n_way);

    // Shift pool: distinct families from the phase split, random severities.
    let families = phase_split(phase);
    let pool_size = params.max_shifts.min(families.len());
    let mut shift_pool = Vec::with_capacity(pool_size);
    if pool_size > 0 {
        for fi in index::sample(rng, families.len(), pool_size) {
            let severity = rng.random_range(1..=5u8);
            shift_pool.push(ShiftSpec::new(families[fi], severity)?);
        }
    }

    let mut support = Vec::with_capacity(params.n_way * params.k_shot);
    let mut query = Vec::with_capacity(params.n_way * params.n_query);
    for (class_idx, ci) in chosen.iter().enumerate() {
        let global_class = classes[ci];
        let pool = ds.class_images(global_class);
        if pool.len() < need {
            return Err(Error::Sampling(format!(
                "class {global_class} has {} items, episode wants {need}",
                pool.len()
            )));
        }
        let picks = index::sample(rng, pool.len(), need);
        for (j, pi) in picks.iter().enumerate() {
            let clean = &pool[pi];
            let (image, shift) = if shift_pool.is_empty() {
                (clean.clone(), None)
            } else {
                let spec = shift_pool[rng.random_range(0..shift_pool.len())];
                (apply_shift(clean, spec, rng)?, Some(spec))
            };
            let item = EpisodeItem { image, class_idx, global_class, shift };
            if j < params.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode { support, query, shift_pool, phase, params })
}
