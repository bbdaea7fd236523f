//! Alternating adversarial training of the four-network bundle.
//!
//! Each batch is processed by two steps in sequence:
//!
//! 1. [`train_step_gr`] — updates the perturbation generator (toward
//!    embeddings far from the clean image while staying classifiable) and the
//!    repairer (toward embeddings close to the clean image after a real
//!    corruption), with the embedder and classifier frozen;
//! 2. [`train_step_phi`] — updates the embedder and classifier on the clean
//!    cross-entropy plus the weighted generator-adversarial cross-entropy and
//!    the weighted contrastive term, with the generator frozen.
//!
//! [`train`] drives the epoch loop: shuffled batches, per-epoch validation on
//! episodes drawn from the validation corruption families, early stopping
//! with a patience window, and a per-epoch log convertible to CSV. A
//! non-finite loss or gradient aborts the offending step with no parameter
//! half-updated and fails the run.
//!
//! All randomness derives from `TrainConfig::seed` through named substreams
//! (`"init"`, `"train"`, `"shuffle"`, `"episode"`), so a repeated run
//! reproduces parameters bit-for-bit.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Dataset, EpisodeParams};
use crate::fewshot::{run_benchmark, ClassifierKind, EvalOptions};
use crate::losses::{adversarial_ce_loss, classification_loss, cross_entropy, embed_distance, nt_xent, repair_embed_loss};
use crate::models::{default_eps, register, ModelBundle, Network};
use crate::rng::{component_rng, substream_rng, Rng};
use crate::shifts::{apply_shift, phase_split, Phase, ShiftSpec};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};
// Required for no_std builds; when dev-dependencies pull std into the crate
// graph, std's inherent float methods shadow the trait and the import idles.
#[allow(unused_imports)]
use num_traits::Float;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Update rule applied to every network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    /// Adaptive moments (decay rates 0.9 / 0.999, denominator guard 1e-8).
    Adam,
    /// Plain gradient descent at the configured rate.
    Sgd,
}

/// Where the unlabeled images for the contrastive term come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContrastiveSource {
    /// Images of the meta-train classes (the default; nothing from the
    /// evaluation classes leaks into training).
    MetaTrain,
    /// Images of the meta-test classes, used unlabeled (transductive
    /// variant; opt-in).
    TransductiveTest,
}

/// Everything the training loop needs besides the dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Learning rate; zero is allowed and makes every update a no-op.
    pub lr: f64,
    pub batch_size: usize,
    /// Weight of the adversarial cross-entropy in the embedder/classifier
    /// objective. Zero skips the term entirely.
    pub lambda1: f64,
    /// Weight of the contrastive term. Zero skips it entirely.
    pub lambda2: f64,
    /// Transport cost/entropy trade-off used by the validation benchmark.
    pub beta: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Embedding dimension.
    pub dim: usize,
    /// Generator budget; `None` picks the size-derived default.
    pub eps: Option<f64>,
    /// Maximum epochs; zero returns the freshly initialised bundle.
    pub epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    /// Validation episodes evaluated after every epoch.
    pub val_episodes: usize,
    pub val_params: EpisodeParams,
    /// Images per step feeding the contrastive term (two augmentations each).
    pub n_contrastive: usize,
    pub contrastive_source: ContrastiveSource,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            lambda1: 1.0,
            lambda2: 1.0,
            beta: 0.5,
            tau: 0.5,
            dim: 16,
            eps: None,
            epochs: 200,
            patience: 10,
            val_episodes: 50,
            val_params: EpisodeParams {
                n_way: 5,
                k_shot: 1,
                n_query: 16,
                max_shifts: 4,
            },
            n_contrastive: 8,
            contrastive_source: ContrastiveSource::MetaTrain,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta {} outside (0, 1]", self.beta)));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("temperature {} must be positive", self.tau)));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("embedding dimension {} below 2", self.dim)));
        }
        if let Some(e) = self.eps {
            if !e.is_finite() || e <= 0.0 {
                return Err(Error::Config(format!("generator budget {e} must be positive")));
            }
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.val_episodes < 2 {
            return Err(Error::Config(format!(
                "validation needs at least 2 episodes, got {}",
                self.val_episodes
            )));
        }
        if self.lambda2 > 0.0 && self.n_contrastive < 2 {
            return Err(Error::Config(format!(
                "the contrastive term needs at least 2 images per step, got {}",
                self.n_contrastive
            )));
        }
        Ok(())
    }
}

// ── optimizer state ─────────────────────────────────────────────────────

/// Per-network optimizer state (first/second moments for Adam; nothing for
/// plain gradient descent).
#[derive(Debug, Clone)]
pub struct OptState {
    kind: OptimizerKind,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl OptState {
    pub fn new(kind: OptimizerKind) -> OptState {
        OptState {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Apply one update in place. Gradients must be finite and shape-aligned
    /// with the parameters; moment buffers are allocated on first use.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "optimizer: {} parameters vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        match self.kind {
            OptimizerKind::Sgd => crate::tape::sgd_step(params, grads, lr),
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                    self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                }
                if self.m.len() != params.len() {
                    return Err(Error::Shape(format!(
                        "optimizer state tracks {} tensors but got {}",
                        self.m.len(),
                        params.len()
                    )));
                }
                self.t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t.min(i32::MAX as u64) as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t.min(i32::MAX as u64) as i32);
                for (i, g) in grads.iter().enumerate() {
                    g.assert_finite("optimizer gradient")?;
                    if params[i].shape() != g.shape() || self.m[i].shape() != g.shape() {
                        return Err(Error::Shape(format!(
                            "optimizer: parameter {i} shape {:?} vs gradient {:?}",
                            params[i].shape(),
                            g.shape()
                        )));
                    }
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    let p = params[i].data_mut();
                    for (k, &gk) in g.data().iter().enumerate() {
                        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
                        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
                        let mh = m[k] / bc1;
                        let vh = v[k] / bc2;
                        p[k] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                    }
                }
                Ok(())
            }
        }
    }
}

/// One [`OptState`] per network, so moments never mix across networks.
#[derive(Debug, Clone)]
pub struct OptimizerSet {
    pub embedder: OptState,
    pub head: OptState,
    pub generator: OptState,
    pub repairer: OptState,
}

impl OptimizerSet {
    pub fn new(kind: OptimizerKind) -> OptimizerSet {
        OptimizerSet {
            embedder: OptState::new(kind),
            head: OptState::new(kind),
            generator: OptState::new(kind),
            repairer: OptState::new(kind),
        }
    }
}

// ── step functions ──────────────────────────────────────────────────────

/// Loss values reported by the generator/repairer step (batch means, taken
/// before the update).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GrStepLosses {
    /// Negated squared embedding distance between perturbed and clean images.
    pub l_g: f64,
    /// Cross-entropy of the classifier on the perturbed images.
    pub l_adv: f64,
    /// Squared embedding distance between repaired-corrupted and clean images.
    pub l_r: f64,
}

/// Loss values reported by the embedder/classifier step (batch means, taken
/// before the update). Skipped terms are reported as 0.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhiStepLosses {
    /// Cross-entropy on the clean images.
    pub l_ori: f64,
    /// Cross-entropy on the generator's perturbations.
    pub l_adv: f64,
    /// Contrastive loss over augmentation pairs.
    pub l_self: f64,
}

fn mean_node(tape: &mut Tape, parts: &[NodeId]) -> Result<NodeId> {
    let stacked = tape.stack(parts)?;
    let total = tape.sum(stacked)?;
    tape.scale(total, 1.0 / parts.len() as f64)
}

fn finite_scalar(tape: &Tape, id: NodeId, what: &'static str) -> Result<f64> {
    let v = tape.value(id).scalar_value()?;
    if !v.is_finite() {
        return Err(Error::NonFinite(what));
    }
    Ok(v)
}

/// Move a network's gradients out of the backward result, substituting zeros
/// for parameters the objective provably does not touch, and reject any
/// non-finite entry before a single parameter is mutated.
fn take_grads(net: &dyn Network, ids: &[NodeId], grads: &mut Gradients, what: &'static str) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(ids.len());
    for (p, &id) in net.params().iter().zip(ids) {
        let g = grads
            .take(id)
            .unwrap_or_else(|| Tensor::zeros(p.shape()));
        g.assert_finite(what)?;
        out.push(g);
    }
    Ok(out)
}

/// A corruption for the repairer branch: random training-phase family at a
/// random severity in `1..=max_severity`.
fn draw_train_shift(rng: &mut Rng, max_severity: u8) -> ShiftSpec {
    let families = phase_split(Phase::Train);
    ShiftSpec {
        family: families[rng.random_range(0..families.len())],
        severity: rng.random_range(1..=max_severity),
    }
}

/// Update the generator and the repairer on one batch; the embedder and
/// classifier are registered frozen and come out bitwise unchanged.
///
/// Per item the step builds one generated image `x_p` (one dropout draw,
/// shared by both generator terms), takes the generator objective
/// `mean(-‖φ(x_p)-φ(x)‖² + CE(θ(φ(x_p)), y))`, and separately the repairer
/// objective `mean(‖φ(R(S(x)))-φ(x)‖²)` with `S` a fresh training-family
/// corruption. A non-finite loss or gradient aborts with nothing updated.
pub fn train_step_gr(
    bundle: &mut ModelBundle,
    batch: &[(&Tensor, usize)],
    cfg: &TrainConfig,
    opts: &mut OptimizerSet,
    rng: &mut Rng,
) -> Result<GrStepLosses> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut tape = Tape::new();
    let emb_ids = register(&mut tape, &bundle.embedder, false);
    let head_ids = register(&mut tape, &bundle.head, false);
    let gen_ids = register(&mut tape, &bundle.generator, true);
    let rep_ids = register(&mut tape, &bundle.repairer, true);

    let mut lg_items = Vec::with_capacity(batch.len());
    let mut ladv_items = Vec::with_capacity(batch.len());
    let mut lr_items = Vec::with_capacity(batch.len());
    for &(img, label) in batch {
        let x = tape.leaf(img.clone(), false);
        let xp = bundle
            .generator
            .forward_image(&mut tape, &gen_ids, x, Some(&mut *rng))?;
        let zp = bundle.embedder.forward_image(&mut tape, &emb_ids, xp)?;
        let z = bundle.embedder.forward_image(&mut tape, &emb_ids, x)?;
        let d = embed_distance(&mut tape, zp, z)?;
        lg_items.push(tape.scale(d, -1.0)?);
        let probs = bundle.head.forward(&mut tape, &head_ids, zp)?;
        ladv_items.push(cross_entropy(&mut tape, probs, label)?);

        let spec = draw_train_shift(rng, 5);
        let shifted = apply_shift(img, spec, rng)?;
        let shifted = tape.leaf(shifted, false);
        lr_items.push(repair_embed_loss(
            &mut tape,
            &bundle.repairer,
            &rep_ids,
            &bundle.embedder,
            &emb_ids,
            shifted,
            x,
        )?);
    }
    let lg_mean = mean_node(&mut tape, &lg_items)?;
    let ladv_mean = mean_node(&mut tape, &ladv_items)?;
    let lr_mean = mean_node(&mut tape, &lr_items)?;
    let gen_obj = tape.add(lg_mean, ladv_mean)?;

    let losses = GrStepLosses {
        l_g: finite_scalar(&tape, lg_mean, "generator distance loss")?,
        l_adv: finite_scalar(&tape, ladv_mean, "generator adversarial loss")?,
        l_r: finite_scalar(&tape, lr_mean, "repairer loss")?,
    };

    let mut gen_grads = tape.backward(gen_obj, Tensor::scalar(1.0))?;
    let mut rep_grads = tape.backward(lr_mean, Tensor::scalar(1.0))?;
    let gg = take_grads(&bundle.generator, &gen_ids, &mut gen_grads, "generator gradient")?;
    let rg = take_grads(&bundle.repairer, &rep_ids, &mut rep_grads, "repairer gradient")?;
    opts.generator
        .apply(&mut bundle.generator.params_mut(), &gg, cfg.lr)?;
    opts.repairer
        .apply(&mut bundle.repairer.params_mut(), &rg, cfg.lr)?;
    Ok(losses)
}

/// Update the embedder and classifier on one batch; the generator is
/// registered frozen and comes out bitwise unchanged (the repairer is not
/// involved at all).
///
/// The embedder descends `mean(CE_clean) + λ₁·mean(CE_perturbed) +
/// λ₂·contrastive`, the classifier the same objective minus the contrastive
/// term — which structurally never touches the classifier, so one backward
/// pass serves both. `contrastive` supplies the unlabeled images; each is
/// augmented twice with independent training-family corruptions at severity
/// 1..=3. Zero-weight terms are skipped, so with `λ₁ = λ₂ = 0` the step is
/// exactly clean-image cross-entropy minimisation.
pub fn train_step_phi(
    bundle: &mut ModelBundle,
    batch: &[(&Tensor, usize)],
    contrastive: &[&Tensor],
    cfg: &TrainConfig,
    opts: &mut OptimizerSet,
    rng: &mut Rng,
) -> Result<PhiStepLosses> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if cfg.lambda2 > 0.0 && contrastive.len() < 2 {
        return Err(Error::Config(format!(
            "the contrastive term needs at least 2 images, got {}",
            contrastive.len()
        )));
    }
    let mut tape = Tape::new();
    let emb_ids = register(&mut tape, &bundle.embedder, true);
    let head_ids = register(&mut tape, &bundle.head, true);
    let gen_ids = register(&mut tape, &bundle.generator, false);

    let mut ori_items = Vec::with_capacity(batch.len());
    let mut adv_items = Vec::with_capacity(batch.len());
    for &(img, label) in batch {
        let x = tape.leaf(img.clone(), false);
        ori_items.push(classification_loss(
            &mut tape,
            &bundle.embedder,
            &emb_ids,
            &bundle.head,
            &head_ids,
            x,
            label,
        )?);
        if cfg.lambda1 > 0.0 {
            adv_items.push(adversarial_ce_loss(
                &mut tape,
                &bundle.generator,
                &gen_ids,
                &bundle.embedder,
                &emb_ids,
                &bundle.head,
                &head_ids,
                x,
                label,
                Some(&mut *rng),
            )?);
        }
    }
    let ori_mean = mean_node(&mut tape, &ori_items)?;
    let adv_mean = if adv_items.is_empty() {
        None
    } else {
        Some(mean_node(&mut tape, &adv_items)?)
    };
    let self_node = if cfg.lambda2 > 0.0 {
        let mut pair_embs = Vec::with_capacity(2 * contrastive.len());
        for img in contrastive {
            for _ in 0..2 {
                let spec = draw_train_shift(rng, 3);
                let aug = apply_shift(img, spec, rng)?;
                let a = tape.leaf(aug, false);
                pair_embs.push(bundle.embedder.forward_image(&mut tape, &emb_ids, a)?);
            }
        }
        Some(nt_xent(&mut tape, &pair_embs, cfg.tau)?)
    } else {
        None
    };

    let mut total = ori_mean;
    if let Some(a) = adv_mean {
        let s = tape.scale(a, cfg.lambda1)?;
        total = tape.add(total, s)?;
    }
    if let Some(sf) = self_node {
        let s = tape.scale(sf, cfg.lambda2)?;
        total = tape.add(total, s)?;
    }

    let losses = PhiStepLosses {
        l_ori: finite_scalar(&tape, ori_mean, "classification loss")?,
        l_adv: match adv_mean {
            Some(a) => finite_scalar(&tape, a, "adversarial loss")?,
            None => 0.0,
        },
        l_self: match self_node {
            Some(s) => finite_scalar(&tape, s, "contrastive loss")?,
            None => 0.0,
        },
    };

    let mut grads = tape.backward(total, Tensor::scalar(1.0))?;
    let eg = take_grads(&bundle.embedder, &emb_ids, &mut grads, "embedder gradient")?;
    let hg = take_grads(&bundle.head, &head_ids, &mut grads, "classifier gradient")?;
    opts.embedder
        .apply(&mut bundle.embedder.params_mut(), &eg, cfg.lr)?;
    opts.head.apply(&mut bundle.head.params_mut(), &hg, cfg.lr)?;
    Ok(losses)
}

// ── epoch loop ──────────────────────────────────────────────────────────

/// One per-epoch log entry; loss values are means over the epoch's steps
/// (the adversarial column comes from the embedder/classifier step).
#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub epoch: usize,
    /// Cumulative batch count at the end of this epoch.
    pub step: usize,
    pub l_ori: f64,
    pub l_adv: f64,
    pub l_self: f64,
    pub l_g: f64,
    pub l_r: f64,
    pub val_acc: f64,
    /// Milliseconds since training started, per the caller's clock
    /// (0 without one).
    pub wall_ms: u64,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,L_ori,L_adv,L_self,L_g,L_r,val_acc,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, self.step, self.l_ori, self.l_adv, self.l_self, self.l_g, self.l_r, self.val_acc, self.wall_ms
        )
    }
}

/// What [`train`] returns.
pub struct TrainOutput {
    /// The bundle restored to the best validation epoch (or the initial
    /// bundle when no epoch ran).
    pub bundle: ModelBundle,
    pub log: Vec<TrainRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub stopped_early: bool,
}

/// Run the full alternating loop on the dataset's meta-train classes.
///
/// Per epoch: shuffle the items, walk them in batches (the final short batch
/// included), run the generator/repairer step then the embedder/classifier
/// step on each, and evaluate mean accuracy over `val_episodes` validation
/// episodes (full evaluation pipeline, validation corruption families; the
/// same episodes every epoch so scores stay comparable). Stops after
/// `patience` epochs without strict improvement and returns the snapshot
/// from the best epoch, so the returned bundle never scores below the best
/// recorded validation accuracy minus 1e-12.
///
/// `clock` supplies wall-clock milliseconds for the log; pass `None` in
/// clock-free settings to record 0.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, clock: Option<&dyn Fn() -> u64>) -> Result<TrainOutput> {
    cfg.validate()?;
    let items = dataset.train_items();
    if items.is_empty() {
        return Err(Error::Config("the dataset has no meta-train items".into()));
    }
    let n_classes = dataset.phase_classes(Phase::Train).len();
    let eps = cfg
        .eps
        .unwrap_or_else(|| default_eps(dataset.height(), dataset.width()));
    let mut bundle = ModelBundle::init(
        dataset.height(),
        dataset.width(),
        cfg.dim,
        n_classes,
        eps,
        &mut component_rng(cfg.seed, "init"),
    )?;
    if cfg.epochs == 0 {
        return Ok(TrainOutput {
            bundle,
            log: Vec::new(),
            best_epoch: None,
            best_val_acc: None,
            stopped_early: false,
        });
    }
    // Surface invalid validation-episode settings before spending an epoch.
    sample_episode(
        dataset,
        Phase::Val,
        cfg.val_params,
        &mut substream_rng(cfg.seed, "episode", 0),
    )?;
    let pool: Vec<&Tensor> = match cfg.contrastive_source {
        ContrastiveSource::MetaTrain => items.iter().map(|&(im, _)| im).collect(),
        ContrastiveSource::TransductiveTest => dataset
            .phase_classes(Phase::Test)
            .flat_map(|c| dataset.class_images(c).iter())
            .collect(),
    };
    if cfg.lambda2 > 0.0 && pool.len() < 2 {
        return Err(Error::Config(
            "the contrastive image pool has fewer than 2 images".into(),
        ));
    }
    let val_opts = EvalOptions {
        use_repair: true,
        use_ot: true,
        use_tbn: true,
        classifier: ClassifierKind::Prototype,
        beta: cfg.beta,
    };

    let now = || clock.map(|c| c()).unwrap_or(0);
    let t0 = now();
    let mut train_rng = component_rng(cfg.seed, "train");
    let mut opts = OptimizerSet::new(cfg.optimizer);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelBundle)> = None;
    let mut stale = 0usize;
    let mut global_step = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut substream_rng(cfg.seed, "shuffle", epoch as u64));
        let mut sums = [0.0f64; 5]; // l_ori, l_adv, l_self, l_g, l_r
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Tensor, usize)> = chunk.iter().map(|&i| items[i]).collect();
            let gr = train_step_gr(&mut bundle, &batch, cfg, &mut opts, &mut train_rng)?;
            let contrastive: Vec<&Tensor> = if cfg.lambda2 > 0.0 {
                rand::seq::index::sample(
                    &mut train_rng,
                    pool.len(),
                    cfg.n_contrastive.min(pool.len()),
                )
                .into_iter()
                .map(|i| pool[i])
                .collect()
            } else {
                Vec::new()
            };
            let phi = train_step_phi(&mut bundle, &batch, &contrastive, cfg, &mut opts, &mut train_rng)?;
            sums[0] += phi.l_ori;
            sums[1] += phi.l_adv;
            sums[2] += phi.l_self;
            sums[3] += gr.l_g;
            sums[4] += gr.l_r;
            steps += 1;
            global_step += 1;
        }
        let val = run_benchmark(
            &bundle,
            dataset,
            Phase::Val,
            &cfg.val_params,
            cfg.val_episodes,
            &val_opts,
            cfg.seed,
        )?;
        let inv = 1.0 / steps as f64;
        log.push(TrainRecord {
            epoch,
            step: global_step,
            l_ori: sums[0] * inv,
            l_adv: sums[1] * inv,
            l_self: sums[2] * inv,
            l_g: sums[3] * inv,
            l_r: sums[4] * inv,
            val_acc: val.mean_acc,
            wall_ms: now().saturating_sub(t0),
        });
        let improved = best.as_ref().map_or(true, |(b, _, _)| val.mean_acc > *b);
        if improved {
            best = Some((val.mean_acc, epoch, bundle.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_acc, best_epoch) = match best {
        Some((v, e, snap)) => {
            bundle = snap;
            (Some(v), Some(e))
        }
        None => (None, None),
    };
    Ok(TrainOutput {
        bundle,
        log,
        best_epoch,
        best_val_acc,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_dataset, DatasetConfig, SplitFractions};
    use crate::tape::sgd_step;
    use alloc::vec;

    fn all_param_bits(bundle: &ModelBundle) -> Vec<u64> {
        let mut bits = Vec::new();
        for (_, net) in bundle.networks() {
            for p in net.params() {
                bits.extend(p.data().iter().map(|x| x.to_bits()));
            }
        }
        bits
    }

    fn network_bits(net: &dyn Network) -> Vec<u64> {
        net.params()
            .iter()
            .flat_map(|p| p.data().iter().map(|x| x.to_bits()))
            .collect()
    }

    fn tiny_dataset() -> Dataset {
        let mut rng = component_rng(41, "train-test-data");
        gen_dataset(
            &DatasetConfig {
                n_classes: 8,
                per_class: 4,
                height: 8,
                width: 8,
                split: SplitFractions::new(0.5, 0.25, 0.25).unwrap(),
            },
            &mut rng,
        )
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            dim: 4,
            epochs: 2,
            patience: 5,
            val_episodes: 2,
            val_params: EpisodeParams {
                n_way: 2,
                k_shot: 1,
                n_query: 2,
                max_shifts: 1,
            },
            n_contrastive: 2,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn tiny_bundle(seed: u64) -> ModelBundle {
        ModelBundle::init(8, 8, 4, 4, default_eps(8, 8), &mut component_rng(seed, "init")).unwrap()
    }

    fn tiny_batch(ds: &Dataset) -> Vec<(&Tensor, usize)> {
        ds.train_items().into_iter().take(4).collect()
    }

    #[test]
    fn gr_step_freezes_embedder_and_classifier() {
        let ds = tiny_dataset();
        let mut bundle = tiny_bundle(7);
        let cfg = tiny_cfg();
        let emb_before = network_bits(&bundle.embedder);
        let head_before = network_bits(&bundle.head);
        let gen_before = network_bits(&bundle.generator);
        let rep_before = network_bits(&bundle.repairer);
        let mut opts = OptimizerSet::new(cfg.optimizer);
        let mut rng = component_rng(7, "train");
        let losses = train_step_gr(&mut bundle, &tiny_batch(&ds), &cfg, &mut opts, &mut rng).unwrap();
        assert!(losses.l_g.is_finite() && losses.l_adv.is_finite() && losses.l_r >= 0.0);
        assert_eq!(emb_before, network_bits(&bundle.embedder));
        assert_eq!(head_before, network_bits(&bundle.head));
        assert_ne!(gen_before, network_bits(&bundle.generator));
        assert_ne!(rep_before, network_bits(&bundle.repairer));
    }

    #[test]
    fn phi_step_freezes_generator_and_repairer() {
        let ds = tiny_dataset();
        let mut bundle = tiny_bundle(8);
        let cfg = tiny_cfg();
        let gen_before = network_bits(&bundle.generator);
        let rep_before = network_bits(&bundle.repairer);
        let emb_before = network_bits(&bundle.embedder);
        let mut opts = OptimizerSet::new(cfg.optimizer);
        let mut rng = component_rng(8, "train");
        let items = ds.train_items();
        let contrastive: Vec<&Tensor> = items.iter().take(2).map(|&(im, _)| im).collect();
        let losses =
            train_step_phi(&mut bundle, &tiny_batch(&ds), &contrastive, &cfg, &mut opts, &mut rng).unwrap();
        assert!(losses.l_ori > 0.0 && losses.l_adv > 0.0 && losses.l_self > 0.0);
        assert_eq!(gen_before, network_bits(&bundle.generator));
        assert_eq!(rep_before, network_bits(&bundle.repairer));
        assert_ne!(emb_before, network_bits(&bundle.embedder));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let ds = tiny_dataset();
        for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut bundle = tiny_bundle(9);
            let cfg = TrainConfig {
                lr: 0.0,
                optimizer,
                ..tiny_cfg()
            };
            let before = all_param_bits(&bundle);
            let mut opts = OptimizerSet::new(cfg.optimizer);
            let mut rng = component_rng(9, "train");
            let batch = tiny_batch(&ds);
            train_step_gr(&mut bundle, &batch, &cfg, &mut opts, &mut rng).unwrap();
            let items = ds.train_items();
            let contrastive: Vec<&Tensor> = items.iter().take(2).map(|&(im, _)| im).collect();
            train_step_phi(&mut bundle, &batch, &contrastive, &cfg, &mut opts, &mut rng).unwrap();
            assert_eq!(before, all_param_bits(&bundle), "{optimizer:?}");
        }
    }

    #[test]
    fn zero_lambdas_reduce_to_plain_cross_entropy_descent() {
        let ds = tiny_dataset();
        let mut stepped = tiny_bundle(10);
        let mut manual = tiny_bundle(10);
        assert_eq!(all_param_bits(&stepped), all_param_bits(&manual));
        let cfg = TrainConfig {
            lr: 0.05,
            lambda1: 0.0,
            lambda2: 0.0,
            optimizer: OptimizerKind::Sgd,
            ..tiny_cfg()
        };
        let batch = tiny_batch(&ds);
        let mut opts = OptimizerSet::new(cfg.optimizer);
        let mut rng = component_rng(10, "train");
        train_step_phi(&mut stepped, &batch, &[], &cfg, &mut opts, &mut rng).unwrap();

        // By hand: mean clean cross-entropy, backward, plain descent.
        let mut tape = Tape::new();
        let emb_ids = register(&mut tape, &manual.embedder, true);
        let head_ids = register(&mut tape, &manual.head, true);
        let mut items = Vec::new();
        for &(img, label) in &batch {
            let x = tape.leaf(img.clone(), false);
            items.push(
                classification_loss(&mut tape, &manual.embedder, &emb_ids, &manual.head, &head_ids, x, label)
                    .unwrap(),
            );
        }
        let mean = mean_node(&mut tape, &items).unwrap();
        let mut grads = tape.backward(mean, Tensor::scalar(1.0)).unwrap();
        let eg = take_grads(&manual.embedder, &emb_ids, &mut grads, "g").unwrap();
        let hg = take_grads(&manual.head, &head_ids, &mut grads, "g").unwrap();
        sgd_step(&mut manual.embedder.params_mut(), &eg, cfg.lr).unwrap();
        sgd_step(&mut manual.head.params_mut(), &hg, cfg.lr).unwrap();
        assert_eq!(all_param_bits(&stepped), all_param_bits(&manual));
    }

    #[test]
    fn non_finite_loss_aborts_without_updates() {
        let ds = tiny_dataset();
        let mut bundle = tiny_bundle(12);
        bundle.embedder.fc_weight.data_mut()[0] = f64::NAN;
        let cfg = tiny_cfg();
        let before = all_param_bits(&bundle);
        let mut opts = OptimizerSet::new(cfg.optimizer);
        let mut rng = component_rng(12, "train");
        let err = train_step_gr(&mut bundle, &tiny_batch(&ds), &cfg, &mut opts, &mut rng).unwrap_err();
        assert!(err.is_numeric(), "unexpected error kind: {err:?}");
        assert_eq!(before, all_param_bits(&bundle));
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut st = OptState::new(OptimizerKind::Adam);
        let mut p = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let g = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        st.apply(&mut [&mut p], core::slice::from_ref(&g), 0.1).unwrap();
        let m = 0.1 * 0.5; // (1-β₁)g, bias-corrected by 1-β₁ back to 0.5
        let v = 0.001 * 0.25;
        let expect = 1.0 - 0.1 * (m / 0.1) / ((v / 0.001).sqrt() + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-15);
        // Second step keeps moments: same gradient moves the parameter again.
        let before = p.data()[0];
        st.apply(&mut [&mut p], core::slice::from_ref(&g), 0.1).unwrap();
        assert!(p.data()[0] < before);
    }

    #[test]
    fn sgd_state_matches_free_function() {
        let mut st = OptState::new(OptimizerKind::Sgd);
        let mut a = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut b = a.clone();
        let g = Tensor::from_vec(&[2], vec![0.25, 0.5]).unwrap();
        st.apply(&mut [&mut a], core::slice::from_ref(&g), 0.2).unwrap();
        sgd_step(&mut [&mut b], core::slice::from_ref(&g), 0.2).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let cfg = tiny_cfg();
        let a = train(&ds, &cfg, None).unwrap();
        let b = train(&ds, &cfg, None).unwrap();
        assert_eq!(a.log.len(), 2);
        assert_eq!(all_param_bits(&a.bundle), all_param_bits(&b.bundle));
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.csv_row(), rb.csv_row());
            for v in [ra.l_ori, ra.l_adv, ra.l_self, ra.l_g, ra.l_r, ra.val_acc] {
                assert!(v.is_finite());
            }
        }
        assert_eq!(a.log[0].step, 2, "16 items in batches of 8");
        assert_eq!(a.log[1].step, 4);
    }

    #[test]
    fn zero_epochs_returns_untouched_init() {
        let ds = tiny_dataset();
        let cfg = TrainConfig { epochs: 0, ..tiny_cfg() };
        let out = train(&ds, &cfg, None).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.best_epoch, None);
        assert!(!out.stopped_early);
        let expect = ModelBundle::init(
            ds.height(),
            ds.width(),
            cfg.dim,
            4,
            default_eps(ds.height(), ds.width()),
            &mut component_rng(cfg.seed, "init"),
        )
        .unwrap();
        assert_eq!(all_param_bits(&out.bundle), all_param_bits(&expect));
    }

    #[test]
    fn returned_bundle_scores_at_the_best_logged_accuracy() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            epochs: 5,
            patience: 1,
            ..tiny_cfg()
        };
        let out = train(&ds, &cfg, None).unwrap();
        assert!(!out.log.is_empty());
        let best_logged = out
            .log
            .iter()
            .map(|r| r.val_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_val_acc.unwrap(), best_logged);
        if out.stopped_early {
            assert!(out.log.len() < 5);
        }
        // Re-scoring the returned snapshot on the same validation benchmark
        // reproduces the best logged accuracy.
        let val_opts = EvalOptions {
            beta: cfg.beta,
            ..EvalOptions::default()
        };
        let re = run_benchmark(
            &out.bundle,
            &ds,
            Phase::Val,
            &cfg.val_params,
            cfg.val_episodes,
            &val_opts,
            cfg.seed,
        )
        .unwrap();
        assert!((re.mean_acc - best_logged).abs() <= 1e-12);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let good = TrainConfig::default();
        assert!(good.validate().is_ok());
        for bad in [
            TrainConfig { lr: -1.0, ..good.clone() },
            TrainConfig { lr: f64::NAN, ..good.clone() },
            TrainConfig { batch_size: 0, ..good.clone() },
            TrainConfig { lambda1: -0.1, ..good.clone() },
            TrainConfig { beta: 0.0, ..good.clone() },
            TrainConfig { beta: 1.5, ..good.clone() },
            TrainConfig { tau: 0.0, ..good.clone() },
            TrainConfig { dim: 1, ..good.clone() },
            TrainConfig { eps: Some(-1.0), ..good.clone() },
            TrainConfig { patience: 0, ..good.clone() },
            TrainConfig { val_episodes: 1, ..good.clone() },
            TrainConfig { n_contrastive: 1, ..good.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        // Too few contrastive images is fine once the term is off.
        let off = TrainConfig {
            n_contrastive: 0,
            lambda2: 0.0,
            ..good
        };
        assert!(off.validate().is_ok());
    }
}
