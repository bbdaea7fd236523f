//! Few-shot episode evaluation.
//!
//! The pipeline for one episode runs: optional repair of all images →
//! embedding → optional transductive normalization over the support∪query
//! union → optional transport alignment (entropic plan from support to query
//! embeddings, supports replaced by their barycentric images) → nearest
//! prototype or nearest cosine-match classification. Query labels are touched
//! only when scoring the finished predictions, never while producing them.
//!
//! [`run_benchmark`] aggregates episode accuracies into a mean with a 95%
//! confidence interval; episodes are seeded independently from a master seed
//! so runs reproduce bit-for-bit and can be distributed over workers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::Serialize;

use crate::data::{sample_episode, Dataset, Episode, EpisodeParams};
use crate::models::{embed, repair, ModelBundle};
use crate::ot::{barycentric_map, cost_matrix, plan_entropy, sinkhorn, uniform_weights, SinkhornParams};
use crate::rng::substream_rng;
use crate::shifts::Phase;
use crate::tensor::Tensor;
use crate::{Error, Result};
// Required for no_std builds; when dev-dependencies pull std into the crate
// graph, std's inherent float methods shadow the trait and the import idles.
#[allow(unused_imports)]
use num_traits::Float;

/// Which classification rule scores the queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ClassifierKind {
    /// Nearest class prototype by squared Euclidean distance.
    Prototype,
    /// Label of the support item with the highest cosine similarity.
    Matching,
}

/// Evaluation-time switches; all stages are independent.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalOptions {
    /// Run every support and query image through the repairer first.
    pub use_repair: bool,
    /// Align support embeddings onto the query cloud with a transport plan.
    pub use_ot: bool,
    /// Standardise embeddings over the support∪query union.
    pub use_tbn: bool,
    pub classifier: ClassifierKind,
    /// Cost/entropy trade-off for the transport plan (only read if `use_ot`).
    pub beta: f64,
}

impl Default for EvalOptions {
    /// The full pipeline: repair, normalization and alignment all on,
    /// prototype classification, balanced transport trade-off.
    fn default() -> EvalOptions {
        EvalOptions {
            use_repair: true,
            use_ot: true,
            use_tbn: true,
            classifier: ClassifierKind::Prototype,
            beta: 0.5,
        }
    }
}

/// Outcome of one evaluated episode.
#[derive(Debug, Clone, Serialize)]
pub struct EpisodeResult {
    /// Fraction of queries classified correctly.
    pub accuracy: f64,
    /// Predicted episode-class index per query, in episode order.
    pub predictions: Vec<usize>,
    /// Transport diagnostics when `use_ot` was on.
    pub plan_cost: Option<f64>,
    pub plan_entropy: Option<f64>,
    pub plan_converged: Option<bool>,
    /// Echo of the switches that produced this result.
    pub options: EvalOptions,
}

/// Arithmetic mean of a class's support embeddings.
pub fn prototype(class_embs: &[Tensor]) -> Result<Tensor> {
    if class_embs.is_empty() {
        return Err(Error::Domain("cannot build a prototype from an empty class".into()));
    }
    let d = class_embs[0].len();
    let mut acc = vec![0.0; d];
    for e in class_embs {
        if e.rank() != 1 || e.len() != d {
            return Err(Error::Shape(format!(
                "prototype inputs must be rank-1 vectors of dimension {d}, got {:?}",
                e.shape()
            )));
        }
        for (a, v) in acc.iter_mut().zip(e.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / class_embs.len() as f64;
    for a in acc.iter_mut() {
        *a *= inv;
    }
    Tensor::from_vec(&[d], acc)
}

/// Index of the prototype closest to `q` in squared Euclidean distance;
/// ties go to the lowest class index.
pub fn protonet_predict(protos: &[Tensor], q: &Tensor) -> Result<usize> {
    if protos.len() < 2 {
        return Err(Error::Domain(format!(
            "prototype prediction needs at least 2 classes, got {}",
            protos.len()
        )));
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (c, p) in protos.iter().enumerate() {
        if p.shape() != q.shape() {
            return Err(Error::Shape(format!(
                "prototype {c} shape {:?} does not match query {:?}",
                p.shape(),
                q.shape()
            )));
        }
        let mut d = 0.0;
        for (a, b) in p.data().iter().zip(q.data()) {
            let t = a - b;
            d += t * t;
        }
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    Ok(best)
}

fn cosine(a: &Tensor, b: &Tensor) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt().max(1e-12) * nb.sqrt().max(1e-12))
}

/// Label of the support item most cosine-similar to `q`; ties go to the
/// lowest support index. Zero-norm embeddings are treated as having norm
/// 1e-12 rather than failing.
pub fn matchingnet_predict(supports: &[Tensor], labels: &[usize], q: &Tensor) -> Result<usize> {
    if supports.len() < 2 {
        return Err(Error::Domain(format!(
            "matching prediction needs at least 2 support items, got {}",
            supports.len()
        )));
    }
    if supports.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} support embeddings but {} labels",
            supports.len(),
            labels.len()
        )));
    }
    let mut best = 0usize;
    let mut best_s = f64::NEG_INFINITY;
    for (i, s) in supports.iter().enumerate() {
        if s.shape() != q.shape() {
            return Err(Error::Shape(format!(
                "support {i} shape {:?} does not match query {:?}",
                s.shape(),
                q.shape()
            )));
        }
        let sim = cosine(s, q);
        if sim > best_s {
            best_s = sim;
            best = i;
        }
    }
    Ok(labels[best])
}

/// Standardise each dimension using the mean and (population) standard
/// deviation of the combined support∪query set; the std is floored at 1e-5
/// so constant dimensions collapse to zero instead of blowing up.
pub fn tbn_normalize(s_embs: &[Tensor], q_embs: &[Tensor]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let total = s_embs.len() + q_embs.len();
    if total == 0 {
        return Err(Error::Domain("normalization needs a non-empty union".into()));
    }
    let d = s_embs.first().or(q_embs.first()).expect("non-empty union").len();
    for e in s_embs.iter().chain(q_embs.iter()) {
        if e.rank() != 1 || e.len() != d {
            return Err(Error::Shape(format!(
                "normalization inputs must be rank-1 vectors of dimension {d}, got {:?}",
                e.shape()
            )));
        }
    }
    let mut mean = vec![0.0; d];
    for e in s_embs.iter().chain(q_embs.iter()) {
        for (m, v) in mean.iter_mut().zip(e.data()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= total as f64;
    }
    let mut var = vec![0.0; d];
    for e in s_embs.iter().chain(q_embs.iter()) {
        for (k, v) in e.data().iter().enumerate() {
            let t = v - mean[k];
            var[k] += t * t;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|&v| (v / total as f64).sqrt().max(1e-5))
        .collect();
    let apply = |set: &[Tensor]| -> Result<Vec<Tensor>> {
        set.iter()
            .map(|e| {
                let data: Vec<f64> = e
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| (v - mean[k]) / std[k])
                    .collect();
                Tensor::from_vec(&[d], data)
            })
            .collect()
    };
    Ok((apply(s_embs)?, apply(q_embs)?))
}

/// Run the full evaluation pipeline on one episode and score it.
///
/// Predictions are produced from support labels and images only; query
/// labels enter exclusively in the final accuracy count.
pub fn evaluate_episode(bundle: &ModelBundle, episode: &Episode, opts: &EvalOptions) -> Result<EpisodeResult> {
    let n_way = episode.params.n_way;
    if episode.support.is_empty() || episode.query.is_empty() {
        return Err(Error::Domain("episode has no support or no query items".into()));
    }
    let prep = |img: &Tensor| -> Result<Tensor> {
        let source = if opts.use_repair {
            repair(&bundle.repairer, img)?
        } else {
            img.clone()
        };
        embed(&bundle.embedder, &source)
    };
    let s_embs: Vec<Tensor> = episode
        .support
        .iter()
        .map(|it| prep(&it.image))
        .collect::<Result<_>>()?;
    let q_embs: Vec<Tensor> = episode
        .query
        .iter()
        .map(|it| prep(&it.image))
        .collect::<Result<_>>()?;
    let (s_embs, q_embs) = if opts.use_tbn {
        tbn_normalize(&s_embs, &q_embs)?
    } else {
        (s_embs, q_embs)
    };

    let mut plan_cost = None;
    let mut plan_h = None;
    let mut plan_converged = None;
    let s_final: Vec<Tensor> = if opts.use_ot {
        let cost = cost_matrix(&s_embs, &q_embs)?;
        let plan = sinkhorn(
            &cost,
            &uniform_weights(s_embs.len()),
            &uniform_weights(q_embs.len()),
            &SinkhornParams {
                beta: opts.beta,
                ..SinkhornParams::default()
            },
        )?;
        plan_cost = Some(plan.cost);
        plan_h = Some(plan_entropy(&plan.pi)?);
        plan_converged = Some(plan.converged);
        barycentric_map(&plan.pi, &q_embs)?
    } else {
        s_embs
    };

    let support_labels: Vec<usize> = episode.support.iter().map(|it| it.class_idx).collect();
    let predictions: Vec<usize> = match opts.classifier {
        ClassifierKind::Prototype => {
            let mut protos = Vec::with_capacity(n_way);
            for c in 0..n_way {
                let class: Vec<Tensor> = s_final
                    .iter()
                    .zip(&support_labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(e, _)| e.clone())
                    .collect();
                protos.push(prototype(&class)?);
            }
            q_embs
                .iter()
                .map(|q| protonet_predict(&protos, q))
                .collect::<Result<_>>()?
        }
        ClassifierKind::Matching => q_embs
            .iter()
            .map(|q| matchingnet_predict(&s_final, &support_labels, q))
            .collect::<Result<_>>()?,
    };

    let correct = predictions
        .iter()
        .zip(&episode.query)
        .filter(|(p, it)| **p == it.class_idx)
        .count();
    Ok(EpisodeResult {
        accuracy: correct as f64 / episode.query.len() as f64,
        predictions,
        plan_cost,
        plan_entropy: plan_h,
        plan_converged,
        options: *opts,
    })
}

/// Mean and 95% confidence half-width (`1.96 * sample_std / sqrt(n)`,
/// sample variance with denominator `n - 1`).
pub fn mean_and_ci95(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Domain(format!(
            "confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

/// Aggregate results of a benchmark run.
#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkSummary {
    pub n_episodes: usize,
    pub mean_acc: f64,
    /// 95% confidence half-width of the mean accuracy.
    pub ci95: f64,
    pub per_episode_acc: Vec<f64>,
    /// Means of the transport diagnostics over episodes (when alignment ran).
    pub mean_plan_cost: Option<f64>,
    pub mean_plan_entropy: Option<f64>,
    pub converged_fraction: Option<f64>,
    pub options: EvalOptions,
}

/// Sample `n_episodes` episodes from the given phase (each from its own
/// deterministic substream of `master_seed`), evaluate them, and aggregate.
pub fn run_benchmark(
    bundle: &ModelBundle,
    dataset: &Dataset,
    phase: Phase,
    params: &EpisodeParams,
    n_episodes: usize,
    opts: &EvalOptions,
    master_seed: u64,
) -> Result<BenchmarkSummary> {
    if n_episodes < 2 {
        return Err(Error::Config(format!(
            "benchmark needs at least 2 episodes, got {n_episodes}"
        )));
    }
    let mut accs = Vec::with_capacity(n_episodes);
    let mut costs = Vec::new();
    let mut entropies = Vec::new();
    let mut converged = 0usize;
    for i in 0..n_episodes {
        let mut rng = substream_rng(master_seed, "episode", i as u64);
        let episode = sample_episode(dataset, phase, *params, &mut rng)?;
        let res = evaluate_episode(bundle, &episode, opts)?;
        accs.push(res.accuracy);
        if let (Some(c), Some(h), Some(cv)) = (res.plan_cost, res.plan_entropy, res.plan_converged) {
            costs.push(c);
            entropies.push(h);
            if cv {
                converged += 1;
            }
        }
    }
    let (mean_acc, ci95) = mean_and_ci95(&accs)?;
    let avg = |v: &[f64]| -> Option<f64> {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok(BenchmarkSummary {
        n_episodes,
        mean_acc,
        ci95,
        mean_plan_cost: avg(&costs),
        mean_plan_entropy: avg(&entropies),
        converged_fraction: if costs.is_empty() {
            None
        } else {
            Some(converged as f64 / n_episodes as f64)
        },
        per_episode_acc: accs,
        options: *opts,
    })
}
