//! Loss graphs recorded on the [`Tape`].
//!
//! Three primitives — cross-entropy over a probability vector, squared
//! embedding distance, and the normalised-temperature contrastive loss — plus
//! per-image compositions of the networks in [`crate::models`] that the
//! alternating training step and the finite-difference gradient checks share:
//!
//! * [`classification_loss`] — `CE(head(embed(x)), y)`;
//! * [`adversarial_ce_loss`] — the same, on the generator's perturbed image;
//! * [`generator_embed_loss`] — negated feature distance between an image
//!   and its perturbation (the generator *maximises* that distance);
//! * [`repair_embed_loss`] — feature distance between a repaired corrupted
//!   image and its clean original (the repairer minimises it).

use alloc::format;
use alloc::vec::Vec;

use crate::models::{ClassifierHead, EmbeddingNet, Generator, Repairer};
use crate::rng::Rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};
// Required for no_std builds; when dev-dependencies pull std into the crate
// graph, std's inherent float methods shadow the trait and the import idles.
#[allow(unused_imports)]
use num_traits::Float;

/// Negative log-likelihood of `label` under a probability vector node.
/// The input must already be a distribution (as produced by
/// [`ClassifierHead::forward`]); the log is floored to keep the loss finite.
pub fn cross_entropy(tape: &mut Tape, probs: NodeId, label: usize) -> Result<NodeId> {
    let v = tape.value(probs);
    if v.rank() != 1 {
        return Err(Error::Shape(format!(
            "cross-entropy expects a rank-1 probability vector, got {:?}",
            v.shape()
        )));
    }
    if label >= v.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            v.len()
        )));
    }
    let total: f64 = v.data().iter().sum();
    if v.data().iter().any(|&p| p < -1e-9) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!(
            "cross-entropy input is not a probability vector (sum {total})"
        )));
    }
    let p = tape.index(probs, label)?;
    let lp = tape.ln_clamped(p)?;
    tape.scale(lp, -1.0)
}

/// Squared Euclidean distance between two rank-1 feature nodes.
pub fn embed_distance(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb || tape.value(a).rank() != 1 {
        return Err(Error::Shape(format!(
            "embedding distance expects two rank-1 vectors of equal length, got {sa:?} and {sb:?}"
        )));
    }
    let d = tape.sub(a, b)?;
    tape.dot(d, d)
}

/// Normalised-temperature cross-entropy over consecutive positive pairs.
///
/// `embeddings` holds `2N` rank-1 nodes where `(2k, 2k+1)` are the positive
/// pairs. For each anchor `i` with partner `p(i)` the loss is
/// `logsumexp_{j != i}(s_ij) - s_{i,p(i)}` with `s_ij` the cosine similarity
/// divided by `tau`; the result is the mean over all `2N` anchors.
pub fn nt_xent(tape: &mut Tape, embeddings: &[NodeId], tau: f64) -> Result<NodeId> {
    let two_n = embeddings.len();
    if two_n < 4 || two_n % 2 != 0 {
        return Err(Error::Shape(format!(
            "contrastive loss needs an even number of embeddings (at least 4), got {two_n}"
        )));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    let dim = tape.value(embeddings[0]).len();
    for &e in embeddings {
        let v = tape.value(e);
        if v.rank() != 1 || v.len() != dim {
            return Err(Error::Shape(format!(
                "contrastive embeddings must share one rank-1 shape, got {:?}",
                v.shape()
            )));
        }
    }
    // Inverse norms, floored away from zero so cosine stays defined.
    let mut inv_norm = Vec::with_capacity(two_n);
    for &e in embeddings {
        let sq = tape.dot(e, e)?;
        let fl = tape.max_const(sq, 1e-24)?;
        let nrm = tape.pow_const(fl, 0.5)?;
        inv_norm.push(tape.pow_const(nrm, -1.0)?);
    }
    // Scaled cosine similarities for every ordered pair (i, j), j != i.
    let mut sims = alloc::vec![Vec::with_capacity(two_n); two_n];
    for i in 0..two_n {
        for j in 0..two_n {
            if i == j {
                sims[i].push(usize::MAX); // placeholder, never read
                continue;
            }
            if j < i {
                let shared = sims[j][i];
                sims[i].push(shared);
                continue;
            }
            let d = tape.dot(embeddings[i], embeddings[j])?;
            let n1 = tape.mul(inv_norm[i], inv_norm[j])?;
            let c = tape.mul(d, n1)?;
            sims[i].push(tape.scale(c, 1.0 / tau)?);
        }
    }
    let mut anchor_losses = Vec::with_capacity(two_n);
    for i in 0..two_n {
        let others: Vec<NodeId> = (0..two_n).filter(|&j| j != i).map(|j| sims[i][j]).collect();
        let stacked = tape.stack(&others)?;
        let lse = tape.logsumexp(stacked)?;
        let pos = sims[i][i ^ 1];
        anchor_losses.push(tape.sub(lse, pos)?);
    }
    let all = tape.stack(&anchor_losses)?;
    let total = tape.sum(all)?;
    tape.scale(total, 1.0 / two_n as f64)
}

/// Evaluate [`nt_xent`] on plain tensors with a throwaway tape.
pub fn nt_xent_value(embeddings: &[Tensor], tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = embeddings.iter().map(|e| tape.leaf(e.clone(), false)).collect();
    let out = nt_xent(&mut tape, &ids, tau)?;
    tape.value(out).scalar_value()
}

/// `CE(head(embed(image)), label)` for one image node.
pub fn classification_loss(
    tape: &mut Tape,
    embedder: &EmbeddingNet,
    emb_ids: &[NodeId],
    head: &ClassifierHead,
    head_ids: &[NodeId],
    image: NodeId,
    label: usize,
) -> Result<NodeId> {
    let z = embedder.forward_image(tape, emb_ids, image)?;
    let probs = head.forward(tape, head_ids, z)?;
    cross_entropy(tape, probs, label)
}

/// Cross-entropy on the generator's perturbation of one image:
/// `CE(head(embed(G(image))), label)`. Pass an rng to sample the generator's
/// dropout masks.
pub fn adversarial_ce_loss(
    tape: &mut Tape,
    gen: &Generator,
    gen_ids: &[NodeId],
    embedder: &EmbeddingNet,
    emb_ids: &[NodeId],
    head: &ClassifierHead,
    head_ids: &[NodeId],
    image: NodeId,
    label: usize,
    rng: Option<&mut Rng>,
) -> Result<NodeId> {
    let perturbed = gen.forward_image(tape, gen_ids, image, rng)?;
    let z = embedder.forward_image(tape, emb_ids, perturbed)?;
    let probs = head.forward(tape, head_ids, z)?;
    cross_entropy(tape, probs, label)
}

/// Negated squared feature distance `-(||embed(G(x)) - embed(x)||^2)`:
/// descending on this moves the perturbed embedding away from the original.
pub fn generator_embed_loss(
    tape: &mut Tape,
    gen: &Generator,
    gen_ids: &[NodeId],
    embedder: &EmbeddingNet,
    emb_ids: &[NodeId],
    image: NodeId,
    rng: Option<&mut Rng>,
) -> Result<NodeId> {
    let perturbed = gen.forward_image(tape, gen_ids, image, rng)?;
    let zp = embedder.forward_image(tape, emb_ids, perturbed)?;
    let z = embedder.forward_image(tape, emb_ids, image)?;
    let d = embed_distance(tape, zp, z)?;
    tape.scale(d, -1.0)
}

/// Squared feature distance `||embed(R(shifted)) - embed(clean)||^2` between
/// a repaired corrupted image and its clean original.
pub fn repair_embed_loss(
    tape: &mut Tape,
    rep: &Repairer,
    rep_ids: &[NodeId],
    embedder: &EmbeddingNet,
    emb_ids: &[NodeId],
    shifted: NodeId,
    clean: NodeId,
) -> Result<NodeId> {
    let repaired = rep.forward_image(tape, rep_ids, shifted)?;
    let zr = embedder.forward_image(tape, emb_ids, repaired)?;
    let zc = embedder.forward_image(tape, emb_ids, clean)?;
    embed_distance(tape, zr, zc)
}
