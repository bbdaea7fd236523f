//! Central finite-difference validation of every reverse-mode gradient the
//! training loop consumes: the four networks through scalar probes, the
//! composite losses through their trainable networks, and the elementary
//! losses through their leaf inputs.
//!
//! Each check perturbs a randomly sampled parameter coordinate by ±1e-4,
//! re-evaluates the objective, and compares the centered difference against
//! the tape gradient. Stochastic forwards (generator dropout) replay the same
//! mask by cloning the RNG for every evaluation. Inputs are drawn away from
//! clamp boundaries so the objective is differentiable at the probe point.

use rand::Rng as _;
use rsqs_core::losses::{
    adversarial_ce_loss, classification_loss, cross_entropy, embed_distance, generator_embed_loss,
    nt_xent, repair_embed_loss,
};
use rsqs_core::models::{
    register, ClassifierHead, EmbeddingNet, Generator, Network, Repairer,
};
use rsqs_core::rng::{substream_rng, Rng};
use rsqs_core::shifts::{apply_shift, Family, ShiftSpec};
use rsqs_core::tape::{Gradients, NodeId, Tape};
use rsqs_core::Tensor;

const SEED: u64 = 20240817;
const DRAWS: u64 = 20;
const COORDS: usize = 4;
const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
/// Relative-error denominator floor: below this gradient magnitude the check
/// effectively becomes absolute at `TOL * FLOOR`.
const FLOOR: f64 = 1e-3;

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(FLOOR)
}

/// Image with pixels in [0.2, 0.8] — keeps forwards away from clamp kinks.
fn interior_image(h: usize, w: usize, rng: &mut Rng) -> Tensor {
    let data: Vec<f64> = (0..h * w).map(|_| 0.2 + 0.6 * rng.random::<f64>()).collect();
    Tensor::from_vec(&[h, w], data).unwrap()
}

fn rand_vec(dim: usize, rng: &mut Rng) -> Tensor {
    let data: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(&[dim], data).unwrap()
}

/// Pull a network's gradients out of a backward result, params order.
fn grads_of(net: &dyn Network, ids: &[NodeId], g: &mut Gradients) -> Vec<Tensor> {
    net.params()
        .iter()
        .zip(ids)
        .map(|(p, &id)| g.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// The repairer's final layer is zero-initialised, which zeroes upstream
/// gradients; give it small random weights so every layer carries signal.
fn randomize_last_layer(net: &mut dyn Network, rng: &mut Rng) {
    let n = net.params().len();
    for p in net.params_mut().into_iter().skip(n - 2) {
        for v in p.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
}

/// Compare autodiff and finite differences on `COORDS` random parameter
/// coordinates of one network; returns the worst relative error.
fn check_net<N: Network>(
    net: &mut N,
    grads: &[Tensor],
    mut eval: impl FnMut(&N) -> f64,
    pick: &mut Rng,
) -> f64 {
    let sizes: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut worst = 0.0f64;
    for _ in 0..COORDS {
        let mut flat = pick.random_range(0..total);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        let ad = grads[pi].data()[flat];
        let orig = net.params()[pi].data()[flat];
        net.params_mut()[pi].data_mut()[flat] = orig + H;
        let up = eval(net);
        net.params_mut()[pi].data_mut()[flat] = orig - H;
        let down = eval(net);
        net.params_mut()[pi].data_mut()[flat] = orig;
        let fd = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(ad, fd));
    }
    worst
}

/// Same comparison for a plain tensor input.
fn check_leaf(x: &mut Tensor, grad: &Tensor, mut eval: impl FnMut(&Tensor) -> f64, pick: &mut Rng) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..COORDS {
        let k = pick.random_range(0..x.len());
        let ad = grad.data()[k];
        let orig = x.data()[k];
        x.data_mut()[k] = orig + H;
        let up = eval(x);
        x.data_mut()[k] = orig - H;
        let down = eval(x);
        x.data_mut()[k] = orig;
        let fd = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(ad, fd));
    }
    worst
}

#[test]
fn embedder_gradients_match_finite_differences() {
    for draw in 0..DRAWS {
        let mut rng = substream_rng(SEED, "fd-embed", draw);
        let mut emb = EmbeddingNet::new(8, 8, 4, &mut rng).unwrap();
        let img = interior_image(8, 8, &mut rng);
        let eval = |e: &EmbeddingNet| {
            let mut t = Tape::new();
            let ids = register(&mut t, e, false);
            let x = t.leaf(img.clone(), false);
            let z = e.forward_image(&mut t, &ids, x).unwrap();
            let s = t.sum(z).unwrap();
            t.value(s).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let ids = register(&mut t, &emb, true);
        let x = t.leaf(img.clone(), false);
        let z = emb.forward_image(&mut t, &ids, x).unwrap();
        let s = t.sum(z).unwrap();
        let mut g = t.backward(s, Tensor::scalar(1.0)).unwrap();
        let grads = grads_of(&emb, &ids, &mut g);
        let worst = check_net(&mut emb, &grads, eval, &mut rng);
        assert!(worst <= TOL, "draw {draw}: worst relative error {worst:e}");
    }
}

#[test]
fn classifier_gradients_match_finite_differences() {
    for draw in 0..DRAWS {
        let mut rng = substream_rng(SEED, "fd-head", draw);
        let mut head = ClassifierHead::new(6, 4, &mut rng).unwrap();
        let z = rand_vec(6, &mut rng);
        let label = (draw % 4) as usize;
        let eval = |h: &ClassifierHead| {
            let mut t = Tape::new();
            let ids = register(&mut t, h, false);
            let zl = t.leaf(z.clone(), false);
            let p = h.forward(&mut t, &ids, zl).unwrap();
            let l = cross_entropy(&mut t, p, label).unwrap();
            t.value(l).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let ids = register(&mut t, &head, true);
        let zl = t.leaf(z.clone(), false);
        let p = head.forward(&mut t, &ids, zl).unwrap();
        let l = cross_entropy(&mut t, p, label).unwrap();
        let mut g = t.backward(l, Tensor::scalar(1.0)).unwrap();
        let grads = grads_of(&head, &ids, &mut g);
        let worst = check_net(&mut head, &grads, eval, &mut rng);
        assert!(worst <= TOL, "draw {draw}: worst relative error {worst:e}");
    }
}

#[test]
fn generator_gradients_match_finite_differences() {
    for draw in 0..DRAWS {
        let mut rng = substream_rng(SEED, "fd-gen", draw);
        let mut gen = Generator::new(8, 8, 0.05, &mut rng).unwrap();
        let img = interior_image(8, 8, &mut rng);
        let drop_rng = rng.clone();
        let eval = |g: &Generator| {
            let mut t = Tape::new();
            let ids = register(&mut t, g, false);
            let x = t.leaf(img.clone(), false);
            let mut r = drop_rng.clone();
            let out = g.forward_image(&mut t, &ids, x, Some(&mut r)).unwrap();
            let s = t.sum(out).unwrap();
            t.value(s).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let ids = register(&mut t, &gen, true);
        let x = t.leaf(img.clone(), false);
        let mut r = drop_rng.clone();
        let out = gen.forward_image(&mut t, &ids, x, Some(&mut r)).unwrap();
        let s = t.sum(out).unwrap();
        let mut g = t.backward(s, Tensor::scalar(1.0)).unwrap();
        let grads = grads_of(&gen, &ids, &mut g);
        let mut pick = substream_rng(SEED, "fd-gen-pick", draw);
        let worst = check_net(&mut gen, &grads, eval, &mut pick);
        assert!(worst <= TOL, "draw {draw}: worst relative error {worst:e}");
    }
}

#[test]
fn repairer_gradients_match_finite_differences() {
    for draw in 0..DRAWS {
        let mut rng = substream_rng(SEED, "fd-rep", draw);
        let mut rep = Repairer::new(8, 8, &mut rng).unwrap();
        randomize_last_layer(&mut rep, &mut rng);
        let img = interior_image(8, 8, &mut rng);
        let eval = |r: &Repairer| {
            let mut t = Tape::new();
            let ids = register(&mut t, r, false);
            let x = t.leaf(img.clone(), false);
            let out = r.forward_image(&mut t, &ids, x).unwrap();
            let s = t.sum(out).unwrap();
            t.value(s).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let ids = register(&mut t, &rep, true);
        let x = t.leaf(img.clone(), false);
        let out = rep.forward_image(&mut t, &ids, x).unwrap();
        let s = t.sum(out).unwrap();
        let mut g = t.backward(s, Tensor::scalar(1.0)).unwrap();
        let grads = grads_of(&rep, &ids, &mut g);
        let worst = check_net(&mut rep, &grads, eval, &mut rng);
        assert!(worst <= TOL, "draw {draw}: worst relative error {worst:e}");
    }
}

#[test]
fn classification_loss_gradients_match_finite_differences() {
    for draw in 0..DRAWS {
        let mut rng = substream_rng(SEED, "fd-cls", draw);
        let mut emb = EmbeddingNet::new(8, 8, 4, &mut rng).unwrap();
        let mut head = ClassifierHead::new(4, 3, &mut rng).unwrap();
        let img = interior_image(8, 8, &mut rng);
        let label = (draw % 3) as usize;
        let eval = |e: &EmbeddingNet, h: &ClassifierHead| {
            let mut t = Tape::new();
            let ei = register(&mut t, e, false);
            let hi = register(&mut t, h, false);
            let x = t.leaf(img.clone(), false);
            let l = classification_loss(&mut t, e, &ei, h, &hi, x, label).unwrap();
            t.value(l).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let ei = register(&mut t, &emb, true);
        let hi = register(&mut t, &head, true);
        let x = t.leaf(img.clone(), false);
        let l = classification_loss(&mut t, &emb, &ei, &head, &hi, x, label).unwrap();
        let mut g = t.backward(l, Tensor::scalar(1.0)).unwrap();
        let eg = grads_of(&emb, &ei, &mut g);
        let hg = grads_of(&head, &hi, &mut g);
        let we = check_net(&mut emb, &eg, |e| eval(e, &head), &mut rng);
        let wh = check_net(&mut head, &hg, |h| eval(&emb, h), &mut rng);
        assert!(we.max(wh) <= TOL, "draw {draw}: errors {we:e} / {wh:e}");
    }
}

#[test]
fn adversarial_loss_gradients_match_finite_differences() {
    for draw in 0..DRAWS {
        let mut rng = substream_rng(SEED, "fd-adv", draw);
        let mut gen = Generator::new(8, 8, 0.05, &mut rng).unwrap();
        let mut emb = EmbeddingNet::new(8, 8, 4, &mut rng).unwrap();
        let mut head = ClassifierHead::new(4, 3, &mut rng).unwrap();
        let img = interior_image(8, 8, &mut rng);
        let label = (draw % 3) as usize;
        let drop_rng = rng.clone();
        let eval = |gn: &Generator, e: &EmbeddingNet, h: &ClassifierHead| {
            let mut t = Tape::new();
            let gi = register(&mut t, gn, false);
            let ei = register(&mut t, e, false);
            let hi = register(&mut t, h, false);
            let x = t.leaf(img.clone(), false);
            let mut r = drop_rng.clone();
            let l = adversarial_ce_loss(&mut t, gn, &gi, e, &ei, h, &hi, x, label, Some(&mut r)).unwrap();
            t.value(l).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let gi = register(&mut t, &gen, true);
        let ei = register(&mut t, &emb, true);
        let hi = register(&mut t, &head, true);
        let x = t.leaf(img.clone(), false);
        let mut r = drop_rng.clone();
        let l = adversarial_ce_loss(&mut t, &gen, &gi, &emb, &ei, &head, &hi, x, label, Some(&mut r)).unwrap();
        let mut g = t.backward(l, Tensor::scalar(1.0)).unwrap();
        let gg = grads_of(&gen, &gi, &mut g);
        let eg = grads_of(&emb, &ei, &mut g);
        let hg = grads_of(&head, &hi, &mut g);
        let mut pick = substream_rng(SEED, "fd-adv-pick", draw);
        let wg = check_net(&mut gen, &gg, |gn| eval(gn, &emb, &head), &mut pick);
        let we = check_net(&mut emb, &eg, |e| eval(&gen, e, &head), &mut pick);
        let wh = check_net(&mut head, &hg, |h| eval(&gen, &emb, h), &mut pick);
        assert!(
            wg.max(we).max(wh) <= TOL,
            "draw {draw}: errors {wg:e} / {we:e} / {wh:e}"
        );
    }
}

#[test]
fn generator_distance_loss_gradients_match_finite_differences() {
    for draw in 0..DRAWS {
        let mut rng = substream_rng(SEED, "fd-gdist", draw);
        let mut gen = Generator::new(8, 8, 0.05, &mut rng).unwrap();
        let mut emb = EmbeddingNet::new(8, 8, 4, &mut rng).unwrap();
        let img = interior_image(8, 8, &mut rng);
        let drop_rng = rng.clone();
        let eval = |gn: &Generator, e: &EmbeddingNet| {
            let mut t = Tape::new();
            let gi = register(&mut t, gn, false);
            let ei = register(&mut t, e, false);
            let x = t.leaf(img.clone(), false);
            let mut r = drop_rng.clone();
            let l = generator_embed_loss(&mut t, gn, &gi, e, &ei, x, Some(&mut r)).unwrap();
            t.value(l).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let gi = register(&mut t, &gen, true);
        let ei = register(&mut t, &emb, true);
        let x = t.leaf(img.clone(), false);
        let mut r = drop_rng.clone();
        let l = generator_embed_loss(&mut t, &gen, &gi, &emb, &ei, x, Some(&mut r)).unwrap();
        let mut g = t.backward(l, Tensor::scalar(1.0)).unwrap();
        let gg = grads_of(&gen, &gi, &mut g);
        let eg = grads_of(&emb, &ei, &mut g);
        let mut pick = substream_rng(SEED, "fd-gdist-pick", draw);
        let wg = check_net(&mut gen, &gg, |gn| eval(gn, &emb), &mut pick);
        let we = check_net(&mut emb, &eg, |e| eval(&gen, e), &mut pick);
        assert!(wg.max(we) <= TOL, "draw {draw}: errors {wg:e} / {we:e}");
    }
}

#[test]
fn repair_loss_gradients_match_finite_differences() {
    for draw in 0..DRAWS {
        let mut rng = substream_rng(SEED, "fd-rloss", draw);
        let mut rep = Repairer::new(8, 8, &mut rng).unwrap();
        randomize_last_layer(&mut rep, &mut rng);
        let mut emb = EmbeddingNet::new(8, 8, 4, &mut rng).unwrap();
        let clean = interior_image(8, 8, &mut rng);
        let spec = ShiftSpec::new(Family::GaussNoise, 2).unwrap();
        let shifted = apply_shift(&clean, spec, &mut rng).unwrap();
        let eval = |r: &Repairer, e: &EmbeddingNet| {
            let mut t = Tape::new();
            let ri = register(&mut t, r, false);
            let ei = register(&mut t, e, false);
            let s = t.leaf(shifted.clone(), false);
            let c = t.leaf(clean.clone(), false);
            let l = repair_embed_loss(&mut t, r, &ri, e, &ei, s, c).unwrap();
            t.value(l).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let ri = register(&mut t, &rep, true);
        let ei = register(&mut t, &emb, true);
        let s = t.leaf(shifted.clone(), false);
        let c = t.leaf(clean.clone(), false);
        let l = repair_embed_loss(&mut t, &rep, &ri, &emb, &ei, s, c).unwrap();
        let mut g = t.backward(l, Tensor::scalar(1.0)).unwrap();
        let rg = grads_of(&rep, &ri, &mut g);
        let eg = grads_of(&emb, &ei, &mut g);
        let wr = check_net(&mut rep, &rg, |r| eval(r, &emb), &mut rng);
        let we = check_net(&mut emb, &eg, |e| eval(&rep, e), &mut rng);
        assert!(wr.max(we) <= TOL, "draw {draw}: errors {wr:e} / {we:e}");
    }
}

#[test]
fn contrastive_loss_gradients_match_finite_differences() {
    for draw in 0..DRAWS {
        let mut rng = substream_rng(SEED, "fd-ctr", draw);
        let mut emb = EmbeddingNet::new(8, 8, 4, &mut rng).unwrap();
        // Three fixed augmentation pairs built ahead of time.
        let mut augs = Vec::new();
        for _ in 0..3 {
            let base = interior_image(8, 8, &mut rng);
            for sev in [1u8, 2] {
                let spec = ShiftSpec::new(Family::Contrast, sev).unwrap();
                augs.push(apply_shift(&base, spec, &mut rng).unwrap());
            }
        }
        let eval = |e: &EmbeddingNet| {
            let mut t = Tape::new();
            let ids = register(&mut t, e, false);
            let zs: Vec<NodeId> = augs
                .iter()
                .map(|a| {
                    let x = t.leaf(a.clone(), false);
                    e.forward_image(&mut t, &ids, x).unwrap()
                })
                .collect();
            let l = nt_xent(&mut t, &zs, 0.5).unwrap();
            t.value(l).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let ids = register(&mut t, &emb, true);
        let zs: Vec<NodeId> = augs
            .iter()
            .map(|a| {
                let x = t.leaf(a.clone(), false);
                emb.forward_image(&mut t, &ids, x).unwrap()
            })
            .collect();
        let l = nt_xent(&mut t, &zs, 0.5).unwrap();
        let mut g = t.backward(l, Tensor::scalar(1.0)).unwrap();
        let grads = grads_of(&emb, &ids, &mut g);
        let worst = check_net(&mut emb, &grads, eval, &mut rng);
        assert!(worst <= TOL, "draw {draw}: worst relative error {worst:e}");
    }
}

#[test]
fn elementary_loss_gradients_match_finite_differences() {
    for draw in 0..DRAWS {
        let mut rng = substream_rng(SEED, "fd-elem", draw);
        // Cross-entropy with respect to its probability input. The input must
        // stay a distribution, so perturb along simplex-preserving directions
        // (+h on one coordinate, -h on another) and compare the directional
        // derivative against the gradient difference.
        let raw: Vec<f64> = (0..4).map(|_| 0.1 + rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        let probs = Tensor::from_vec(&[4], raw.iter().map(|v| v / total).collect()).unwrap();
        let label = (draw % 4) as usize;
        let ce = |p: &Tensor| {
            let mut t = Tape::new();
            let pl = t.leaf(p.clone(), true);
            let l = cross_entropy(&mut t, pl, label).unwrap();
            t.value(l).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let pl = t.leaf(probs.clone(), true);
        let l = cross_entropy(&mut t, pl, label).unwrap();
        let mut g = t.backward(l, Tensor::scalar(1.0)).unwrap();
        let pg = g.take(pl).unwrap();
        let mut wc = 0.0f64;
        for _ in 0..COORDS {
            let k = rng.random_range(0..4);
            let j = (k + 1 + rng.random_range(0..3)) % 4;
            let ad = pg.data()[k] - pg.data()[j];
            let mut bump = |s: f64| {
                let mut p = probs.clone();
                p.data_mut()[k] += s;
                p.data_mut()[j] -= s;
                ce(&p)
            };
            let fd = (bump(H) - bump(-H)) / (2.0 * H);
            wc = wc.max(rel_err(ad, fd));
        }

        // Squared distance with respect to its first vector argument.
        let mut a = rand_vec(5, &mut rng);
        let b = rand_vec(5, &mut rng);
        let dist = |x: &Tensor| {
            let mut t = Tape::new();
            let xa = t.leaf(x.clone(), true);
            let xb = t.leaf(b.clone(), false);
            let l = embed_distance(&mut t, xa, xb).unwrap();
            t.value(l).scalar_value().unwrap()
        };
        let mut t = Tape::new();
        let xa = t.leaf(a.clone(), true);
        let xb = t.leaf(b.clone(), false);
        let l = embed_distance(&mut t, xa, xb).unwrap();
        let mut g = t.backward(l, Tensor::scalar(1.0)).unwrap();
        let ag = g.take(xa).unwrap();
        let wd = check_leaf(&mut a, &ag, dist, &mut rng);
        assert!(wc.max(wd) <= TOL, "draw {draw}: errors {wc:e} / {wd:e}");
    }
}
