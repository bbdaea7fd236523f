//! End-to-end training and evaluation oracles: classification training
//! reaches high train accuracy, the repairer measurably repairs, transport
//! alignment is conservative when support and query match, and a trained
//! bundle clearly beats an untrained one on held-out episodes.

use rand::seq::SliceRandom as _;
use rand::Rng as _;
use rsqs_core::data::{
    gen_dataset, Dataset, DatasetConfig, Episode, EpisodeItem, EpisodeParams, SplitFractions,
};
use rsqs_core::fewshot::{evaluate_episode, run_benchmark, ClassifierKind, EvalOptions};
use rsqs_core::losses::repair_embed_loss;
use rsqs_core::models::{embed, register, ModelBundle, Network, Repairer};
use rsqs_core::rng::{component_rng, substream_rng};
use rsqs_core::shifts::{apply_shift, Family, Phase, ShiftSpec};
use rsqs_core::tape::Tape;
use rsqs_core::training::{
    train, train_step_gr, train_step_phi, OptState, OptimizerKind, OptimizerSet, TrainConfig,
    TrainOutput,
};
use rsqs_core::Tensor;
use std::sync::OnceLock;

const FIXTURE_SEED: u64 = 505;

struct Fixture {
    ds: Dataset,
    untrained: ModelBundle,
    trained: TrainOutput,
}

/// One real training run shared by the evaluation tests: 20 procedural
/// classes split 10/5/5, 16×16 images, the full alternating loop.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let ds = gen_dataset(
            &DatasetConfig {
                n_classes: 20,
                per_class: 20,
                height: 16,
                width: 16,
                split: SplitFractions::new(0.5, 0.25, 0.25).unwrap(),
            },
            &mut component_rng(FIXTURE_SEED, "fixture-data"),
        )
        .unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 80,
            patience: 80,
            val_episodes: 8,
            val_params: EpisodeParams {
                n_way: 5,
                k_shot: 1,
                n_query: 6,
                max_shifts: 2,
            },
            n_contrastive: 4,
            seed: FIXTURE_SEED,
            ..TrainConfig::default()
        };
        let untrained = train(&ds, &TrainConfig { epochs: 0, ..cfg.clone() }, None)
            .unwrap()
            .bundle;
        let trained = train(&ds, &cfg, None).unwrap();
        Fixture { ds, untrained, trained }
    })
}

fn plain_protonet() -> EvalOptions {
    EvalOptions {
        use_repair: false,
        use_ot: false,
        use_tbn: false,
        classifier: ClassifierKind::Prototype,
        beta: 0.5,
    }
}

/// Argmax class of the classifier head on one image.
fn predict_class(bundle: &ModelBundle, img: &Tensor) -> usize {
    let mut tape = Tape::new();
    let ei = register(&mut tape, &bundle.embedder, false);
    let hi = register(&mut tape, &bundle.head, false);
    let x = tape.leaf(img.clone(), false);
    let z = bundle.embedder.forward_image(&mut tape, &ei, x).unwrap();
    let p = bundle.head.forward(&mut tape, &hi, z).unwrap();
    let probs = tape.value(p);
    let mut best = 0;
    for (i, v) in probs.data().iter().enumerate() {
        if *v > probs.data()[best] {
            best = i;
        }
    }
    best
}

#[test]
fn trained_bundle_beats_untrained_on_clean_episodes() {
    let fx = fixture();
    let params = EpisodeParams {
        n_way: 5,
        k_shot: 1,
        n_query: 8,
        max_shifts: 0,
    };
    let opts = plain_protonet();
    let before = run_benchmark(&fx.untrained, &fx.ds, Phase::Test, &params, 50, &opts, 7).unwrap();
    let after = run_benchmark(&fx.trained.bundle, &fx.ds, Phase::Test, &params, 50, &opts, 7).unwrap();
    println!(
        "clean 5-way 1-shot: untrained {:.3} ± {:.3}, trained {:.3} ± {:.3}",
        before.mean_acc, before.ci95, after.mean_acc, after.ci95
    );
    assert!(
        after.mean_acc - before.mean_acc >= 0.20,
        "training lifted accuracy only {:.3} -> {:.3}",
        before.mean_acc,
        after.mean_acc
    );
}

#[test]
fn transport_alignment_agrees_with_plain_protonet_without_shift() {
    // Support and query drawn from the same clean distribution with equal
    // counts: near-exact transport must leave predictions essentially alone.
    let fx = fixture();
    let params = EpisodeParams {
        n_way: 5,
        k_shot: 5,
        n_query: 5,
        max_shifts: 0,
    };
    let with_ot = EvalOptions {
        use_repair: false,
        use_ot: true,
        use_tbn: true,
        classifier: ClassifierKind::Prototype,
        beta: 0.999,
    };
    let without_ot = EvalOptions { use_ot: false, ..with_ot };
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..100u64 {
        let mut rng = substream_rng(31, "ab-episode", i);
        let episode = rsqs_core::data::sample_episode(&fx.ds, Phase::Test, params, &mut rng).unwrap();
        let a = evaluate_episode(&fx.trained.bundle, &episode, &with_ot).unwrap();
        let b = evaluate_episode(&fx.trained.bundle, &episode, &without_ot).unwrap();
        total += a.predictions.len();
        agree += a
            .predictions
            .iter()
            .zip(&b.predictions)
            .filter(|(x, y)| x == y)
            .count();
    }
    let rate = agree as f64 / total as f64;
    println!("near-exact transport vs none on shift-free episodes: agreement {rate:.4}");
    assert!(rate >= 0.95, "agreement {rate:.4} below 0.95");
}

#[test]
fn classification_training_reaches_sanity_accuracy() {
    // Plain supervised steps on the clean 10-class meta-train split must
    // reach 90% train accuracy within 200 steps and stay above 85% at 500.
    let fx = fixture();
    let cfg = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        batch_size: 16,
        lr: 3e-3,
        seed: 606,
        ..TrainConfig::default()
    };
    let mut bundle = train(&fx.ds, &TrainConfig { epochs: 0, ..cfg.clone() }, None)
        .unwrap()
        .bundle;
    let items = fx.ds.train_items();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = component_rng(606, "sanity-train");
    order.shuffle(&mut rng);
    let mut opts = OptimizerSet::new(cfg.optimizer);
    let train_acc = |bundle: &ModelBundle| {
        let correct = items
            .iter()
            .filter(|(img, label)| predict_class(bundle, img) == *label)
            .count();
        correct as f64 / items.len() as f64
    };
    let mut acc_200 = 0.0;
    for step in 0..500 {
        let start = (step * cfg.batch_size) % items.len();
        let batch: Vec<(&Tensor, usize)> = (0..cfg.batch_size)
            .map(|k| items[order[(start + k) % items.len()]])
            .collect();
        train_step_phi(&mut bundle, &batch, &[], &cfg, &mut opts, &mut rng).unwrap();
        if step == 199 {
            acc_200 = train_acc(&bundle);
        }
    }
    let acc_500 = train_acc(&bundle);
    println!("clean train accuracy: {acc_200:.3} after 200 steps, {acc_500:.3} after 500");
    assert!(acc_200 >= 0.90, "train accuracy {acc_200:.3} below 0.90 at step 200");
    assert!(acc_500 >= 0.85, "train accuracy {acc_500:.3} below 0.85 at step 500");
}

/// Dedicated data for the repairer training oracles: 40×40 images (the larger
/// canvas gives smoothing-style repairs room to work) with a fresh untrained
/// bundle.
fn repair_fixture() -> &'static (Dataset, ModelBundle) {
    static REPAIR: OnceLock<(Dataset, ModelBundle)> = OnceLock::new();
    REPAIR.get_or_init(|| {
        let ds = gen_dataset(
            &DatasetConfig {
                n_classes: 20,
                per_class: 16,
                height: 40,
                width: 40,
                split: SplitFractions::new(0.5, 0.25, 0.25).unwrap(),
            },
            &mut component_rng(606, "repair-data"),
        )
        .unwrap();
        let bundle =
            ModelBundle::init(40, 40, 16, 10, 0.05 * 40.0 * 40.0, &mut component_rng(606, "repair-init"))
                .unwrap();
        (ds, bundle)
    })
}

/// First 13 images of every meta-train class (training pool) and the last 3
/// (held-out pool of unseen instances from the same distribution).
fn repair_split(ds: &Dataset) -> (Vec<&Tensor>, Vec<&Tensor>) {
    let train: Vec<&Tensor> = ds
        .phase_classes(Phase::Train)
        .flat_map(|c| ds.class_images(c).iter().take(13))
        .collect();
    let held_out: Vec<&Tensor> = ds
        .phase_classes(Phase::Train)
        .flat_map(|c| ds.class_images(c).iter().skip(13))
        .collect();
    (train, held_out)
}

#[test]
fn repairer_training_halves_heldout_noise_loss() {
    // 500 dedicated repairer steps against gaussian noise at sigma = 0.2,
    // minimizing the feature-space repair loss; that loss on held-out images
    // must at least halve relative to the identity initialization.
    let (ds, init) = repair_fixture();
    let emb = &init.embedder;
    let spec = ShiftSpec::new(Family::GaussNoise, 5).unwrap();
    let (train_imgs, held_out) = repair_split(ds);

    let mut rep = init.repairer.clone();
    let mut opt = OptState::new(OptimizerKind::Adam);
    let mut rng = component_rng(707, "repair-train");
    let mut train_losses = Vec::with_capacity(500);
    for step in 0..500 {
        let mut tape = Tape::new();
        let ri = register(&mut tape, &rep, true);
        let ei = register(&mut tape, emb, false);
        let mut losses = Vec::new();
        for k in 0..12 {
            let img = train_imgs[(step * 12 + k) % train_imgs.len()];
            // Two independent noise draws per image: repairs must hold across
            // noise instances, not fit any single one.
            for _ in 0..2 {
                let noisy = apply_shift(img, spec, &mut rng).unwrap();
                let n = tape.leaf(noisy, false);
                let c = tape.leaf(img.clone(), false);
                losses.push(repair_embed_loss(&mut tape, &rep, &ri, emb, &ei, n, c).unwrap());
            }
        }
        let stacked = tape.stack(&losses).unwrap();
        let tot = tape.sum(stacked).unwrap();
        let mean = tape.scale(tot, 1.0 / 24.0).unwrap();
        train_losses.push(tape.value(mean).data()[0]);
        let mut g = tape.backward(mean, Tensor::scalar(1.0)).unwrap();
        let grads: Vec<Tensor> = rep
            .params()
            .iter()
            .zip(&ri)
            .map(|(p, &id)| g.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        // Warm up fast while the zero-initialized closing layer grows, then
        // drop the rate so late steps average over noise draws instead of
        // chasing them.
        let lr = if step < 250 { 8e-3 } else { 3e-3 };
        opt.apply(&mut rep.params_mut(), &grads, lr).unwrap();
    }
    // Training loss should end well below where it started (sanity on the
    // optimization itself before the generalization claim below).
    let head: f64 = train_losses[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = train_losses[450..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "repair training diverged: first-50 {head:.4}, last-50 {tail:.4}");

    // Same noisy instances scored by the untouched and the trained repairer.
    let mut eval_rng = component_rng(707, "repair-eval");
    let feat_loss = |r: &Repairer, noisy: &Tensor, clean: &Tensor| -> f64 {
        let repaired = rsqs_core::models::repair(r, noisy).unwrap();
        let zr = embed(emb, &repaired).unwrap();
        let zc = embed(emb, clean).unwrap();
        zr.sub(&zc).unwrap().squared_norm()
    };
    let mut before = 0.0;
    let mut after = 0.0;
    let mut count = 0;
    for img in &held_out {
        for _ in 0..3 {
            let noisy = apply_shift(img, spec, &mut eval_rng).unwrap();
            before += feat_loss(&init.repairer, &noisy, img);
            after += feat_loss(&rep, &noisy, img);
            count += 1;
        }
    }
    before /= count as f64;
    after /= count as f64;
    println!("held-out noise loss: identity repairer {before:.4}, trained {after:.4}");
    assert!(
        after <= 0.5 * before,
        "trained repairer loss {after:.4} not half of {before:.4}"
    );
}

#[test]
fn reconstruction_training_denoises_heldout_pixels() {
    // Train the repairer network on a plain pixel reconstruction objective
    // against gaussian noise at sigma = 0.2; on held-out images the repaired
    // output must land closer to the clean image than the noisy input.
    let (ds, init) = repair_fixture();
    let spec = ShiftSpec::new(Family::GaussNoise, 5).unwrap();
    let (train_imgs, held_out) = repair_split(ds);
    let hw = 40 * 40;

    let mut rep = init.repairer.clone();
    let mut opt = OptState::new(OptimizerKind::Adam);
    let mut rng = component_rng(711, "recon-train");
    for step in 0..500 {
        let mut tape = Tape::new();
        let ri = register(&mut tape, &rep, true);
        let mut losses = Vec::new();
        for k in 0..4 {
            let img = train_imgs[(step * 4 + k) % train_imgs.len()];
            let noisy = apply_shift(img, spec, &mut rng).unwrap();
            let n = tape.leaf(noisy, false);
            let out = rep.forward_image(&mut tape, &ri, n).unwrap();
            let target = tape.leaf(img.clone(), false);
            let neg = tape.scale(target, -1.0).unwrap();
            let diff = tape.add(out, neg).unwrap();
            let flat = tape.reshape(diff, &[hw]).unwrap();
            losses.push(tape.dot(flat, flat).unwrap());
        }
        let stacked = tape.stack(&losses).unwrap();
        let tot = tape.sum(stacked).unwrap();
        let mean = tape.scale(tot, 0.25).unwrap();
        let mut g = tape.backward(mean, Tensor::scalar(1.0)).unwrap();
        let grads: Vec<Tensor> = rep
            .params()
            .iter()
            .zip(&ri)
            .map(|(p, &id)| g.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        opt.apply(&mut rep.params_mut(), &grads, 1e-3).unwrap();
    }

    let mut eval_rng = component_rng(711, "recon-eval");
    let mut noisy_px = 0.0;
    let mut repaired_px = 0.0;
    let mut count = 0;
    for img in &held_out {
        for _ in 0..3 {
            let noisy = apply_shift(img, spec, &mut eval_rng).unwrap();
            let repaired = rsqs_core::models::repair(&rep, &noisy).unwrap();
            noisy_px += noisy.sub(img).unwrap().squared_norm().sqrt();
            repaired_px += repaired.sub(img).unwrap().squared_norm().sqrt();
            count += 1;
        }
    }
    noisy_px /= count as f64;
    repaired_px /= count as f64;
    println!("held-out pixel distance to clean: noisy {noisy_px:.4}, repaired {repaired_px:.4}");
    assert!(
        repaired_px < noisy_px,
        "repair did not move images toward clean: {noisy_px:.4} -> {repaired_px:.4}"
    );
}

#[test]
fn adversarial_steps_reduce_repair_loss_over_time() {
    let fx = fixture();
    let cfg = TrainConfig {
        batch_size: 8,
        lr: 3e-3,
        seed: 808,
        ..TrainConfig::default()
    };
    let mut bundle = train(&fx.ds, &TrainConfig { epochs: 0, ..cfg.clone() }, None)
        .unwrap()
        .bundle;
    let items = fx.ds.train_items();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = component_rng(808, "gr-train");
    order.shuffle(&mut rng);
    let mut opts = OptimizerSet::new(cfg.optimizer);
    let mut l_r = Vec::with_capacity(200);
    for step in 0..200 {
        let start = (step * cfg.batch_size) % items.len();
        let batch: Vec<(&Tensor, usize)> = (0..cfg.batch_size)
            .map(|k| items[order[(start + k) % items.len()]])
            .collect();
        let losses = train_step_gr(&mut bundle, &batch, &cfg, &mut opts, &mut rng).unwrap();
        assert!(losses.l_r.is_finite() && losses.l_g.is_finite() && losses.l_adv.is_finite());
        l_r.push(losses.l_r);
    }
    let first: f64 = l_r[..50].iter().sum::<f64>() / 50.0;
    let last: f64 = l_r[150..].iter().sum::<f64>() / 50.0;
    println!("repair loss running mean: first 50 steps {first:.4}, last 50 steps {last:.4}");
    assert!(last < first, "repair loss did not decrease: {first:.4} -> {last:.4}");
}

#[test]
fn separable_clean_data_with_plain_protonet_is_perfect() {
    // Two pixel-level separable classes (dark vs bright) and a fresh random
    // embedder: nearest-prototype with every stage off must be perfect.
    let mut rng = component_rng(909, "separable");
    let mut make_item = |level: f64, class_idx: usize| {
        let data: Vec<f64> = (0..64)
            .map(|_| level + 0.05 * (rng.random::<f64>() - 0.5))
            .collect();
        EpisodeItem {
            image: Tensor::from_vec(&[8, 8], data).unwrap(),
            class_idx,
            global_class: class_idx,
            shift: None,
        }
    };
    let support = vec![make_item(0.15, 0), make_item(0.85, 1)];
    let query: Vec<EpisodeItem> = (0..4)
        .flat_map(|_| [make_item(0.15, 0), make_item(0.85, 1)])
        .collect();
    let params = EpisodeParams {
        n_way: 2,
        k_shot: 1,
        n_query: 4,
        max_shifts: 0,
    };
    let episode = Episode {
        support,
        query,
        shift_pool: Vec::new(),
        phase: Phase::Test,
        params,
    };
    let bundle = ModelBundle::init(8, 8, 8, 2, 1.0, &mut rng).unwrap();
    let res = evaluate_episode(&bundle, &episode, &plain_protonet()).unwrap();
    assert_eq!(res.accuracy, 1.0, "predictions: {:?}", res.predictions);
}

#[test]
fn fixture_training_log_is_well_formed() {
    let fx = fixture();
    let log = &fx.trained.log;
    assert!(!log.is_empty());
    let steps_per_epoch = 200usize.div_ceil(16);
    for (i, rec) in log.iter().enumerate() {
        assert_eq!(rec.epoch, i);
        assert_eq!(rec.step, (i + 1) * steps_per_epoch);
        for v in [rec.l_ori, rec.l_adv, rec.l_self, rec.l_g, rec.l_r, rec.val_acc] {
            assert!(v.is_finite());
        }
        assert!(rec.l_r >= 0.0 && rec.l_ori >= 0.0 && rec.l_adv >= 0.0 && rec.l_self >= 0.0);
        assert!((0.0..=1.0).contains(&rec.val_acc));
    }
    let best = fx.trained.best_val_acc.unwrap();
    let max_logged = log.iter().map(|r| r.val_acc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best, max_logged);
}
