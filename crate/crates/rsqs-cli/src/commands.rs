//! The four subcommands: dataset generation, training, benchmark
//! evaluation, and bound verification.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::artifacts::write_atomic;
use crate::checkpoint::{load_checkpoint, write_checkpoint};
use crate::config::RunConfig;
use crate::dataset_file::{file_checksum, read_dataset, write_dataset};
use crate::error::{CliError, CliResult};
use rsqs_core::data::{gen_dataset, Dataset, EpisodeParams, sample_episode};
use rsqs_core::fewshot::{evaluate_episode, mean_and_ci95, run_benchmark, BenchmarkSummary, EvalOptions};
use rsqs_core::models::{default_eps, ModelBundle};
use rsqs_core::rng::{component_rng, substream_rng};
use rsqs_core::shifts::Phase;
use rsqs_core::theory::{lemma1_check, thm_err_scaling, LemmaReport, ScalingReport};
use rsqs_core::training::{train, TrainRecord};

// ── gen-data ────────────────────────────────────────────────────────────

pub fn cmd_gen_data(cfg: &RunConfig) -> CliResult<()> {
    cfg.echo()?;
    let ds_cfg = cfg.dataset_config()?;
    let ds = gen_dataset(&ds_cfg, &mut component_rng(cfg.seed, "gen-data"))?;
    let path = cfg.dataset_path();
    write_dataset(&path, &ds)?;
    let n_items: usize = (0..ds.n_classes()).map(|c| ds.class_images(c).len()).sum();
    println!(
        "wrote {} items ({} classes, {}x{}) to {}; checksum {:016x}",
        n_items,
        ds.n_classes(),
        ds.height(),
        ds.width(),
        path.display(),
        file_checksum(&path)?
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────

pub fn cmd_train(cfg: &RunConfig) -> CliResult<()> {
    cfg.echo()?;
    let ds = read_dataset(&cfg.dataset_path(), cfg.split()?)?;
    let train_cfg = cfg.train_config()?;
    let t0 = Instant::now();
    let clock = move || t0.elapsed().as_millis() as u64;
    let out = train(&ds, &train_cfg, Some(&clock))?;

    let ckpt = cfg.checkpoint_path();
    write_checkpoint(&ckpt, &out.bundle)?;
    let log_path = Path::new(&cfg.out).join("train_log.csv");
    let mut csv = String::from(TrainRecord::CSV_HEADER);
    csv.push('\n');
    for rec in &out.log {
        csv.push_str(&rec.csv_row());
        csv.push('\n');
    }
    write_atomic(&log_path, csv.as_bytes())?;

    match (out.best_epoch, out.best_val_acc) {
        (Some(e), Some(a)) => println!(
            "trained {} epochs{}; best epoch {e} with validation accuracy {a:.4}",
            out.log.len(),
            if out.stopped_early { " (stopped early)" } else { "" },
        ),
        _ => println!("no epochs requested; checkpoint holds the initialization"),
    }
    println!("checkpoint: {}; log: {}", ckpt.display(), log_path.display());
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct PlanDiag {
    mean_cost: Option<f64>,
    mean_entropy: Option<f64>,
    converged_fraction: Option<f64>,
}

impl PlanDiag {
    fn from_summary(s: &BenchmarkSummary) -> PlanDiag {
        PlanDiag {
            mean_cost: s.mean_plan_cost,
            mean_entropy: s.mean_plan_entropy,
            converged_fraction: s.converged_fraction,
        }
    }
}

#[derive(Serialize)]
struct BenchBlock {
    max_shifts: usize,
    use_ot: bool,
    use_repair: bool,
    use_tbn: bool,
    classifier: String,
    n_episodes: usize,
    mean_acc: f64,
    ci95: f64,
    plan: PlanDiag,
}

#[derive(Serialize)]
struct BenchmarkReport<'a> {
    config: &'a RunConfig,
    phase: &'a str,
    n_episodes: usize,
    mean_acc: f64,
    ci95: f64,
    plan: PlanDiag,
    /// One block per requested `max_shifts` value, first block repeated in
    /// the top-level fields.
    blocks: Vec<BenchBlock>,
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<()> {
    cfg.echo()?;
    if cfg.max_shifts.is_empty() {
        return Err(CliError::Validation("at least one --max-shifts value is required".into()));
    }
    let ds = read_dataset(&cfg.dataset_path(), cfg.split()?)?;
    let bundle = load_bundle(cfg, &ds)?;
    let opts = cfg.eval_options()?;
    let phase = cfg.eval_phase()?;
    let threads = cfg.resolve_threads();

    let mut blocks = Vec::new();
    for &m in &cfg.max_shifts {
        let params = EpisodeParams {
            n_way: cfg.ways,
            k_shot: cfg.shots,
            n_query: cfg.queries,
            max_shifts: m,
        };
        let summary =
            run_benchmark_parallel(&bundle, &ds, phase, &params, cfg.episodes, &opts, cfg.seed, threads)?;
        println!(
            "max_shifts={m}: accuracy {:.4} ± {:.4} over {} episodes",
            summary.mean_acc, summary.ci95, summary.n_episodes
        );
        blocks.push(BenchBlock {
            max_shifts: m,
            use_ot: opts.use_ot,
            use_repair: opts.use_repair,
            use_tbn: opts.use_tbn,
            classifier: cfg.classifier.clone(),
            n_episodes: summary.n_episodes,
            mean_acc: summary.mean_acc,
            ci95: summary.ci95,
            plan: PlanDiag::from_summary(&summary),
        });
    }
    let report = BenchmarkReport {
        config: cfg,
        phase: &cfg.eval_phase,
        n_episodes: blocks[0].n_episodes,
        mean_acc: blocks[0].mean_acc,
        ci95: blocks[0].ci95,
        plan: PlanDiag {
            mean_cost: blocks[0].plan.mean_cost,
            mean_entropy: blocks[0].plan.mean_entropy,
            converged_fraction: blocks[0].plan.converged_fraction,
        },
        blocks,
    };
    let path = Path::new(&cfg.out).join("benchmark.json");
    write_atomic(&path, serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
    println!("report: {}", path.display());
    Ok(())
}

/// Rebuild the architecture from the configuration and pour the checkpoint
/// into it.
fn load_bundle(cfg: &RunConfig, ds: &Dataset) -> CliResult<ModelBundle> {
    let n_train = ds.phase_classes(Phase::Train).len();
    let eps = cfg.eps.unwrap_or_else(|| default_eps(ds.height(), ds.width()));
    let mut bundle = ModelBundle::init(
        ds.height(),
        ds.width(),
        cfg.dim,
        n_train,
        eps,
        &mut component_rng(cfg.seed, "eval-init"),
    )?;
    load_checkpoint(&cfg.checkpoint_path(), &mut bundle)?;
    Ok(bundle)
}

/// Episode-parallel version of the library's benchmark runner. Episode `i`
/// always evaluates under substream `i` of the master seed and aggregation
/// runs in episode order, so the result is identical for every worker
/// count — including the library's own single-threaded path.
pub fn run_benchmark_parallel(
    bundle: &ModelBundle,
    dataset: &Dataset,
    phase: Phase,
    params: &EpisodeParams,
    n_episodes: usize,
    opts: &EvalOptions,
    master_seed: u64,
    threads: usize,
) -> CliResult<BenchmarkSummary> {
    let workers = threads.max(1).min(n_episodes.max(1));
    if workers <= 1 {
        return Ok(run_benchmark(bundle, dataset, phase, params, n_episodes, opts, master_seed)?);
    }
    if n_episodes < 2 {
        return Err(CliError::Validation(format!(
            "benchmark needs at least 2 episodes, got {n_episodes}"
        )));
    }
    let mut slots = Vec::new();
    std::thread::scope(|scope| -> CliResult<()> {
        let mut handles = Vec::with_capacity(workers);
        for w in 0..workers {
            handles.push(scope.spawn(move || -> CliResult<Vec<_>> {
                let mut out = Vec::new();
                let mut i = w;
                while i < n_episodes {
                    let mut rng = substream_rng(master_seed, "episode", i as u64);
                    let episode = sample_episode(dataset, phase, *params, &mut rng)?;
                    out.push((i, evaluate_episode(bundle, &episode, opts)?));
                    i += workers;
                }
                Ok(out)
            }));
        }
        slots.resize_with(n_episodes, || None);
        for h in handles {
            for (i, res) in h.join().expect("evaluation worker panicked")? {
                slots[i] = Some(res);
            }
        }
        Ok(())
    })?;

    let mut accs = Vec::with_capacity(n_episodes);
    let mut costs = Vec::new();
    let mut entropies = Vec::new();
    let mut converged = 0usize;
    for slot in slots {
        let res = slot.expect("every episode evaluated");
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
    let avg = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    Ok(BenchmarkSummary {
        n_episodes,
        mean_acc,
        ci95,
        mean_plan_cost: avg(&costs),
        mean_plan_entropy: avg(&entropies),
        converged_fraction: if costs.is_empty() { None } else { Some(converged as f64 / n_episodes as f64) },
        per_episode_acc: accs,
        options: *opts,
    })
}

// ── theory ──────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct TheoryReport<'a> {
    config: &'a RunConfig,
    /// One bound study per requested sigma, at `sigma_s = sigma_q = sigma`.
    lemma: Vec<LemmaReport>,
    scaling: ScalingReport,
}

pub fn cmd_theory(cfg: &RunConfig) -> CliResult<()> {
    cfg.echo()?;
    if cfg.sigma.is_empty() {
        return Err(CliError::Validation("at least one --sigma value is required".into()));
    }
    for &s in cfg.sigma.iter().chain(&cfg.scaling_sigmas) {
        if !(s >= 0.0) || !s.is_finite() {
            return Err(CliError::Validation(format!("sigma values must be finite and >= 0, got {s}")));
        }
    }

    let mut lemma = Vec::new();
    for &s in &cfg.sigma {
        let rep = lemma1_check(cfg.lemma_d, cfg.lemma_n, s, s, cfg.lemma_trials, cfg.seed)?;
        println!(
            "bound study sigma={s}: pass fraction {:.3} over {} trials (d={}, n={})",
            rep.pass_fraction, rep.trials, rep.d, rep.n
        );
        lemma.push(rep);
    }
    let scaling = thm_err_scaling(
        cfg.scaling_d,
        cfg.scaling_n,
        &cfg.scaling_sigmas,
        cfg.scaling_trials,
        cfg.seed,
    )?;
    println!(
        "error scaling: pearson {:.4}, monotone fraction {:.3} over grid {:?}",
        scaling.pearson, scaling.monotone_fraction, scaling.sigma_grid
    );

    if cfg.theory_csv {
        write_theory_csv(&Path::new(&cfg.out).join("theory.csv"), &lemma, &scaling)?;
    }
    let report = TheoryReport { config: cfg, lemma, scaling };
    let path = Path::new(&cfg.out).join("theory.json");
    write_atomic(&path, serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
    println!("report: {}", path.display());
    Ok(())
}

/// Per-trial values in one flat table for external plotting. Bound-study
/// rows fill `w`/`w_sigma`/`bound_rhs`/`slack`/`pass`; scaling rows fill
/// `observed` (per-trial displacement) and `predicted`.
fn write_theory_csv(path: &Path, lemma: &[LemmaReport], scaling: &ScalingReport) -> CliResult<()> {
    let mut csv = String::from("study,sigma,trial,w,w_sigma,bound_rhs,slack,pass,observed,predicted\n");
    for rep in lemma {
        for (t, trial) in rep.per_trial.iter().enumerate() {
            csv.push_str(&format!(
                "lemma,{},{t},{},{},{},{},{},,\n",
                rep.sigma_s, trial.w, trial.w_sigma, trial.bound_rhs, trial.slack, trial.pass
            ));
        }
    }
    for (t, row) in scaling.per_trial_error.iter().enumerate() {
        for (k, err) in row.iter().enumerate() {
            csv.push_str(&format!(
                "scaling,{},{t},,,,,,{},{}\n",
                scaling.sigma_grid[k], err, scaling.predicted[k]
            ));
        }
    }
    write_atomic(path, csv.as_bytes())
}
