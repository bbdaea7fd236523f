//! `rsqs` — few-shot learning under support-query shift, from the shell.
//!
//! Four subcommands cover the full workflow: `gen-data` writes a procedural
//! dataset, `train` runs the alternating adversarial loop, `eval` scores a
//! checkpoint over perturbed episodes, and `theory` verifies the
//! perturbation-error bounds by simulation.
//!
//! Every flag mirrors a flat key in the JSON config file; values resolve as
//! defaults < config file < flags, and each run echoes its resolved
//! configuration to `<out>/config.json` before doing any work. Exit codes:
//! 0 success, 2 configuration/validation failure, 3 numeric breakdown.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use rsqs_cli::commands::{cmd_eval, cmd_gen_data, cmd_theory, cmd_train};
use rsqs_cli::{CliResult, RunConfig};

#[derive(Parser)]
#[command(
    name = "rsqs",
    version,
    about = "Few-shot learning under realistic support-query shift",
    after_help = "Flags set configuration keys shared by all subcommands; each \
subcommand reads the keys it needs and echoes the full resolved configuration \
to <out>/config.json."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural dataset and write it as a binary file.
    GenData(Overrides),
    /// Train the four-network bundle on a dataset file.
    Train(Overrides),
    /// Evaluate a checkpoint over perturbed few-shot episodes.
    Eval(Overrides),
    /// Verify the perturbation-error bounds by Monte-Carlo simulation.
    Theory(Overrides),
}

/// Every configuration key as an optional flag. Unset flags leave the value
/// from the config file (or the built-in default) untouched.
#[derive(Args)]
struct Overrides {
    /// JSON config file with flat keys mirroring these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long)]
    out: Option<String>,
    /// Master seed; all randomness derives from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker-thread cap (0 = one per CPU); RSQS_THREADS is the fallback.
    #[arg(long)]
    threads: Option<usize>,
    /// Dataset file path (default <out>/dataset.rsqs).
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint file path (default <out>/checkpoint.dual).
    #[arg(long)]
    checkpoint: Option<String>,

    /// Number of dataset classes.
    #[arg(long)]
    classes: Option<usize>,
    /// Images per class.
    #[arg(long)]
    per_class: Option<usize>,
    /// Image height and width.
    #[arg(long)]
    size: Option<usize>,
    /// Fraction of classes for meta-training.
    #[arg(long)]
    split_train: Option<f64>,
    /// Fraction of classes for validation.
    #[arg(long)]
    split_val: Option<f64>,
    /// Fraction of classes for meta-testing.
    #[arg(long)]
    split_test: Option<f64>,

    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Training batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Weight of the adversarial classification term.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the contrastive term.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Transport cost/entropy trade-off in (0, 1].
    #[arg(long)]
    beta: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Embedding dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Generator perturbation budget (default derived from image size).
    #[arg(long)]
    eps: Option<f64>,
    /// Maximum training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    patience: Option<usize>,
    /// Validation episodes per epoch.
    #[arg(long)]
    val_episodes: Option<usize>,
    /// Validation episode ways.
    #[arg(long)]
    val_ways: Option<usize>,
    /// Validation episode shots.
    #[arg(long)]
    val_shots: Option<usize>,
    /// Validation episode queries per class.
    #[arg(long)]
    val_queries: Option<usize>,
    /// Validation episode shift-pool cap.
    #[arg(long)]
    val_max_shifts: Option<usize>,
    /// Images per step feeding the contrastive term.
    #[arg(long)]
    n_contrastive: Option<usize>,
    /// Optimizer: adam or sgd.
    #[arg(long)]
    optimizer: Option<String>,
    /// Contrastive image source: meta-train or transductive-test.
    #[arg(long)]
    contrastive_source: Option<String>,

    /// Benchmark episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Benchmark episode ways.
    #[arg(long)]
    ways: Option<usize>,
    /// Benchmark episode shots.
    #[arg(long)]
    shots: Option<usize>,
    /// Benchmark queries per class.
    #[arg(long)]
    queries: Option<usize>,
    /// Shift-pool cap; repeat (or comma-separate) for one block per value.
    #[arg(long, action = ArgAction::Append, value_delimiter = ',')]
    max_shifts: Vec<usize>,
    /// Disable transport alignment.
    #[arg(long, action = ArgAction::SetTrue)]
    no_ot: bool,
    /// Disable the repairer.
    #[arg(long, action = ArgAction::SetTrue)]
    no_repair: bool,
    /// Disable transductive normalization.
    #[arg(long, action = ArgAction::SetTrue)]
    no_tbn: bool,
    /// Episode classifier: proto or matching.
    #[arg(long)]
    classifier: Option<String>,
    /// Phase evaluated by the benchmark: test or val.
    #[arg(long)]
    eval_phase: Option<String>,

    /// Bound-study dimension.
    #[arg(long)]
    lemma_d: Option<usize>,
    /// Bound-study points per cloud.
    #[arg(long)]
    lemma_n: Option<usize>,
    /// Bound-study trials per sigma.
    #[arg(long)]
    lemma_trials: Option<usize>,
    /// Bound-study noise level; repeat (or comma-separate) for a grid.
    #[arg(long, action = ArgAction::Append, value_delimiter = ',')]
    sigma: Vec<f64>,
    /// Error-scaling dimension.
    #[arg(long)]
    scaling_d: Option<usize>,
    /// Error-scaling points per cloud.
    #[arg(long)]
    scaling_n: Option<usize>,
    /// Error-scaling trials.
    #[arg(long)]
    scaling_trials: Option<usize>,
    /// Error-scaling sigma grid; repeat (or comma-separate) to replace.
    #[arg(long, action = ArgAction::Append, value_delimiter = ',')]
    scaling_sigmas: Vec<f64>,
    /// Also write per-trial values to <out>/theory.csv.
    #[arg(long, action = ArgAction::SetTrue)]
    theory_csv: bool,
}

impl Overrides {
    /// Defaults, overlaid by the config file, overlaid by explicit flags.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        set!(
            out, seed, threads, data, checkpoint, classes, per_class, size, split_train,
            split_val, split_test, lr, batch_size, lambda1, lambda2, beta, tau, dim, epochs,
            patience, val_episodes, val_ways, val_shots, val_queries, val_max_shifts,
            n_contrastive, optimizer, contrastive_source, episodes, ways, shots, queries,
            classifier, eval_phase, lemma_d, lemma_n, lemma_trials, scaling_d, scaling_n,
            scaling_trials
        );
        if let Some(v) = self.eps {
            cfg.eps = Some(v);
        }
        if !self.max_shifts.is_empty() {
            cfg.max_shifts = self.max_shifts.clone();
        }
        if !self.sigma.is_empty() {
            cfg.sigma = self.sigma.clone();
        }
        if !self.scaling_sigmas.is_empty() {
            cfg.scaling_sigmas = self.scaling_sigmas.clone();
        }
        if self.no_ot {
            cfg.no_ot = true;
        }
        if self.no_repair {
            cfg.no_repair = true;
        }
        if self.no_tbn {
            cfg.no_tbn = true;
        }
        if self.theory_csv {
            cfg.theory_csv = true;
        }
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    match &cli.cmd {
        Cmd::GenData(o) => cmd_gen_data(&o.resolve()?),
        Cmd::Train(o) => cmd_train(&o.resolve()?),
        Cmd::Eval(o) => cmd_eval(&o.resolve()?),
        Cmd::Theory(o) => cmd_theory(&o.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
