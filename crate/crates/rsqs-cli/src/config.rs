//! Run configuration: one flat key set shared by every subcommand.
//!
//! Values resolve in three layers: built-in defaults, then the `--config`
//! JSON file (flat keys spelled like the flags, with `-` as `_`), then any
//! explicitly passed command-line flags. The fully resolved configuration is
//! echoed to `<out>/config.json` before a subcommand does any work, and a
//! run is reproducible from that echo plus nothing else.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use rsqs_core::data::{DatasetConfig, EpisodeParams, SplitFractions};
use rsqs_core::fewshot::{ClassifierKind, EvalOptions};
use rsqs_core::shifts::Phase;
use rsqs_core::training::{ContrastiveSource, OptimizerKind, TrainConfig};

/// Every tunable of every subcommand, flattened.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every random choice in a run derives from it.
    pub seed: u64,
    /// Worker-thread cap for episode evaluation; 0 means one per CPU.
    pub threads: usize,
    /// Output directory for all artifacts.
    pub out: String,
    /// Dataset file path; empty means `<out>/dataset.rsqs`.
    pub data: String,
    /// Checkpoint file path; empty means `<out>/checkpoint.dual`.
    pub checkpoint: String,

    // dataset generation
    pub classes: usize,
    pub per_class: usize,
    /// Image height and width (square images).
    pub size: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,

    // training
    pub lr: f64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub tau: f64,
    pub dim: usize,
    /// Generator perturbation budget; `null` derives it from the image size.
    pub eps: Option<f64>,
    pub epochs: usize,
    pub patience: usize,
    pub val_episodes: usize,
    pub val_ways: usize,
    pub val_shots: usize,
    pub val_queries: usize,
    pub val_max_shifts: usize,
    pub n_contrastive: usize,
    /// `adam` or `sgd`.
    pub optimizer: String,
    /// `meta-train` or `transductive-test`.
    pub contrastive_source: String,

    // evaluation
    pub episodes: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// One benchmark block is run per entry.
    pub max_shifts: Vec<usize>,
    pub no_ot: bool,
    pub no_repair: bool,
    pub no_tbn: bool,
    /// `proto` or `matching`.
    pub classifier: String,
    /// `test` or `val`.
    pub eval_phase: String,

    // theory
    pub lemma_d: usize,
    pub lemma_n: usize,
    pub lemma_trials: usize,
    /// Noise grid; each entry runs one bound study at `sigma_s = sigma_q`.
    pub sigma: Vec<f64>,
    pub scaling_d: usize,
    pub scaling_n: usize,
    pub scaling_trials: usize,
    pub scaling_sigmas: Vec<f64>,
    /// Also write per-trial values to `theory.csv`.
    pub theory_csv: bool,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            seed: 0,
            threads: 0,
            out: "run".into(),
            data: String::new(),
            checkpoint: String::new(),
            classes: 20,
            per_class: 20,
            size: 16,
            split_train: 0.6,
            split_val: 0.2,
            split_test: 0.2,
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
            val_ways: 5,
            val_shots: 1,
            val_queries: 8,
            val_max_shifts: 2,
            n_contrastive: 4,
            optimizer: "adam".into(),
            contrastive_source: "meta-train".into(),
            episodes: 200,
            ways: 5,
            shots: 1,
            queries: 16,
            max_shifts: vec![4],
            no_ot: false,
            no_repair: false,
            no_tbn: false,
            classifier: "proto".into(),
            eval_phase: "test".into(),
            lemma_d: 8,
            lemma_n: 128,
            lemma_trials: 50,
            sigma: vec![0.1, 0.3],
            scaling_d: 8,
            scaling_n: 128,
            scaling_trials: 20,
            scaling_sigmas: vec![0.05, 0.1, 0.2, 0.4],
            theory_csv: false,
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with the JSON config file, if one was given.
    pub fn load(config_path: Option<&Path>) -> CliResult<RunConfig> {
        match config_path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("bad config {}: {e}", p.display())))
            }
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        if self.data.is_empty() {
            Path::new(&self.out).join("dataset.rsqs")
        } else {
            PathBuf::from(&self.data)
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.is_empty() {
            Path::new(&self.out).join("checkpoint.dual")
        } else {
            PathBuf::from(&self.checkpoint)
        }
    }

    pub fn split(&self) -> CliResult<SplitFractions> {
        Ok(SplitFractions::new(self.split_train, self.split_val, self.split_test)?)
    }

    pub fn dataset_config(&self) -> CliResult<DatasetConfig> {
        Ok(DatasetConfig {
            n_classes: self.classes,
            per_class: self.per_class,
            height: self.size,
            width: self.size,
            split: self.split()?,
        })
    }

    pub fn optimizer(&self) -> CliResult<OptimizerKind> {
        match self.optimizer.as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(CliError::Validation(format!(
                "optimizer must be adam or sgd, got {other:?}"
            ))),
        }
    }

    pub fn contrastive_source(&self) -> CliResult<ContrastiveSource> {
        match self.contrastive_source.as_str() {
            "meta-train" => Ok(ContrastiveSource::MetaTrain),
            "transductive-test" => Ok(ContrastiveSource::TransductiveTest),
            other => Err(CliError::Validation(format!(
                "contrastive-source must be meta-train or transductive-test, got {other:?}"
            ))),
        }
    }

    pub fn classifier(&self) -> CliResult<ClassifierKind> {
        match self.classifier.as_str() {
            "proto" => Ok(ClassifierKind::Prototype),
            "matching" => Ok(ClassifierKind::Matching),
            other => Err(CliError::Validation(format!(
                "classifier must be proto or matching, got {other:?}"
            ))),
        }
    }

    pub fn eval_phase(&self) -> CliResult<Phase> {
        match self.eval_phase.as_str() {
            "test" => Ok(Phase::Test),
            "val" => Ok(Phase::Val),
            other => Err(CliError::Validation(format!(
                "eval-phase must be test or val, got {other:?}"
            ))),
        }
    }

    pub fn train_config(&self) -> CliResult<TrainConfig> {
        Ok(TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            beta: self.beta,
            tau: self.tau,
            dim: self.dim,
            eps: self.eps,
            epochs: self.epochs,
            patience: self.patience,
            val_episodes: self.val_episodes,
            val_params: EpisodeParams {
                n_way: self.val_ways,
                k_shot: self.val_shots,
                n_query: self.val_queries,
                max_shifts: self.val_max_shifts,
            },
            n_contrastive: self.n_contrastive,
            contrastive_source: self.contrastive_source()?,
            optimizer: self.optimizer()?,
            seed: self.seed,
        })
    }

    pub fn eval_options(&self) -> CliResult<EvalOptions> {
        Ok(EvalOptions {
            use_repair: !self.no_repair,
            use_ot: !self.no_ot,
            use_tbn: !self.no_tbn,
            classifier: self.classifier()?,
            beta: self.beta,
        })
    }

    /// Worker count for episode evaluation: the flag/key, the RSQS_THREADS
    /// environment variable, or one per available CPU, in that order.
    pub fn resolve_threads(&self) -> usize {
        if self.threads > 0 {
            return self.threads;
        }
        if let Ok(v) = std::env::var("RSQS_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n > 0 {
                    return n;
                }
            }
        }
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }

    /// Write the resolved configuration to `<out>/config.json`.
    pub fn echo(&self) -> CliResult<PathBuf> {
        let dir = Path::new(&self.out);
        fs::create_dir_all(dir)?;
        let path = dir.join("config.json");
        let body = serde_json::to_string_pretty(self).expect("config serializes");
        crate::artifacts::write_atomic(&path, body.as_bytes())?;
        Ok(path)
    }
}
