//! The experiment drivers behind the command line. Each returns a [`Report`]
//! of CSV files plus a plain-text summary, deterministic under a fixed seed.

mod analytic;
mod toy;

pub use analytic::{
    count_params, drop_position_study, plan_memory, simulate_a2a, A2aConfig, CountParamsConfig, DropStudy,
    ParamRow, PUBLISHED_SIZES,
};
pub use toy::{
    aoe, eval_curve, prune, rts_ablation, sample_efficiency, train, AoeConfig, AoeSeed, PruneConfig, PruneRow,
    RtsRun, SampleEfficiencyConfig, TrainOutcome,
};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::multitask::{evaluate, CorpusConfig, SyntheticCorpus, Task, TaskBatch, TrainConfig};
use crate::routing::AssignmentMode;

/// Output of one experiment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    /// `(file name, contents)` pairs, written under the output directory.
    pub files: Vec<(String, String)>,
    pub summary: String,
    /// Outcome of the experiment's directional check, when it has one.
    pub passed: Option<bool>,
}

impl Report {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("summary.txt");
        std::fs::write(&path, &self.summary).map_err(|e| Error::io(&path, e))
    }

    fn line(&mut self, text: impl AsRef<str>) {
        let _ = writeln!(self.summary, "{}", text.as_ref());
    }
}

/// Shared settings of the toy training experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySetup {
    pub corpus: CorpusConfig,
    pub tasks: Vec<Task>,
    pub num_experts: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub batch_sentences: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub assignment_mode: AssignmentMode,
    pub steps: u64,
    pub seeds: Vec<u64>,
    /// Window of the moving average applied to training losses.
    pub smooth_window: usize,
    /// Steps between held-out evaluations on eval curves.
    pub eval_every: u64,
    /// Held-out sentences per language.
    pub heldout_per_language: usize,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            tasks: vec![Task::Mt],
            num_experts: 8,
            d_model: 16,
            ffn_dim: 32,
            batch_sentences: 16,
            base_lr: 0.03,
            warmup_steps: 100,
            assignment_mode: AssignmentMode::Plain,
            steps: 2000,
            seeds: vec![0, 1, 2],
            smooth_window: 100,
            eval_every: 25,
            heldout_per_language: 16,
        }
    }
}

impl ToySetup {
    pub fn from_json(text: &str) -> Result<Self> {
        let s: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.smooth_window == 0 || self.eval_every == 0 || self.heldout_per_language == 0 {
            return Err(Error::Config("smooth_window, eval_every and heldout_per_language must be positive".into()));
        }
        let corpus = self.corpus()?;
        self.train_config(&corpus, self.num_experts, 0).validate(&corpus)
    }

    pub fn corpus(&self) -> Result<SyntheticCorpus> {
        SyntheticCorpus::new(self.corpus.clone())
    }

    pub fn arch(&self, corpus: &SyntheticCorpus, num_experts: usize) -> ArchConfig {
        ArchConfig {
            d_model: self.d_model,
            ffn_dim: self.ffn_dim,
            ..ArchConfig::toy(corpus.vocab_size(), num_experts)
        }
    }

    pub fn train_config(&self, corpus: &SyntheticCorpus, num_experts: usize, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::toy(corpus, num_experts, seed);
        cfg.arch = self.arch(corpus, num_experts);
        cfg.tasks = self.tasks.clone();
        cfg.batch_sentences = self.batch_sentences;
        cfg.schedule.base_lr = self.base_lr;
        cfg.schedule.warmup_steps = self.warmup_steps;
        cfg.router.assignment_mode = self.assignment_mode;
        cfg
    }

    pub fn heldout(&self, corpus: &SyntheticCorpus) -> Result<Vec<TaskBatch>> {
        corpus.heldout_mt(self.heldout_per_language, self.batch_sentences)
    }
}

/// Held-out MT cross-entropy with eval-phase routing.
pub fn heldout_ce(model: &crate::model::ModelParams, heldout: &[TaskBatch], cfg: &TrainConfig) -> Result<f64> {
    Ok(evaluate(model, heldout, &cfg.router, false)?.mt_ce)
}

fn fmt_opt(v: Option<usize>) -> String {
    v.map_or_else(|| "never".to_string(), |s| s.to_string())
}
