use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::corpus::{temperature_probs, SyntheticCorpus, Task, TaskBatch};
use super::noise::DaeNoiseConfig;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, BoundModel, ModelParams};
use crate::optim::{adam_step, clip_global_norm, AdamConfig, AdamState, LrSchedule};
use crate::routing::{Phase, RouterConfig, RoutingDecision};
use crate::seed;

/// Relative-position buckets of the drop histograms.
pub const DROP_BUCKETS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub router: RouterConfig,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub tasks: Vec<Task>,
    /// Sentences per task batch.
    pub batch_sentences: usize,
    pub temperature: f64,
    pub noise: DaeNoiseConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Fill `wall_ms` with measured time. Off by default so that metrics
    /// files are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl TrainConfig {
    /// Toy configuration matched to `corpus`.
    pub fn toy(corpus: &SyntheticCorpus, num_experts: usize, seed: u64) -> Self {
        let mut router = RouterConfig::new(num_experts);
        router.seed = seed;
        Self {
            arch: ArchConfig::toy(corpus.vocab_size(), num_experts),
            router,
            schedule: LrSchedule {
                base_lr: 0.03,
                warmup_steps: 100,
            },
            adam: AdamConfig::default(),
            tasks: vec![Task::Mt, Task::Dae],
            batch_sentences: 16,
            temperature: 5.0,
            noise: DaeNoiseConfig::default(),
            clip_norm: Some(1.0),
            seed,
            record_wall_time: false,
        }
    }

    pub fn validate(&self, corpus: &SyntheticCorpus) -> Result<()> {
        self.arch.validate()?;
        self.router.validate()?;
        self.noise.validate()?;
        if self.router.num_experts != self.arch.num_experts {
            return Err(Error::Config("router and arch disagree on the expert count".into()));
        }
        if self.arch.vocab < corpus.vocab_size() {
            return Err(Error::Config(format!(
                "vocab {} smaller than corpus vocabulary {}",
                self.arch.vocab,
                corpus.vocab_size()
            )));
        }
        if self.tasks.is_empty() || self.batch_sentences == 0 {
            return Err(Error::Config("need at least one task and a non-empty batch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossParts {
    pub task_loss: BTreeMap<Task, f64>,
    pub aux_loss: f64,
    pub total: f64,
    pub dropped: usize,
    pub routed: usize,
    pub drop_histogram: [u64; DROP_BUCKETS],
}

/// Adds each dropped position of `d` to a relative-position histogram.
pub fn add_drop_positions(d: &RoutingDecision, hist: &mut [u64]) {
    let t = d.tokens();
    for p in d.dropped_positions() {
        hist[p * hist.len() / t] += 1;
    }
}

/// Forward over every batch on one tape, `Σ CE + Σ aux`. With `backward`,
/// gradients are accumulated onto `model`.
pub fn multitask_loss(
    model: &mut ModelParams,
    batches: &[(TaskBatch, u64)],
    router: &RouterConfig,
    phase: Phase,
    backward: bool,
) -> Result<LossParts> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(model, &mut tape);
    let mut parts = LossParts::default();
    let mut total = None;
    for (batch, routing_seed) in batches {
        let out = bound.forward(&mut tape, &batch.src, &batch.tgt_in, router, phase, *routing_seed)?;
        let ce = tape.cross_entropy(out.logits, &batch.labels)?;
        *parts.task_loss.entry(batch.task).or_default() += tape.scalar(ce);
        parts.aux_loss += tape.scalar(out.aux_loss);
        for (_, d) in &out.decisions {
            parts.dropped += d.dropped();
            parts.routed += d.tokens();
            add_drop_positions(d, &mut parts.drop_histogram);
        }
        let l = tape.add(ce, out.aux_loss)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidArgument("no batches".into()))?;
    parts.total = tape.scalar(total);
    if backward {
        tape.backward(total)?;
        model.zero_grad();
        model.accumulate_grads(&tape, &bound)?;
    }
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub mt_loss: Option<f64>,
    pub dae_loss: Option<f64>,
    pub aux_loss: f64,
    pub dropped_frac: f64,
    pub wall_ms: u64,
    /// Source plus target tokens over all task batches of the step.
    pub tokens: usize,
    pub drop_histogram: [u64; DROP_BUCKETS],
}

pub struct Trainer {
    pub config: TrainConfig,
    pub corpus: SyntheticCorpus,
    pub model: ModelParams,
    adam: AdamState,
    lang_probs: Vec<f64>,
    step: u64,
    consumed: BTreeMap<Task, u64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, corpus: SyntheticCorpus) -> Result<Self> {
        let model = ModelParams::build(&config.arch, seed::derive(config.seed, 0))?;
        Self::with_model(config, corpus, model)
    }

    /// Continues from existing weights with fresh optimizer state.
    pub fn with_model(config: TrainConfig, corpus: SyntheticCorpus, mut model: ModelParams) -> Result<Self> {
        config.validate(&corpus)?;
        if model.arch != config.arch {
            return Err(Error::ArchMismatch("model does not match the configured arch".into()));
        }
        model.set_requires_grad(true);
        let lang_probs = temperature_probs(&corpus.config.sizes, config.temperature)?;
        Ok(Self {
            adam: AdamState::new(config.adam),
            config,
            corpus,
            model,
            lang_probs,
            step: 0,
            consumed: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Batches drawn so far per task.
    pub fn consumed(&self) -> &BTreeMap<Task, u64> {
        &self.consumed
    }

    /// The batches (with routing seeds) that step `step` trains on.
    pub fn batches_for_step(&self, step: u64) -> Result<Vec<(TaskBatch, u64)>> {
        self.config
            .tasks
            .iter()
            .map(|&task| {
                let s = seed::derive_path(self.config.seed, &[1, step, task.index()]);
                let batch = self.corpus.sample_batch(
                    task,
                    self.config.batch_sentences,
                    &self.lang_probs,
                    &self.config.noise,
                    seed::derive(s, 0),
                )?;
                Ok((batch, seed::derive(s, 1)))
            })
            .collect()
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let start = Instant::now();
        self.step += 1;
        let batches = self.batches_for_step(self.step)?;
        let tokens = batches.iter().map(|(b, _)| b.tokens()).sum();
        for (b, _) in &batches {
            *self.consumed.entry(b.task).or_default() += 1;
        }
        let parts = multitask_loss(&mut self.model, &batches, &self.config.router, Phase::Train, true)?;
        if let Some(max) = self.config.clip_norm {
            clip_global_norm(self.model.params_mut(), max)?;
        }
        let lr = self.config.schedule.lr_at(self.step)?;
        adam_step(self.model.params_mut(), &mut self.adam, lr)?;
        Ok(StepMetrics {
            step: self.step,
            lr,
            mt_loss: parts.task_loss.get(&Task::Mt).copied(),
            dae_loss: parts.task_loss.get(&Task::Dae).copied(),
            aux_loss: parts.aux_loss,
            dropped_frac: parts.dropped as f64 / parts.routed.max(1) as f64,
            wall_ms: if self.config.record_wall_time { start.elapsed().as_millis() as u64 } else { 0 },
            tokens,
            drop_histogram: parts.drop_histogram,
        })
    }

    pub fn train(&mut self, steps: u64, mut on_step: impl FnMut(&StepMetrics)) -> Result<()> {
        for _ in 0..steps {
            let m = self.step()?;
            on_step(&m);
        }
        Ok(())
    }
}

/// Writes the metrics CSV header.
pub fn write_metrics_header(mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "step,lr,mt_loss,dae_loss,aux_loss,dropped_frac,wall_ms")
}

pub fn write_metrics_row(mut w: impl Write, m: &StepMetrics) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
    writeln!(
        w,
        "{},{:.6e},{},{},{:.6},{:.6},{}",
        m.step,
        m.lr,
        opt(m.mt_loss),
        opt(m.dae_loss),
        m.aux_loss,
        m.dropped_frac,
        m.wall_ms
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multitask::corpus::CorpusConfig;

    fn setup(tasks: Vec<Task>) -> Trainer {
        let corpus = SyntheticCorpus::new(CorpusConfig::default()).unwrap();
        let mut cfg = TrainConfig::toy(&corpus, 2, 1);
        cfg.tasks = tasks;
        cfg.batch_sentences = 4;
        Trainer::new(cfg, corpus).unwrap()
    }

    #[test]
    fn loss_is_additive_over_tasks() {
        let t = setup(vec![Task::Mt, Task::Dae]);
        let batches = t.batches_for_step(1).unwrap();
        let router = &t.config.router;
        let mut m = t.model.clone();
        let both = multitask_loss(&mut m, &batches, router, Phase::Train, true).unwrap();
        let g_both: Vec<Vec<f64>> = m.tensors().iter().map(|x| x.tensor.grad().unwrap_or(&[]).to_vec()).collect();
        let mt = multitask_loss(&mut m, &batches[..1], router, Phase::Train, true).unwrap();
        let g_mt: Vec<Vec<f64>> = m.tensors().iter().map(|x| x.tensor.grad().unwrap_or(&[]).to_vec()).collect();
        let dae = multitask_loss(&mut m, &batches[1..], router, Phase::Train, true).unwrap();
        assert!((both.total - (mt.total + dae.total)).abs() < 1e-10);
        for (i, x) in m.tensors().iter().enumerate() {
            let g_dae = x.tensor.grad().unwrap_or(&[]);
            for j in 0..g_both[i].len() {
                let sum = g_mt[i].get(j).unwrap_or(&0.0) + g_dae.get(j).unwrap_or(&0.0);
                assert!((g_both[i][j] - sum).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_task_step_equals_plain_step() {
        let mut a = setup(vec![Task::Mt]);
        a.config.clip_norm = None;
        let mut b = setup(vec![Task::Mt]);
        let batches = b.batches_for_step(1).unwrap();
        multitask_loss(&mut b.model, &batches, &b.config.router.clone(), Phase::Train, true).unwrap();
        a.step().unwrap();
        // Both trainers saw the same batch; the gradients left on the models agree.
        for (x, y) in a.model.tensors().iter().zip(b.model.tensors()) {
            assert_eq!(x.tensor.grad(), y.tensor.grad());
        }
    }

    #[test]
    fn equal_batches_per_task_and_determinism() {
        let mut a = setup(vec![Task::Mt, Task::Dae]);
        let mut rows_a = Vec::new();
        a.train(3, |m| write_metrics_row(&mut rows_a, m).unwrap()).unwrap();
        assert_eq!(a.consumed()[&Task::Mt], 3);
        assert_eq!(a.consumed()[&Task::Dae], 3);
        let mut b = setup(vec![Task::Mt, Task::Dae]);
        let mut rows_b = Vec::new();
        b.train(3, |m| write_metrics_row(&mut rows_b, m).unwrap()).unwrap();
        assert_eq!(rows_a, rows_b);
    }
}
