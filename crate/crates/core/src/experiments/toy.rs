use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{fmt_opt, heldout_ce, Report, ToySetup};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::multitask::{
    evaluate, write_metrics_header, write_metrics_row, StepMetrics, SyntheticCorpus, TaskBatch, Trainer,
    DROP_BUCKETS,
};
use crate::routing::AssignmentMode;
use crate::seed;
use crate::stats::{median, moving_average};
use crate::surgery::{aoe_merge, count_utilization, prune_experts, PruneStrategy};

fn step_loss(m: &StepMetrics) -> f64 {
    m.mt_loss.or(m.dae_loss).unwrap_or(f64::NAN)
}

/// Trains `steps` steps, evaluating held-out CE at step 0 and every
/// `every` steps when `heldout` is given.
fn run(
    trainer: &mut Trainer,
    steps: u64,
    heldout: Option<(&[TaskBatch], u64)>,
) -> Result<(Vec<StepMetrics>, Vec<(u64, f64)>)> {
    let mut metrics = Vec::with_capacity(steps as usize);
    let mut curve = Vec::new();
    if let Some((h, _)) = heldout {
        curve.push((0, heldout_ce(&trainer.model, h, &trainer.config)?));
    }
    for i in 1..=steps {
        metrics.push(trainer.step()?);
        if let Some((h, every)) = heldout {
            if i % every == 0 || i == steps {
                curve.push((i, heldout_ce(&trainer.model, h, &trainer.config)?));
            }
        }
    }
    Ok((metrics, curve))
}

/// First evaluated step at which held-out CE is at or below `target`.
pub fn eval_curve(curve: &[(u64, f64)], target: f64) -> Option<usize> {
    curve.iter().find(|(_, ce)| *ce <= target).map(|(s, _)| *s as usize)
}

fn rank(v: Option<usize>) -> f64 {
    v.map_or(f64::INFINITY, |s| s as f64)
}

fn curve_rows(out: &mut String, label: &str, seed: u64, curve: &[(u64, f64)]) {
    for (step, ce) in curve {
        let _ = writeln!(out, "{label},{seed},{step},{ce:.6}");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RtsRun {
    pub mode: AssignmentMode,
    pub seed: u64,
    pub final_smoothed: f64,
    pub final_eval_ce: f64,
    pub drop_histogram: [u64; DROP_BUCKETS],
}

/// Identical toy runs that differ only in the training assignment mode.
/// The check is `RTS ≤ GROUPED ≤ PLAIN` on the median final smoothed loss.
pub fn rts_ablation(setup: &ToySetup, modes: &[AssignmentMode]) -> Result<(Report, Vec<RtsRun>)> {
    setup.validate()?;
    let corpus = setup.corpus()?;
    let heldout = setup.heldout(&corpus)?;
    let mut curves = String::from("mode,seed,step,mt_loss,smoothed,dropped_frac\n");
    let mut hist_csv = String::from("mode,seed,bucket,count\n");
    let mut runs = Vec::new();
    for &mode in modes {
        for &s in &setup.seeds {
            let mut cfg = setup.train_config(&corpus, setup.num_experts, s);
            cfg.router.assignment_mode = mode;
            let mut trainer = Trainer::new(cfg, corpus.clone())?;
            let (metrics, _) = run(&mut trainer, setup.steps, None)?;
            let losses: Vec<f64> = metrics.iter().map(step_loss).collect();
            let smooth = moving_average(&losses, setup.smooth_window);
            let mut hist = [0u64; DROP_BUCKETS];
            for (m, sm) in metrics.iter().zip(&smooth) {
                let _ = writeln!(curves, "{mode},{s},{},{:.6},{sm:.6},{:.6}", m.step, step_loss(m), m.dropped_frac);
                for (h, c) in hist.iter_mut().zip(m.drop_histogram) {
                    *h += c;
                }
            }
            for (b, c) in hist.iter().enumerate() {
                let _ = writeln!(hist_csv, "{mode},{s},{b},{c}");
            }
            runs.push(RtsRun {
                mode,
                seed: s,
                final_smoothed: smooth.last().copied().unwrap_or(f64::NAN),
                final_eval_ce: heldout_ce(&trainer.model, &heldout, &trainer.config)?,
                drop_histogram: hist,
            });
        }
    }
    let med = |mode: AssignmentMode| -> Option<f64> {
        let v: Vec<f64> = runs.iter().filter(|r| r.mode == mode).map(|r| r.final_smoothed).collect();
        (!v.is_empty()).then(|| median(&v))
    };
    let mut report = Report::default();
    report.line(format!("assignment-mode ablation: {} steps, seeds {:?}", setup.steps, setup.seeds));
    for &mode in modes {
        report.line(format!("{mode:>12}  median final smoothed loss {:.4}", med(mode).unwrap_or(f64::NAN)));
    }
    let grouped = modes.iter().copied().find(|m| matches!(m, AssignmentMode::Grouped { .. }));
    if let (Some(p), Some(g), Some(r)) = (med(AssignmentMode::Plain), grouped.and_then(med), med(AssignmentMode::Rts)) {
        let ok = r <= g && g <= p;
        report.line(format!("ordering rts <= grouped <= plain: {}", if ok { "holds" } else { "violated" }));
        report.passed = Some(ok);
    }
    report.files.push(("rts_curves.csv".into(), curves));
    report.files.push(("rts_drop_positions.csv".into(), hist_csv));
    Ok((report, runs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AoeConfig {
    /// Experts per donor checkpoint.
    pub donor_experts: usize,
    /// Donor training steps. Donor `a` is the final checkpoint, donor `b`
    /// the snapshot taken at three quarters of the run.
    pub donor_steps: u64,
    /// Steps of continued training for the merged and random-init models.
    pub continue_steps: u64,
}

impl Default for AoeConfig {
    fn default() -> Self {
        Self {
            donor_experts: 4,
            donor_steps: 1000,
            continue_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AoeSeed {
    pub seed: u64,
    /// Held-out CE of donor `a`, the level both runs must reach.
    pub target: f64,
    pub merged_experts: usize,
    pub merged_steps: Option<usize>,
    pub random_steps: Option<usize>,
}

fn train_donors(setup: &ToySetup, corpus: &SyntheticCorpus, experts: usize, steps: u64, s: u64) -> Result<(ModelParams, ModelParams)> {
    let mut trainer = Trainer::new(setup.train_config(corpus, experts, s), corpus.clone())?;
    let early = steps * 3 / 4;
    run(&mut trainer, early, None)?;
    let b = trainer.model.clone();
    run(&mut trainer, steps - early, None)?;
    Ok((trainer.model, b))
}

/// Merges two donor checkpoints into a 2E model and races it against a
/// random-init 2E model to the donor's held-out CE. When `donors` is
/// `None`, each seed trains its own pair.
pub fn aoe(setup: &ToySetup, cfg: &AoeConfig, donors: Option<(&ModelParams, &ModelParams)>) -> Result<(Report, Vec<AoeSeed>)> {
    setup.validate()?;
    let corpus = setup.corpus()?;
    let heldout = setup.heldout(&corpus)?;
    let mut curves = String::from("init,seed,step,heldout_ce\n");
    let mut rows = Vec::new();
    for &s in &setup.seeds {
        let (a, b) = match donors {
            Some((a, b)) => (a.clone(), b.clone()),
            None => train_donors(setup, &corpus, cfg.donor_experts, cfg.donor_steps, s)?,
        };
        let donor_cfg = setup.train_config(&corpus, a.arch.num_experts, s);
        let target = heldout_ce(&a, &heldout, &donor_cfg)?;
        let merged = aoe_merge(&a, &b)?;
        let e = merged.arch.num_experts;
        let cont = setup.train_config(&corpus, e, seed::derive(s, 0xA0E));
        if merged.arch != cont.arch {
            return Err(Error::ArchMismatch("donor checkpoints do not match the toy setup".into()));
        }
        let mut merged_run = Trainer::with_model(cont.clone(), corpus.clone(), merged)?;
        let (_, merged_curve) = run(&mut merged_run, cfg.continue_steps, Some((&heldout, setup.eval_every)))?;
        let mut random_run = Trainer::new(cont, corpus.clone())?;
        let (_, random_curve) = run(&mut random_run, cfg.continue_steps, Some((&heldout, setup.eval_every)))?;
        curve_rows(&mut curves, "merged", s, &merged_curve);
        curve_rows(&mut curves, "random", s, &random_curve);
        rows.push(AoeSeed {
            seed: s,
            target,
            merged_experts: e,
            merged_steps: eval_curve(&merged_curve, target),
            random_steps: eval_curve(&random_curve, target),
        });
    }
    let mut report = Report::default();
    let mut table = String::from("seed,target_ce,merged_experts,merged_steps,random_steps\n");
    report.line(format!("aggregation of experts: continue {} steps, seeds {:?}", cfg.continue_steps, setup.seeds));
    for r in &rows {
        let _ = writeln!(
            table,
            "{},{:.6},{},{},{}",
            r.seed,
            r.target,
            r.merged_experts,
            fmt_opt(r.merged_steps),
            fmt_opt(r.random_steps)
        );
        report.line(format!(
            "seed {}: target {:.4}, merged reaches it at {}, random init at {}",
            r.seed,
            r.target,
            fmt_opt(r.merged_steps),
            fmt_opt(r.random_steps)
        ));
    }
    let m = median(&rows.iter().map(|r| rank(r.merged_steps)).collect::<Vec<_>>());
    let r = median(&rows.iter().map(|r| rank(r.random_steps)).collect::<Vec<_>>());
    let ok = m < r;
    report.line(format!("median steps: merged {m}, random {r}; merged faster: {ok}"));
    report.passed = Some(ok);
    report.files.push(("aoe_curves.csv".into(), curves));
    report.files.push(("aoe_summary.csv".into(), table));
    Ok((report, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub source_experts: usize,
    pub source_steps: u64,
    pub k: usize,
    pub finetune_steps: u64,
    pub scratch_steps: u64,
    /// Random selections compared against top utilization.
    pub selection_seeds: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            source_experts: 8,
            source_steps: 1000,
            k: 4,
            finetune_steps: 100,
            scratch_steps: 1000,
            selection_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneRow {
    /// `top`, `random` or `scratch`.
    pub kind: &'static str,
    pub seed: u64,
    pub steps: u64,
    pub heldout_ce: f64,
}

/// Prunes trained sources to `k` experts by utilization and at random,
/// fine-tunes, and compares with an equal-size model trained from scratch.
pub fn prune(setup: &ToySetup, cfg: &PruneConfig, source: Option<&ModelParams>) -> Result<(Report, Vec<PruneRow>)> {
    setup.validate()?;
    let corpus = setup.corpus()?;
    let heldout = setup.heldout(&corpus)?;
    let validation: Vec<_> = corpus
        .validation_mt(setup.heldout_per_language, setup.batch_sentences)?
        .into_iter()
        .map(|b| (b.src, b.tgt_in))
        .collect();
    let sources = match source {
        Some(m) => vec![m.clone()],
        None => setup
            .seeds
            .iter()
            .map(|&s| {
                let mut t = Trainer::new(setup.train_config(&corpus, cfg.source_experts, s), corpus.clone())?;
                run(&mut t, cfg.source_steps, None)?;
                Ok(t.model)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let e = sources[0].arch.num_experts;
    let source_cfg = setup.train_config(&corpus, e, 0);

    let mut report = Report::default();
    let identity = prune_experts(&sources[0], e, &PruneStrategy::Random { seed: 0 })?;
    let identity_exact = identity.tensors().iter().zip(sources[0].tensors()).all(|(x, y)| x.name == y.name && x.tensor.bit_eq(&y.tensor))
        && heldout_ce(&identity, &heldout, &source_cfg)?.to_bits() == heldout_ce(&sources[0], &heldout, &source_cfg)?.to_bits();

    let mut rows = Vec::new();
    let mut util_csv = String::from("source,layer,expert,count\n");
    let counts = sources
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let c = count_utilization(m, &validation, &source_cfg.router)?;
            for (layer, cs) in c.layers.iter().zip(&c.counts) {
                for (x, n) in cs.iter().enumerate() {
                    let _ = writeln!(util_csv, "{i},{layer},{x},{n}");
                }
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let finetune = |pruned: ModelParams, j: u64| -> Result<f64> {
        let cfg_ft = setup.train_config(&corpus, cfg.k, seed::derive(j, 0xF17E));
        let mut t = Trainer::with_model(cfg_ft, corpus.clone(), pruned)?;
        run(&mut t, cfg.finetune_steps, None)?;
        heldout_ce(&t.model, &heldout, &t.config)
    };
    for j in 0..cfg.selection_seeds as u64 {
        let i = j as usize % sources.len();
        let top = prune_experts(&sources[i], cfg.k, &PruneStrategy::TopUtilization(&counts[i]))?;
        rows.push(PruneRow {
            kind: "top",
            seed: j,
            steps: cfg.finetune_steps,
            heldout_ce: finetune(top, j)?,
        });
        let random = prune_experts(&sources[i], cfg.k, &PruneStrategy::Random { seed: j })?;
        rows.push(PruneRow {
            kind: "random",
            seed: j,
            steps: cfg.finetune_steps,
            heldout_ce: finetune(random, j)?,
        });
    }
    for &s in &setup.seeds {
        let mut t = Trainer::new(setup.train_config(&corpus, cfg.k, s), corpus.clone())?;
        run(&mut t, cfg.scratch_steps, None)?;
        rows.push(PruneRow {
            kind: "scratch",
            seed: s,
            steps: cfg.scratch_steps,
            heldout_ce: heldout_ce(&t.model, &heldout, &t.config)?,
        });
    }

    let ces = |kind: &str, n: usize| -> Vec<f64> { rows.iter().filter(|r| r.kind == kind).take(n).map(|r| r.heldout_ce).collect() };
    let n = setup.seeds.len();
    let top_vs_scratch = median(&ces("top", n)) < median(&ces("scratch", n));
    let top_vs_random = median(&ces("top", usize::MAX)) <= median(&ces("random", usize::MAX));
    report.line(format!("expert pruning {e} -> {} experts, fine-tune {} steps", cfg.k, cfg.finetune_steps));
    report.line(format!(
        "median held-out CE: top {:.4} (first {n}), scratch+{} {:.4}; pruned better: {top_vs_scratch}",
        median(&ces("top", n)),
        cfg.scratch_steps,
        median(&ces("scratch", n))
    ));
    report.line(format!(
        "median held-out CE over {} selections: top {:.4}, random {:.4}; top <= random: {top_vs_random}",
        cfg.selection_seeds,
        median(&ces("top", usize::MAX)),
        median(&ces("random", usize::MAX))
    ));
    report.line(format!("k = E pruning is an exact identity: {identity_exact}"));
    report.passed = Some(top_vs_scratch && top_vs_random && identity_exact);
    let mut csv = String::from("kind,seed,steps,heldout_ce\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{:.6}", r.kind, r.seed, r.steps, r.heldout_ce);
    }
    report.files.push(("prune.csv".into(), csv));
    report.files.push(("utilization.csv".into(), util_csv));
    Ok((report, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleEfficiencyConfig {
    pub experts: Vec<usize>,
}

impl Default for SampleEfficiencyConfig {
    fn default() -> Self {
        Self { experts: vec![1, 2, 4, 8] }
    }
}

/// Trains one toy model per expert count on identical data and reports the
/// steps each needs to reach the smallest model's final held-out CE.
pub fn sample_efficiency(setup: &ToySetup, cfg: &SampleEfficiencyConfig) -> Result<(Report, Vec<(usize, u64, Option<usize>)>)> {
    setup.validate()?;
    if cfg.experts.is_empty() {
        return Err(Error::Config("no expert counts given".into()));
    }
    let corpus = setup.corpus()?;
    let heldout = setup.heldout(&corpus)?;
    let base = *cfg.experts.iter().min().unwrap_or(&1);
    let mut curves = String::from("experts,seed,step,heldout_ce\n");
    let mut rows = Vec::new();
    let mut tokens_match = true;
    for &s in &setup.seeds {
        let mut results = Vec::new();
        for &e in &cfg.experts {
            let mut t = Trainer::new(setup.train_config(&corpus, e, s), corpus.clone())?;
            let (metrics, curve) = run(&mut t, setup.steps, Some((&heldout, setup.eval_every)))?;
            curve_rows(&mut curves, &e.to_string(), s, &curve);
            results.push((e, metrics.iter().map(|m| m.tokens).collect::<Vec<_>>(), curve));
        }
        tokens_match &= results.windows(2).all(|w| w[0].1 == w[1].1);
        let threshold = results.iter().find(|r| r.0 == base).and_then(|r| r.2.last()).map_or(f64::NAN, |p| p.1);
        for (e, _, curve) in &results {
            rows.push((*e, s, eval_curve(curve, threshold)));
        }
    }
    let mut report = Report::default();
    report.line(format!(
        "sample efficiency: {} steps, threshold = final held-out CE of the E={base} model",
        setup.steps
    ));
    let mut table = String::from("experts,seed,steps_to_threshold\n");
    for (e, s, st) in &rows {
        let _ = writeln!(table, "{e},{s},{}", fmt_opt(*st));
    }
    let med = |e: usize| median(&rows.iter().filter(|r| r.0 == e).map(|r| rank(r.2)).collect::<Vec<_>>());
    for &e in &cfg.experts {
        report.line(format!("E={e:<3} median steps to threshold {}", med(e)));
    }
    report.line(format!("identical tokens per step across expert counts: {tokens_match}"));
    let largest = *cfg.experts.iter().max().unwrap_or(&base);
    let ok = med(largest) < setup.steps as f64 && tokens_match;
    report.line(format!("E={largest} reaches the E={base} final loss before step {}: {ok}", setup.steps));
    report.passed = Some(ok);
    report.files.push(("sample_efficiency_curves.csv".into(), curves));
    report.files.push(("sample_efficiency.csv".into(), table));
    Ok((report, rows))
}

pub struct TrainOutcome {
    pub report: Report,
    pub model: ModelParams,
}

/// Plain multitask training with the metrics CSV and a final evaluation.
pub fn train(setup: &ToySetup, s: u64) -> Result<TrainOutcome> {
    setup.validate()?;
    let corpus = setup.corpus()?;
    let heldout = setup.heldout(&corpus)?;
    let mut trainer = Trainer::new(setup.train_config(&corpus, setup.num_experts, s), corpus)?;
    let mut csv = Vec::new();
    write_metrics_header(&mut csv).map_err(|e| Error::io("metrics.csv", e))?;
    let mut io_err = None;
    trainer.train(setup.steps, |m| {
        if let Err(e) = write_metrics_row(&mut csv, m) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(Error::io("metrics.csv", e));
    }
    let ev = evaluate(&trainer.model, &heldout, &trainer.config.router, true)?;
    let mut report = Report::default();
    report.line(format!(
        "trained {} steps on {:?}, {} experts, seed {s}",
        setup.steps, setup.tasks, setup.num_experts
    ));
    report.line(format!("held-out MT cross-entropy {:.4}", ev.mt_ce));
    report.line(format!(
        "exact match {:.4}, BLEU {:.4}",
        ev.exact_match.unwrap_or(0.0),
        ev.bleu.unwrap_or(0.0)
    ));
    report.line(format!("eval-phase dropped tokens {} by position bucket {:?}", ev.dropped, ev.drop_histogram));
    report.files.push(("metrics.csv".into(), String::from_utf8_lossy(&csv).into_owned()));
    let mut hist = String::from("bucket,count\n");
    for (b, c) in ev.drop_histogram.iter().enumerate() {
        let _ = writeln!(hist, "{b},{c}");
    }
    report.files.push(("eval_drop_positions.csv".into(), hist));
    Ok(TrainOutcome {
        report,
        model: trainer.model,
    })
}
