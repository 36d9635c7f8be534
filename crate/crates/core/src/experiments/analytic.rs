use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Report;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{param_count, ArchConfig};
use crate::parallel::{a2a_traffic, make_ranks, max_model_size, memory_per_gpu, simulate_expert_parallel_step, PlanConfig, GB};
use crate::routing::{assign_plain, assign_rts, capacity_for, moe_layer_forward, AssignmentMode, MoeLayerParams, Phase, RouterConfig, Slot};
use crate::seed;
use crate::stats::chi_square_uniform;
use crate::tensor::init_truncated_normal;

/// Published model sizes: `(experts, total parameters, relative tolerance)`.
/// The single-expert row stands for the dense base model.
pub const PUBLISHED_SIZES: [(usize, f64, f64); 6] = [
    (1, 0.7e9, 0.15),
    (8, 1.8e9, 0.05),
    (16, 3.0e9, 0.05),
    (32, 5.5e9, 0.05),
    (64, 10.0e9, 0.05),
    (128, 20.0e9, 0.05),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountParamsConfig {
    /// `large`, `small` or `toy`.
    pub preset: String,
    pub experts: Vec<usize>,
    pub moe_every: Option<usize>,
}

impl Default for CountParamsConfig {
    fn default() -> Self {
        Self {
            preset: "large".into(),
            experts: PUBLISHED_SIZES.iter().map(|r| r.0).collect(),
            moe_every: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamRow {
    pub experts: usize,
    pub total: u64,
    pub non_expert: u64,
    pub expert: u64,
    pub gate: u64,
    pub target: Option<f64>,
    /// Relative deviation from the target.
    pub delta: Option<f64>,
    pub within_tolerance: Option<bool>,
}

pub fn count_params(cfg: &CountParamsConfig) -> Result<(Report, Vec<ParamRow>)> {
    if cfg.experts.is_empty() {
        return Err(Error::Config("no expert counts given".into()));
    }
    let compare = cfg.preset == "large" && cfg.moe_every.is_none();
    let mut rows = Vec::new();
    for &e in &cfg.experts {
        let mut arch = ArchConfig::preset(&cfg.preset, e)?;
        if let Some(m) = cfg.moe_every {
            arch.moe_every = m;
        }
        arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        let c = param_count(&arch);
        let target = PUBLISHED_SIZES.iter().find(|r| r.0 == e).filter(|_| compare);
        let delta = target.map(|t| (c.total as f64 - t.1) / t.1);
        rows.push(ParamRow {
            experts: e,
            total: c.total,
            non_expert: c.non_expert,
            expert: c.expert,
            gate: c.gate,
            target: target.map(|t| t.1),
            delta,
            within_tolerance: target.zip(delta).map(|(t, d)| d.abs() <= t.2),
        });
    }
    let mut report = Report::default();
    let mut csv = String::from("experts,total,non_expert,expert,gate,target,delta_pct\n");
    report.line(format!(
        "{:>8} {:>16} {:>16} {:>16} {:>10} {:>8} {:>9}",
        "experts", "total", "non_expert", "expert", "gate", "target", "delta"
    ));
    for r in &rows {
        let target = r.target.map_or(String::new(), |t| format!("{:.1}B", t / 1e9));
        let delta = r.delta.map_or(String::new(), |d| format!("{:+.2}%", 100.0 * d));
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.experts,
            r.total,
            r.non_expert,
            r.expert,
            r.gate,
            r.target.map_or(String::new(), |t| format!("{t:.0}")),
            r.delta.map_or(String::new(), |d| format!("{:.4}", 100.0 * d))
        );
        report.line(format!(
            "{:>8} {:>16} {:>16} {:>16} {:>10} {:>8} {:>9}",
            r.experts, r.total, r.non_expert, r.expert, r.gate, target, delta
        ));
    }
    let checked: Vec<bool> = rows.iter().filter_map(|r| r.within_tolerance).collect();
    if !checked.is_empty() {
        let ok = checked.iter().all(|&b| b);
        report.line(format!("all published sizes within tolerance: {ok}"));
        report.passed = Some(ok);
    }
    report.files.push(("param_counts.csv".into(), csv));
    Ok((report, rows))
}

/// Memory table for `arch` under `plan`, the largest model that fits the
/// budget, and the size gain from offloading under the same plan.
pub fn plan_memory(plan: &PlanConfig, arch: &ArchConfig) -> Result<Report> {
    plan.plan.validate()?;
    arch.validate()?;
    let c = param_count(arch);
    let p_ne = (c.non_expert + c.gate) as f64;
    let per_expert = c.expert as f64 / arch.num_experts as f64;
    let m = memory_per_gpu(&plan.plan, p_ne, c.expert as f64)?;
    let budget = plan.effective_budget_bytes();
    let mut report = Report::default();
    report.line(format!(
        "plan: world {} ep {} mp {} dp {} zero {} offload {}; budget {:.1} GB per GPU",
        plan.plan.world_size,
        plan.plan.expert_parallel,
        plan.plan.model_parallel,
        plan.plan.data_parallel(),
        plan.plan.zero_stage,
        plan.plan.offload,
        budget / GB
    ));
    report.line(format!(
        "model: {} experts, {} parameters ({} non-expert incl. gates, {} expert)",
        arch.num_experts, c.total, p_ne, c.expert
    ));
    report.summary.push_str(&m.table());
    report.line(format!("optimizer + gradient share of training state: {:.2}%", 100.0 * m.optimizer_grad_share()));
    report.line(format!("fits the budget: {}", m.gpu_bytes() <= budget));
    let best = max_model_size(&plan.plan, budget, p_ne, per_expert)?;
    report.line(format!(
        "largest model under this plan: {} experts, {:.3}B parameters",
        best.num_experts,
        best.total_params / 1e9
    ));
    let mut toggled = plan.plan;
    toggled.offload = !toggled.offload;
    let other = max_model_size(&toggled, budget, p_ne, per_expert)?;
    let (with, without) = if plan.plan.offload { (best, other) } else { (other, best) };
    report.line(format!(
        "offload vs no offload, continuous model size: {:.3}B vs {:.3}B ({:.4}x)",
        with.continuous_params / 1e9,
        without.continuous_params / 1e9,
        with.continuous_params / without.continuous_params
    ));
    report.files.push(("memory.csv".into(), m.csv()));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct A2aConfig {
    pub num_experts: usize,
    pub expert_parallel: usize,
    pub tokens_per_rank: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub assignment_mode: AssignmentMode,
    pub steps: u64,
}

impl Default for A2aConfig {
    fn default() -> Self {
        Self {
            num_experts: 8,
            expert_parallel: 4,
            tokens_per_rank: 32,
            d_model: 16,
            ffn_dim: 32,
            assignment_mode: AssignmentMode::Plain,
            steps: 4,
        }
    }
}

/// Runs simulated expert-parallel MoE steps, checks them against per-rank
/// single-process execution and reports All-to-All traffic.
pub fn simulate_a2a(cfg: &A2aConfig, s: u64) -> Result<Report> {
    let ep = cfg.expert_parallel;
    let router = RouterConfig::new(cfg.num_experts).with_mode(cfg.assignment_mode);
    router.validate()?;
    let layer = MoeLayerParams::init(cfg.d_model, cfg.ffn_dim, cfg.num_experts, seed::derive(s, 0))?;
    let mut csv = String::from("step,from,to,bytes\n");
    let mut identical = true;
    let mut total = 0u64;
    let mut expected = 0u64;
    for step in 0..cfg.steps {
        let step_seed = seed::derive_path(s, &[1, step]);
        let xs = (0..ep)
            .map(|r| init_truncated_normal(&[cfg.tokens_per_rank, cfg.d_model], 0.0, 1.0, seed::derive(step_seed, 100 + r as u64)))
            .collect::<Result<Vec<_>>>()?;
        let ranks = make_ranks(cfg.num_experts, xs)?;
        let sim = simulate_expert_parallel_step(&layer, &ranks, &router, Phase::Train, step_seed)?;
        for r in &ranks {
            let mut tape = Tape::new();
            let x = tape.constant(r.tokens.clone());
            let vars = layer.register(&mut tape);
            let out = moe_layer_forward(&mut tape, x, &vars, &router, Phase::Train, seed::derive(step_seed, r.rank as u64))?;
            identical &= sim.outputs[r.rank].bit_eq(&tape.to_tensor(out.y));
        }
        let m = a2a_traffic(&sim.log, ep);
        for (from, row) in m.iter().enumerate() {
            for (to, bytes) in row.iter().enumerate() {
                if from != to {
                    let _ = writeln!(csv, "{step},{from},{to},{bytes}");
                    total += bytes;
                }
            }
        }
        let cap = sim.decisions[0].capacity as u64;
        let e = cfg.num_experts as u64;
        expected += 2 * ep as u64 * (e - e / ep as u64) * cap * cfg.d_model as u64 * 8;
    }
    let mut report = Report::default();
    report.line(format!(
        "expert parallelism: {} experts over {ep} ranks, {} tokens per rank, {} steps",
        cfg.num_experts, cfg.tokens_per_rank, cfg.steps
    ));
    report.line(format!("bit-identical to single-rank execution: {identical}"));
    report.line(format!("all-to-all bytes: {total} (closed form {expected})"));
    report.passed = Some(identical && total == expected);
    report.files.push(("a2a_traffic.csv".into(), csv));
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DropStudy {
    pub plain_histogram: Vec<u64>,
    pub rts_histogram: Vec<u64>,
    /// Fraction of plain-assignment drops in the second half of positions.
    pub plain_late_fraction: f64,
    pub rts_chi_square: f64,
    pub rts_p_value: f64,
}

/// Drop positions on oversubscribed batches: each of `tokens` tokens picks
/// expert 0 or 1 at random while `experts` share the capacity.
pub fn drop_position_study(tokens: usize, experts: usize, trials: u64, buckets: usize, s: u64) -> Result<DropStudy> {
    if tokens == 0 || experts < 2 || buckets == 0 {
        return Err(Error::InvalidArgument("need tokens > 0, at least 2 experts and 1 bucket".into()));
    }
    let cap = capacity_for(tokens, experts, 1.0);
    let mut plain = vec![0u64; buckets];
    let mut rts = vec![0u64; buckets];
    let mut late = 0u64;
    let add = |slots: &[Slot], hist: &mut [u64], late: Option<&mut u64>| {
        let mut n = 0;
        for (p, slot) in slots.iter().enumerate() {
            if slot.is_none() {
                hist[p * buckets / tokens] += 1;
                n += u64::from(2 * p >= tokens);
            }
        }
        if let Some(l) = late {
            *l += n;
        }
    };
    for trial in 0..trials {
        let mut rng = seed::rng(seed::derive_path(s, &[0, trial]));
        let choice: Vec<usize> = (0..tokens).map(|_| rng.random_range(0..2)).collect();
        add(&assign_plain(&choice, cap), &mut plain, Some(&mut late));
        add(&assign_rts(&choice, cap, seed::derive_path(s, &[1, trial])), &mut rts, None);
    }
    let plain_total: u64 = plain.iter().sum();
    let (stat, p) = chi_square_uniform(&rts);
    Ok(DropStudy {
        plain_late_fraction: late as f64 / plain_total.max(1) as f64,
        plain_histogram: plain,
        rts_histogram: rts,
        rts_chi_square: stat,
        rts_p_value: p,
    })
}
