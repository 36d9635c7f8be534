//! Parallelism plans, the per-GPU memory model, and an in-process simulation
//! of expert parallelism.
//!
//! Training state is costed with mixed-precision constants per parameter:
//! 2 bytes of half-precision weights, 2 bytes of gradients and 12 bytes of
//! optimizer state (fp32 master weights and both Adam moments). Optimizer and
//! gradients are therefore 14 / 16 = 87.5% of the state. With ZeRO stage 2
//! gradients and optimizer state are partitioned over data-parallel replicas;
//! offload moves them to host memory, leaving 2 bytes per parameter on the GPU.

mod sim;

pub use sim::{a2a_traffic, make_ranks, simulate_expert_parallel_step, A2aDirection, A2aMessage, SimOutput, VirtualRank};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PARAM_BYTES: f64 = 2.0;
pub const GRAD_BYTES: f64 = 2.0;
pub const OPTIMIZER_BYTES: f64 = 12.0;
pub const GB: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPlan {
    pub world_size: usize,
    pub expert_parallel: usize,
    pub model_parallel: usize,
    pub zero_stage: u8,
    pub offload: bool,
}

impl ParallelPlan {
    pub fn single_gpu() -> Self {
        Self {
            world_size: 1,
            expert_parallel: 1,
            model_parallel: 1,
            zero_stage: 0,
            offload: false,
        }
    }

    pub fn data_parallel(&self) -> usize {
        self.world_size / self.model_parallel.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPlan(m));
        let (n, ep, mp) = (self.world_size, self.expert_parallel, self.model_parallel);
        if n == 0 || ep == 0 || mp == 0 {
            return bad("all parallel degrees must be at least 1".into());
        }
        if n % mp != 0 {
            return bad(format!("model_parallel {mp} does not divide world_size {n}"));
        }
        if mp * ep > n {
            return bad(format!("mp·ep = {} exceeds world_size {n}", mp * ep));
        }
        if self.data_parallel() % ep != 0 {
            return bad(format!("expert_parallel {ep} does not divide data_parallel {}", self.data_parallel()));
        }
        if !matches!(self.zero_stage, 0 | 2) {
            return bad(format!("zero_stage {} unsupported (0 or 2)", self.zero_stage));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Device {
    Gpu,
    Cpu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub bytes: f64,
    pub device: Device,
}

/// Per-device bytes of the training state under a plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub nonexpert_params: Component,
    pub expert_params: Component,
    pub gradients: Component,
    pub optimizer_states: Component,
}

impl MemoryEstimate {
    pub fn components(&self) -> [(&'static str, Component); 4] {
        [
            ("nonexpert_params", self.nonexpert_params),
            ("expert_params", self.expert_params),
            ("gradients", self.gradients),
            ("optimizer_states", self.optimizer_states),
        ]
    }

    pub fn on(&self, device: Device) -> f64 {
        self.components().iter().filter(|(_, c)| c.device == device).fold(0.0, |acc, (_, c)| acc + c.bytes)
    }

    pub fn gpu_bytes(&self) -> f64 {
        self.on(Device::Gpu)
    }

    pub fn cpu_bytes(&self) -> f64 {
        self.on(Device::Cpu)
    }

    pub fn total_bytes(&self) -> f64 {
        self.components().iter().map(|(_, c)| c.bytes).sum()
    }

    /// Fraction of the training state held by gradients and optimizer state.
    pub fn optimizer_grad_share(&self) -> f64 {
        (self.gradients.bytes + self.optimizer_states.bytes) / self.total_bytes()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<18} {:>6} {:>16} {:>10}", "category", "device", "bytes", "GB");
        for (name, c) in self.components() {
            let dev = if c.device == Device::Gpu { "GPU" } else { "CPU" };
            let _ = writeln!(s, "{name:<18} {dev:>6} {:>16.0} {:>10.3}", c.bytes, c.bytes / GB);
        }
        let _ = writeln!(s, "{:<18} {:>6} {:>16.0} {:>10.3}", "total", "GPU", self.gpu_bytes(), self.gpu_bytes() / GB);
        let _ = writeln!(s, "{:<18} {:>6} {:>16.0} {:>10.3}", "total", "CPU", self.cpu_bytes(), self.cpu_bytes() / GB);
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("category,device,bytes\n");
        for (name, c) in self.components() {
            let dev = if c.device == Device::Gpu { "GPU" } else { "CPU" };
            let _ = writeln!(s, "{name},{dev},{:.0}", c.bytes);
        }
        s
    }
}

/// Per-GPU training-state bytes for `p_ne` non-expert and `p_e` expert
/// parameters (whole model, before any partitioning).
pub fn memory_per_gpu(plan: &ParallelPlan, p_ne: f64, p_e: f64) -> Result<MemoryEstimate> {
    plan.validate()?;
    if !(p_ne >= 0.0 && p_e >= 0.0) {
        return Err(Error::InvalidArgument("parameter counts must be non-negative".into()));
    }
    let mp = plan.model_parallel as f64;
    let ep = plan.expert_parallel as f64;
    let dp = plan.data_parallel() as f64;
    let ne_local = p_ne / mp;
    let e_local = p_e / (ep * mp);
    // Replicas sharing a parameter: dp for non-expert, dp/ep for expert shards.
    let (ne_shards, e_shards) = if plan.zero_stage == 2 { (dp, dp / ep) } else { (1.0, 1.0) };
    let state = |bytes: f64| bytes * (ne_local / ne_shards + e_local / e_shards);
    let device = if plan.offload { Device::Cpu } else { Device::Gpu };
    Ok(MemoryEstimate {
        nonexpert_params: Component {
            bytes: PARAM_BYTES * ne_local,
            device: Device::Gpu,
        },
        expert_params: Component {
            bytes: PARAM_BYTES * e_local,
            device: Device::Gpu,
        },
        gradients: Component {
            bytes: state(GRAD_BYTES),
            device,
        },
        optimizer_states: Component {
            bytes: state(OPTIMIZER_BYTES),
            device,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaxModel {
    /// Largest expert count (a multiple of `ep`) whose state fits the budget.
    pub num_experts: u64,
    pub total_params: f64,
    /// Largest total parameter count if expert parameters were continuous.
    pub continuous_params: f64,
}

/// Largest MoE model that fits `gpu_budget_bytes` per GPU under `plan`.
pub fn max_model_size(plan: &ParallelPlan, gpu_budget_bytes: f64, p_ne: f64, per_expert: f64) -> Result<MaxModel> {
    let gpu = |experts: f64| memory_per_gpu(plan, p_ne, experts * per_expert).map(|m| m.gpu_bytes());
    let base = gpu(0.0)?;
    if base > gpu_budget_bytes {
        return Err(Error::BudgetExceeded {
            needed: base,
            budget: gpu_budget_bytes,
        });
    }
    if !(per_expert > 0.0) {
        return Err(Error::InvalidArgument("per-expert parameter count must be positive".into()));
    }
    // GPU bytes are affine in the expert parameter count.
    let per_expert_bytes = gpu(1.0)? - base;
    let continuous_experts = (gpu_budget_bytes - base) / per_expert_bytes;
    let step = plan.expert_parallel as u64;
    let fits = |units: u64| gpu((units * step) as f64).map(|b| b <= gpu_budget_bytes);
    let mut hi = ((continuous_experts / step as f64).floor() as u64).saturating_add(1);
    while fits(hi)? {
        hi *= 2;
    }
    let mut lo = 0;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let num_experts = lo * step;
    Ok(MaxModel {
        num_experts,
        total_params: p_ne + num_experts as f64 * per_expert,
        continuous_params: p_ne + continuous_experts * per_expert,
    })
}

/// Smallest world size (with `ep = N`, same stage and offload) that holds a
/// model of `experts` experts in the budget. Searches powers of two up to 2^20.
pub fn min_world_size(
    zero_stage: u8,
    offload: bool,
    gpu_budget_bytes: f64,
    p_ne: f64,
    per_expert: f64,
    experts: u64,
) -> Result<Option<usize>> {
    for k in 0..=20 {
        let n = 1usize << k;
        if experts % n as u64 != 0 {
            break;
        }
        let plan = ParallelPlan {
            world_size: n,
            expert_parallel: n,
            model_parallel: 1,
            zero_stage,
            offload,
        };
        if memory_per_gpu(&plan, p_ne, experts as f64 * per_expert)?.gpu_bytes() <= gpu_budget_bytes {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

/// Planner input: a plan plus budget settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub plan: ParallelPlan,
    pub gpu_budget_gb: f64,
    /// Fixed per-GPU reserve for activations, subtracted from the budget.
    pub activation_reserve_gb: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            plan: ParallelPlan::single_gpu(),
            gpu_budget_gb: 40.0,
            activation_reserve_gb: 0.0,
        }
    }
}

impl PlanConfig {
    pub fn effective_budget_bytes(&self) -> f64 {
        (self.gpu_budget_gb - self.activation_reserve_gb) * GB
    }

    /// JSON object, or `key = value` lines with `#` comments.
    pub fn parse(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            #[derive(Deserialize)]
            #[serde(deny_unknown_fields)]
            struct Flat {
                world_size: Option<usize>,
                expert_parallel: Option<usize>,
                model_parallel: Option<usize>,
                zero_stage: Option<u8>,
                offload: Option<bool>,
                gpu_budget_gb: Option<f64>,
                activation_reserve_gb: Option<f64>,
            }
            let f: Flat = serde_json::from_str(trimmed).map_err(|e| Error::Config(e.to_string()))?;
            let mut c = Self::default();
            c.plan.world_size = f.world_size.unwrap_or(c.plan.world_size);
            c.plan.expert_parallel = f.expert_parallel.unwrap_or(c.plan.expert_parallel);
            c.plan.model_parallel = f.model_parallel.unwrap_or(c.plan.model_parallel);
            c.plan.zero_stage = f.zero_stage.unwrap_or(c.plan.zero_stage);
            c.plan.offload = f.offload.unwrap_or(c.plan.offload);
            c.gpu_budget_gb = f.gpu_budget_gb.unwrap_or(c.gpu_budget_gb);
            c.activation_reserve_gb = f.activation_reserve_gb.unwrap_or(c.activation_reserve_gb);
            return Ok(c);
        }
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for {k}"))
        }
        match key {
            "world_size" => self.plan.world_size = num(key, value)?,
            "expert_parallel" => self.plan.expert_parallel = num(key, value)?,
            "model_parallel" => self.plan.model_parallel = num(key, value)?,
            "zero_stage" => self.plan.zero_stage = num(key, value)?,
            "offload" => self.plan.offload = num(key, value)?,
            "gpu_budget_gb" => self.gpu_budget_gb = num(key, value)?,
            "activation_reserve_gb" => self.activation_reserve_gb = num(key, value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(n: usize, ep: usize, mp: usize, zero: u8, offload: bool) -> ParallelPlan {
        ParallelPlan {
            world_size: n,
            expert_parallel: ep,
            model_parallel: mp,
            zero_stage: zero,
            offload,
        }
    }

    #[test]
    fn single_gpu_is_sixteen_bytes_per_param() {
        let m = memory_per_gpu(&ParallelPlan::single_gpu(), 4e8, 6e8).unwrap();
        assert_eq!(m.gpu_bytes(), 16e9);
        assert_eq!(m.optimizer_grad_share(), 0.875);
        let off = memory_per_gpu(&plan(1, 1, 1, 0, true), 4e8, 6e8).unwrap();
        assert_eq!(off.gpu_bytes(), 2e9);
        assert_eq!(off.cpu_bytes(), 14e9);
        assert_eq!(off.total_bytes(), m.total_bytes());
    }

    #[test]
    fn plan_validation() {
        assert!(plan(8, 4, 2, 2, false).validate().is_ok());
        assert!(plan(8, 8, 2, 2, false).validate().is_err());
        assert!(plan(8, 3, 1, 2, false).validate().is_err());
        assert!(plan(8, 1, 1, 1, false).validate().is_err());
        assert!(plan(6, 1, 4, 0, false).validate().is_err());
        assert!(plan(0, 1, 1, 0, false).validate().is_err());
    }

    #[test]
    fn zero2_partitions_without_losing_bytes() {
        let (p_ne, p_e) = (1e9, 8e9);
        let p = plan(8, 4, 1, 2, false);
        let m = memory_per_gpu(&p, p_ne, p_e).unwrap();
        // 8 GPUs hold every non-expert optimizer byte once; expert shards live on
        // 4 ranks, each replicated over dp/ep = 2 partitions.
        let summed = 8.0 * (m.gradients.bytes + m.optimizer_states.bytes);
        assert!((summed - 14.0 * (p_ne + p_e)).abs() < 1e-3);
        let unpartitioned = memory_per_gpu(&plan(8, 4, 1, 0, false), p_ne, p_e).unwrap();
        assert!(m.gpu_bytes() < unpartitioned.gpu_bytes());
    }

    #[test]
    fn memory_monotone_in_degrees() {
        let base = memory_per_gpu(&plan(16, 2, 1, 2, false), 1e9, 1e10).unwrap().gpu_bytes();
        let more_ep = memory_per_gpu(&plan(16, 4, 1, 2, false), 1e9, 1e10).unwrap().gpu_bytes();
        let more_mp = memory_per_gpu(&plan(16, 2, 2, 2, false), 1e9, 1e10).unwrap().gpu_bytes();
        assert!(more_ep <= base && more_mp <= base);
    }

    #[test]
    fn offload_gives_eight_times_larger_models() {
        let (p_ne, per_e) = (6e8, 1.5e8);
        let budget = 40.0 * GB;
        let baseline = max_model_size(&ParallelPlan::single_gpu(), budget, p_ne, per_e).unwrap();
        let off = max_model_size(&plan(1, 1, 1, 0, true), budget, p_ne, per_e).unwrap();
        let ratio = off.continuous_params / baseline.continuous_params;
        assert!((ratio - 8.0).abs() < 1e-12, "{ratio}");
        assert!(memory_per_gpu(&ParallelPlan::single_gpu(), p_ne, baseline.num_experts as f64 * per_e).unwrap().gpu_bytes() <= budget);
        assert!(
            memory_per_gpu(&ParallelPlan::single_gpu(), p_ne, (baseline.num_experts + 1) as f64 * per_e)
                .unwrap()
                .gpu_bytes()
                > budget
        );
    }

    #[test]
    fn expert_capacity_scales_with_world() {
        let (p_ne, per_e) = (6e8, 1.5e8);
        let m = |n| max_model_size(&plan(n, n, 1, 2, true), 40.0 * GB, p_ne, per_e).unwrap().num_experts;
        let (a, b) = (m(8), m(16));
        assert!(b >= 2 * a && b <= 2 * a + 16, "{a} {b}");
        assert!(max_model_size(&ParallelPlan::single_gpu(), 1.0 * GB, 6e8, 1.0).is_err());
    }

    #[test]
    fn config_parsing() {
        let c = PlanConfig::parse("# plan\nworld_size = 8\nexpert_parallel=8\nzero_stage = 2\noffload = true\n").unwrap();
        assert_eq!(c.plan, plan(8, 8, 1, 2, true));
        let j = PlanConfig::parse(r#"{"world_size": 4, "expert_parallel": 2, "gpu_budget_gb": 80}"#).unwrap();
        assert_eq!(j.plan.world_size, 4);
        assert_eq!(j.gpu_budget_gb, 80.0);
        assert!(PlanConfig::parse("colour = blue").is_err());
        assert!(PlanConfig::parse("world_size 4").is_err());
        assert!(PlanConfig::parse(r#"{"world": 4}"#).is_err());
    }
}
