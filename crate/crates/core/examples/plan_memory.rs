//! Memory per GPU and the largest trainable model under a few parallel plans.

use moe_forge::experiments::plan_memory;
use moe_forge::model::ArchConfig;
use moe_forge::parallel::{ParallelPlan, PlanConfig};

fn main() -> moe_forge::Result<()> {
    let arch = ArchConfig::large(64);
    for (zero_stage, offload) in [(0, false), (2, false), (2, true)] {
        let mut cfg = PlanConfig::parse("world_size = 64\nexpert_parallel = 64\ngpu_budget_gb = 40\n")?;
        cfg.plan = ParallelPlan { zero_stage, offload, ..cfg.plan };
        println!("--- zero stage {zero_stage}, offload {offload}");
        print!("{}", plan_memory(&cfg, &arch)?.summary);
    }
    Ok(())
}
