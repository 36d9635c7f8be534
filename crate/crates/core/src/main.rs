use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use moe_forge::checkpoint;
use moe_forge::experiments::{
    self, A2aConfig, AoeConfig, CountParamsConfig, PruneConfig, Report, SampleEfficiencyConfig, ToySetup,
};
use moe_forge::model::ArchConfig;
use moe_forge::multitask::Task;
use moe_forge::parallel::PlanConfig;
use moe_forge::routing::AssignmentMode;
use moe_forge::Error;

#[derive(Parser)]
#[command(name = "moe-forge", version, about = "Mixture-of-experts training experiments at toy scale")]
struct Cli {
    /// Base seed; multi-seed experiments use seed, seed+1, ...
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "moe-forge-out")]
    out_dir: PathBuf,
    /// JSON settings file (key = value lines for plan-memory).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ToyFlags {
    #[arg(long)]
    steps: Option<u64>,
    /// Number of seeds for median-based comparisons.
    #[arg(long)]
    num_seeds: Option<usize>,
    #[arg(long)]
    experts: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter counts per expert count, with deltas to the published sizes.
    CountParams {
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_delimiter = ',')]
        experts: Option<Vec<usize>>,
        #[arg(long)]
        moe_every: Option<usize>,
    },
    /// PLAIN vs GROUPED vs RTS training runs.
    RtsAblation {
        #[command(flatten)]
        toy: ToyFlags,
        #[arg(long, default_value_t = 4)]
        groups: usize,
    },
    /// Aggregation of experts: merged-init vs random-init 2E training.
    Aoe {
        #[command(flatten)]
        toy: ToyFlags,
        #[arg(long, requires = "ckpt_b")]
        ckpt_a: Option<PathBuf>,
        #[arg(long, requires = "ckpt_a")]
        ckpt_b: Option<PathBuf>,
        #[arg(long)]
        donor_steps: Option<u64>,
    },
    /// Expert pruning by utilization vs random, against training from scratch.
    Prune {
        #[command(flatten)]
        toy: ToyFlags,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        finetune_steps: Option<u64>,
        #[arg(long)]
        scratch_steps: Option<u64>,
    },
    /// Per-GPU memory of a parallelism plan and the largest model it fits.
    PlanMemory {
        #[arg(long)]
        world_size: Option<usize>,
        #[arg(long)]
        expert_parallel: Option<usize>,
        #[arg(long)]
        model_parallel: Option<usize>,
        #[arg(long)]
        zero_stage: Option<u8>,
        #[arg(long)]
        offload: Option<bool>,
        #[arg(long)]
        budget_gb: Option<f64>,
        #[arg(long, default_value = "large")]
        preset: String,
        #[arg(long, default_value_t = 64)]
        experts: usize,
    },
    /// Loss curves for several expert counts on identical data.
    SampleEfficiency {
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        num_seeds: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        experts: Option<Vec<usize>>,
    },
    /// Expert-parallel MoE steps over virtual ranks with All-to-All accounting.
    SimulateA2a {
        #[arg(long)]
        experts: Option<usize>,
        #[arg(long)]
        expert_parallel: Option<usize>,
        #[arg(long)]
        tokens_per_rank: Option<usize>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Multitask (MT + DAE) toy training; saves a checkpoint.
    Train {
        #[command(flatten)]
        toy: ToyFlags,
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        #[arg(long)]
        mode: Option<String>,
    },
}

#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    toy: Option<ToySetup>,
    count_params: Option<CountParamsConfig>,
    aoe: Option<AoeConfig>,
    prune: Option<PruneConfig>,
    sample_efficiency: Option<SampleEfficiencyConfig>,
    a2a: Option<A2aConfig>,
}

enum Failure {
    Config(String),
    Experiment(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. }
            | Error::Shape { .. }
            | Error::TokenOutOfRange { .. }
            | Error::UniformShape { .. }
            | Error::GroupCount { .. } => Failure::Experiment(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn parse_mode(s: &str) -> Result<AssignmentMode, Failure> {
    let lower = s.to_ascii_lowercase();
    match lower.as_str() {
        "plain" => Ok(AssignmentMode::Plain),
        "rts" => Ok(AssignmentMode::Rts),
        _ => lower
            .strip_prefix("grouped:")
            .and_then(|g| g.parse().ok())
            .map(|groups| AssignmentMode::Grouped { groups })
            .ok_or_else(|| Failure::Config(format!("unknown assignment mode `{s}` (plain, rts, grouped:G)"))),
    }
}

fn parse_task(s: &str) -> Result<Task, Failure> {
    match s.to_ascii_lowercase().as_str() {
        "mt" => Ok(Task::Mt),
        "dae" => Ok(Task::Dae),
        _ => Err(Failure::Config(format!("unknown task `{s}` (mt, dae)"))),
    }
}

fn read_file(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn toy_setup(file: &FileConfig, flags: &ToyFlags, seed: u64) -> Result<ToySetup, Failure> {
    let mut s = file.toy.clone().unwrap_or_default();
    if let Some(n) = flags.steps {
        s.steps = n;
    }
    if let Some(e) = flags.experts {
        s.num_experts = e;
    }
    let n = flags.num_seeds.unwrap_or(s.seeds.len().max(1));
    s.seeds = (0..n as u64).map(|i| seed + i).collect();
    s.validate()?;
    Ok(s)
}

fn load(path: &Path) -> Result<moe_forge::model::ModelParams, Failure> {
    Ok(checkpoint::load(path)?)
}

fn execute(cli: &Cli) -> Result<Report, Failure> {
    let file = match (&cli.config, &cli.command) {
        (Some(_), Command::PlanMemory { .. }) | (None, _) => FileConfig::default(),
        (Some(path), _) => serde_json::from_str(&read_file(path)?).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
    };
    let seed = cli.seed;
    match &cli.command {
        Command::CountParams { preset, experts, moe_every } => {
            let mut c = file.count_params.unwrap_or_default();
            if let Some(p) = preset {
                c.preset = p.clone();
            }
            if let Some(e) = experts {
                c.experts = e.clone();
            }
            if moe_every.is_some() {
                c.moe_every = *moe_every;
            }
            Ok(experiments::count_params(&c)?.0)
        }
        Command::RtsAblation { toy, groups } => {
            let s = toy_setup(&file, toy, seed)?;
            let modes = [AssignmentMode::Plain, AssignmentMode::Grouped { groups: *groups }, AssignmentMode::Rts];
            Ok(experiments::rts_ablation(&s, &modes)?.0)
        }
        Command::Aoe { toy, ckpt_a, ckpt_b, donor_steps } => {
            let s = toy_setup(&file, toy, seed)?;
            let mut c = file.aoe.unwrap_or_default();
            if let Some(n) = donor_steps {
                c.donor_steps = *n;
            }
            if let Some(n) = toy.steps {
                c.continue_steps = n;
            }
            if let Some(e) = toy.experts {
                c.donor_experts = e;
            }
            let donors = match (ckpt_a, ckpt_b) {
                (Some(a), Some(b)) => Some((load(a)?, load(b)?)),
                _ => None,
            };
            Ok(experiments::aoe(&s, &c, donors.as_ref().map(|(a, b)| (a, b)))?.0)
        }
        Command::Prune { toy, ckpt, k, finetune_steps, scratch_steps } => {
            let s = toy_setup(&file, toy, seed)?;
            let mut c = file.prune.unwrap_or_default();
            if let Some(k) = k {
                c.k = *k;
            }
            if let Some(n) = finetune_steps {
                c.finetune_steps = *n;
            }
            if let Some(n) = scratch_steps {
                c.scratch_steps = *n;
            }
            if let Some(n) = toy.steps {
                c.source_steps = n;
            }
            if let Some(e) = toy.experts {
                c.source_experts = e;
            }
            let source = ckpt.as_deref().map(load).transpose()?;
            Ok(experiments::prune(&s, &c, source.as_ref())?.0)
        }
        Command::PlanMemory { world_size, expert_parallel, model_parallel, zero_stage, offload, budget_gb, preset, experts } => {
            let mut p = match &cli.config {
                Some(path) => PlanConfig::parse(&read_file(path)?)?,
                None => PlanConfig::default(),
            };
            if let Some(v) = world_size {
                p.plan.world_size = *v;
            }
            if let Some(v) = expert_parallel {
                p.plan.expert_parallel = *v;
            }
            if let Some(v) = model_parallel {
                p.plan.model_parallel = *v;
            }
            if let Some(v) = zero_stage {
                p.plan.zero_stage = *v;
            }
            if let Some(v) = offload {
                p.plan.offload = *v;
            }
            if let Some(v) = budget_gb {
                p.gpu_budget_gb = *v;
            }
            let arch = ArchConfig::preset(preset, *experts)?;
            Ok(experiments::plan_memory(&p, &arch)?)
        }
        Command::SampleEfficiency { steps, num_seeds, experts } => {
            let flags = ToyFlags {
                steps: *steps,
                num_seeds: *num_seeds,
                experts: None,
            };
            let s = toy_setup(&file, &flags, seed)?;
            let mut c = file.sample_efficiency.unwrap_or_default();
            if let Some(e) = experts {
                c.experts = e.clone();
            }
            Ok(experiments::sample_efficiency(&s, &c)?.0)
        }
        Command::SimulateA2a { experts, expert_parallel, tokens_per_rank, mode, steps } => {
            let mut c = file.a2a.unwrap_or_default();
            if let Some(v) = experts {
                c.num_experts = *v;
            }
            if let Some(v) = expert_parallel {
                c.expert_parallel = *v;
            }
            if let Some(v) = tokens_per_rank {
                c.tokens_per_rank = *v;
            }
            if let Some(m) = mode {
                c.assignment_mode = parse_mode(m)?;
            }
            if let Some(v) = steps {
                c.steps = *v;
            }
            Ok(experiments::simulate_a2a(&c, seed)?)
        }
        Command::Train { toy, tasks, mode } => {
            let mut s = toy_setup(&file, toy, seed)?;
            s.tasks = match tasks {
                Some(t) => t.iter().map(|x| parse_task(x)).collect::<Result<_, _>>()?,
                None if file.toy.is_none() => vec![Task::Mt, Task::Dae],
                None => s.tasks,
            };
            if let Some(m) = mode {
                s.assignment_mode = parse_mode(m)?;
            }
            s.validate()?;
            let out = experiments::train(&s, seed)?;
            let dir = cli.out_dir.join("checkpoint");
            checkpoint::save(&out.model, &dir)?;
            let mut report = out.report;
            report.summary.push_str("checkpoint written to checkpoint/ under the output directory\n");
            Ok(report)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {}", msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let report = match execute(&cli) {
        Ok(r) => r,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            return ExitCode::from(1);
        }
        Err(Failure::Experiment(m)) => {
            eprintln!("error: {m}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = report.write(&cli.out_dir) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    print!("{}", report.summary);
    if report.passed == Some(false) {
        eprintln!("error: the experiment's directional check did not hold");
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}
