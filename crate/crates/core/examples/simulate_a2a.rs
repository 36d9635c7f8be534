//! Expert parallelism on simulated ranks, with All-to-All traffic per rank pair.

use moe_forge::experiments::{simulate_a2a, A2aConfig};
use moe_forge::routing::AssignmentMode;

fn main() -> moe_forge::Result<()> {
    for mode in [AssignmentMode::Plain, AssignmentMode::Rts] {
        let cfg = A2aConfig { assignment_mode: mode, steps: 2, ..A2aConfig::default() };
        let report = simulate_a2a(&cfg, 0)?;
        println!("--- {mode}");
        print!("{}", report.summary);
        let csv = &report.files[0].1;
        for line in csv.lines().take(6) {
            println!("  {line}");
        }
    }
    Ok(())
}
