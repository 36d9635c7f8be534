//! Parameter counts of the large encoder-decoder for a range of expert counts.

use moe_forge::experiments::{count_params, CountParamsConfig};
use moe_forge::model::{param_count, param_count_enumerated, ArchConfig};

fn main() -> moe_forge::Result<()> {
    let (report, _) = count_params(&CountParamsConfig::default())?;
    print!("{}", report.summary);

    // The closed form and the per-tensor enumeration agree.
    let arch = ArchConfig::large(32);
    assert_eq!(param_count(&arch), param_count_enumerated(&arch));

    let every_layer = CountParamsConfig {
        experts: vec![8, 64],
        moe_every: Some(1),
        ..CountParamsConfig::default()
    };
    println!("\nwith an MoE layer in every position:");
    print!("{}", count_params(&every_layer)?.0.summary);
    Ok(())
}
