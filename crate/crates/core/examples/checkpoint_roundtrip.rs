//! Saves a model, validates the checkpoint and loads it back bit for bit.

use moe_forge::checkpoint;
use moe_forge::model::{ArchConfig, ModelParams};

fn main() -> moe_forge::Result<()> {
    let model = ModelParams::build(&ArchConfig::toy(40, 4), 11)?;
    let dir = std::env::temp_dir().join(format!("moe-forge-ckpt-{}", std::process::id()));
    let manifest = checkpoint::save(&model, &dir)?;
    println!("saved {} tensors to {}", manifest.tensors.len(), dir.display());

    let report = checkpoint::validate(&dir)?;
    println!("valid: {}", report.is_valid());

    let loaded = checkpoint::load(&dir)?;
    let exact = loaded.tensors().iter().zip(model.tensors()).all(|(a, b)| a.name == b.name && a.tensor.bit_eq(&b.tensor));
    println!("bit-exact round trip: {exact}");
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
