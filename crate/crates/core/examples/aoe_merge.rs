//! Aggregation of experts: two 4-expert checkpoints become one 8-expert model.

use moe_forge::experiments::{heldout_ce, ToySetup};
use moe_forge::multitask::Trainer;
use moe_forge::surgery::aoe_merge;

fn main() -> moe_forge::Result<()> {
    let setup = ToySetup::default();
    let corpus = setup.corpus()?;
    let heldout = setup.heldout(&corpus)?;

    let mut donors = Vec::new();
    for seed in [0, 1] {
        let mut t = Trainer::new(setup.train_config(&corpus, 4, seed), corpus.clone())?;
        t.train(400, |_| {})?;
        println!("donor {seed}: held-out CE {:.4}", heldout_ce(&t.model, &heldout, &t.config)?);
        donors.push(t.model);
    }
    let merged = aoe_merge(&donors[0], &donors[1])?;
    println!("merged: {} experts, {} parameters", merged.arch.num_experts, merged.num_params());

    let cfg = setup.train_config(&corpus, 8, 2);
    println!("merged before training: held-out CE {:.4}", heldout_ce(&merged, &heldout, &cfg)?);
    let mut t = Trainer::with_model(cfg, corpus, merged)?;
    t.train(200, |_| {})?;
    println!("merged after 200 steps: held-out CE {:.4}", heldout_ce(&t.model, &heldout, &t.config)?);
    Ok(())
}
