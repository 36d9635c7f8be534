//! Expert pruning by validation utilization, against a random selection.

use moe_forge::experiments::{heldout_ce, ToySetup};
use moe_forge::multitask::Trainer;
use moe_forge::surgery::{count_utilization, prune_experts, PruneStrategy};

fn main() -> moe_forge::Result<()> {
    let setup = ToySetup::default();
    let corpus = setup.corpus()?;
    let heldout = setup.heldout(&corpus)?;
    let mut t = Trainer::new(setup.train_config(&corpus, 8, 0), corpus.clone())?;
    t.train(800, |_| {})?;
    println!("8 experts: held-out CE {:.4}", heldout_ce(&t.model, &heldout, &t.config)?);

    let validation: Vec<_> = corpus.validation_mt(16, 16)?.into_iter().map(|b| (b.src, b.tgt_in)).collect();
    let counts = count_utilization(&t.model, &validation, &t.config.router)?;
    for (layer, c) in counts.layers.iter().zip(&counts.counts) {
        println!("layer {layer} utilization {c:?}");
    }

    let cfg4 = setup.train_config(&corpus, 4, 0);
    let top = prune_experts(&t.model, 4, &PruneStrategy::TopUtilization(&counts))?;
    let random = prune_experts(&t.model, 4, &PruneStrategy::Random { seed: 3 })?;
    println!("top-4 by utilization: held-out CE {:.4}", heldout_ce(&top, &heldout, &cfg4)?);
    println!("random 4:             held-out CE {:.4}", heldout_ce(&random, &heldout, &cfg4)?);
    Ok(())
}
