//! Trains the toy MoE translation model and decodes a few held-out sentences.

use moe_forge::experiments::ToySetup;
use moe_forge::model::generate;
use moe_forge::multitask::{corpus::{BOS, EOS}, evaluate, Trainer};

fn main() -> moe_forge::Result<()> {
    let setup = ToySetup::default();
    let corpus = setup.corpus()?;
    let mut trainer = Trainer::new(setup.train_config(&corpus, 8, 0), corpus.clone())?;
    trainer.train(1500, |m| {
        if m.step % 250 == 0 {
            println!("step {:>5}  lr {:.5}  loss {:.4}  dropped {:.3}", m.step, m.lr, m.mt_loss.unwrap_or(f64::NAN), m.dropped_frac);
        }
    })?;

    let heldout = setup.heldout(&corpus)?;
    let ev = evaluate(&trainer.model, &heldout, &trainer.config.router, true)?;
    println!("held-out CE {:.4}, exact match {:.3}, BLEU {:.3}", ev.mt_ce, ev.exact_match.unwrap_or(0.0), ev.bleu.unwrap_or(0.0));

    let batch = &heldout[0];
    for (src, tgt) in batch.src.iter().zip(batch.targets()).take(3) {
        let hyp = generate(&trainer.model, src, 12, BOS, EOS, &trainer.config.router)?;
        println!("{src:?} -> {hyp:?} (reference {tgt:?})");
    }
    Ok(())
}
