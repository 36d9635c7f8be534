//! Denoising-autoencoder noise on a synthetic sentence.

use moe_forge::multitask::{corpus::MASK, infill_mask, noise_dae, CorpusConfig, DaeNoiseConfig, SyntheticCorpus};
use moe_forge::seed;

fn main() -> moe_forge::Result<()> {
    let corpus = SyntheticCorpus::new(CorpusConfig { min_len: 10, max_len: 14, ..CorpusConfig::default() })?;
    let clean = corpus.mono_sentence(0, 5);
    let cfg = DaeNoiseConfig::default();
    println!("clean  {clean:?}");
    for s in 0..4 {
        println!("noisy  {:?}", noise_dae(&clean, &cfg, s)?);
    }
    println!("(mask token is {MASK})");

    let n = 10_000;
    let mask = infill_mask(n, &cfg, &mut seed::rng(1))?;
    println!("masked fraction over {n} tokens: {:.4}", mask.iter().filter(|&&m| m).count() as f64 / n as f64);
    assert_eq!(noise_dae(&clean, &DaeNoiseConfig::none(), 9)?, clean);
    Ok(())
}
