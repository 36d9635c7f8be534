#![allow(dead_code)]

use moe_forge::autograd::Tape;
use moe_forge::model::{BoundModel, ModelParams};
use moe_forge::routing::{Phase, RouterConfig};

pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub tgt_in: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

/// Random copy-style batch over ids `first..vocab`.
pub fn random_batch(vocab: usize, first: usize, seqs: usize, len: usize, seed: u64) -> Batch {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut src = Vec::new();
    let mut tgt_in = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..seqs {
        let s: Vec<usize> = (0..len).map(|_| rng.random_range(first..vocab)).collect();
        let mut t = vec![0];
        t.extend_from_slice(&s);
        labels.extend_from_slice(&s);
        labels.push(1);
        src.push(s);
        tgt_in.push(t);
    }
    Batch { src, tgt_in, labels }
}

/// Cross-entropy plus auxiliary loss; fills gradients on `model` when `grads`.
pub fn loss(model: &mut ModelParams, batch: &Batch, cfg: &RouterConfig, phase: Phase, seed: u64, grads: bool) -> f64 {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(model, &mut tape);
    let out = bound.forward(&mut tape, &batch.src, &batch.tgt_in, cfg, phase, seed).unwrap();
    let ce = tape.cross_entropy(out.logits, &batch.labels).unwrap();
    let total = tape.add(ce, out.aux_loss).unwrap();
    if grads {
        tape.backward(total).unwrap();
        model.zero_grad();
        model.accumulate_grads(&tape, &bound).unwrap();
    }
    tape.scalar(total)
}
