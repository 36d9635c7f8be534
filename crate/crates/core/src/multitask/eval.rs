use std::collections::HashMap;

use serde::Serialize;

use super::corpus::{TaskBatch, BOS, EOS};
use super::trainer::{add_drop_positions, DROP_BUCKETS};
use crate::autograd::Tape;
use crate::error::Result;
use crate::model::{generate_batch, BoundModel, ModelParams};
use crate::routing::{Phase, RouterConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    /// Token-weighted mean cross-entropy over all held-out targets.
    pub mt_ce: f64,
    pub exact_match: Option<f64>,
    pub bleu: Option<f64>,
    pub dropped: u64,
    pub drop_histogram: [u64; DROP_BUCKETS],
}

/// Held-out evaluation with eval-phase routing. Greedy decoding for exact
/// match and BLEU runs only when `decode` is set.
pub fn evaluate(model: &ModelParams, heldout: &[TaskBatch], router: &RouterConfig, decode: bool) -> Result<EvalMetrics> {
    let mut ce_sum = 0.0;
    let mut tokens = 0usize;
    let mut dropped = 0u64;
    let mut hist = [0u64; DROP_BUCKETS];
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for batch in heldout {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(model, &mut tape);
        let out = bound.forward(&mut tape, &batch.src, &batch.tgt_in, router, Phase::Eval, 0)?;
        let ce = tape.cross_entropy(out.logits, &batch.labels)?;
        ce_sum += tape.scalar(ce) * batch.labels.len() as f64;
        tokens += batch.labels.len();
        for (_, d) in &out.decisions {
            dropped += d.dropped() as u64;
            add_drop_positions(d, &mut hist);
        }
        if decode {
            let targets = batch.targets();
            let max_len = targets.iter().map(Vec::len).max().unwrap_or(0) + 2;
            hyps.extend(generate_batch(model, &batch.src, max_len, BOS, EOS, router)?);
            refs.extend(targets);
        }
    }
    let (exact_match, bleu) = if decode {
        let hits = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count();
        (Some(hits as f64 / refs.len().max(1) as f64), Some(corpus_bleu(&hyps, &refs)))
    } else {
        (None, None)
    };
    Ok(EvalMetrics {
        mt_ce: ce_sum / tokens.max(1) as f64,
        exact_match,
        bleu,
        dropped,
        drop_histogram: hist,
    })
}

fn ngrams(s: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in [0, 1] with brevity penalty; higher orders with no
/// matches are add-one smoothed.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> f64 {
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|n| {
            if n > 0 && matches[n] == 0 {
                (1.0 / (totals[n] + 1) as f64).ln()
            } else {
                (matches[n] as f64 / totals[n] as f64).ln()
            }
        })
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len < ref_len { (1.0 - ref_len as f64 / hyp_len as f64).exp() } else { 1.0 };
    bp * log_p.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchConfig;
    use crate::multitask::corpus::{CorpusConfig, SyntheticCorpus};

    #[test]
    fn bleu_bounds() {
        let r = vec![vec![1, 2, 3, 4, 5]];
        assert!((corpus_bleu(&r, &r) - 1.0).abs() < 1e-12);
        assert_eq!(corpus_bleu(&[vec![9, 9]], &r), 0.0);
        let partial = corpus_bleu(&[vec![1, 2, 3, 9, 5]], &r);
        assert!(partial > 0.0 && partial < 1.0);
    }

    #[test]
    fn untrained_model_is_near_uniform() {
        let corpus = SyntheticCorpus::new(CorpusConfig::default()).unwrap();
        let v = corpus.vocab_size();
        let model = ModelParams::build(&ArchConfig::toy(v, 2), 0).unwrap();
        let held = corpus.heldout_mt(8, 8).unwrap();
        let m = evaluate(&model, &held, &RouterConfig::new(2), true).unwrap();
        let uniform = (v as f64).ln();
        assert!((m.mt_ce - uniform).abs() / uniform < 0.1, "{} vs {uniform}", m.mt_ce);
        assert_eq!(m.drop_histogram.iter().sum::<u64>(), m.dropped);
        assert!(m.exact_match.unwrap() <= 1.0);
    }
}
