//! Expert parallelism over virtual ranks with an in-memory All-to-All.
//!
//! Ranks run sequentially; message order is fixed (sender rank, then expert
//! index), so results do not depend on scheduling.

use serde::Serialize;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::routing::{combine, dispatch, gate_forward, MoeLayerParams, Phase, RouterConfig, RoutingDecision};
use crate::seed;
use crate::tensor::Tensor;

const BYTES_PER_ELEM: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct VirtualRank {
    pub rank: usize,
    /// Contiguous shard of expert indices owned by this rank.
    pub experts: Vec<usize>,
    pub tokens: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum A2aDirection {
    Dispatch,
    Return,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct A2aMessage {
    pub direction: A2aDirection,
    pub from: usize,
    pub to: usize,
    pub experts: Vec<usize>,
    pub bytes: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub outputs: Vec<Tensor>,
    pub decisions: Vec<RoutingDecision>,
    /// Messages between distinct ranks; local slices are not sent.
    pub log: Vec<A2aMessage>,
}

/// `[ep, ep]` bytes sent from row rank to column rank, both directions summed.
pub fn a2a_traffic(log: &[A2aMessage], ep: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0; ep]; ep];
    for msg in log {
        m[msg.from][msg.to] += msg.bytes;
    }
    m
}

/// Builds `ep` ranks, each owning `E / ep` consecutive experts and the tokens in `xs[r]`.
pub fn make_ranks(num_experts: usize, xs: Vec<Tensor>) -> Result<Vec<VirtualRank>> {
    let ep = xs.len();
    if ep == 0 || num_experts % ep != 0 {
        return Err(Error::InvalidPlan(format!("{ep} ranks cannot evenly shard {num_experts} experts")));
    }
    let per = num_experts / ep;
    Ok(xs
        .into_iter()
        .enumerate()
        .map(|(rank, tokens)| VirtualRank {
            rank,
            experts: (rank * per..(rank + 1) * per).collect(),
            tokens,
        })
        .collect())
}

/// One MoE layer step across ranks. Rank `r` gates its own tokens with
/// seed `derive(step_seed, r)`, exchanges fixed-shape `[E/ep, cap, d]`
/// slices, runs its local experts, exchanges results back, and combines.
pub fn simulate_expert_parallel_step(
    layer: &MoeLayerParams,
    ranks: &[VirtualRank],
    cfg: &RouterConfig,
    phase: Phase,
    step_seed: u64,
) -> Result<SimOutput> {
    let ep = ranks.len();
    let e = layer.num_experts();
    if ep == 0 || e != cfg.num_experts || e % ep != 0 {
        return Err(Error::InvalidPlan(format!("{ep} ranks, {e} experts, router over {}", cfg.num_experts)));
    }
    let rows = ranks[0].tokens.dims2()?.0;
    for r in ranks {
        let got = r.tokens.dims2()?.0;
        if got != rows {
            return Err(Error::UniformShape {
                rank: r.rank,
                got,
                expected: rows,
            });
        }
        if r.experts.len() != e / ep {
            return Err(Error::InvalidPlan(format!("rank {} owns {} experts", r.rank, r.experts.len())));
        }
    }

    // Local gating and dispatch.
    let mut decisions = Vec::with_capacity(ep);
    let mut buffers = Vec::with_capacity(ep);
    for r in ranks {
        let mut tape = Tape::new();
        let x = tape.constant(r.tokens.clone());
        let gate = tape.param(&layer.gate);
        let g = gate_forward(&mut tape, x, gate, cfg, phase, seed::derive(step_seed, r.rank as u64))?;
        buffers.push(dispatch(&r.tokens, &g.decision)?);
        decisions.push(g.decision);
    }
    let cap = buffers[0].capacity;
    let d = buffers[0].d_model;
    let slice_bytes = |n: usize| (n * cap * d) as u64 * BYTES_PER_ELEM;

    let mut log = Vec::new();
    // Dispatch All-to-All: owner s receives, from every sender, the slots of its experts.
    let mut inbox: Vec<Vec<(usize, usize, Vec<f64>)>> = vec![Vec::new(); ep];
    for (from, buf) in buffers.iter().enumerate() {
        for owner in ranks {
            if owner.rank != from {
                log.push(A2aMessage {
                    direction: A2aDirection::Dispatch,
                    from,
                    to: owner.rank,
                    experts: owner.experts.clone(),
                    bytes: slice_bytes(owner.experts.len()),
                });
            }
            for &ex in &owner.experts {
                inbox[owner.rank].push((from, ex, buf.expert_rows(ex).to_vec()));
            }
        }
    }
    // Local expert compute, then the return All-to-All.
    for owner in ranks {
        let mut by_sender: Vec<Vec<usize>> = vec![Vec::new(); ep];
        for (from, ex, slots) in std::mem::take(&mut inbox[owner.rank]) {
            let out = layer.experts[ex].forward_rows(&slots, cap);
            buffers[from].expert_rows_mut(ex).copy_from_slice(&out);
            by_sender[from].push(ex);
        }
        for (to, experts) in by_sender.into_iter().enumerate() {
            if to != owner.rank && !experts.is_empty() {
                log.push(A2aMessage {
                    direction: A2aDirection::Return,
                    from: owner.rank,
                    to,
                    bytes: slice_bytes(experts.len()),
                    experts,
                });
            }
        }
    }
    let outputs = ranks
        .iter()
        .zip(&buffers)
        .zip(&decisions)
        .map(|((r, buf), dec)| combine(buf, dec, &r.tokens))
        .collect::<Result<_>>()?;
    Ok(SimOutput {
        outputs,
        decisions,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{moe_layer_forward, AssignmentMode};
    use crate::tensor::init_truncated_normal;

    fn reference(layer: &MoeLayerParams, x: &Tensor, cfg: &RouterConfig, seed: u64) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = layer.register(&mut tape);
        let out = moe_layer_forward(&mut tape, xv, &vars, cfg, Phase::Train, seed).unwrap();
        tape.to_tensor(out.y)
    }

    fn setup(ep: usize, e: usize, t: usize, d: usize, seed: u64) -> (MoeLayerParams, Vec<VirtualRank>) {
        let layer = MoeLayerParams::init(d, 2 * d, e, seed).unwrap();
        let xs = (0..ep)
            .map(|r| init_truncated_normal(&[t, d], 0.0, 1.0, seed::derive(seed, 100 + r as u64)).unwrap())
            .collect();
        (layer, make_ranks(e, xs).unwrap())
    }

    #[test]
    fn matches_single_rank_reference() {
        for (ep, mode) in [(1, AssignmentMode::Plain), (2, AssignmentMode::Plain), (2, AssignmentMode::Rts), (4, AssignmentMode::Rts)] {
            let (layer, ranks) = setup(ep, 4, 10, 3, ep as u64);
            let cfg = RouterConfig::new(4).with_mode(mode);
            let sim = simulate_expert_parallel_step(&layer, &ranks, &cfg, Phase::Train, 17).unwrap();
            for r in &ranks {
                let want = reference(&layer, &r.tokens, &cfg, seed::derive(17, r.rank as u64));
                assert!(sim.outputs[r.rank].bit_eq(&want), "ep={ep} rank={}", r.rank);
            }
        }
    }

    #[test]
    fn traffic_accounting() {
        let (layer, ranks) = setup(1, 4, 8, 3, 1);
        let cfg = RouterConfig::new(4);
        let sim = simulate_expert_parallel_step(&layer, &ranks, &cfg, Phase::Train, 0).unwrap();
        assert!(sim.log.is_empty());

        let (layer, ranks) = setup(2, 4, 8, 3, 1);
        let sim = simulate_expert_parallel_step(&layer, &ranks, &cfg, Phase::Train, 0).unwrap();
        let m = a2a_traffic(&sim.log, 2);
        assert_eq!(m[0][1], m[1][0]);
        // 2 directions × 2 senders × 2 remote experts × cap 2 × d 3 × 8 bytes
        let total: u64 = m.iter().flatten().sum();
        assert_eq!(total, 2 * 2 * 2 * 2 * 3 * 8);

        let mut doubled = cfg.clone();
        doubled.capacity_factor_train = 2.0;
        let sim2 = simulate_expert_parallel_step(&layer, &ranks, &doubled, Phase::Train, 0).unwrap();
        let total2: u64 = a2a_traffic(&sim2.log, 2).iter().flatten().sum();
        assert_eq!(total2, 2 * total);
    }

    #[test]
    fn unequal_token_counts_are_rejected() {
        let layer = MoeLayerParams::init(3, 6, 4, 0).unwrap();
        let xs = vec![Tensor::zeros(&[8, 3]), Tensor::zeros(&[9, 3])];
        let ranks = make_ranks(4, xs).unwrap();
        let err = simulate_expert_parallel_step(&layer, &ranks, &RouterConfig::new(4), Phase::Train, 0);
        assert!(matches!(err, Err(Error::UniformShape { rank: 1, got: 9, expected: 8 })));
        assert!(make_ranks(4, vec![Tensor::zeros(&[1, 3]); 3]).is_err());
    }
}
