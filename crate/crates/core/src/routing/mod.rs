//! Top-1 gated routing with per-expert capacity.
//!
//! Tokens of a batch are flattened along batch and sequence into one list of
//! `T` rows before routing. Each expert accepts at most
//! `capacity = ceil(C · T / E)` tokens; the rest overflow and are dropped from
//! expert computation. The three assignment modes only differ in the priority
//! order in which tokens claim capacity slots:
//!
//! - [`AssignmentMode::Plain`]: flattened position order. Overflow always lands
//!   at the end of the batch.
//! - [`AssignmentMode::Grouped`]: the batch is cut into equal contiguous
//!   groups, each with its own share of the capacity. Overflow lands at the end
//!   of each group.
//! - [`AssignmentMode::Rts`]: a uniformly random permutation of the flattened
//!   tokens. A token's chance of keeping its slot depends only on how many
//!   tokens chose the same expert.
//!
//! The number of tokens each expert sees per step grows with the global batch
//! and shrinks with the number of experts, which is what `capacity` encodes.

mod layer;

pub use layer::{
    balance_loss, balance_loss_value, combine, dispatch, gate_forward, moe_layer_forward,
    moe_layer_forward_with_residual, DispatchBuffer,
    ExpertParams, ExpertVars, GateOutput, MoeLayerParams, MoeLayerVars, MoeOutput,
};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentMode {
    Plain,
    Grouped { groups: usize },
    Rts,
}

impl std::fmt::Display for AssignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AssignmentMode::Plain => write!(f, "plain"),
            AssignmentMode::Grouped { groups } => write!(f, "grouped{groups}"),
            AssignmentMode::Rts => write!(f, "rts"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub num_experts: usize,
    pub capacity_factor_train: f64,
    pub capacity_factor_eval: f64,
    /// Half-width of the multiplicative uniform noise on the gate input.
    pub jitter_eps: f64,
    /// Weight of the balancing loss in the total loss.
    pub balance_coeff: f64,
    pub assignment_mode: AssignmentMode,
    /// 1, or 2 for the experimental second-expert routing.
    pub top_k: usize,
    pub seed: u64,
}

impl RouterConfig {
    pub fn new(num_experts: usize) -> Self {
        Self {
            num_experts,
            capacity_factor_train: 1.0,
            capacity_factor_eval: 2.0,
            jitter_eps: 0.01,
            balance_coeff: 0.01,
            assignment_mode: AssignmentMode::Plain,
            top_k: 1,
            seed: 0,
        }
    }

    pub fn with_mode(mut self, mode: AssignmentMode) -> Self {
        self.assignment_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::InvalidArgument("num_experts must be at least 1".into()));
        }
        if !(self.capacity_factor_train > 0.0) || !(self.capacity_factor_eval > 0.0) {
            return Err(Error::InvalidArgument("capacity factors must be positive".into()));
        }
        if !(self.balance_coeff >= 0.0) {
            return Err(Error::InvalidArgument("balance coefficient must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.jitter_eps) {
            return Err(Error::InvalidArgument("jitter_eps must lie in [0, 1)".into()));
        }
        if !(1..=2).contains(&self.top_k) || self.top_k > self.num_experts {
            return Err(Error::InvalidArgument(format!(
                "top_k {} unsupported for {} experts",
                self.top_k, self.num_experts
            )));
        }
        if let AssignmentMode::Grouped { groups: 0 } = self.assignment_mode {
            return Err(Error::InvalidArgument("group count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn capacity_factor(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Train => self.capacity_factor_train,
            Phase::Eval => self.capacity_factor_eval,
        }
    }

    /// Evaluation always uses positional assignment so that it is deterministic.
    pub fn effective_mode(&self, phase: Phase) -> AssignmentMode {
        match phase {
            Phase::Train => self.assignment_mode,
            Phase::Eval => AssignmentMode::Plain,
        }
    }
}

/// `ceil(C · tokens / E)`, at least 1.
pub fn capacity(tokens: usize, cfg: &RouterConfig, phase: Phase) -> usize {
    capacity_for(tokens, cfg.num_experts, cfg.capacity_factor(phase))
}

pub fn capacity_for(tokens: usize, num_experts: usize, factor: f64) -> usize {
    let exact = factor * tokens as f64 / num_experts as f64;
    // Absorb representation error so that e.g. 1.0 · 64 / 8 stays 8.
    let rounded = (exact - 1e-9 * exact.abs().max(1.0)).ceil();
    (rounded.max(1.0)) as usize
}

/// Capacity slot of a token, `None` when the token overflowed.
pub type Slot = Option<usize>;

/// Scans tokens in `order`; each takes the next free slot of its expert.
fn scan(choice: &[usize], order: impl IntoIterator<Item = usize>, cap: usize, fill: &mut Vec<usize>, out: &mut [Slot]) {
    for t in order {
        let e = choice[t];
        if e >= fill.len() {
            fill.resize(e + 1, 0);
        }
        if fill[e] < cap {
            out[t] = Some(fill[e]);
            fill[e] += 1;
        }
    }
}

/// Positional priority: earlier tokens claim capacity first.
pub fn assign_plain(choice: &[usize], cap: usize) -> Vec<Slot> {
    let mut out = vec![None; choice.len()];
    scan(choice, 0..choice.len(), cap, &mut Vec::new(), &mut out);
    out
}

/// Positional priority inside each of `groups` contiguous groups, each with
/// `ceil(cap / groups)` slots per expert. The expert total never exceeds `cap`.
pub fn assign_grouped(choice: &[usize], cap: usize, groups: usize) -> Result<Vec<Slot>> {
    let mut out = vec![None; choice.len()];
    if groups == 0 || choice.len() % groups != 0 {
        return Err(Error::GroupCount {
            groups,
            tokens: choice.len(),
        });
    }
    grouped_pass(choice, cap, groups, &mut Vec::new(), &mut Vec::new(), &mut out);
    Ok(out)
}

fn grouped_pass(
    choice: &[usize],
    cap: usize,
    groups: usize,
    fill: &mut Vec<usize>,
    group_fill: &mut Vec<Vec<usize>>,
    out: &mut [Slot],
) {
    let t = choice.len();
    let group_cap = cap.div_ceil(groups);
    group_fill.resize(groups, Vec::new());
    for (g, counts) in group_fill.iter_mut().enumerate() {
        for tok in g * t / groups..(g + 1) * t / groups {
            let e = choice[tok];
            if e >= fill.len() {
                fill.resize(e + 1, 0);
            }
            if e >= counts.len() {
                counts.resize(e + 1, 0);
            }
            if counts[e] < group_cap && fill[e] < cap {
                out[tok] = Some(fill[e]);
                fill[e] += 1;
                counts[e] += 1;
            }
        }
    }
}

/// Random token selection: a seeded uniform permutation sets the priority.
pub fn assign_rts(choice: &[usize], cap: usize, seed: u64) -> Vec<Slot> {
    let mut out = vec![None; choice.len()];
    scan(choice, rts_order(choice.len(), seed), cap, &mut Vec::new(), &mut out);
    out
}

fn rts_order(tokens: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tokens).collect();
    order.shuffle(&mut seed::rng(seed));
    order
}

/// Assigns first choices, then (for top-2) second choices after all first
/// choices, in the priority order of `mode`.
pub(crate) fn assign(
    mode: AssignmentMode,
    first: &[usize],
    second: Option<&[usize]>,
    cap: usize,
    rts_seed: u64,
) -> Result<(Vec<Slot>, Option<Vec<Slot>>)> {
    let t = first.len();
    let mut fill = Vec::new();
    let mut slots = vec![None; t];
    let mut second_slots = second.map(|_| vec![None; t]);
    match mode {
        AssignmentMode::Plain => {
            scan(first, 0..t, cap, &mut fill, &mut slots);
            if let (Some(c2), Some(s2)) = (second, second_slots.as_mut()) {
                scan(c2, 0..t, cap, &mut fill, s2);
            }
        }
        AssignmentMode::Rts => {
            let order = rts_order(t, rts_seed);
            scan(first, order.iter().copied(), cap, &mut fill, &mut slots);
            if let (Some(c2), Some(s2)) = (second, second_slots.as_mut()) {
                scan(c2, order.iter().copied(), cap, &mut fill, s2);
            }
        }
        AssignmentMode::Grouped { groups } => {
            // Inside the model the flattened length is rarely a multiple of G;
            // group boundaries fall at ⌊g·T/G⌋, equal to the strict split when G | T.
            if groups == 0 {
                return Err(Error::GroupCount { groups, tokens: t });
            }
            let mut group_fill = Vec::new();
            grouped_pass(first, cap, groups, &mut fill, &mut group_fill, &mut slots);
            if let (Some(c2), Some(s2)) = (second, second_slots.as_mut()) {
                grouped_pass(c2, cap, groups, &mut fill, &mut group_fill, s2);
            }
        }
    }
    Ok((slots, second_slots))
}

/// Second routing choice of a token under top-2 gating.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondRoute {
    pub expert: Vec<usize>,
    pub gate_prob: Vec<f64>,
    pub slot: Vec<Slot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub num_experts: usize,
    pub capacity: usize,
    /// Argmax expert of each flattened token.
    pub expert: Vec<usize>,
    /// Softmax probability of the chosen expert.
    pub gate_prob: Vec<f64>,
    pub slot: Vec<Slot>,
    pub second: Option<SecondRoute>,
}

impl RoutingDecision {
    pub fn tokens(&self) -> usize {
        self.expert.len()
    }

    /// Tokens whose first choice overflowed.
    pub fn dropped(&self) -> usize {
        self.slot.iter().filter(|s| s.is_none()).count()
    }

    pub fn dropped_positions(&self) -> Vec<usize> {
        self.slot.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(t, _)| t).collect()
    }

    /// Tokens occupying capacity of each expert, over all routing slots.
    pub fn kept_per_expert(&self) -> Vec<usize> {
        let mut kept = vec![0; self.num_experts];
        for (e, s) in self.expert.iter().zip(&self.slot) {
            if s.is_some() {
                kept[*e] += 1;
            }
        }
        if let Some(sec) = &self.second {
            for (e, s) in sec.expert.iter().zip(&sec.slot) {
                if s.is_some() {
                    kept[*e] += 1;
                }
            }
        }
        kept
    }

    /// Argmax demand per expert, counted before capacity filtering.
    pub fn demand_per_expert(&self) -> Vec<usize> {
        let mut demand = vec![0; self.num_experts];
        for &e in &self.expert {
            demand[e] += 1;
        }
        demand
    }

    /// Number of routing slots per token (1 or 2).
    pub fn k(&self) -> usize {
        if self.second.is_some() {
            2
        } else {
            1
        }
    }

    /// Row of the `[E · capacity, d]` buffer for each routing slot of each token.
    pub fn buffer_rows(&self) -> Vec<Vec<Option<usize>>> {
        let row = |e: usize, s: &Slot| s.map(|s| e * self.capacity + s);
        (0..self.tokens())
            .map(|t| {
                let mut r = vec![row(self.expert[t], &self.slot[t])];
                if let Some(sec) = &self.second {
                    r.push(row(sec.expert[t], &sec.slot[t]));
                }
                r
            })
            .collect()
    }

    /// Combine weight of each routing slot: the gate probability for top-1,
    /// the renormalized pair for top-2.
    pub fn combine_weights(&self) -> Vec<f64> {
        match &self.second {
            None => self.gate_prob.clone(),
            Some(sec) => self
                .gate_prob
                .iter()
                .zip(&sec.gate_prob)
                .flat_map(|(p1, p2)| [p1 / (p1 + p2), p2 / (p1 + p2)])
                .collect(),
        }
    }

    /// Checks slot ranges, distinctness, and capacity per expert.
    pub fn check_invariants(&self) -> Result<()> {
        let mut used = vec![vec![false; self.capacity]; self.num_experts];
        let mut visit = |e: usize, s: &Slot| -> Result<()> {
            if e >= self.num_experts {
                return Err(Error::InvalidArgument(format!("expert {e} out of range")));
            }
            if let Some(s) = s {
                if *s >= self.capacity || std::mem::replace(&mut used[e][*s], true) {
                    return Err(Error::InvalidArgument(format!("slot {s} of expert {e} invalid or reused")));
                }
            }
            Ok(())
        };
        for (e, s) in self.expert.iter().zip(&self.slot) {
            visit(*e, s)?;
        }
        if let Some(sec) = &self.second {
            for (e, s) in sec.expert.iter().zip(&sec.slot) {
                visit(*e, s)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kept(slots: &[Slot]) -> Vec<usize> {
        slots.iter().enumerate().filter(|(_, s)| s.is_some()).map(|(t, _)| t).collect()
    }

    #[test]
    fn capacity_formula() {
        let mut cfg = RouterConfig::new(8);
        assert_eq!(capacity(64, &cfg, Phase::Train), 8);
        assert_eq!(capacity(64, &cfg, Phase::Eval), 16);
        assert_eq!(capacity(1, &cfg, Phase::Train), 1);
        cfg.capacity_factor_train = 1.25;
        assert_eq!(capacity(10, &cfg, Phase::Train), 2);
        assert_eq!(capacity_for(3, 2, 1.0), 2);
        assert_eq!(capacity_for(30, 10, 0.1), 1);
    }

    #[test]
    fn plain_drops_the_tail() {
        assert_eq!(assign_plain(&[0, 0, 0, 0], 2), vec![Some(0), Some(1), None, None]);
        assert!(assign_plain(&[0, 1, 0, 1], 2).iter().all(Option::is_some));
        let slots = assign_plain(&[1, 1, 1, 0, 0, 0], 2);
        assert_eq!(kept(&slots), vec![0, 1, 3, 4]);
    }

    #[test]
    fn grouped_assignment() {
        let choice = [2, 0, 1, 1, 0, 2, 2, 2];
        assert_eq!(assign_grouped(&choice, 3, 1).unwrap(), assign_plain(&choice, 3));
        assert_eq!(kept(&assign_grouped(&[0, 0, 0, 0], 2, 2).unwrap()), vec![0, 2]);
        assert!(assign_grouped(&[0, 1, 1, 0], 2, 2).unwrap().iter().all(Option::is_some));
        assert!(matches!(assign_grouped(&[0, 1, 1], 2, 2), Err(Error::GroupCount { .. })));
    }

    #[test]
    fn grouped_never_exceeds_global_capacity() {
        // ceil(3 / 2) = 2 per group would admit 4 tokens without the global clamp.
        let slots = assign_grouped(&[0; 8], 3, 2).unwrap();
        assert_eq!(kept(&slots), vec![0, 1, 4]);
    }

    #[test]
    fn rts_under_capacity_keeps_everything() {
        for seed in 0..20 {
            assert!(assign_rts(&[0, 1, 2, 0, 1, 2], 2, seed).iter().all(Option::is_some));
        }
    }

    #[test]
    fn rts_is_deterministic_per_seed() {
        let choice = [0, 0, 1, 0, 1, 0, 0, 1];
        assert_eq!(assign_rts(&choice, 2, 5), assign_rts(&choice, 2, 5));
    }

    #[test]
    fn rts_keep_frequency_is_position_independent() {
        let trials = 10_000;
        let mut kept_count = [0usize; 4];
        for seed in 0..trials {
            for (t, s) in assign_rts(&[0, 0, 0, 0], 2, seed).iter().enumerate() {
                kept_count[t] += s.is_some() as usize;
            }
        }
        for c in kept_count {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.5).abs() < 0.03, "freq {freq}");
        }
    }

    #[test]
    fn top2_second_choices_fill_after_first() {
        let (first, second) = assign(AssignmentMode::Plain, &[0, 0, 1], Some(&[1, 1, 0]), 2, 0).unwrap();
        assert_eq!(first, vec![Some(0), Some(1), Some(0)]);
        assert_eq!(second.unwrap(), vec![Some(1), None, None]);
    }

    #[test]
    fn config_validation() {
        assert!(RouterConfig::new(0).validate().is_err());
        let mut cfg = RouterConfig::new(2);
        assert!(cfg.validate().is_ok());
        cfg.capacity_factor_eval = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RouterConfig::new(1);
        cfg.top_k = 2;
        assert!(cfg.validate().is_err());
    }
}
