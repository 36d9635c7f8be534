//! Gate, balancing loss, and the MoE feed-forward layer on the tape, plus
//! tape-free dispatch/combine used by the parallel simulator.

use rand::Rng;

use super::{assign, capacity, Phase, RouterConfig, RoutingDecision, SecondRoute};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{init_truncated_normal, kernels, Tensor};

const JITTER_TAG: u64 = 1;
const RTS_TAG: u64 = 2;

/// Weights of one expert FFN: `relu(x·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ExpertParams {
    pub fn init(d_model: usize, d_ff: usize, seed: u64) -> Result<Self> {
        let std = (2.0 / (d_model + d_ff) as f64).sqrt();
        Ok(Self {
            w1: init_truncated_normal(&[d_model, d_ff], 0.0, std, seed::derive(seed, 0))?.with_requires_grad(true),
            b1: Tensor::zeros(&[d_ff]).with_requires_grad(true),
            w2: init_truncated_normal(&[d_ff, d_model], 0.0, std, seed::derive(seed, 1))?.with_requires_grad(true),
            b2: Tensor::zeros(&[d_model]).with_requires_grad(true),
        })
    }

    pub fn register(&self, tape: &mut Tape) -> ExpertVars {
        ExpertVars {
            w1: tape.param(&self.w1),
            b1: tape.param(&self.b1),
            w2: tape.param(&self.w2),
            b2: tape.param(&self.b2),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.shape()[0]
    }

    /// Tape-free forward of `rows` tokens, bit-identical to the tape path.
    pub fn forward_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (d, h) = (self.w1.shape()[0], self.w1.shape()[1]);
        let mut hidden = kernels::matmul(x, self.w1.data(), rows, d, h);
        for row in hidden.chunks_mut(h) {
            row.iter_mut().zip(self.b1.data()).for_each(|(v, b)| *v = (*v + b).max(0.0));
        }
        let mut out = kernels::matmul(&hidden, self.w2.data(), rows, h, d);
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(self.b2.data()).for_each(|(v, b)| *v += b);
        }
        out
    }
}

impl ExpertVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w1)?;
        let h = tape.add_bias(h, self.b1)?;
        let h = tape.relu(h)?;
        let y = tape.matmul(h, self.w2)?;
        tape.add_bias(y, self.b2)
    }
}

/// Gate matrix `[d, E]` and the expert FFNs of one MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayerParams {
    pub gate: Tensor,
    pub experts: Vec<ExpertParams>,
}

#[derive(Debug, Clone)]
pub struct MoeLayerVars {
    pub gate: Var,
    pub experts: Vec<ExpertVars>,
}

impl MoeLayerParams {
    pub fn init(d_model: usize, d_ff: usize, num_experts: usize, seed: u64) -> Result<Self> {
        let std = (2.0 / (d_model + num_experts) as f64).sqrt();
        let gate = init_truncated_normal(&[d_model, num_experts], 0.0, std, seed::derive(seed, 0))?;
        let experts = (0..num_experts)
            .map(|e| ExpertParams::init(d_model, d_ff, seed::derive_path(seed, &[1, e as u64])))
            .collect::<Result<_>>()?;
        Ok(Self {
            gate: gate.with_requires_grad(true),
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn register(&self, tape: &mut Tape) -> MoeLayerVars {
        MoeLayerVars {
            gate: tape.param(&self.gate),
            experts: self.experts.iter().map(|e| e.register(tape)).collect(),
        }
    }
}

pub struct GateOutput {
    /// `[T, E]` softmax probabilities.
    pub probs: Var,
    /// `[T, K]` combine weights of the routing slots.
    pub weights: Var,
    pub decision: RoutingDecision,
}

fn argmax(row: &[f64], skip: Option<usize>) -> usize {
    let mut best = usize::MAX;
    for (j, &v) in row.iter().enumerate() {
        if Some(j) == skip {
            continue;
        }
        // Strict comparison keeps the lowest index on ties.
        if best == usize::MAX || v > row[best] {
            best = j;
        }
    }
    best
}

/// Jittered gate logits, softmax, argmax choice, and capacity assignment.
///
/// `step_seed` should be unique per (step, layer); jitter and RTS streams are
/// derived from it.
pub fn gate_forward(tape: &mut Tape, x: Var, gate: Var, cfg: &RouterConfig, phase: Phase, step_seed: u64) -> Result<GateOutput> {
    cfg.validate()?;
    let [t, d] = *tape.shape(x) else {
        return Err(Error::shape("gate_forward", format!("input {:?}", tape.shape(x))));
    };
    let e = cfg.num_experts;
    if tape.shape(gate) != [d, e] {
        return Err(Error::shape("gate_forward", format!("gate {:?} for [{d},{e}]", tape.shape(gate))));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("cannot route an empty batch".into()));
    }
    let gate_in = if phase == Phase::Train && cfg.jitter_eps > 0.0 {
        let mut rng = seed::rng(seed::derive(step_seed, JITTER_TAG));
        let eps = cfg.jitter_eps;
        let noise: Vec<f64> = (0..t * d).map(|_| rng.random_range(1.0 - eps..=1.0 + eps)).collect();
        let noise = tape.constant(Tensor::new(vec![t, d], noise)?);
        tape.mul(x, noise)?
    } else {
        x
    };
    let logits = tape.matmul(gate_in, gate)?;
    let probs = tape.softmax(logits)?;

    let pv = tape.value(probs);
    let first: Vec<usize> = pv.chunks(e).map(|r| argmax(r, None)).collect();
    let second: Option<Vec<usize>> =
        (cfg.top_k == 2).then(|| pv.chunks(e).zip(&first).map(|(r, &f)| argmax(r, Some(f))).collect());
    let cap = capacity(t, cfg, phase);
    let (slot, second_slot) = assign(
        cfg.effective_mode(phase),
        &first,
        second.as_deref(),
        cap,
        seed::derive(step_seed, RTS_TAG),
    )?;

    let p1 = tape.pick_per_row(probs, &first)?;
    let gate_prob = tape.value(p1).to_vec();
    let (weights, second_route) = match (second, second_slot) {
        (Some(second), Some(second_slot)) => {
            let p2 = tape.pick_per_row(probs, &second)?;
            let second_prob = tape.value(p2).to_vec();
            let p1 = tape.reshape(p1, &[t, 1])?;
            let p2 = tape.reshape(p2, &[t, 1])?;
            let den = tape.add(p1, p2)?;
            let num = tape.concat_cols(&[p1, p2])?;
            let den = tape.concat_cols(&[den, den])?;
            let w = tape.div(num, den)?;
            let route = SecondRoute {
                expert: second,
                gate_prob: second_prob,
                slot: second_slot,
            };
            (w, Some(route))
        }
        _ => (tape.reshape(p1, &[t, 1])?, None),
    };
    Ok(GateOutput {
        probs,
        weights,
        decision: RoutingDecision {
            num_experts: e,
            capacity: cap,
            expert: first,
            gate_prob,
            slot,
            second: second_route,
        },
    })
}

fn usage_fractions(expert: &[usize], num_experts: usize) -> Vec<f64> {
    let mut f = vec![0.0; num_experts];
    for &e in expert {
        f[e] += 1.0;
    }
    let t = expert.len() as f64;
    f.iter_mut().for_each(|v| *v /= t);
    f
}

/// `coeff · E · Σ_e f_e · p̄_e` where `f_e` is the (non-differentiable)
/// fraction of tokens whose argmax is `e` and `p̄_e` the mean gate probability.
pub fn balance_loss(tape: &mut Tape, probs: Var, expert: &[usize], coeff: f64) -> Result<Var> {
    let [t, e] = *tape.shape(probs) else {
        return Err(Error::shape("balance_loss", "probabilities must be [T, E]"));
    };
    if expert.len() != t {
        return Err(Error::shape("balance_loss", format!("{} choices for {t} tokens", expert.len())));
    }
    let f = tape.constant(Tensor::new(vec![e], usage_fractions(expert, e))?);
    let mean = tape.mean_rows(probs)?;
    let prod = tape.mul(f, mean)?;
    let s = tape.sum(prod)?;
    tape.scale(s, coeff * e as f64)
}

/// Value of [`balance_loss`] from plain probabilities.
pub fn balance_loss_value(probs: &Tensor, coeff: f64) -> Result<f64> {
    let (t, e) = probs.dims2()?;
    let choice: Vec<usize> = probs.data().chunks(e).map(|r| argmax(r, None)).collect();
    let f = usage_fractions(&choice, e);
    let mut mean = vec![0.0; e];
    for row in probs.data().chunks(e) {
        mean.iter_mut().zip(row).for_each(|(m, p)| *m += p);
    }
    Ok(coeff * e as f64 * f.iter().zip(&mean).map(|(f, m)| f * m / t as f64).sum::<f64>())
}

pub struct MoeOutput {
    /// `[T, d]` layer output; dropped tokens carry the layer input.
    pub y: Var,
    /// Weighted balancing loss, ready to add to the task loss.
    pub balance_loss: Var,
    pub decision: RoutingDecision,
}

/// Routes `x` (`[T, d]`, flattened tokens), runs each expert on its kept
/// tokens, and combines the results weighted by the gate.
pub fn moe_layer_forward(
    tape: &mut Tape,
    x: Var,
    layer: &MoeLayerVars,
    cfg: &RouterConfig,
    phase: Phase,
    step_seed: u64,
) -> Result<MoeOutput> {
    moe_layer_forward_with_residual(tape, x, x, layer, cfg, phase, step_seed)
}

/// As [`moe_layer_forward`], but dropped tokens take the matching row of
/// `residual` instead of the layer input.
pub fn moe_layer_forward_with_residual(
    tape: &mut Tape,
    x: Var,
    residual: Var,
    layer: &MoeLayerVars,
    cfg: &RouterConfig,
    phase: Phase,
    step_seed: u64,
) -> Result<MoeOutput> {
    if layer.experts.len() != cfg.num_experts {
        return Err(Error::shape(
            "moe_layer_forward",
            format!("{} experts for router over {}", layer.experts.len(), cfg.num_experts),
        ));
    }
    let gate = gate_forward(tape, x, layer.gate, cfg, phase, step_seed)?;
    let decision = gate.decision;
    let balance = balance_loss(tape, gate.probs, &decision.expert, cfg.balance_coeff)?;

    // Experts only process occupied slots; each slot's row keeps its order.
    let occupancy = decision.kept_per_expert();
    let mut offsets = Vec::with_capacity(cfg.num_experts);
    let mut parts = Vec::new();
    let mut total = 0;
    let buffer = decision.buffer_rows();
    for (e, expert) in layer.experts.iter().enumerate() {
        offsets.push(total);
        let n = occupancy[e];
        if n == 0 {
            continue;
        }
        let mut index = vec![None; n];
        for (t, routes) in buffer.iter().enumerate() {
            for r in routes.iter().flatten() {
                if r / decision.capacity == e {
                    index[r % decision.capacity] = Some(t);
                }
            }
        }
        let inputs = tape.gather_rows(x, &index)?;
        parts.push(expert.forward(tape, inputs)?);
        total += n;
    }
    let rows: Vec<Vec<Option<usize>>> = buffer
        .iter()
        .map(|routes| {
            routes
                .iter()
                .map(|r| r.map(|r| offsets[r / decision.capacity] + r % decision.capacity))
                .collect()
        })
        .collect();
    let expert_out = tape.concat_rows(&parts)?;
    let y = tape.combine(expert_out, gate.weights, residual, &rows)?;
    Ok(MoeOutput {
        y,
        balance_loss: balance,
        decision,
    })
}

/// Tokens laid out as `[E, capacity, d]`; unoccupied slots are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchBuffer {
    pub num_experts: usize,
    pub capacity: usize,
    pub d_model: usize,
    pub data: Vec<f64>,
    pub occupancy: Vec<usize>,
}

impl DispatchBuffer {
    pub fn expert_rows(&self, e: usize) -> &[f64] {
        let n = self.capacity * self.d_model;
        &self.data[e * n..(e + 1) * n]
    }

    pub fn expert_rows_mut(&mut self, e: usize) -> &mut [f64] {
        let n = self.capacity * self.d_model;
        &mut self.data[e * n..(e + 1) * n]
    }
}

pub fn dispatch(x: &Tensor, decision: &RoutingDecision) -> Result<DispatchBuffer> {
    let (t, d) = x.dims2()?;
    if t != decision.tokens() {
        return Err(Error::shape("dispatch", format!("{t} rows for {} routed tokens", decision.tokens())));
    }
    let e = decision.num_experts;
    let mut data = vec![0.0; e * decision.capacity * d];
    for (tok, routes) in decision.buffer_rows().iter().enumerate() {
        for r in routes.iter().flatten() {
            data[r * d..(r + 1) * d].copy_from_slice(x.row(tok));
        }
    }
    Ok(DispatchBuffer {
        num_experts: e,
        capacity: decision.capacity,
        d_model: d,
        data,
        occupancy: decision.kept_per_expert(),
    })
}

/// Inverse of [`dispatch`] applied to expert outputs.
pub fn combine(expert_out: &DispatchBuffer, decision: &RoutingDecision, residual: &Tensor) -> Result<Tensor> {
    let (t, d) = residual.dims2()?;
    if t != decision.tokens() || d != expert_out.d_model || expert_out.capacity != decision.capacity {
        return Err(Error::shape("combine", "buffer, decision, and residual disagree"));
    }
    let y = kernels::combine(
        &expert_out.data,
        &decision.combine_weights(),
        residual.data(),
        &decision.buffer_rows(),
        d,
    );
    Tensor::new(vec![t, d], y)
}
