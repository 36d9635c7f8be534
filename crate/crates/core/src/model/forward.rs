use std::collections::HashMap;

use super::{ArchConfig, ModelParams};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::routing::{moe_layer_forward_with_residual, ExpertVars, MoeLayerVars, Phase, RouterConfig, RoutingDecision};
use crate::seed;
use crate::tensor::Tensor;

const MASKED: f64 = -1e9;

/// Model weights registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    arch: ArchConfig,
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

pub struct ForwardOutput {
    /// `[Σ tgt_len, V]`, rows in batch order.
    pub logits: Var,
    /// Sum of the balancing losses of all MoE layers.
    pub aux_loss: Var,
    /// `(global layer, decision)` per MoE layer in forward order.
    pub decisions: Vec<(usize, RoutingDecision)>,
}

/// Fixed sinusoidal encoding, `[len, d]`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Additive attention mask over flattened sequences: query `i` of sequence
/// `s` sees keys of the same sequence only (and, if `causal`, not later ones).
fn block_mask(q_lens: &[usize], k_lens: &[usize], causal: bool) -> Result<Tensor> {
    let (tq, tk) = (q_lens.iter().sum::<usize>(), k_lens.iter().sum::<usize>());
    let mut m = vec![MASKED; tq * tk];
    let (mut q0, mut k0) = (0, 0);
    for (&lq, &lk) in q_lens.iter().zip(k_lens) {
        for i in 0..lq {
            let visible = if causal { (i + 1).min(lk) } else { lk };
            let row = (q0 + i) * tk + k0;
            m[row..row + visible].iter_mut().for_each(|v| *v = 0.0);
        }
        q0 += lq;
        k0 += lk;
    }
    Tensor::new(vec![tq, tk], m)
}

impl BoundModel {
    pub fn bind(params: &ModelParams, tape: &mut Tape) -> Self {
        let vars = params.tensors().iter().map(|t| tape.param(&t.tensor)).collect();
        let index = params.tensors().iter().enumerate().map(|(i, t)| (t.name.clone(), i)).collect();
        Self {
            arch: params.arch.clone(),
            vars,
            index,
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no tensor named `{name}`")))
    }

    fn check_router(&self, cfg: &RouterConfig) -> Result<()> {
        if cfg.num_experts != self.arch.num_experts {
            return Err(Error::ArchMismatch(format!(
                "router over {} experts, model has {}",
                cfg.num_experts, self.arch.num_experts
            )));
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, seqs: &[Vec<usize>]) -> Result<Var> {
        let d = self.arch.d_model;
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            if s.is_empty() {
                return Err(Error::InvalidArgument("empty sequence".into()));
            }
            if let Some(&id) = s.iter().find(|&&id| id >= self.arch.vocab) {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.arch.vocab,
                });
            }
            ids.extend_from_slice(s);
            pos.extend(sinusoidal_positions(s.len(), d));
        }
        let table = self.var("embed")?;
        let x = tape.embed(table, &ids)?;
        let x = tape.scale(x, (d as f64).sqrt())?;
        let pe = tape.constant(Tensor::new(vec![ids.len(), d], pos)?);
        tape.add(x, pe)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let g = self.var(&format!("{prefix}.g"))?;
        let b = self.var(&format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b)
    }

    fn linear(&self, tape: &mut Tape, x: Var, prefix: &str, p: &str) -> Result<Var> {
        let y = tape.matmul(x, self.var(&format!("{prefix}.w{p}"))?)?;
        tape.add_bias(y, self.var(&format!("{prefix}.b{p}"))?)
    }

    fn attention(&self, tape: &mut Tape, q_in: Var, kv_in: Var, mask: Var, prefix: &str) -> Result<Var> {
        let heads = self.arch.heads;
        let dh = self.arch.d_model / heads;
        let q = self.linear(tape, q_in, prefix, "q")?;
        let k = self.linear(tape, kv_in, prefix, "k")?;
        let v = self.linear(tape, kv_in, prefix, "v")?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, 1.0 / (dh as f64).sqrt())?;
            let s = tape.add(s, mask)?;
            let a = tape.softmax(s)?;
            outs.push(tape.matmul(a, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.linear(tape, o, prefix, "o")
    }

    fn moe_vars(&self, prefix: &str) -> Result<MoeLayerVars> {
        let experts = (0..self.arch.num_experts)
            .map(|e| {
                let q = format!("{prefix}.moe.expert.{e}");
                Ok(ExpertVars {
                    w1: self.var(&format!("{q}.w1"))?,
                    b1: self.var(&format!("{q}.b1"))?,
                    w2: self.var(&format!("{q}.w2"))?,
                    b2: self.var(&format!("{q}.b2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MoeLayerVars {
            gate: self.var(&format!("{prefix}.moe.gate"))?,
            experts,
        })
    }

    /// Residual FFN sublayer; dense or MoE depending on the layer.
    #[allow(clippy::too_many_arguments)]
    fn feed_forward(
        &self,
        tape: &mut Tape,
        h: Var,
        prefix: &str,
        ln: &str,
        local: usize,
        global: usize,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let x = self.layer_norm(tape, h, &format!("{prefix}.{ln}"))?;
        let y = if self.arch.is_moe(local) {
            let vars = self.moe_vars(prefix)?;
            // Dropped tokens contribute nothing, so the residual stream carries them.
            let zeros = tape.constant(Tensor::zeros(tape.shape(x)));
            let out = moe_layer_forward_with_residual(
                tape,
                x,
                zeros,
                &vars,
                ctx.cfg,
                ctx.phase,
                seed::derive(ctx.step_seed, global as u64),
            )?;
            ctx.aux = Some(match ctx.aux {
                Some(a) => tape.add(a, out.balance_loss)?,
                None => out.balance_loss,
            });
            ctx.decisions.push((global, out.decision));
            out.y
        } else {
            ExpertVars {
                w1: self.var(&format!("{prefix}.ffn.w1"))?,
                b1: self.var(&format!("{prefix}.ffn.b1"))?,
                w2: self.var(&format!("{prefix}.ffn.w2"))?,
                b2: self.var(&format!("{prefix}.ffn.b2"))?,
            }
            .forward(tape, x)?
        };
        tape.add(h, y)
    }

    /// Encoder over a batch of source sequences; returns the flattened
    /// final-normed memory `[Σ src_len, d]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        src: &[Vec<usize>],
        cfg: &RouterConfig,
        phase: Phase,
        step_seed: u64,
    ) -> Result<(Var, Vec<(usize, RoutingDecision)>, Option<Var>)> {
        self.check_router(cfg)?;
        let mut ctx = Ctx::new(cfg, phase, step_seed);
        let lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let mask = tape.constant(block_mask(&lens, &lens, false)?);
        let mut h = self.embed(tape, src)?;
        for i in 0..self.arch.enc_layers {
            let p = format!("enc.{i}");
            let x = self.layer_norm(tape, h, &format!("{p}.ln1"))?;
            let a = self.attention(tape, x, x, mask, &format!("{p}.attn"))?;
            h = tape.add(h, a)?;
            h = self.feed_forward(tape, h, &p, "ln2", i, i, &mut ctx)?;
        }
        let memory = self.layer_norm(tape, h, "enc.ln_f")?;
        Ok((memory, ctx.decisions, ctx.aux))
    }

    /// Decoder with teacher forcing over `tgt_in`, attending to `memory`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape,
        memory: Var,
        src_lens: &[usize],
        tgt_in: &[Vec<usize>],
        cfg: &RouterConfig,
        phase: Phase,
        step_seed: u64,
    ) -> Result<(Var, Vec<(usize, RoutingDecision)>, Option<Var>)> {
        self.check_router(cfg)?;
        if src_lens.len() != tgt_in.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sources for {} targets",
                src_lens.len(),
                tgt_in.len()
            )));
        }
        let mut ctx = Ctx::new(cfg, phase, step_seed);
        let lens: Vec<usize> = tgt_in.iter().map(Vec::len).collect();
        let self_mask = tape.constant(block_mask(&lens, &lens, true)?);
        let cross_mask = tape.constant(block_mask(&lens, src_lens, false)?);
        let mut h = self.embed(tape, tgt_in)?;
        let enc = self.arch.enc_layers;
        for i in 0..self.arch.dec_layers {
            let p = format!("dec.{i}");
            let x = self.layer_norm(tape, h, &format!("{p}.ln1"))?;
            let a = self.attention(tape, x, x, self_mask, &format!("{p}.attn"))?;
            h = tape.add(h, a)?;
            let x = self.layer_norm(tape, h, &format!("{p}.ln2"))?;
            let a = self.attention(tape, x, memory, cross_mask, &format!("{p}.xattn"))?;
            h = tape.add(h, a)?;
            h = self.feed_forward(tape, h, &p, "ln3", i, enc + i, &mut ctx)?;
        }
        let h = self.layer_norm(tape, h, "dec.ln_f")?;
        let out = if self.arch.tied_embeddings {
            let e = self.var("embed")?;
            tape.transpose(e)?
        } else {
            self.var("lm_head")?
        };
        let logits = tape.matmul(h, out)?;
        Ok((logits, ctx.decisions, ctx.aux))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        src: &[Vec<usize>],
        tgt_in: &[Vec<usize>],
        cfg: &RouterConfig,
        phase: Phase,
        step_seed: u64,
    ) -> Result<ForwardOutput> {
        let (memory, mut decisions, enc_aux) = self.encode(tape, src, cfg, phase, step_seed)?;
        let src_lens: Vec<usize> = src.iter().map(Vec::len).collect();
        let (logits, dec_decisions, dec_aux) = self.decode(tape, memory, &src_lens, tgt_in, cfg, phase, step_seed)?;
        decisions.extend(dec_decisions);
        let aux_loss = match (enc_aux, dec_aux) {
            (Some(a), Some(b)) => tape.add(a, b)?,
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => tape.constant(Tensor::scalar(0.0)),
        };
        Ok(ForwardOutput {
            logits,
            aux_loss,
            decisions,
        })
    }
}

struct Ctx<'a> {
    cfg: &'a RouterConfig,
    phase: Phase,
    step_seed: u64,
    aux: Option<Var>,
    decisions: Vec<(usize, RoutingDecision)>,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a RouterConfig, phase: Phase, step_seed: u64) -> Self {
        Self {
            cfg,
            phase,
            step_seed,
            aux: None,
            decisions: Vec::new(),
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Greedy decoding with eval-phase routing. The output excludes `bos` and
/// the terminating `eos`.
pub fn generate(
    model: &ModelParams,
    src: &[usize],
    max_len: usize,
    bos: usize,
    eos: usize,
    cfg: &RouterConfig,
) -> Result<Vec<usize>> {
    Ok(generate_batch(model, &[src.to_vec()], max_len, bos, eos, cfg)?.remove(0))
}

/// Greedy decoding of several sources at once. Routing capacity is shared
/// across the unfinished sequences of each step, so results can differ from
/// decoding each source alone when experts overflow.
pub fn generate_batch(
    model: &ModelParams,
    srcs: &[Vec<usize>],
    max_len: usize,
    bos: usize,
    eos: usize,
    cfg: &RouterConfig,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); srcs.len()];
    if max_len == 0 || srcs.is_empty() {
        return Ok(out);
    }
    let mut tape = Tape::new();
    let bound = BoundModel::bind(model, &mut tape);
    let (memory, _, _) = bound.encode(&mut tape, srcs, cfg, Phase::Eval, 0)?;
    let memory = tape.to_tensor(memory);
    let d = model.arch.d_model;
    let src_lens: Vec<usize> = srcs.iter().map(Vec::len).collect();
    let offsets: Vec<usize> = src_lens.iter().scan(0, |acc, &l| Some(std::mem::replace(acc, *acc + l))).collect();
    let mut done = vec![false; srcs.len()];
    for _ in 0..max_len {
        let active: Vec<usize> = (0..srcs.len()).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let mut mem = Vec::new();
        for &i in &active {
            mem.extend_from_slice(&memory.data()[offsets[i] * d..(offsets[i] + src_lens[i]) * d]);
        }
        let lens: Vec<usize> = active.iter().map(|&i| src_lens[i]).collect();
        let prefixes: Vec<Vec<usize>> = active
            .iter()
            .map(|&i| std::iter::once(bos).chain(out[i].iter().copied()).collect())
            .collect();
        let mut step = Tape::new();
        let bound = BoundModel::bind(model, &mut step);
        let mem = step.constant(Tensor::new(vec![lens.iter().sum(), d], mem)?);
        let (logits, _, _) = bound.decode(&mut step, mem, &lens, &prefixes, cfg, Phase::Eval, 0)?;
        let v = model.arch.vocab;
        let values = step.value(logits);
        let mut row = 0;
        for (&i, p) in active.iter().zip(&prefixes) {
            row += p.len();
            let next = argmax(&values[(row - 1) * v..row * v]);
            if next == eos {
                done[i] = true;
            } else {
                out[i].push(next);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_blocks_and_causality() {
        let m = block_mask(&[2, 1], &[2, 1], true).unwrap();
        let allowed: Vec<bool> = m.data().iter().map(|&v| v == 0.0).collect();
        assert_eq!(
            allowed,
            vec![true, false, false, true, true, false, false, false, true]
        );
        let x = block_mask(&[1, 2], &[3, 1], false).unwrap();
        assert_eq!(x.row(0), &[0.0, 0.0, 0.0, MASKED]);
        assert_eq!(x.row(2), &[MASKED, MASKED, MASKED, 0.0]);
    }

    #[test]
    fn positions_start_with_sin_cos() {
        let pe = sinusoidal_positions(2, 4);
        assert_eq!(&pe[..4], &[0.0, 1.0, 0.0, 1.0]);
        assert!((pe[4] - 1f64.sin()).abs() < 1e-15);
        assert!((pe[6] - (0.01f64).sin()).abs() < 1e-15);
    }
}
