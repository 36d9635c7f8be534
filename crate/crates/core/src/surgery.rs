//! Checkpoint surgery: aggregation of experts from two checkpoints, expert
//! utilization counting, and expert pruning.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{ArchConfig, BoundModel, ModelParams, NamedTensor, Role};
use crate::routing::{Phase, RouterConfig};
use crate::seed;
use crate::tensor::Tensor;

fn expert_name(prefix: &str, idx: usize, suffix: &str) -> String {
    format!("{prefix}.moe.expert.{idx}.{suffix}")
}

/// Splits `enc.1.moe.expert.3.w1` into (`enc.1`, `w1`).
fn split_expert_name(name: &str) -> Result<(&str, &str)> {
    let (prefix, rest) = name
        .split_once(".moe.expert.")
        .ok_or_else(|| Error::Malformed(format!("`{name}` is not an expert tensor")))?;
    let (_, suffix) = rest
        .split_once('.')
        .ok_or_else(|| Error::Malformed(format!("`{name}` is not an expert tensor")))?;
    Ok((prefix, suffix))
}

fn select_columns(t: &Tensor, cols: &[usize]) -> Result<Tensor> {
    let (rows, n) = t.dims2()?;
    let mut out = Vec::with_capacity(rows * cols.len());
    for r in 0..rows {
        out.extend(cols.iter().map(|&c| t.data()[r * n + c]));
    }
    Ok(Tensor::new(vec![rows, cols.len()], out)?.with_requires_grad(true))
}

fn concat_columns(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, na) = a.dims2()?;
    let (rb, nb) = b.dims2()?;
    if ra != rb {
        return Err(Error::ArchMismatch(format!("gate rows {ra} vs {rb}")));
    }
    let mut out = Vec::with_capacity(ra * (na + nb));
    for r in 0..ra {
        out.extend_from_slice(a.row(r));
        out.extend_from_slice(b.row(r));
    }
    Ok(Tensor::new(vec![ra, na + nb], out)?.with_requires_grad(true))
}

/// Aggregation of experts: non-expert weights averaged, gate columns
/// concatenated (a first), experts of `a` at `[0, E_a)` and of `b` at
/// `[E_a, E_a + E_b)`.
pub fn aoe_merge(a: &ModelParams, b: &ModelParams) -> Result<ModelParams> {
    if a.arch.with_experts(0) != b.arch.with_experts(0) {
        return Err(Error::ArchMismatch(format!(
            "checkpoints differ beyond expert count: {:?} vs {:?}",
            a.arch, b.arch
        )));
    }
    let (ea, eb) = (a.arch.num_experts, b.arch.num_experts);
    let arch = a.arch.with_experts(ea + eb);
    let mut tensors = Vec::with_capacity(a.tensors().len() + b.tensors().len());
    for t in a.tensors() {
        match t.role {
            Role::NonExpert => {
                let other = b.get(&t.name)?;
                if other.shape() != t.tensor.shape() {
                    return Err(Error::ArchMismatch(format!("`{}` shapes differ", t.name)));
                }
                let mean = t.tensor.data().iter().zip(other.data()).map(|(x, y)| (x + y) / 2.0).collect();
                tensors.push(NamedTensor {
                    name: t.name.clone(),
                    role: t.role,
                    tensor: Tensor::new(t.tensor.shape().to_vec(), mean)?.with_requires_grad(true),
                });
            }
            Role::Gate { .. } => tensors.push(NamedTensor {
                name: t.name.clone(),
                role: t.role,
                tensor: concat_columns(&t.tensor, b.get(&t.name)?)?,
            }),
            Role::Expert { .. } => tensors.push(t.clone()),
        }
    }
    for t in b.tensors() {
        if let Role::Expert { layer, idx } = t.role {
            let (prefix, suffix) = split_expert_name(&t.name)?;
            tensors.push(NamedTensor {
                name: expert_name(prefix, ea + idx, suffix),
                role: Role::Expert { layer, idx: ea + idx },
                tensor: t.tensor.clone(),
            });
        }
    }
    ModelParams::from_tensors(arch, tensors)
}

/// Per MoE layer, how many tokens chose each expert at the argmax, before
/// capacity filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilizationCounts {
    /// Global layer indices, in forward order.
    pub layers: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
    /// Tokens routed through each layer.
    pub tokens: Vec<u64>,
}

impl UtilizationCounts {
    pub fn new(arch: &ArchConfig) -> Self {
        let layers = arch.moe_layers();
        let n = layers.len();
        Self {
            layers,
            counts: vec![vec![0; arch.num_experts]; n],
            tokens: vec![0; n],
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&[u64]> {
        self.layers.iter().position(|&l| l == layer).map(|i| self.counts[i].as_slice())
    }

    /// `layer,expert,count` rows.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "layer,expert,count")?;
        for (layer, counts) in self.layers.iter().zip(&self.counts) {
            for (e, c) in counts.iter().enumerate() {
                writeln!(w, "{layer},{e},{c}")?;
            }
        }
        Ok(())
    }
}

/// Runs eval-phase forwards over `(src, tgt_in)` batches and counts argmax choices.
pub fn count_utilization(
    model: &ModelParams,
    batches: &[(Vec<Vec<usize>>, Vec<Vec<usize>>)],
    cfg: &RouterConfig,
) -> Result<UtilizationCounts> {
    let mut counts = UtilizationCounts::new(&model.arch);
    let slot: HashMap<usize, usize> = counts.layers.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    for (src, tgt_in) in batches {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(model, &mut tape);
        let out = bound.forward(&mut tape, src, tgt_in, cfg, Phase::Eval, 0)?;
        for (layer, decision) in out.decisions {
            let i = slot[&layer];
            for &e in &decision.expert {
                counts.counts[i][e] += 1;
            }
            counts.tokens[i] += decision.tokens() as u64;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone)]
pub enum PruneStrategy<'a> {
    /// Each layer keeps its own `k` most used experts; ties go to the lower index.
    TopUtilization(&'a UtilizationCounts),
    /// One uniformly random `k`-subset, applied to every layer.
    Random { seed: u64 },
}

/// Indices of the `k` largest counts, ties to the lower index, sorted ascending.
pub fn top_k_indices(counts: &[u64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut kept = order[..k.min(order.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// Kept expert indices per MoE layer, keyed by global layer index.
pub fn prune_selection(arch: &ArchConfig, k: usize, strategy: &PruneStrategy) -> Result<HashMap<usize, Vec<usize>>> {
    let e = arch.num_experts;
    if k == 0 || k > e {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={e}")));
    }
    let layers = arch.moe_layers();
    match strategy {
        PruneStrategy::TopUtilization(counts) => layers
            .iter()
            .map(|&l| {
                let c = counts
                    .layer(l)
                    .ok_or_else(|| Error::InvalidArgument(format!("no utilization counts for layer {l}")))?;
                if c.len() != e {
                    return Err(Error::InvalidArgument(format!("layer {l}: {} counts for {e} experts", c.len())));
                }
                Ok((l, top_k_indices(c, k)))
            })
            .collect(),
        PruneStrategy::Random { seed } => {
            let mut kept = sample(&mut seed::rng(*seed), e, k).into_vec();
            kept.sort_unstable();
            Ok(layers.into_iter().map(|l| (l, kept.clone())).collect())
        }
    }
}

/// Keeps `k` experts per MoE layer with their gate columns, re-indexed to
/// `[0, k)` in their original order. Non-expert tensors are copied.
pub fn prune_experts(model: &ModelParams, k: usize, strategy: &PruneStrategy) -> Result<ModelParams> {
    let selection = prune_selection(&model.arch, k, strategy)?;
    let mut tensors = Vec::with_capacity(model.tensors().len());
    for t in model.tensors() {
        match t.role {
            Role::NonExpert => tensors.push(t.clone()),
            Role::Gate { layer } => tensors.push(NamedTensor {
                name: t.name.clone(),
                role: t.role,
                tensor: select_columns(&t.tensor, &selection[&layer])?,
            }),
            Role::Expert { layer, idx } => {
                if let Some(new) = selection[&layer].iter().position(|&e| e == idx) {
                    let (prefix, suffix) = split_expert_name(&t.name)?;
                    tensors.push(NamedTensor {
                        name: expert_name(prefix, new, suffix),
                        role: Role::Expert { layer, idx: new },
                        tensor: t.tensor.clone(),
                    });
                }
            }
        }
    }
    ModelParams::from_tensors(model.arch.with_experts(k), tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(e: usize, seed: u64) -> ModelParams {
        ModelParams::build(&ArchConfig::toy(20, e), seed).unwrap()
    }

    #[test]
    fn top_k_sorts_by_count_then_index() {
        assert_eq!(top_k_indices(&[10, 0, 7, 3], 2), vec![0, 2]);
        assert_eq!(top_k_indices(&[5, 5, 5, 1], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0, 2, 2, 9], 3), vec![1, 2, 3]);
    }

    #[test]
    fn merge_shapes_and_layout() {
        let m = aoe_merge(&toy(2, 1), &toy(2, 2)).unwrap();
        assert_eq!(m.arch.num_experts, 4);
        assert_eq!(m.get("enc.1.moe.gate").unwrap().shape(), &[16, 4]);
        assert_eq!(m.get("enc.1.moe.expert.3.w1").unwrap(), toy(2, 2).get("enc.1.moe.expert.1.w1").unwrap());
    }

    #[test]
    fn merge_averages_non_expert_weights() {
        let (a, b) = (toy(1, 3), toy(1, 4));
        let m = aoe_merge(&a, &b).unwrap();
        let (wa, wb, wm) = (a.get("enc.0.attn.wq").unwrap(), b.get("enc.0.attn.wq").unwrap(), m.get("enc.0.attn.wq").unwrap());
        for i in 0..wm.numel() {
            assert_eq!(wm.data()[i], (wa.data()[i] + wb.data()[i]) / 2.0);
        }
        let ab = aoe_merge(&b, &a).unwrap();
        for t in m.tensors().iter().filter(|t| t.role == Role::NonExpert) {
            assert!(t.tensor.bit_eq(ab.get(&t.name).unwrap()));
        }
    }

    #[test]
    fn merge_rejects_mismatched_arch() {
        let other = ModelParams::build(&ArchConfig::toy(21, 2), 0).unwrap();
        assert!(matches!(aoe_merge(&toy(2, 0), &other), Err(Error::ArchMismatch(_))));
    }

    #[test]
    fn prune_identity_and_inverse_of_merge() {
        let a = toy(2, 5);
        let counts = UtilizationCounts {
            layers: vec![1, 3],
            counts: vec![vec![3, 4], vec![1, 0]],
            tokens: vec![7, 1],
        };
        let same = prune_experts(&a, 2, &PruneStrategy::TopUtilization(&counts)).unwrap();
        assert_eq!(same, a);

        let m = aoe_merge(&a, &toy(2, 6)).unwrap();
        let first = UtilizationCounts {
            layers: vec![1, 3],
            counts: vec![vec![9, 9, 0, 0]; 2],
            tokens: vec![18, 18],
        };
        let back = prune_experts(&m, 2, &PruneStrategy::TopUtilization(&first)).unwrap();
        for t in back.tensors() {
            match t.role {
                Role::NonExpert => assert!(t.tensor.bit_eq(m.get(&t.name).unwrap())),
                _ => assert!(t.tensor.bit_eq(a.get(&t.name).unwrap()), "{}", t.name),
            }
        }
    }

    #[test]
    fn random_prune_uses_one_subset() {
        let m = toy(4, 1);
        let sel = prune_selection(&m.arch, 2, &PruneStrategy::Random { seed: 3 }).unwrap();
        assert_eq!(sel[&1], sel[&3]);
        assert_eq!(sel[&1].len(), 2);
        assert!(prune_experts(&m, 0, &PruneStrategy::Random { seed: 3 }).is_err());
        assert!(prune_experts(&m, 5, &PruneStrategy::Random { seed: 3 }).is_err());
        let empty = UtilizationCounts::new(&ArchConfig::toy(20, 3));
        assert!(prune_experts(&m, 2, &PruneStrategy::TopUtilization(&empty)).is_err());
    }

    #[test]
    fn single_token_counts_once_per_layer() {
        let m = toy(3, 2);
        let cfg = RouterConfig::new(3);
        let c = count_utilization(&m, &[(vec![vec![5]], vec![vec![0]])], &cfg).unwrap();
        for row in &c.counts {
            assert_eq!(row.iter().sum::<u64>(), 1);
        }
        let mut csv = Vec::new();
        c.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 1 + 2 * 3);
    }
}
