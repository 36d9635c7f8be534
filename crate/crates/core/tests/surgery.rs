use moe_forge::checkpoint;
use moe_forge::model::{ArchConfig, ModelParams};
use moe_forge::surgery::{aoe_merge, prune_experts, prune_selection, PruneStrategy, UtilizationCounts};
use proptest::prelude::*;

fn same(a: &ModelParams, b: &ModelParams) -> bool {
    a.arch == b.arch
        && a.tensors().len() == b.tensors().len()
        && a.tensors().iter().zip(b.tensors()).all(|(x, y)| x.name == y.name && x.tensor.bit_eq(&y.tensor))
}

/// Utilization that ranks experts `keep` above all others in every layer.
fn favouring(arch: &ArchConfig, keep: &[usize]) -> UtilizationCounts {
    let mut c = UtilizationCounts::new(arch);
    for layer in &mut c.counts {
        for &k in keep {
            layer[k] = 100 + k as u64;
        }
    }
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn merge_then_prune_recovers_each_donor(e in 1usize..5, sa in any::<u64>(), sb in any::<u64>()) {
        let arch = ArchConfig::toy(20, e);
        let a = ModelParams::build(&arch, sa).unwrap();
        let b = ModelParams::build(&arch, sb).unwrap();
        let merged = aoe_merge(&a, &b).unwrap();
        prop_assert_eq!(merged.arch.num_experts, 2 * e);

        let first: Vec<usize> = (0..e).collect();
        let second: Vec<usize> = (e..2 * e).collect();
        let pa = prune_experts(&merged, e, &PruneStrategy::TopUtilization(&favouring(&merged.arch, &first))).unwrap();
        let pb = prune_experts(&merged, e, &PruneStrategy::TopUtilization(&favouring(&merged.arch, &second))).unwrap();
        // Expert weights come back exactly; shared weights are the donors' average.
        for (x, y) in pa.tensors().iter().zip(a.tensors()) {
            if x.name.contains("expert") {
                prop_assert!(x.tensor.bit_eq(&y.tensor), "{}", x.name);
            }
        }
        for (x, y) in pb.tensors().iter().zip(b.tensors()) {
            if x.name.contains("expert") {
                prop_assert!(x.tensor.bit_eq(&y.tensor), "{}", x.name);
            }
        }
    }

    #[test]
    fn merge_is_symmetric_up_to_expert_order(sa in any::<u64>(), sb in any::<u64>()) {
        let arch = ArchConfig::toy(20, 2);
        let a = ModelParams::build(&arch, sa).unwrap();
        let b = ModelParams::build(&arch, sb).unwrap();
        let ab = aoe_merge(&a, &b).unwrap();
        let ba = aoe_merge(&b, &a).unwrap();
        let swap = favouring(&ab.arch, &[2, 3]);
        let keep_b_from_ab = prune_experts(&ab, 2, &PruneStrategy::TopUtilization(&swap)).unwrap();
        let keep_b_from_ba = prune_experts(&ba, 2, &PruneStrategy::TopUtilization(&favouring(&ba.arch, &[0, 1]))).unwrap();
        prop_assert!(same(&keep_b_from_ab, &keep_b_from_ba));
    }

    #[test]
    fn selection_has_k_distinct_sorted_experts(e in 1usize..9, k in 1usize..9, seed in any::<u64>()) {
        prop_assume!(k <= e);
        let arch = ArchConfig::toy(20, e);
        let sel = prune_selection(&arch, k, &PruneStrategy::Random { seed }).unwrap();
        for idx in sel.values() {
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(idx.iter().all(|&i| i < e));
        }
    }
}

#[test]
fn pruned_checkpoint_round_trips() {
    let arch = ArchConfig::toy(20, 4);
    let model = ModelParams::build(&arch, 8).unwrap();
    let pruned = prune_experts(&model, 2, &PruneStrategy::Random { seed: 1 }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&pruned, dir.path()).unwrap();
    assert!(checkpoint::validate(dir.path()).unwrap().is_valid());
    assert!(same(&checkpoint::load(dir.path()).unwrap(), &pruned));
}

#[test]
fn pruning_more_experts_than_exist_fails() {
    let model = ModelParams::build(&ArchConfig::toy(20, 2), 0).unwrap();
    assert!(prune_experts(&model, 3, &PruneStrategy::Random { seed: 0 }).is_err());
    assert!(prune_experts(&model, 0, &PruneStrategy::Random { seed: 0 }).is_err());
}
