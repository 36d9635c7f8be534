use moe_forge::autograd::Tape;
use moe_forge::parallel::{
    a2a_traffic, make_ranks, max_model_size, memory_per_gpu, simulate_expert_parallel_step, A2aDirection, ParallelPlan,
};
use moe_forge::routing::{moe_layer_forward, AssignmentMode, MoeLayerParams, Phase, RouterConfig};
use moe_forge::seed;
use moe_forge::tensor::init_truncated_normal;
use proptest::prelude::*;

fn plans() -> impl Strategy<Value = ParallelPlan> {
    (0u32..5, 0u32..4, 0u32..3, prop::bool::ANY, prop::bool::ANY).prop_filter_map("invalid plan", |(n, ep, mp, z, off)| {
        let plan = ParallelPlan {
            world_size: 1 << n,
            expert_parallel: 1 << ep,
            model_parallel: 1 << mp,
            zero_stage: if z { 2 } else { 0 },
            offload: off,
        };
        plan.validate().ok().map(|_| plan)
    })
}

proptest! {
    #[test]
    fn state_bytes_split_two_two_twelve(plan in plans(), p_ne in 1e3f64..1e9, p_e in 0f64..1e10) {
        let m = memory_per_gpu(&plan, p_ne, p_e).unwrap();
        if plan.zero_stage == 0 {
            prop_assert!((m.optimizer_grad_share() - 0.875).abs() < 1e-12);
        }
        let state = m.gradients.bytes + m.optimizer_states.bytes;
        prop_assert!((m.optimizer_states.bytes / state - 12.0 / 14.0).abs() < 1e-12);
        if plan.offload {
            let params = m.nonexpert_params.bytes + m.expert_params.bytes;
            prop_assert!((m.gpu_bytes() - params).abs() <= 1e-12 * params);
        }
    }

    #[test]
    fn zero2_never_uses_more_gpu_memory(plan in plans(), p_ne in 1e3f64..1e9, p_e in 0f64..1e10) {
        let z0 = memory_per_gpu(&ParallelPlan { zero_stage: 0, ..plan }, p_ne, p_e).unwrap();
        let z2 = memory_per_gpu(&ParallelPlan { zero_stage: 2, ..plan }, p_ne, p_e).unwrap();
        prop_assert!(z2.gpu_bytes() <= z0.gpu_bytes() * (1.0 + 1e-12));
    }

    #[test]
    fn single_gpu_offload_ratio_is_eight(p_ne in 1e3f64..1e8, per_expert in 1e3f64..1e8) {
        let base = ParallelPlan::single_gpu();
        let budget = 2.0 * 16.0 * p_ne + 64.0 * per_expert;
        let a = max_model_size(&base, budget, p_ne, per_expert).unwrap();
        let b = max_model_size(&ParallelPlan { offload: true, ..base }, budget, p_ne, per_expert).unwrap();
        prop_assert!((b.continuous_params / a.continuous_params - 8.0).abs() < 1e-9);
        prop_assert!(b.num_experts >= a.num_experts);
    }

    #[test]
    fn a2a_traffic_depends_only_on_shapes(
        ep_log in 1u32..3, per in 1usize..3, t in 1usize..20, d in 1usize..5, rts in prop::bool::ANY, s in any::<u64>(),
    ) {
        let ep = 1usize << ep_log;
        let e = ep * per;
        let cfg = RouterConfig::new(e).with_mode(if rts { AssignmentMode::Rts } else { AssignmentMode::Plain });
        let layer = MoeLayerParams::init(d, 2 * d, e, s).unwrap();
        let xs = (0..ep).map(|r| init_truncated_normal(&[t, d], 0.0, 1.0, seed::derive(s, r as u64)).unwrap()).collect();
        let ranks = make_ranks(e, xs).unwrap();
        let sim = simulate_expert_parallel_step(&layer, &ranks, &cfg, Phase::Train, s).unwrap();
        let cap = sim.decisions[0].capacity as u64;
        let slice = (per as u64) * cap * d as u64 * 8;
        let m = a2a_traffic(&sim.log, ep);
        for (i, row) in m.iter().enumerate() {
            for (j, &bytes) in row.iter().enumerate() {
                prop_assert_eq!(bytes, if i == j { 0 } else { 2 * slice });
            }
        }
        let dispatched = sim.log.iter().filter(|m| m.direction == A2aDirection::Dispatch).count();
        prop_assert_eq!(dispatched, ep * (ep - 1));
        for r in &ranks {
            let mut tape = Tape::new();
            let x = tape.constant(r.tokens.clone());
            let vars = layer.register(&mut tape);
            let out = moe_layer_forward(&mut tape, x, &vars, &cfg, Phase::Train, seed::derive(s, r.rank as u64)).unwrap();
            prop_assert!(sim.outputs[r.rank].bit_eq(&tape.to_tensor(out.y)));
        }
    }
}

#[test]
fn experts_must_shard_evenly() {
    let xs = vec![init_truncated_normal(&[2, 2], 0.0, 1.0, 0).unwrap(); 3];
    assert!(make_ranks(4, xs).is_err());
}
