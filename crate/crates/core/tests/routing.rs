use moe_forge::autograd::Tape;
use moe_forge::routing::{
    assign_grouped, assign_plain, assign_rts, capacity_for, combine, dispatch, gate_forward, AssignmentMode, Phase,
    RouterConfig, RoutingDecision, Slot,
};
use moe_forge::tensor::init_truncated_normal;
use proptest::prelude::*;

fn per_expert(choice: &[usize], slots: &[Slot], experts: usize) -> (Vec<usize>, Vec<usize>) {
    let mut demand = vec![0; experts];
    let mut kept = vec![0; experts];
    for (&e, s) in choice.iter().zip(slots) {
        demand[e] += 1;
        kept[e] += usize::from(s.is_some());
    }
    (demand, kept)
}

fn decision(choice: &[usize], slots: Vec<Slot>, experts: usize, cap: usize) -> RoutingDecision {
    RoutingDecision {
        num_experts: experts,
        capacity: cap,
        expert: choice.to_vec(),
        gate_prob: vec![1.0; choice.len()],
        slot: slots,
        second: None,
    }
}

fn choices() -> impl Strategy<Value = (usize, Vec<usize>, usize)> {
    (1usize..9).prop_flat_map(|e| (Just(e), prop::collection::vec(0..e, 1..80), 1usize..20))
}

proptest! {
    #[test]
    fn capacity_matches_ceiling(tokens in 1usize..4096, experts in 1usize..129, tenths in 1u32..40) {
        let factor = f64::from(tenths) / 10.0;
        let cap = capacity_for(tokens, experts, factor);
        let exact = (u64::from(tenths) * tokens as u64).div_ceil(10 * experts as u64).max(1);
        prop_assert_eq!(cap as u64, exact);
    }

    #[test]
    fn plain_and_rts_keep_min_of_demand_and_capacity((e, choice, cap) in choices(), seed in any::<u64>()) {
        for slots in [assign_plain(&choice, cap), assign_rts(&choice, cap, seed)] {
            let (demand, kept) = per_expert(&choice, &slots, e);
            for x in 0..e {
                prop_assert_eq!(kept[x], demand[x].min(cap));
            }
            decision(&choice, slots, e, cap).check_invariants().unwrap();
        }
    }

    #[test]
    fn rts_is_seeded_and_drops_nothing_at_full_capacity((_, choice, cap) in choices(), seed in any::<u64>()) {
        let wide = assign_rts(&choice, choice.len(), seed);
        prop_assert!(wide.iter().all(Option::is_some));
        prop_assert_eq!(assign_rts(&choice, cap, seed), assign_rts(&choice, cap, seed));
    }

    #[test]
    fn grouped_respects_global_capacity((e, choice, cap) in choices(), groups in 1usize..6) {
        let t = choice.len() - choice.len() % groups;
        prop_assume!(t > 0);
        let choice = &choice[..t];
        let slots = assign_grouped(choice, cap, groups).unwrap();
        let (demand, kept) = per_expert(choice, &slots, e);
        for x in 0..e {
            prop_assert!(kept[x] <= cap.min(demand[x]));
        }
        decision(choice, slots, e, cap).check_invariants().unwrap();
    }

    #[test]
    fn one_group_is_plain((_, choice, cap) in choices()) {
        prop_assert_eq!(assign_grouped(&choice, cap, 1).unwrap(), assign_plain(&choice, cap));
    }

    #[test]
    fn plain_is_prefix_stable((_, choice, cap) in choices(), cut in 0usize..80) {
        // Appending tokens never changes the fate of earlier ones.
        let cut = cut.min(choice.len());
        prop_assert_eq!(&assign_plain(&choice, cap)[..cut], &assign_plain(&choice[..cut], cap)[..]);
    }

    #[test]
    fn gate_decisions_satisfy_invariants(t in 1usize..40, d in 1usize..6, e in 1usize..6, mode in 0u8..3, seed in any::<u64>()) {
        let mut cfg = RouterConfig::new(e);
        cfg.assignment_mode = match mode {
            0 => AssignmentMode::Plain,
            1 => AssignmentMode::Grouped { groups: 1 + (seed % 4) as usize },
            _ => AssignmentMode::Rts,
        };
        let x = init_truncated_normal(&[t, d], 0.0, 1.0, seed).unwrap();
        let g = init_truncated_normal(&[d, e], 0.0, 1.0, seed ^ 1).unwrap();
        let mut tape = Tape::new();
        let (xv, gv) = (tape.constant(x.clone()), tape.constant(g));
        let out = gate_forward(&mut tape, xv, gv, &cfg, Phase::Train, seed).unwrap();
        out.decision.check_invariants().unwrap();
        prop_assert_eq!(out.decision.capacity, capacity_for(t, e, 1.0));
        let probs = tape.value(out.probs);
        for row in probs.chunks(e) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Dispatch followed by combine with unit weights is the identity on kept rows.
        let mut dec = out.decision;
        dec.gate_prob = vec![1.0; t];
        let y = combine(&dispatch(&x, &dec).unwrap(), &dec, &x).unwrap();
        prop_assert!(y.bit_eq(&x));
    }
}

#[test]
fn eval_uses_doubled_capacity() {
    let cfg = RouterConfig::new(4);
    assert_eq!(moe_forge::routing::capacity(64, &cfg, Phase::Train), 16);
    assert_eq!(moe_forge::routing::capacity(64, &cfg, Phase::Eval), 32);
}
