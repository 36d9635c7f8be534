use moe_forge::checkpoint;
use moe_forge::experiments::{heldout_ce, ToySetup};
use moe_forge::model::{ArchConfig, ModelParams};
use moe_forge::multitask::corpus::{BLANK, MASK};
use moe_forge::multitask::{infill_mask, noise_dae, temperature_probs, DaeNoiseConfig, Task, Trainer};
use moe_forge::seed;
use proptest::prelude::*;

proptest! {
    #[test]
    fn temperature_probs_normalize_and_flatten(sizes in prop::collection::vec(1u64..100_000, 1..6), t in 1.0f64..20.0) {
        let p = temperature_probs(&sizes, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Raising the temperature never widens the gap between the largest and smallest language.
        let hotter = temperature_probs(&sizes, t + 1.0).unwrap();
        let spread = |q: &[f64]| q.iter().cloned().fold(0.0, f64::max) - q.iter().cloned().fold(1.0, f64::min);
        prop_assert!(spread(&hotter) <= spread(&p) + 1e-12);
        let total: u64 = sizes.iter().sum();
        let unit = temperature_probs(&sizes, 1.0).unwrap();
        for (u, &s) in unit.iter().zip(&sizes) {
            prop_assert!((u - s as f64 / total as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_keeps_vocabulary_and_length_bounds(clean in prop::collection::vec(10usize..60, 1..40), s in any::<u64>()) {
        let noisy = noise_dae(&clean, &DaeNoiseConfig::default(), s).unwrap();
        prop_assert!(!noisy.is_empty() && noisy.len() <= clean.len());
        prop_assert!(noisy.iter().all(|t| clean.contains(t) || *t == MASK || *t == BLANK));
        prop_assert_eq!(&noisy, &noise_dae(&clean, &DaeNoiseConfig::default(), s).unwrap());
        prop_assert_eq!(noise_dae(&clean, &DaeNoiseConfig::none(), s).unwrap(), clean);
    }

    #[test]
    fn infill_covers_at_least_the_target(n in 1usize..300, s in any::<u64>()) {
        let cfg = DaeNoiseConfig::default();
        let m = infill_mask(n, &cfg, &mut seed::rng(s)).unwrap();
        let covered = m.iter().filter(|&&b| b).count();
        prop_assert!(covered >= (0.2 * n as f64).round() as usize);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bit_exact(vocab in 12usize..40, e in 1usize..6, s in any::<u64>()) {
        let model = ModelParams::build(&ArchConfig::toy(vocab, e), s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        checkpoint::save(&model, dir.path()).unwrap();
        let back = checkpoint::load(dir.path()).unwrap();
        prop_assert_eq!(&back.arch, &model.arch);
        for (a, b) in back.tensors().iter().zip(model.tensors()) {
            prop_assert_eq!(&a.name, &b.name);
            prop_assert!(a.tensor.bit_eq(&b.tensor));
        }
    }
}

#[test]
fn short_toy_training_lowers_heldout_loss() {
    let setup = ToySetup::default();
    let corpus = setup.corpus().unwrap();
    let heldout = setup.heldout(&corpus).unwrap();
    let mut t = Trainer::new(setup.train_config(&corpus, 4, 0), corpus).unwrap();
    let before = heldout_ce(&t.model, &heldout, &t.config).unwrap();
    t.train(300, |_| {}).unwrap();
    let after = heldout_ce(&t.model, &heldout, &t.config).unwrap();
    assert!(after < before - 0.5, "{before} -> {after}");
}

#[test]
fn multitask_steps_consume_one_batch_per_task() {
    let setup = ToySetup {
        tasks: vec![Task::Mt, Task::Dae],
        ..ToySetup::default()
    };
    let corpus = setup.corpus().unwrap();
    let mut t = Trainer::new(setup.train_config(&corpus, 2, 5), corpus).unwrap();
    let mut seen = Vec::new();
    t.train(5, |m| seen.push((m.mt_loss.is_some(), m.dae_loss.is_some()))).unwrap();
    assert!(seen.iter().all(|&p| p == (true, true)));
    assert_eq!(t.consumed().get(&Task::Mt), Some(&5));
    assert_eq!(t.consumed().get(&Task::Dae), Some(&5));
}

#[test]
fn resuming_from_a_checkpoint_matches_the_saved_model() {
    let setup = ToySetup::default();
    let corpus = setup.corpus().unwrap();
    let heldout = setup.heldout(&corpus).unwrap();
    let mut t = Trainer::new(setup.train_config(&corpus, 2, 1), corpus).unwrap();
    t.train(20, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&t.model, dir.path()).unwrap();
    let loaded = checkpoint::load(dir.path()).unwrap();
    let a = heldout_ce(&t.model, &heldout, &t.config).unwrap();
    let b = heldout_ce(&loaded, &heldout, &t.config).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}
