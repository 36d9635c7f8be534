mod common;

use common::{loss, random_batch};
use moe_forge::autograd::Tape;
use moe_forge::model::{generate, param_count, ArchConfig, BoundModel, ModelParams, NamedTensor, Role};
use moe_forge::routing::{Phase, RouterConfig};
use moe_forge::Error;
use rand::{Rng, SeedableRng};

fn logits(model: &ModelParams, src: &[Vec<usize>], tgt: &[Vec<usize>], cfg: &RouterConfig, phase: Phase) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = BoundModel::bind(model, &mut tape);
    let out = bound.forward(&mut tape, src, tgt, cfg, phase, 3).unwrap();
    tape.value(out.logits).to_vec()
}

#[test]
fn toy_forward_shape_and_finiteness() {
    let arch = ArchConfig::toy(24, 2);
    let model = ModelParams::build(&arch, 0).unwrap();
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&model, &mut tape);
    let src = vec![vec![5, 6, 7, 8]];
    let tgt = vec![vec![0, 9, 10]];
    let out = bound.forward(&mut tape, &src, &tgt, &RouterConfig::new(2), Phase::Train, 0).unwrap();
    assert_eq!(tape.shape(out.logits), &[3, 24]);
    assert!(tape.value(out.logits).iter().all(|v| v.is_finite()));
    assert_eq!(out.decisions.len(), 2);
    assert_eq!(out.decisions[0].0, 1);
    assert_eq!(out.decisions[1].0, 3);
}

#[test]
fn token_out_of_range_is_rejected() {
    let arch = ArchConfig::toy(24, 2);
    let model = ModelParams::build(&arch, 0).unwrap();
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&model, &mut tape);
    let err = bound.forward(&mut tape, &[vec![24]], &[vec![0]], &RouterConfig::new(2), Phase::Eval, 0);
    assert!(matches!(err, Err(Error::TokenOutOfRange { id: 24, vocab: 24 })));
}

#[test]
fn single_expert_equals_dense() {
    let moe_arch = ArchConfig::toy(24, 1);
    let dense_arch = ArchConfig {
        moe_every: 100,
        ..moe_arch.clone()
    };
    let moe = ModelParams::build(&moe_arch, 4).unwrap();
    let renamed: Vec<NamedTensor> = moe
        .tensors()
        .iter()
        .filter(|t| !matches!(t.role, Role::Gate { .. }))
        .map(|t| NamedTensor {
            name: t.name.replace(".moe.expert.0", ".ffn"),
            role: Role::NonExpert,
            tensor: t.tensor.clone(),
        })
        .collect();
    let dense = ModelParams::from_tensors(dense_arch, renamed).unwrap();
    let b = random_batch(24, 4, 3, 5, 1);
    let cfg = RouterConfig::new(1);
    for phase in [Phase::Train, Phase::Eval] {
        let a = logits(&moe, &b.src, &b.tgt_in, &cfg, phase);
        let d = logits(&dense, &b.src, &b.tgt_in, &cfg, phase);
        let diff = a.iter().zip(&d).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }
}

#[test]
fn batch_permutation_equivariance() {
    let arch = ArchConfig::toy(24, 2);
    let model = ModelParams::build(&arch, 2).unwrap();
    let b = random_batch(24, 4, 3, 4, 2);
    let cfg = RouterConfig::new(2);
    let fwd = logits(&model, &b.src, &b.tgt_in, &cfg, Phase::Eval);
    let perm = [2, 0, 1];
    let src: Vec<_> = perm.iter().map(|&i| b.src[i].clone()).collect();
    let tgt: Vec<_> = perm.iter().map(|&i| b.tgt_in[i].clone()).collect();
    let back = logits(&model, &src, &tgt, &cfg, Phase::Eval);
    let rows = 5 * 24;
    for (k, &i) in perm.iter().enumerate() {
        let a = &fwd[i * rows..(i + 1) * rows];
        let p = &back[k * rows..(k + 1) * rows];
        assert!(a.iter().zip(p).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let arch = ArchConfig::toy(20, 2);
    let mut model = ModelParams::build(&arch, 11).unwrap();
    let b = random_batch(20, 4, 2, 4, 3);
    let mut cfg = RouterConfig::new(2);
    cfg.balance_coeff = 0.5;
    loss(&mut model, &b, &cfg, Phase::Train, 7, true);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let ti = rng.random_range(0..model.tensors().len());
        let name = model.tensors()[ti].name.clone();
        let n = model.tensors()[ti].tensor.numel();
        let j = rng.random_range(0..n);
        let analytic = model.get(&name).unwrap().grad().map_or(0.0, |g| g[j]);
        let orig = model.get(&name).unwrap().data()[j];
        model.get_mut(&name).unwrap().data_mut()[j] = orig + h;
        let up = loss(&mut model, &b, &cfg, Phase::Train, 7, false);
        model.get_mut(&name).unwrap().data_mut()[j] = orig - h;
        let down = loss(&mut model, &b, &cfg, Phase::Train, 7, false);
        model.get_mut(&name).unwrap().data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn generate_contracts() {
    let arch = ArchConfig::toy(24, 2);
    let model = ModelParams::build(&arch, 0).unwrap();
    let cfg = RouterConfig::new(2);
    assert!(generate(&model, &[5, 6], 0, 0, 1, &cfg).unwrap().is_empty());
    let a = generate(&model, &[5, 6, 7], 6, 0, 1, &cfg).unwrap();
    let b = generate(&model, &[5, 6, 7], 6, 0, 1, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.len() <= 6);
}

#[test]
fn large_preset_counts_in_billions() {
    for (e, target) in [(8, 1.8e9), (16, 3.0e9), (32, 5.5e9), (64, 10e9), (128, 20e9)] {
        let total = param_count(&ArchConfig::large(e)).total as f64;
        assert!((total - target).abs() / target < 0.05, "E={e}: {total}");
    }
    let dense = param_count(&ArchConfig::large(1)).total as f64;
    assert!((dense - 0.7e9).abs() / 0.7e9 < 0.15);
}
