//! One MoE layer: forward, balancing loss, backward.

use moe_forge::autograd::Tape;
use moe_forge::routing::{moe_layer_forward, MoeLayerParams, Phase, RouterConfig};
use moe_forge::tensor::init_truncated_normal;

fn main() -> moe_forge::Result<()> {
    let (tokens, d, experts) = (32, 8, 4);
    let layer = MoeLayerParams::init(d, 2 * d, experts, 1)?;
    let cfg = RouterConfig::new(experts);

    let mut tape = Tape::new();
    let x = tape.constant(init_truncated_normal(&[tokens, d], 0.0, 1.0, 2)?);
    let vars = layer.register(&mut tape);
    let out = moe_layer_forward(&mut tape, x, &vars, &cfg, Phase::Train, 7)?;

    let d_out = &out.decision;
    println!("capacity {} per expert", d_out.capacity);
    println!("demand   {:?}", d_out.demand_per_expert());
    println!("kept     {:?}", d_out.kept_per_expert());
    println!("dropped positions {:?}", d_out.dropped_positions());
    println!("balancing loss {:.6}", tape.scalar(out.balance_loss));

    let total = tape.sum(out.y)?;
    let loss = tape.add(total, out.balance_loss)?;
    tape.backward(loss)?;
    let gate_grad = tape.grad(vars.gate).map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt());
    println!("gate gradient norm {gate_grad:.6}");
    Ok(())
}
