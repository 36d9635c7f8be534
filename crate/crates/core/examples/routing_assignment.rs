//! Capacity assignment of an oversubscribed expert under the three modes.

use moe_forge::routing::{assign_grouped, assign_plain, assign_rts, capacity_for, Slot};

fn show(name: &str, slots: &[Slot]) {
    let marks: String = slots.iter().map(|s| if s.is_some() { 'k' } else { '.' }).collect();
    println!("{name:>8}  {marks}");
}

fn main() -> moe_forge::Result<()> {
    // 24 tokens, 4 experts, but two thirds of the tokens want expert 0.
    let choice: Vec<usize> = (0..24).map(|i| if i % 3 == 2 { 1 + i % 3 } else { 0 }).collect();
    let cap = capacity_for(choice.len(), 4, 1.0);
    println!("capacity per expert: {cap}; k = kept, . = dropped");
    show("plain", &assign_plain(&choice, cap));
    show("grouped4", &assign_grouped(&choice, cap, 4)?);
    for seed in 0..3 {
        show(&format!("rts/{seed}"), &assign_rts(&choice, cap, seed));
    }
    Ok(())
}
