//! Replay accounting: per-batch composition, token budgets and reservoir proportions.

use ctp::mixer::{batch_composition, token_budget, MixPlan, ReservoirState};

fn main() -> ctp::Result<()> {
    let plan = MixPlan::plain("d1", 32).with_replay("d0", 0.05);
    let counts: Vec<usize> = (1..=20).map(|b| batch_composition(&plan, b).map(|c| c.0)).collect::<ctp::Result<_>>()?;
    println!("replayed windows in batches 1..20 at 5%: {counts:?}");

    let b = token_budget(100_000_000_000, 100_000_000_000, 0.05)?;
    println!("100B + 100B at 5% replay: {} unique new, {} replayed, {} total", b.unique_new, b.replayed, b.total);

    let mut state = ReservoirState::new(0.05)?;
    for size in [300.0, 155.89, 79.87, 15.63] {
        state = state.update(size)?;
        let p: Vec<String> = state.proportions().iter().map(|p| format!("{p:.4}")).collect();
        println!("after a dataset of {size:>6}: replay proportions [{}]", p.join(", "));
    }
    Ok(())
}
