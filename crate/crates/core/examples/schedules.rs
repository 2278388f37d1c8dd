//! Prints the learning rate of a cosine schedule and both infinite schedules
//! at their phase boundaries.

use ctp::schedule::{ScheduleKind, ScheduleSpec};

fn main() -> ctp::Result<()> {
    let cosine = ScheduleSpec::cosine_fit(3e-4, 3e-5, 1.0, 10_000);
    let inf = |kind| ScheduleSpec::infinite(kind, 3e-4, 3e-5, 1.65e-4, 100, 6000, Some(2500), 1400);
    for (name, spec) in [
        ("cosine", cosine),
        ("cosine-inf", inf(ScheduleKind::InfiniteCosine)),
        ("invsqrt-inf", inf(ScheduleKind::InfiniteInvSqrt)),
    ] {
        println!("{name}");
        for (phase, t) in spec.boundaries() {
            println!("  {:>6} {:<10} lr {:.3e}", t, phase.as_str(), spec.lr_at(t)?);
        }
        let end = spec.total_steps().unwrap_or(10_000);
        println!("  {:>6} {:<10} lr {:.3e}", end, "end", spec.lr_at(end)?);
    }
    Ok(())
}
