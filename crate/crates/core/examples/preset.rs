//! Runs a named preset at reduced scale and prints its comparison report.
//!
//! `cargo run --release --example preset -- replay-sweep 0.1`

use ctp::harness::{build_report, preset, root_seed, Runner};

fn main() -> ctp::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let name = args.next().unwrap_or_else(|| "warmup-sweep".into());
    let scale: f64 = args.next().map_or(0.1, |s| s.parse().expect("scale must be a number"));
    let spec = preset(&name, scale, root_seed())?;
    let result = Runner::new().run(&spec)?;
    print!("{}", build_report(&result)?.render());
    Ok(())
}
