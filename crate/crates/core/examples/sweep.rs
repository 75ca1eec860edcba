//! Sweeps the number of routed experts or the top-K value.
//!
//! `cargo run --release --example sweep -- [experts|topk] [key=value ...]`

use come::harness::{sweep, sweep_csv, thread_count, RunConfig, SweepAxis};

fn main() -> come::Result<()> {
    let mut args = std::env::args().skip(1);
    let axis = SweepAxis::parse(&args.next().unwrap_or_else(|| "topk".into()))?;
    let overrides: Vec<String> = args.collect();
    let cfg = RunConfig::default().with_overrides(&overrides)?;
    print!("{}", sweep_csv(&sweep(&cfg, axis, thread_count()?)?));
    Ok(())
}
