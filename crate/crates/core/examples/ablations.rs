//! Runs the ablation matrix (full model and five single removals) and
//! prints per-variant means.
//!
//! `cargo run --release --example ablations -- [n_seeds] [key=value ...]`

use come::cli::ablation_summary;
use come::harness::{run_ablations, thread_count, RunConfig};

fn main() -> come::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: u64 = args.next().map(|s| s.parse().expect("seed count")).unwrap_or(2);
    let overrides: Vec<String> = args.collect();
    let cfg = RunConfig::default().with_overrides(&overrides)?;
    let seeds: Vec<u64> = (0..n).collect();
    let rows = run_ablations(&cfg, &seeds, thread_count()?)?;
    print!("{}", ablation_summary(&rows));
    Ok(())
}
