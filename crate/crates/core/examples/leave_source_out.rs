//! Trains COME and the parameter-matched dense baseline on three sources
//! and tests both on the fourth.
//!
//! `cargo run --release --example leave_source_out -- [holdout] [seed]`

use come::harness::{dense_baseline, load_data, train, RunConfig};

fn main() -> come::Result<()> {
    let mut args = std::env::args().skip(1);
    let holdout: usize = args.next().map(|s| s.parse().expect("holdout source")).unwrap_or(3);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let mut cfg = RunConfig::default().with_overrides(&["router.top_k=3"])?;
    cfg.seed = seed;
    cfg.data.holdout_source = Some(holdout);
    let data = load_data(&cfg)?;
    println!("train {} samples, held-out source {holdout}: {} samples", data.train.len(), data.test.len());
    for (name, c) in [("come", cfg.clone()), ("dense", dense_baseline(&cfg))] {
        let out = train(&c, &data)?;
        println!("{name:>5}: held-out accuracy {:.4}", out.final_eval.accuracy);
    }
    Ok(())
}
