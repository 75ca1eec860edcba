//! Trains the default COME model and prints the logged metrics.
//!
//! `cargo run --release --example train -- [seed] [key=value ...]`

use come::harness::{load_data, train, RunConfig};

fn main() -> come::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let overrides: Vec<String> = args.collect();
    let mut cfg = RunConfig::default().with_overrides(&overrides)?;
    cfg.seed = seed;
    let data = load_data(&cfg)?;
    let t0 = std::time::Instant::now();
    let out = train(&cfg, &data)?;
    for r in &out.metrics {
        println!(
            "step {:>5}  ce {:.4}  tb {:.4}  train {:.3}  test {:.3}  purity {:.3}  overflow {:.3}",
            r.step, r.task_ce, r.l_tb, r.train_acc, r.test_acc, r.test_purity, r.overflow_rate
        );
    }
    let e = &out.final_eval;
    println!(
        "final: accuracy {:.4}  purity {:.4}  admitted {:.4}  util_cv {:.3}  per-source {:?}  ({:.1}s)",
        e.accuracy,
        e.purity,
        e.admitted_purity,
        e.utilization_cv,
        e.per_source_accuracy,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
