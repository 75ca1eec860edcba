//! Trains a short run, then dumps its routing on the test split and checks
//! the purity recomputed from the dump against the evaluation.
//!
//! `cargo run --release --example route_dump -- [out_dir]`

use std::path::PathBuf;

use come::harness::{load_data, route_dump, train, RunConfig};

fn main() -> come::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "come-routes".into()));
    let cfg = RunConfig::default().with_overrides(&["train.steps=300", "data.generator.samples=800"])?;
    let data = load_data(&cfg)?;
    let out = train(&cfg, &data)?;
    let dump = route_dump(&out.model, &data.test, cfg.train.batch_size, cfg.seed)?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("routes.csv"), dump.routes_csv())?;
    std::fs::write(dir.join("projections.csv"), dump.projections_csv())?;
    let again = dump.purity_from_rows(&out.model.groups());
    println!(
        "{} rows, {} overflow; purity {:.4} (evaluation {:.4}); PCA explains {:.3} + {:.3}",
        dump.rows.len(),
        dump.overflow_rows(),
        again.purity(),
        out.final_eval.purity,
        dump.explained_variance_ratio[0],
        dump.explained_variance_ratio[1]
    );
    Ok(())
}
