//! Finite-difference gradient checks of every trainable component.
//!
//! `cargo run --release --example gradcheck -- [n_seeds]`

use come::harness::{gradient_suite, gradsuite_table};

fn main() -> come::Result<()> {
    let n: u64 = std::env::args().nth(1).map(|s| s.parse().expect("seed count")).unwrap_or(10);
    let seeds: Vec<u64> = (0..n).collect();
    let rows = gradient_suite(&seeds, 1e-5)?;
    print!("{}", gradsuite_table(&rows, 1e-4));
    Ok(())
}
