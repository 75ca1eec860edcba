//! Generates the default synthetic dataset into a directory and reads it
//! back.
//!
//! `cargo run --release --example gen_data -- [out_dir] [seed]`

use std::path::PathBuf;

use come::container::{read_dataset_dir, write_dataset_dir};
use come::datagen::{gen_dataset, GeneratorConfig};

fn main() -> come::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "come-data".into()));
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let cfg = GeneratorConfig::default();
    let data = gen_dataset(&cfg, seed)?;
    let side = write_dataset_dir(&dir, &data.train, &data.test, &cfg, seed)?;
    println!("train sources {:?}", side.train_source_counts);
    println!("test sources  {:?}", side.test_source_counts);
    let (train, test, _) = read_dataset_dir(&dir)?;
    assert_eq!(train, data.train);
    assert_eq!(test, data.test);
    println!("{} and {} samples round-tripped through {}", train.len(), test.len(), dir.display());
    Ok(())
}
