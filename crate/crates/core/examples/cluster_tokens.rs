//! Clusters one batch of synthetic tokens with both strategies and reports
//! how the coarse clusters line up with the sources.

use come::clustering::{fine2coarse, multistep, MultiStepConfig};
use come::datagen::{gen_dataset, GeneratorConfig};
use come::numerics::{Seeds, Stream};

fn main() -> come::Result<()> {
    let cfg = GeneratorConfig {
        samples: 64,
        ..Default::default()
    };
    let data = gen_dataset(&cfg, 1)?;
    let idx: Vec<usize> = (0..8).collect();
    let (batch, _) = data.train.batch(&idx)?;
    let seeds = Seeds::new(1);

    let f2c = fine2coarse(&batch.features, 16, 8, 20, &mut seeds.stream(Stream::Cluster))?;
    println!("fine2coarse: {} fine -> {} coarse, fan-in {:?}", f2c.fine.rows(), f2c.coarse.rows(), f2c.coarse_fan_in());
    println!("  fine inertia {:?}", f2c.fine_inertia);
    let mut table = vec![vec![0usize; f2c.coarse.rows()]; cfg.sources];
    for (t, c) in f2c.coarse_assignments().into_iter().enumerate() {
        table[batch.sources[t]][c] += 1;
    }
    for (s, row) in table.iter().enumerate() {
        println!("  source {s}: {row:?}");
    }

    let (_, state) = multistep(&batch.features, MultiStepConfig::default(), &mut seeds.substream(Stream::Cluster, 1))?;
    for r in &state.steps {
        println!(
            "multistep step {}: inertia {:.3}, {} centroids, suppressed {:?}",
            r.step,
            r.inertia,
            r.centroids.rows(),
            r.suppressed
        );
    }
    Ok(())
}
