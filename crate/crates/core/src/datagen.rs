//! Synthetic multi-source token data.
//!
//! Each source has its own mean, its own low-rank subspace and its own
//! token noise. A sample draws a shared latent `z` and a source latent `u`,
//! builds one base vector `μ_m + W_sh z + B_m u` and emits `T` noisy copies
//! of it. The label is `argmax(V z + V_m u)`, so both the shared and the
//! source-specific structure carry class signal.
//!
//! By default the source means are orthogonal to the shared subspace, so a
//! source's offset says nothing about the shared latent. `source_overlap`
//! tilts every source subspace towards a common one; at 1 all sources use
//! the same directions with their own read-outs.
//!
//! Features are rounded to `f32` at generation time so that a dataset held
//! in memory is bit-identical to the same dataset read back from disk.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ComeError, Result};
use crate::numerics::{Mat, Seeds, Stream, StreamRng};
use crate::tokens::TokenBatch;

/// Generator settings. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub width: usize,
    pub tokens: usize,
    pub sources: usize,
    pub classes: usize,
    pub shared_rank: usize,
    pub source_rank: usize,
    pub samples: usize,
    /// Relative frequency of each source.
    pub weights: Vec<f64>,
    /// Standard deviation of the entries of each source mean.
    pub mean_scale: f64,
    /// Per-token noise scale, one per source (a single value is broadcast).
    pub noise: Vec<f64>,
    /// Scale of the source-specific latent term `B_m u`.
    pub source_scale: f64,
    /// How far the source subspaces coincide: 0 draws each independently,
    /// 1 gives every source the same subspace (with its own read-out).
    pub source_overlap: f64,
    /// Remove the shared-subspace component from the source means.
    pub orthogonal_means: bool,
    /// Fraction of samples held out for the test split.
    pub test_fraction: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            width: 32,
            tokens: 16,
            sources: 4,
            classes: 3,
            shared_rank: 4,
            source_rank: 2,
            samples: 4000,
            weights: vec![4.0, 2.0, 1.0, 1.0],
            mean_scale: 1.0,
            noise: vec![0.3],
            source_scale: 1.0,
            source_overlap: 0.0,
            orthogonal_means: true,
            test_fraction: 0.2,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ComeError::InvalidConfig(msg));
        if self.width == 0 || self.tokens == 0 || self.samples == 0 {
            return bad(format!(
                "degenerate dimensions: width {}, tokens {}, samples {}",
                self.width, self.tokens, self.samples
            ));
        }
        if self.sources == 0 || self.classes < 2 {
            return bad(format!(
                "need at least one source and two classes (got {} and {})",
                self.sources, self.classes
            ));
        }
        if self.shared_rank > self.width || self.source_rank > self.width {
            return bad(format!(
                "latent ranks ({}, {}) exceed width {}",
                self.shared_rank, self.source_rank, self.width
            ));
        }
        if self.weights.len() != self.sources || self.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad(format!(
                "need {} positive source weights, got {:?}",
                self.sources, self.weights
            ));
        }
        if !(self.noise.len() == 1 || self.noise.len() == self.sources)
            || self.noise.iter().any(|&s| !(s >= 0.0 && s.is_finite()))
        {
            return bad(format!(
                "noise must be one or {} nonnegative values, got {:?}",
                self.sources, self.noise
            ));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("test fraction {} outside [0, 1)", self.test_fraction));
        }
        if !(0.0..=1.0).contains(&self.source_overlap) {
            return bad(format!("source overlap {} outside [0, 1]", self.source_overlap));
        }
        for (name, v) in [("mean_scale", self.mean_scale), ("source_scale", self.source_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        Ok(())
    }

    pub fn noise_of(&self, source: usize) -> f64 {
        if self.noise.len() == 1 {
            self.noise[0]
        } else {
            self.noise[source]
        }
    }
}

/// Generative parameters of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub id: usize,
    pub weight: f64,
    pub mean: Vec<f64>,
    /// `D×r` with orthonormal columns.
    pub basis: Mat,
    pub noise: f64,
    /// `C×r` label read-out of the source latent.
    pub readout: Mat,
}

/// Parameters shared by all sources.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSpec {
    /// `D×r_sh` with orthonormal columns.
    pub basis: Mat,
    /// `C×r_sh` label read-out of the shared latent.
    pub readout: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Mat,
    pub source: usize,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tokens: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn empty(tokens: usize, width: usize) -> Self {
        Dataset {
            tokens,
            width,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn source_counts(&self, sources: usize) -> Vec<usize> {
        let mut c = vec![0; sources];
        for s in &self.samples {
            if s.source < sources {
                c[s.source] += 1;
            }
        }
        c
    }

    /// Stacks the chosen samples into one token batch plus their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(TokenBatch, Vec<usize>)> {
        if indices.is_empty() {
            return Err(ComeError::InvalidArgument("empty batch".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.tokens * self.width);
        let mut sources = Vec::with_capacity(indices.len() * self.tokens);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = self.samples.get(i).ok_or_else(|| {
                ComeError::InvalidArgument(format!("sample {i} out of range ({})", self.len()))
            })?;
            data.extend_from_slice(s.tokens.data());
            sources.extend(std::iter::repeat_n(s.source, self.tokens));
            labels.push(s.label);
        }
        let features = Mat::new(indices.len() * self.tokens, self.width, data)?;
        Ok((TokenBatch::new(features, sources, self.tokens)?, labels))
    }

    /// Samples in `[start, start + len)`, clipped to the dataset.
    pub fn chunk_indices(&self, start: usize, len: usize) -> Vec<usize> {
        (start..(start + len).min(self.len())).collect()
    }
}

/// Generated train/test split together with the generator's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: Dataset,
    pub test: Dataset,
    pub sources: Vec<SourceSpec>,
    pub shared: SharedSpec,
}

fn normal_mat(rows: usize, cols: usize, rng: &mut StreamRng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn orthonormalize(g: &Mat) -> Mat {
    let (rows, cols) = (g.rows(), g.cols());
    if cols == 0 {
        return Mat::zeros(rows, 0);
    }
    let q = DMatrix::from_row_slice(rows, cols, g.data()).qr().q();
    Mat::from_fn(rows, cols, |i, j| q[(i, j)])
}

fn orthonormal_basis(rows: usize, cols: usize, rng: &mut StreamRng) -> Mat {
    orthonormalize(&normal_mat(rows, cols, rng))
}

/// Removes from `v` its component in the span of the orthonormal `basis`.
fn project_out(v: &mut [f64], basis: &Mat) {
    for k in 0..basis.cols() {
        let dot: f64 = v.iter().enumerate().map(|(i, x)| x * basis.get(i, k)).sum();
        for (i, x) in v.iter_mut().enumerate() {
            *x -= dot * basis.get(i, k);
        }
    }
}

/// Draws the source and shared parameters for `cfg` from `seed`.
pub fn draw_specs(cfg: &GeneratorConfig, seed: u64) -> Result<(Vec<SourceSpec>, SharedSpec)> {
    cfg.validate()?;
    let mut rng = Seeds::new(seed).substream(Stream::Data, 0);
    let shared = SharedSpec {
        basis: orthonormal_basis(cfg.width, cfg.shared_rank, &mut rng),
        readout: normal_mat(cfg.classes, cfg.shared_rank, &mut rng),
    };
    let common = normal_mat(cfg.width, cfg.source_rank, &mut rng);
    let (a, b) = ((1.0 - cfg.source_overlap).sqrt(), cfg.source_overlap.sqrt());
    let sources = (0..cfg.sources)
        .map(|m| {
            let mut mean: Vec<f64> = (0..cfg.width)
                .map(|_| cfg.mean_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            if cfg.orthogonal_means {
                project_out(&mut mean, &shared.basis);
            }
            let own = normal_mat(cfg.width, cfg.source_rank, &mut rng);
            let mixed = Mat::from_fn(cfg.width, cfg.source_rank, |i, j| a * own.get(i, j) + b * common.get(i, j));
            SourceSpec {
                id: m,
                weight: cfg.weights[m],
                mean,
                basis: orthonormalize(&mixed),
                noise: cfg.noise_of(m),
                readout: normal_mat(cfg.classes, cfg.source_rank, &mut rng),
            }
        })
        .collect();
    Ok((sources, shared))
}

/// One sample from source-drawing stream `rng`.
pub fn draw_sample(
    cfg: &GeneratorConfig,
    specs: &[SourceSpec],
    shared: &SharedSpec,
    source: usize,
    rng: &mut StreamRng,
) -> Sample {
    let spec = &specs[source];
    let z: Vec<f64> = (0..cfg.shared_rank).map(|_| rng.sample(StandardNormal)).collect();
    let u: Vec<f64> = (0..cfg.source_rank).map(|_| rng.sample(StandardNormal)).collect();
    let mut base = spec.mean.clone();
    for (i, b) in base.iter_mut().enumerate() {
        *b += (0..cfg.shared_rank).map(|k| shared.basis.get(i, k) * z[k]).sum::<f64>();
        *b += cfg.source_scale * (0..cfg.source_rank).map(|k| spec.basis.get(i, k) * u[k]).sum::<f64>();
    }
    let score: Vec<f64> = (0..cfg.classes)
        .map(|c| {
            (0..cfg.shared_rank).map(|k| shared.readout.get(c, k) * z[k]).sum::<f64>()
                + (0..cfg.source_rank).map(|k| spec.readout.get(c, k) * u[k]).sum::<f64>()
        })
        .collect();
    let label = crate::router::top_k_indices(&score, 1)[0];
    let tokens = Mat::from_fn(cfg.tokens, cfg.width, |_, j| {
        let e: f64 = rng.sample(StandardNormal);
        (base[j] + spec.noise * e) as f32 as f64
    });
    Sample { tokens, source, label }
}

/// Generates `cfg.samples` samples and splits them by a seeded shuffle.
pub fn gen_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<GeneratedData> {
    let (specs, shared) = draw_specs(cfg, seed)?;
    let seeds = Seeds::new(seed);
    let pick = WeightedIndex::new(&cfg.weights)
        .map_err(|e| ComeError::InvalidConfig(format!("source weights: {e}")))?;
    let samples: Vec<Sample> = (0..cfg.samples)
        .map(|i| {
            let mut rng = seeds.substream(Stream::Data, i as u64 + 1);
            let source = pick.sample(&mut rng);
            draw_sample(cfg, &specs, &shared, source, &mut rng)
        })
        .collect();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seeds.substream(Stream::Batching, 0));
    let n_test = (cfg.test_fraction * cfg.samples as f64).round() as usize;
    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| Dataset {
        tokens: cfg.tokens,
        width: cfg.width,
        samples: idx.iter().map(|&i| slots[i].take().expect("each index once")).collect(),
    };
    let (test_idx, train_idx) = order.split_at(n_test);
    let test = take(test_idx);
    let train = take(train_idx);
    Ok(GeneratedData {
        train,
        test,
        sources: specs,
        shared,
    })
}

/// Splits `data` into every source except `holdout` and `holdout` alone.
pub fn leave_source_out(data: &Dataset, holdout: usize) -> Result<(Dataset, Dataset)> {
    if !data.samples.iter().any(|s| s.source == holdout) {
        return Err(ComeError::InvalidArgument(format!(
            "holdout source {holdout} has no samples"
        )));
    }
    let mut train = Dataset::empty(data.tokens, data.width);
    let mut test = Dataset::empty(data.tokens, data.width);
    for s in &data.samples {
        if s.source == holdout {
            test.samples.push(s.clone());
        } else {
            train.samples.push(s.clone());
        }
    }
    Ok((train, test))
}

/// Concatenates two datasets of the same shape.
pub fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    if (a.tokens, a.width) != (b.tokens, b.width) {
        return Err(ComeError::shape(
            "concat",
            format!("{}x{}", a.tokens, a.width),
            format!("{}x{}", b.tokens, b.width),
        ));
    }
    let mut out = a.clone();
    out.samples.extend(b.samples.iter().cloned());
    Ok(out)
}
