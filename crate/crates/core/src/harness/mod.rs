//! Training, evaluation, ablations, sweeps and the gradient suite.

mod config;
mod experiments;
mod gradsuite;
mod inspect;
mod metrics;

pub use config::{Ablation, DataConfig, ModelConfig, RunConfig, TrainConfig};
pub use experiments::{
    ablation_csv, dense_baseline, run_ablations, run_parallel, sweep, sweep_csv, thread_count, AblationRow,
    SweepAxis, SweepRow, Variant,
};
pub use gradsuite::{gradient_suite, gradsuite_table, GradSuiteRow};
pub use inspect::{pca2, route_dump, RouteDump, RouteRow};
pub use metrics::{
    balance_csv, eval_csv, evaluate, metrics_csv, routing_purity, BalanceRow, EvalRecord, MetricsRow, Purity,
    METRICS_HEADER,
};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::container::{read_dataset_dir, sha256_hex, Checkpoint};
use crate::datagen::{concat, gen_dataset, leave_source_out, Dataset, GeneratorConfig};
use crate::error::{ComeError, Result};
use crate::model::{ClusterInput, Model};
use crate::numerics::{adamw_step, OptState, Parameters, Seeds, Stream};

/// Largest tolerated `|F^E − f_st − f_se − f_s2|` on a training batch.
pub const EQ1_TOLERANCE: f64 = 1e-12;

/// Train and test splits for one run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
    pub generator: GeneratorConfig,
}

/// Loads the dataset directory named in the config, or generates the data.
pub fn load_data(cfg: &RunConfig) -> Result<RunData> {
    let (train, test, generator) = match &cfg.data.path {
        Some(p) => {
            let (tr, te, side) = read_dataset_dir(Path::new(p))?;
            (tr, te, side.generator)
        }
        None => {
            let g = gen_dataset(&cfg.data.generator, cfg.data_seed())?;
            (g.train, g.test, cfg.data.generator.clone())
        }
    };
    let (train, test) = match cfg.data.holdout_source {
        Some(h) => leave_source_out(&concat(&train, &test)?, h)?,
        None => (train, test),
    };
    if train.is_empty() || test.is_empty() {
        return Err(ComeError::InvalidArgument("empty train or test split".into()));
    }
    Ok(RunData { train, test, generator })
}

/// Everything a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub balance: Vec<BalanceRow>,
    pub final_eval: EvalRecord,
    pub init_digest: String,
    pub final_digest: String,
    pub frozen_before: [String; 2],
    pub frozen_after: [String; 2],
    pub steps_completed: usize,
    /// Set when training stopped on a non-finite loss or parameter; the
    /// model is then the last finite one.
    pub diverged: Option<String>,
    pub max_eq1_residual: f64,
}

/// Sample indices for every step: shuffled epochs from the batching stream.
fn batch_schedule(n: usize, batch: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let seeds = Seeds::new(seed);
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    while out.len() < steps {
        if pos + batch > order.len() {
            order = (0..n).collect();
            order.shuffle(&mut seeds.substream(Stream::Batching, epoch + 1));
            epoch += 1;
            pos = 0;
            if batch > n {
                out.push(order.clone());
                continue;
            }
        }
        out.push(order[pos..pos + batch].to_vec());
        pos += batch;
    }
    out
}

/// Trains a model on `data.train` from the config's seed.
pub fn train(cfg: &RunConfig, data: &RunData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let arch = cfg.architecture(&data.generator)?;
    let mut model = Model::init(arch, cfg.seed)?;
    let init_digest = model.params.digest();
    let frozen_before = model.frozen_digests();
    let mut opt = OptState::new(cfg.optim, &model.params);
    let schedule = batch_schedule(data.train.len(), cfg.train.batch_size, cfg.train.steps, cfg.seed);
    let seeds = Seeds::new(cfg.seed);
    let mut metrics = Vec::new();
    let mut balance = Vec::new();
    let mut window = (0usize, 0usize);
    let mut max_res: f64 = 0.0;
    let mut diverged = None;
    let mut completed = 0;

    for (step, idx) in schedule.iter().enumerate() {
        let (batch, labels) = data.train.batch(idx)?;
        let mut rng = seeds.substream(Stream::Cluster, step as u64);
        let pass = match model.forward(&batch, &labels, ClusterInput::Compute(&mut rng), None) {
            Ok(p) => p,
            Err(ComeError::NonFinite(what)) => {
                diverged = Some(format!("step {step}: non-finite {what}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if pass.eq1_residual >= EQ1_TOLERANCE {
            return Err(ComeError::Diverged {
                step,
                reason: format!("aggregate residual {} exceeds {EQ1_TOLERANCE}", pass.eq1_residual),
            });
        }
        max_res = max_res.max(pass.eq1_residual);
        if !pass.report.total.is_finite() {
            diverged = Some(format!("step {step}: loss is {}", pass.report.total));
            break;
        }
        let grads = model.backward(&pass)?;
        let mut next = model.params.clone();
        adamw_step(&mut next, &grads, &mut opt)?;
        if !next.all_finite() {
            diverged = Some(format!("step {step}: non-finite parameters after update"));
            break;
        }
        model.params = next;
        completed = step + 1;
        window.0 += pass.correct();
        window.1 += labels.len();

        if completed % cfg.train.log_every == 0 || completed == cfg.train.steps {
            let limit = match cfg.train.log_eval_batches {
                0 => None,
                n => Some(n),
            };
            let ev = evaluate(&model, &data.test, cfg.train.batch_size, cfg.seed, limit)?;
            metrics.push(MetricsRow::new(completed, &pass, window, &ev));
            balance.push(BalanceRow {
                step: completed,
                importance: pass.report.importance.clone(),
                load: pass.report.load.clone(),
            });
            window = (0, 0);
        }
    }
    let final_eval = match evaluate(&model, &data.test, cfg.train.batch_size, cfg.seed, None) {
        Err(ComeError::NonFinite(_)) if diverged.is_some() => EvalRecord::undefined(&model.arch),
        r => r?,
    };
    Ok(TrainOutcome {
        final_digest: model.params.digest(),
        frozen_after: model.frozen_digests(),
        model,
        metrics,
        balance,
        final_eval,
        init_digest,
        frozen_before,
        steps_completed: completed,
        diverged,
        max_eq1_residual: max_res,
    })
}

/// Reads a checkpoint into a model built from `cfg`.
pub fn load_model(cfg: &RunConfig, generator: &GeneratorConfig, checkpoint: &Path) -> Result<Model> {
    let arch = cfg.architecture(generator)?;
    let mut model = Model::init(arch, cfg.seed)?;
    let ck = Checkpoint::read(checkpoint)?;
    if ck.frozen_seeds != model.arch.frozen_seeds {
        return Err(ComeError::InvalidConfig(format!(
            "checkpoint frozen seeds {:?} differ from config {:?}",
            ck.frozen_seeds, model.arch.frozen_seeds
        )));
    }
    ck.load_into(&mut model.params)?;
    Ok(model)
}

/// Run manifest written next to every run's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub command: String,
    pub version: String,
    pub config: RunConfig,
    pub data_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub dense_hidden: usize,
    pub come_active_params: usize,
    pub trainable_params: usize,
    pub steps_completed: usize,
    pub status: String,
    pub digests: Digests,
    pub final_eval: EvalRecord,
    pub max_eq1_residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Digests {
    pub init_params: String,
    pub final_params: String,
    pub frozen_before: [String; 2],
    pub frozen_after: [String; 2],
    pub metrics_csv: String,
    pub checkpoint: String,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const BALANCE_FILE: &str = "balance.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes metrics, balance vectors, final evaluation, checkpoint and
/// manifest into `dir`.
pub fn write_run(dir: &Path, cfg: &RunConfig, data: &RunData, out: &TrainOutcome) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let metrics_csv = metrics::metrics_csv(&out.metrics);
    fs::write(dir.join(METRICS_FILE), &metrics_csv)?;
    fs::write(dir.join(BALANCE_FILE), metrics::balance_csv(&out.balance))?;
    fs::write(dir.join(EVAL_FILE), metrics::eval_csv(&[("test", &out.final_eval)]))?;
    let ck = Checkpoint::from_params(&out.model.params, out.model.arch.frozen_seeds.to_vec()).encode()?;
    fs::write(dir.join(CHECKPOINT_FILE), &ck)?;
    let arch = &out.model.arch;
    let manifest = Manifest {
        kind: "manifest".into(),
        command: "train".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        data_seed: cfg.data_seed(),
        train_samples: data.train.len(),
        test_samples: data.test.len(),
        dense_hidden: arch.dense_hidden,
        come_active_params: arch.come_active_params(),
        trainable_params: out.model.params.param_count(),
        steps_completed: out.steps_completed,
        status: match &out.diverged {
            None => "ok".into(),
            Some(r) => format!("diverged: {r}"),
        },
        digests: Digests {
            init_params: out.init_digest.clone(),
            final_params: out.final_digest.clone(),
            frozen_before: out.frozen_before.clone(),
            frozen_after: out.frozen_after.clone(),
            metrics_csv: sha256_hex(metrics_csv.as_bytes()),
            checkpoint: sha256_hex(&ck),
        },
        final_eval: out.final_eval.clone(),
        max_eq1_residual: out.max_eq1_residual,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}
