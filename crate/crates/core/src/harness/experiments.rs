use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{load_data, train, RunConfig, RunData};
use crate::error::{ComeError, Result};
use crate::model::ModelKind;

/// Worker threads for independent runs: `COME_THREADS`, default 1.
pub fn thread_count() -> Result<usize> {
    match std::env::var("COME_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(ComeError::InvalidConfig(format!(
                "COME_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

/// Maps `f` over `items` on at most `threads` workers, keeping input order.
pub fn run_parallel<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    if threads <= 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| ComeError::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| items.into_par_iter().map(f).collect())
}

/// The ablation variants: the full model and five single removals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSte,
    NoSee,
    NoDse,
    NoClustering,
    NoTb,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoSte,
        Variant::NoSee,
        Variant::NoDse,
        Variant::NoClustering,
        Variant::NoTb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSte => "no_ste",
            Variant::NoSee => "no_see",
            Variant::NoDse => "no_dse",
            Variant::NoClustering => "no_clustering",
            Variant::NoTb => "no_tb",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        let a = &mut c.ablation;
        match self {
            Variant::Full => {}
            Variant::NoSte => a.no_ste = true,
            Variant::NoSee => a.no_see = true,
            Variant::NoDse => a.no_dse = true,
            Variant::NoClustering => a.no_clustering = true,
            Variant::NoTb => a.no_tb = true,
        }
        c
    }
}

/// The dense single-FFN baseline for `cfg`, with its hidden width matched
/// to the COME layer's active parameter count unless set explicitly.
pub fn dense_baseline(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    c.model.kind = ModelKind::Dense;
    c.ablation = Default::default();
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub accuracy: f64,
    pub purity: f64,
    pub admitted_purity: f64,
    pub utilization_cv: f64,
}

/// Trains every variant for every seed. Variants of one seed share the
/// dataset and the initialization.
pub fn run_ablations(base: &RunConfig, seeds: &[u64], threads: usize) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let data: Vec<RunData> = run_parallel(seeds.to_vec(), threads, |s| {
        load_data(&RunConfig {
            seed: s,
            ..base.clone()
        })
    })?;
    let jobs: Vec<(usize, Variant)> = (0..seeds.len())
        .flat_map(|i| Variant::ALL.into_iter().map(move |v| (i, v)))
        .collect();
    run_parallel(jobs, threads, |(i, v)| {
        let cfg = v.apply(&RunConfig {
            seed: seeds[i],
            ..base.clone()
        });
        let out = train(&cfg, &data[i])?;
        if let Some(d) = out.diverged {
            return Err(ComeError::Diverged {
                step: out.steps_completed,
                reason: format!("{} seed {}: {d}", v.name(), seeds[i]),
            });
        }
        let e = out.final_eval;
        Ok(AblationRow {
            variant: v,
            seed: seeds[i],
            accuracy: e.accuracy,
            purity: e.purity,
            admitted_purity: e.admitted_purity,
            utilization_cv: e.utilization_cv,
        })
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,accuracy,purity,admitted_purity,utilization_cv\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.variant.name(),
            r.seed,
            r.accuracy,
            r.purity,
            r.admitted_purity,
            r.utilization_cv
        );
    }
    s
}

/// Hyperparameter axes swept in the experts/top-K study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Experts,
    Topk,
}

impl SweepAxis {
    pub fn values(self) -> &'static [usize] {
        match self {
            SweepAxis::Experts => &[4, 8, 10],
            SweepAxis::Topk => &[1, 2, 3, 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Experts => "experts",
            SweepAxis::Topk => "topk",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "experts" => Ok(SweepAxis::Experts),
            "topk" => Ok(SweepAxis::Topk),
            _ => Err(ComeError::InvalidArgument(format!(
                "unknown sweep axis {s:?} (expected experts or topk)"
            ))),
        }
    }

    pub fn apply(self, base: &RunConfig, value: usize) -> RunConfig {
        let mut c = base.clone();
        match self {
            SweepAxis::Experts => c.model.experts = value,
            SweepAxis::Topk => c.router.top_k = value,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub seed: u64,
    pub group_size: usize,
    pub accuracy: f64,
    pub purity: f64,
    pub admitted_purity: f64,
    pub utilization_cv: f64,
    pub overflow_rate: f64,
}

/// One run per axis value, all on the base seed and dataset.
pub fn sweep(base: &RunConfig, axis: SweepAxis, threads: usize) -> Result<Vec<SweepRow>> {
    let configs: Vec<(usize, RunConfig)> = axis.values().iter().map(|&v| (v, axis.apply(base, v))).collect();
    for (_, c) in &configs {
        c.validate()?;
    }
    let data = load_data(base)?;
    run_parallel(configs, threads, |(value, cfg)| {
        let out = train(&cfg, &data)?;
        let e = &out.final_eval;
        Ok(SweepRow {
            axis,
            value,
            seed: cfg.seed,
            group_size: out.model.arch.experts / out.model.arch.sources,
            accuracy: e.accuracy,
            purity: e.purity,
            admitted_purity: e.admitted_purity,
            utilization_cv: e.utilization_cv,
            overflow_rate: e.overflow_rate,
        })
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,value,seed,group_size,accuracy,purity,admitted_purity,utilization_cv,overflow_rate\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.axis.name(),
            r.value,
            r.seed,
            r.group_size,
            r.accuracy,
            r.purity,
            r.admitted_purity,
            r.utilization_cv,
            r.overflow_rate
        );
    }
    s
}
