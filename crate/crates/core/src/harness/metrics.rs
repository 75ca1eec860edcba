use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{ComeError, Result};
use crate::model::{ClusterInput, Model, Pass};
use crate::numerics::{cv_squared, Seeds, Stream};
use crate::router::DispatchPlan;

/// Cluster streams used by evaluation start here, clear of training steps.
pub(crate) const EVAL_STREAM_BASE: u64 = 1 << 40;

/// Token counts behind the routing purity figures.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Purity {
    pub tokens: usize,
    /// Top-1 selected expert lies in the token's source group.
    pub selected_in_group: usize,
    /// ... and that route was admitted.
    pub admitted_in_group: usize,
}

impl Purity {
    pub fn purity(&self) -> f64 {
        self.selected_in_group as f64 / self.tokens.max(1) as f64
    }

    pub fn admitted_purity(&self) -> f64 {
        self.admitted_in_group as f64 / self.tokens.max(1) as f64
    }

    fn add(&mut self, o: Purity) {
        self.tokens += o.tokens;
        self.selected_in_group += o.selected_in_group;
        self.admitted_in_group += o.admitted_in_group;
    }
}

/// Counts tokens whose first-choice expert belongs to their source's group.
pub fn routing_purity(plan: &DispatchPlan, sources: &[usize], groups: &[Range<usize>]) -> Purity {
    let mut p = Purity {
        tokens: plan.tokens(),
        ..Default::default()
    };
    for (routes, &s) in plan.routes.iter().zip(sources) {
        let Some(first) = routes.first() else { continue };
        if groups.get(s).is_some_and(|g| g.contains(&first.expert)) {
            p.selected_in_group += 1;
            if first.admitted {
                p.admitted_in_group += 1;
            }
        }
    }
    p
}

/// Test-split summary of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub samples: usize,
    pub accuracy: f64,
    pub task_ce: f64,
    pub purity: f64,
    pub admitted_purity: f64,
    /// Mean number of tokens selecting each expert per batch.
    pub utilization: Vec<f64>,
    pub utilization_cv: f64,
    pub overflow_rate: f64,
    pub per_source_accuracy: Vec<f64>,
}

impl EvalRecord {
    /// A record of NaNs, for models that cannot be evaluated.
    pub fn undefined(arch: &crate::model::Architecture) -> Self {
        EvalRecord {
            samples: 0,
            accuracy: f64::NAN,
            task_ce: f64::NAN,
            purity: f64::NAN,
            admitted_purity: f64::NAN,
            utilization: vec![f64::NAN; arch.experts],
            utilization_cv: f64::NAN,
            overflow_rate: f64::NAN,
            per_source_accuracy: vec![f64::NAN; arch.sources],
        }
    }
}

/// Evaluates `model` on consecutive batches of `data` without touching its
/// parameters. `limit` caps the number of batches.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize, seed: u64, limit: Option<usize>) -> Result<EvalRecord> {
    if data.is_empty() {
        return Err(ComeError::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    if batch_size == 0 {
        return Err(ComeError::InvalidArgument("batch size must be positive".into()));
    }
    let seeds = Seeds::new(seed);
    let groups = model.groups();
    let sources = model.arch.sources;
    let mut n_batches = data.len().div_ceil(batch_size);
    if let Some(l) = limit {
        n_batches = n_batches.min(l.max(1));
    }
    let mut correct = 0;
    let mut seen = 0;
    let mut ce = 0.0;
    let mut purity = Purity::default();
    let mut util = vec![0.0; model.arch.experts];
    let mut routed_batches = 0;
    let mut overflow = 0.0;
    let mut per_source = vec![(0usize, 0usize); sources];
    for b in 0..n_batches {
        let idx = data.chunk_indices(b * batch_size, batch_size);
        let (batch, labels) = data.batch(&idx)?;
        let mut rng = seeds.substream(Stream::Cluster, EVAL_STREAM_BASE + b as u64);
        let pass: Pass = model.forward(&batch, &labels, ClusterInput::Compute(&mut rng), None)?;
        for ((pred, label), &i) in pass.predictions().iter().zip(&labels).zip(&idx) {
            let s = data.samples[i].source;
            per_source[s].1 += 1;
            if pred == label {
                correct += 1;
                per_source[s].0 += 1;
            }
        }
        seen += labels.len();
        ce += pass.report.task_ce * labels.len() as f64;
        if let Some(plan) = pass.plan() {
            purity.add(routing_purity(plan, &batch.sources, &groups));
            for (u, c) in util.iter_mut().zip(plan.selected_counts()) {
                *u += c as f64;
            }
            overflow += plan.overflow_rate();
            routed_batches += 1;
        }
    }
    let routed = routed_batches > 0;
    if routed {
        util.iter_mut().for_each(|u| *u /= routed_batches as f64);
    } else {
        util.clear();
    }
    let nan_unless = |ok: bool, v: f64| if ok { v } else { f64::NAN };
    Ok(EvalRecord {
        samples: seen,
        accuracy: correct as f64 / seen as f64,
        task_ce: ce / seen as f64,
        purity: nan_unless(routed, purity.purity()),
        admitted_purity: nan_unless(routed, purity.admitted_purity()),
        utilization_cv: nan_unless(routed, cv_squared(&util).sqrt()),
        utilization: util,
        overflow_rate: nan_unless(routed, overflow / routed_batches.max(1) as f64),
        per_source_accuracy: per_source
            .iter()
            .map(|&(c, n)| if n == 0 { f64::NAN } else { c as f64 / n as f64 })
            .collect(),
    })
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub task_ce: f64,
    pub l_tb: f64,
    pub l_ip: f64,
    pub l_load: f64,
    pub l_balance: f64,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub test_purity: f64,
    pub test_admitted_purity: f64,
    pub utilization_cv: f64,
    pub overflow_rate: f64,
    pub eq1_residual: f64,
}

pub const METRICS_HEADER: &str = "step,task_ce,l_tb,l_ip,l_load,l_balance,total,train_acc,test_acc,\
test_purity,test_admitted_purity,utilization_cv,overflow_rate,eq1_residual";

impl MetricsRow {
    /// Loss terms of the last batch, training accuracy over the logging
    /// window `(correct, seen)` and the test evaluation `ev`.
    pub fn new(step: usize, pass: &Pass, window: (usize, usize), ev: &EvalRecord) -> Self {
        let r = &pass.report;
        MetricsRow {
            step,
            task_ce: r.task_ce,
            l_tb: r.l_tb,
            l_ip: r.l_ip,
            l_load: r.l_load,
            l_balance: r.l_balance,
            total: r.total,
            train_acc: window.0 as f64 / window.1.max(1) as f64,
            test_acc: ev.accuracy,
            test_purity: ev.purity,
            test_admitted_purity: ev.admitted_purity,
            utilization_cv: ev.utilization_cv,
            overflow_rate: ev.overflow_rate,
            eq1_residual: pass.eq1_residual,
        }
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.task_ce,
            r.l_tb,
            r.l_ip,
            r.l_load,
            r.l_balance,
            r.total,
            r.train_acc,
            r.test_acc,
            r.test_purity,
            r.test_admitted_purity,
            r.utilization_cv,
            r.overflow_rate,
            r.eq1_residual
        );
    }
    s
}

/// Per-expert importance and load vectors of a logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceRow {
    pub step: usize,
    pub importance: Vec<f64>,
    pub load: Vec<f64>,
}

pub fn balance_csv(rows: &[BalanceRow]) -> String {
    let m = rows.iter().map(|r| r.importance.len()).max().unwrap_or(0);
    let mut s = String::from("step");
    for j in 0..m {
        let _ = write!(s, ",ip_{j}");
    }
    for j in 0..m {
        let _ = write!(s, ",load_{j}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}", r.step);
        for v in r.importance.iter().chain(&r.load) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn eval_csv(rows: &[(&str, &EvalRecord)]) -> String {
    let mut s = String::from("split,samples,accuracy,task_ce,purity,admitted_purity,utilization_cv,overflow_rate\n");
    for (name, e) in rows {
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{}",
            e.samples, e.accuracy, e.task_ce, e.purity, e.admitted_purity, e.utilization_cv, e.overflow_rate
        );
    }
    s
}
