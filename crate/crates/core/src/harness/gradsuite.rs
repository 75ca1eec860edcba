use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::losses::{LoadMode, LossConfig};
use crate::model::{Architecture, ClusterInput, ClusterStrategy, ClusteringConfig, Model, ModelKind};
use crate::numerics::{grad_check, Mat, Parameters, Seeds, Stream};
use crate::router::RouterConfig;
use crate::tokens::TokenBatch;

/// Largest relative error per trainable component over all seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSuiteRow {
    pub component: String,
    pub seeds: usize,
    pub coords: usize,
    pub max_rel_error: f64,
}

impl GradSuiteRow {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

const COMPONENTS: [(&str, &str); 6] = [
    ("attention", "attn."),
    ("dr", "dr."),
    ("router", "router."),
    ("experts", "experts."),
    ("dense_ffn", "ffn."),
    ("classifier", "head."),
];

fn suite_arch(kind: ModelKind, seed: u64) -> Architecture {
    // Alternate the routing options so both code paths are covered.
    let odd = seed % 2 == 1;
    Architecture {
        kind,
        width: 8,
        classes: 3,
        sources: 2,
        heads: 2,
        experts: 4,
        expert_hidden: 6,
        dense_hidden: 10,
        router: RouterConfig {
            temperature: 0.8,
            top_k: 2,
            capacity_factor: 1.25,
            renormalize: odd,
        },
        loss: LossConfig {
            load_mode: if seed % 3 == 2 { LoadMode::Margin } else { LoadMode::Literal },
            ..Default::default()
        },
        clustering: ClusteringConfig {
            strategy: if odd { ClusterStrategy::Multistep } else { ClusterStrategy::Fine2coarse },
            fine: 5,
            coarse: 2,
            max_iters: 20,
            multistep: crate::clustering::MultiStepConfig {
                k: 3,
                steps: 2,
                tau: 0.01,
                max_iters: 10,
            },
        },
        use_ste: true,
        use_see: true,
        use_routed: true,
        use_traceability: true,
        frozen_seeds: [seed, seed + 1],
    }
}

fn ranges(params: &impl Parameters) -> Vec<(String, Range<usize>)> {
    let mut out: Vec<(String, Range<usize>)> = Vec::new();
    let mut off = 0;
    params.visit(&mut |name, m| {
        let comp = COMPONENTS
            .iter()
            .find(|(_, p)| name.starts_with(p))
            .map(|(c, _)| c.to_string())
            .unwrap_or_else(|| name.to_string());
        match out.last_mut() {
            Some((c, r)) if *c == comp => r.end += m.len(),
            _ => out.push((comp, off..off + m.len())),
        }
        off += m.len();
    });
    out
}

/// Central-difference checks of the total loss with respect to every
/// trainable component, on small random models, one per seed. Clustering
/// and routing decisions are held at their values from the unperturbed pass.
pub fn gradient_suite(seeds: &[u64], h: f64) -> Result<Vec<GradSuiteRow>> {
    let mut rows: Vec<GradSuiteRow> = COMPONENTS
        .iter()
        .map(|(c, _)| GradSuiteRow {
            component: c.to_string(),
            seeds: 0,
            coords: 0,
            max_rel_error: 0.0,
        })
        .collect();
    for &seed in seeds {
        for kind in [ModelKind::Come, ModelKind::Dense] {
            let model = Model::init(suite_arch(kind, seed), seed)?;
            let mut rng = Seeds::new(seed).stream(Stream::Data);
            let (samples, t) = (3, 5);
            let x = Mat::from_fn(samples * t, 8, |_, _| rng.random_range(-1.5..1.5));
            let sources: Vec<usize> = (0..samples * t).map(|i| (i / t) % 2).collect();
            let labels: Vec<usize> = (0..samples).map(|_| rng.random_range(0..3)).collect();
            let batch = TokenBatch::new(x, sources, t)?;
            let pass = model.forward(
                &batch,
                &labels,
                ClusterInput::Compute(&mut Seeds::new(seed).stream(Stream::Cluster)),
                None,
            )?;
            let grads = model.backward(&pass)?.flatten();
            let base = model.params.flatten();
            let clusters = pass.clusters.clone();
            let plan = pass.plan().cloned();
            for (comp, range) in ranges(&model.params) {
                let mut scratch = model.clone();
                let mut flat = base.clone();
                let rep = grad_check(
                    |sub| {
                        flat[range.clone()].copy_from_slice(sub);
                        scratch.params.assign_flat(&flat);
                        let mut unused = Seeds::new(0).stream(Stream::Cluster);
                        let ci = match &clusters {
                            Some(c) => ClusterInput::Fixed(c),
                            None => ClusterInput::Compute(&mut unused),
                        };
                        scratch
                            .forward(&batch, &labels, ci, plan.as_ref())
                            .map(|p| p.report.total)
                            .unwrap_or(f64::NAN)
                    },
                    &base[range.clone()],
                    &grads[range.clone()],
                    h,
                );
                let row = rows.iter_mut().find(|r| r.component == comp).expect("known component");
                let err = if rep.non_finite.is_empty() { rep.max_rel_error } else { f64::INFINITY };
                row.max_rel_error = row.max_rel_error.max(err);
                row.coords += rep.coords_checked;
                if kind == ModelKind::Come || comp == "dense_ffn" {
                    row.seeds += 1;
                }
            }
        }
    }
    Ok(rows)
}

pub fn gradsuite_table(rows: &[GradSuiteRow], tol: f64) -> String {
    let mut s = format!("{:<12} {:>6} {:>8} {:>14}  status\n", "component", "seeds", "coords", "max_rel_error");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>8} {:>14.3e}  {}",
            r.component,
            r.seeds,
            r.coords,
            r.max_rel_error,
            if r.passed(tol) { "ok" } else { "FAIL" }
        );
    }
    s
}
