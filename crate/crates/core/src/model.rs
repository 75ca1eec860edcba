//! The full COME layer with a classification head, and the dense
//! single-FFN baseline it is compared against.
//!
//! Forward pass of the COME model on a batch of samples:
//!
//! ```text
//! X → attention → Y
//! Y → clustering → F_c            (constant for backprop)
//! [Y | F_c] → DR → F' → router → g → top-K → dispatch → f_s2
//! Y → frozen structure expert → f_st
//! Y → frozen semantic expert  → f_se
//! F^E = f_st + f_se + f_s2 → mean over each sample's tokens → linear head
//! ```
//!
//! The loss is the task cross-entropy plus the weighted traceability,
//! importance and load losses on `g`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{mha_backward, mha_forward, MhaCache, MhaParams};
use crate::clustering::{fine2coarse, multistep, ClusterModel, MultiStepConfig};
use crate::error::{ComeError, Result};
use crate::experts::{
    come_aggregate, dr_backward, dr_project, expert_backward, expert_forward, shared_backward_input,
    shared_forward, DimReduction, DrOutput, ExpertBank, ExpertCache, FfnCache, FrozenSharedExpert, SharedKind,
    SourceExpert,
};
use crate::losses::{
    aux_gradient, importance_loss, load_loss, task_loss, total_loss, traceability_loss, LossConfig, LossReport,
};
use crate::numerics::{scaled_uniform, Mat, Parameters, Seeds, Stream, StreamRng};
use crate::router::{
    build_dispatch, combination_grad, gate, router_backward, topk_select, DispatchPlan, GateMatrix, Route,
    RouterConfig, RouterWeights,
};
use crate::tokens::TokenBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Come,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStrategy {
    Fine2coarse,
    Multistep,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    pub strategy: ClusterStrategy,
    /// Fine centers for fine2coarse.
    pub fine: usize,
    /// Coarse centers for fine2coarse.
    pub coarse: usize,
    pub max_iters: usize,
    pub multistep: MultiStepConfig,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            strategy: ClusterStrategy::Fine2coarse,
            fine: 16,
            coarse: 8,
            max_iters: 20,
            multistep: MultiStepConfig::default(),
        }
    }
}

/// Everything needed to build and run a model, already resolved against
/// the data dimensions and the ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub kind: ModelKind,
    pub width: usize,
    pub classes: usize,
    pub sources: usize,
    pub heads: usize,
    pub experts: usize,
    pub expert_hidden: usize,
    pub dense_hidden: usize,
    pub router: RouterConfig,
    pub loss: LossConfig,
    pub clustering: ClusteringConfig,
    pub use_ste: bool,
    pub use_see: bool,
    pub use_routed: bool,
    pub use_traceability: bool,
    pub frozen_seeds: [u64; 2],
}

impl Architecture {
    /// Trainable parameters a token touches in the full COME layer with
    /// `top_k` experts, counting the frozen shared experts as well.
    pub fn come_active_params(&self) -> usize {
        let (d, h) = (self.width, self.expert_hidden);
        let expert = 2 * d * h + h + d;
        let router = self.experts * d + self.experts;
        let dr = 2 * d * d + d;
        let frozen = 2 * (d * d + d);
        self.router.top_k * expert + router + dr + frozen
    }

    /// Hidden width `H` of a `D→H→D` FFN whose `2DH + H + D` parameters
    /// best match [`come_active_params`](Self::come_active_params).
    pub fn matched_dense_hidden(&self) -> usize {
        let d = self.width as f64;
        let target = self.come_active_params() as f64;
        (((target - d) / (2.0 * d + 1.0)).round() as usize).max(1)
    }
}

/// Linear read-out from the pooled layer output to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub w: Mat,
    pub b: Mat,
}

impl Head {
    fn init(classes: usize, width: usize, rng: &mut impl Rng) -> Self {
        Head {
            w: scaled_uniform(classes, width, width, rng),
            b: Mat::zeros(1, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComeParams {
    pub attn: MhaParams,
    pub dr: DimReduction,
    pub router: RouterWeights,
    pub bank: ExpertBank,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub attn: MhaParams,
    pub ffn: SourceExpert,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Come(ComeParams),
    Dense(DenseParams),
}

fn visit_head<'a>(h: &'a Head, f: &mut dyn FnMut(&str, &'a Mat)) {
    f("head.w", &h.w);
    f("head.b", &h.b);
}

fn visit_head_mut(h: &mut Head, f: &mut dyn FnMut(&str, &mut Mat)) {
    f("head.w", &mut h.w);
    f("head.b", &mut h.b);
}

impl Parameters for ModelParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Mat)) {
        match self {
            ModelParams::Come(p) => {
                p.attn.visit(f);
                p.dr.visit(f);
                p.router.visit(f);
                p.bank.visit(f);
                visit_head(&p.head, f);
            }
            ModelParams::Dense(p) => {
                p.attn.visit(f);
                p.ffn.visit(f);
                visit_head(&p.head, f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        match self {
            ModelParams::Come(p) => {
                p.attn.visit_mut(f);
                p.dr.visit_mut(f);
                p.router.visit_mut(f);
                p.bank.visit_mut(f);
                visit_head_mut(&mut p.head, f);
            }
            ModelParams::Dense(p) => {
                p.attn.visit_mut(f);
                p.ffn.visit_mut(f);
                visit_head_mut(&mut p.head, f);
            }
        }
    }
}

/// Where the per-token cluster features come from.
pub enum ClusterInput<'a> {
    /// Cluster the attended tokens of this batch with the given stream.
    Compute(&'a mut StreamRng),
    /// Reuse a given clustering (held constant, e.g. for gradient checks).
    Fixed(&'a ClusterModel),
}

/// Activations of the routed part of one forward pass.
#[derive(Debug, Clone)]
pub struct RoutedPass {
    pub dr: DrOutput,
    pub gates: GateMatrix,
    pub plan: DispatchPlan,
    pub expert_cache: ExpertCache,
    pub aux: AuxTerms,
}

#[derive(Debug, Clone)]
pub struct AuxTerms {
    pub tb: crate::losses::AuxLoss,
    pub ip: crate::losses::AuxLoss,
    pub load: crate::losses::AuxLoss,
}

/// Everything one forward pass produced.
#[derive(Debug, Clone)]
pub struct Pass {
    pub logits: Mat,
    pub labels: Vec<usize>,
    pub report: LossReport,
    pub sources: Vec<usize>,
    pub tokens_per_sample: usize,
    pub clusters: Option<ClusterModel>,
    pub routed: Option<RoutedPass>,
    /// `max |F^E − f_st − f_se − f_s2|`.
    pub eq1_residual: f64,
    attended: Mat,
    attn_cache: MhaCache,
    f_st: Option<Mat>,
    f_se: Option<Mat>,
    dense_cache: Option<FfnCache>,
    pooled: Mat,
    d_logits: Mat,
}

impl Pass {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .row_iter()
            .map(|r| crate::router::top_k_indices(r, 1)[0])
            .collect()
    }

    pub fn correct(&self) -> usize {
        self.predictions().iter().zip(&self.labels).filter(|(p, l)| p == l).count()
    }

    pub fn plan(&self) -> Option<&DispatchPlan> {
        self.routed.as_ref().map(|r| &r.plan)
    }

    pub fn gates(&self) -> Option<&GateMatrix> {
        self.routed.as_ref().map(|r| &r.gates)
    }
}

/// A model ready to run: architecture, trainable parameters and the two
/// frozen shared experts.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub params: ModelParams,
    frozen: [FrozenSharedExpert; 2],
}

impl Model {
    /// Initializes parameters from the `Init` stream of `seed`.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        validate_arch(&arch)?;
        let mut rng = Seeds::new(seed).stream(Stream::Init);
        let attn = MhaParams::init(arch.width, arch.heads, &mut rng)?;
        let params = match arch.kind {
            ModelKind::Come => {
                let router = RouterWeights::init(arch.experts, arch.width, &mut rng);
                let bank = ExpertBank::init(arch.experts, arch.sources, arch.width, arch.expert_hidden, &mut rng)?;
                let head = Head::init(arch.classes, arch.width, &mut rng);
                ModelParams::Come(ComeParams {
                    attn,
                    dr: DimReduction::identity(arch.width),
                    router,
                    bank,
                    head,
                })
            }
            ModelKind::Dense => {
                let ffn = SourceExpert::init(arch.width, arch.dense_hidden, &mut rng);
                let head = Head::init(arch.classes, arch.width, &mut rng);
                ModelParams::Dense(DenseParams { attn, ffn, head })
            }
        };
        Ok(Self::with_params(arch, params))
    }

    pub fn with_params(arch: Architecture, params: ModelParams) -> Self {
        let frozen = [
            FrozenSharedExpert::new(SharedKind::Structure, arch.width, arch.frozen_seeds[0]),
            FrozenSharedExpert::new(SharedKind::Semantic, arch.width, arch.frozen_seeds[1]),
        ];
        Model { arch, params, frozen }
    }

    pub fn frozen(&self) -> &[FrozenSharedExpert; 2] {
        &self.frozen
    }

    /// SHA-256 digests of the two frozen experts.
    pub fn frozen_digests(&self) -> [String; 2] {
        [self.frozen[0].digest(), self.frozen[1].digest()]
    }

    /// Source-to-expert groups used by the traceability loss.
    pub fn groups(&self) -> Vec<std::ops::Range<usize>> {
        match &self.params {
            ModelParams::Come(p) => (0..self.arch.sources).map(|s| p.bank.group(s)).collect(),
            ModelParams::Dense(_) => Vec::new(),
        }
    }

    /// Runs the model on `batch`. `fixed_plan`, when given, freezes the
    /// top-K selection and admission decisions of a previous pass; the
    /// combination weights are still recomputed from the current gates.
    pub fn forward(
        &self,
        batch: &TokenBatch,
        labels: &[usize],
        clusters: ClusterInput<'_>,
        fixed_plan: Option<&DispatchPlan>,
    ) -> Result<Pass> {
        if batch.width() != self.arch.width {
            return Err(ComeError::shape("model forward", self.arch.width, batch.width()));
        }
        if labels.len() != batch.samples() {
            return Err(ComeError::shape("model forward labels", batch.samples(), labels.len()));
        }
        if let Some(&s) = batch.sources.iter().find(|&&s| s >= self.arch.sources) {
            return Err(ComeError::InvalidArgument(format!(
                "token source {s} outside [0, {})",
                self.arch.sources
            )));
        }
        let t = batch.tokens_per_sample;
        let (attn, head) = match &self.params {
            ModelParams::Come(p) => (&p.attn, &p.head),
            ModelParams::Dense(p) => (&p.attn, &p.head),
        };
        let (y, attn_cache) = mha_forward(batch, attn)?;
        let attended = y.features;

        let mut clusters_out = None;
        let mut routed = None;
        let mut f_st = None;
        let mut f_se = None;
        let mut dense_cache = None;
        let mut eq1_residual = 0.0;

        let layer_out = match &self.params {
            ModelParams::Come(p) => {
                if self.arch.use_ste {
                    f_st = Some(shared_forward(&self.frozen[0], &attended)?);
                }
                if self.arch.use_see {
                    f_se = Some(shared_forward(&self.frozen[1], &attended)?);
                }
                let f_s2 = if self.arch.use_routed {
                    let cm = match clusters {
                        ClusterInput::Fixed(m) => Some(m.clone()),
                        ClusterInput::Compute(rng) => self.cluster(&attended, rng)?,
                    };
                    let r = self.route(p, &attended, cm.as_ref(), &batch.sources, fixed_plan)?;
                    let (out, cache) = expert_forward(&p.bank, &r.0, &r.1.output)?;
                    clusters_out = cm;
                    routed = Some(RoutedPass {
                        dr: r.1,
                        gates: r.2,
                        plan: r.0,
                        expert_cache: cache,
                        aux: r.3,
                    });
                    out
                } else {
                    Mat::zeros(attended.rows(), attended.cols())
                };
                let zeros = Mat::zeros(attended.rows(), attended.cols());
                let st = f_st.as_ref().unwrap_or(&zeros);
                let se = f_se.as_ref().unwrap_or(&zeros);
                let fe = come_aggregate(st, se, &f_s2)?;
                for i in 0..fe.len() {
                    let r = fe.data()[i] - st.data()[i] - se.data()[i] - f_s2.data()[i];
                    eq1_residual = f64::max(eq1_residual, r.abs());
                }
                fe
            }
            ModelParams::Dense(p) => {
                let c = p.ffn.forward(&attended);
                let out = c.output.clone();
                dense_cache = Some(c);
                out
            }
        };
        layer_out.ensure_finite("layer output")?;

        let samples = batch.samples();
        let mut pooled = Mat::zeros(samples, self.arch.width);
        for s in 0..samples {
            let dst = pooled.row_mut(s);
            for tok in s * t..(s + 1) * t {
                for (a, b) in dst.iter_mut().zip(layer_out.row(tok)) {
                    *a += b;
                }
            }
            dst.iter_mut().for_each(|a| *a /= t as f64);
        }
        let mut logits = pooled.matmul_nt(&head.w);
        logits.add_row_broadcast(&head.b);
        let (ce, d_logits) = task_loss(&logits, labels)?;
        let report = match &routed {
            Some(r) => total_loss(ce, Some(&r.aux.tb), Some(&r.aux.ip), Some(&r.aux.load), &self.effective_loss()),
            None => total_loss(ce, None, None, None, &self.effective_loss()),
        };
        Ok(Pass {
            logits,
            labels: labels.to_vec(),
            report,
            sources: batch.sources.clone(),
            tokens_per_sample: t,
            clusters: clusters_out,
            routed,
            eq1_residual,
            attended,
            attn_cache,
            f_st,
            f_se,
            dense_cache,
            pooled,
            d_logits,
        })
    }

    fn effective_loss(&self) -> LossConfig {
        LossConfig {
            traceability_weight: if self.arch.use_traceability {
                self.arch.loss.traceability_weight
            } else {
                0.0
            },
            ..self.arch.loss
        }
    }

    fn cluster(&self, attended: &Mat, rng: &mut StreamRng) -> Result<Option<ClusterModel>> {
        let c = &self.arch.clustering;
        Ok(match c.strategy {
            ClusterStrategy::None => None,
            ClusterStrategy::Fine2coarse => Some(fine2coarse(attended, c.fine, c.coarse, c.max_iters, rng)?),
            ClusterStrategy::Multistep => Some(multistep(attended, c.multistep, rng)?.0),
        })
    }

    fn route(
        &self,
        p: &ComeParams,
        attended: &Mat,
        clusters: Option<&ClusterModel>,
        sources: &[usize],
        fixed_plan: Option<&DispatchPlan>,
    ) -> Result<(DispatchPlan, DrOutput, GateMatrix, AuxTerms)> {
        let rc = &self.arch.router;
        let dr = dr_project(attended, clusters, &p.dr)?;
        let gates = gate(&dr.output, &p.router, rc.temperature)?;
        let plan = match fixed_plan {
            None => build_dispatch(&topk_select(&gates, rc.top_k, rc.renormalize)?, rc.capacity_factor)?,
            Some(tpl) => replan(&gates, tpl, rc.renormalize)?,
        };
        for (j, adm) in plan.admitted.iter().enumerate() {
            if adm.len() > plan.capacity {
                return Err(ComeError::InvalidArgument(format!(
                    "expert {j} admitted {} tokens over capacity {}",
                    adm.len(),
                    plan.capacity
                )));
            }
        }
        let lc = &self.arch.loss;
        let groups: Vec<_> = (0..self.arch.sources).map(|s| p.bank.group(s)).collect();
        let tb = if groups.iter().all(|g| !g.is_empty()) {
            traceability_loss(&gates, sources, &groups, lc.traceability_reduction)?
        } else {
            zero_aux(&gates)
        };
        let aux = AuxTerms {
            tb,
            ip: importance_loss(&gates),
            load: load_loss(&gates, lc.load_mode, rc.top_k),
        };
        Ok((plan, dr, gates, aux))
    }

    /// Gradient of `pass.report.total` with respect to every trainable
    /// parameter. Clustering and the routing decisions are constants.
    pub fn backward(&self, pass: &Pass) -> Result<ModelParams> {
        let t = pass.tokens_per_sample;
        let head = match &self.params {
            ModelParams::Come(p) => &p.head,
            ModelParams::Dense(p) => &p.head,
        };
        let d_head = Head {
            w: pass.d_logits.matmul_tn(&pass.pooled),
            b: pass.d_logits.col_sums(),
        };
        let d_pooled = pass.d_logits.matmul(&head.w);
        let mut d_layer = Mat::zeros(pass.attended.rows(), pass.attended.cols());
        for tok in 0..d_layer.rows() {
            let s = tok / t;
            for (a, b) in d_layer.row_mut(tok).iter_mut().zip(d_pooled.row(s)) {
                *a = b / t as f64;
            }
        }
        match &self.params {
            ModelParams::Dense(p) => {
                let cache = pass.dense_cache.as_ref().expect("dense pass");
                let (d_att, d_ffn) = p.ffn.backward(cache, &d_layer);
                let (_, d_attn) = mha_backward(&p.attn, &pass.attn_cache, &d_att)?;
                Ok(ModelParams::Dense(DenseParams {
                    attn: d_attn,
                    ffn: d_ffn,
                    head: d_head,
                }))
            }
            ModelParams::Come(p) => {
                let mut d_att = Mat::zeros(d_layer.rows(), d_layer.cols());
                if let Some(f) = &pass.f_st {
                    d_att.add_assign(&shared_backward_input(&self.frozen[0], f, &d_layer)?);
                }
                if let Some(f) = &pass.f_se {
                    d_att.add_assign(&shared_backward_input(&self.frozen[1], f, &d_layer)?);
                }
                let mut grads = ComeParams {
                    attn: p.attn.zeroed(),
                    dr: p.dr.zeroed(),
                    router: p.router.zeroed(),
                    bank: p.bank.zeroed(),
                    head: d_head,
                };
                if let Some(r) = &pass.routed {
                    let eg = expert_backward(&p.bank, &r.plan, &r.expert_cache, &d_layer)?;
                    let mut dg = combination_grad(&r.gates, &r.plan, &eg.d_weight, self.arch.router.renormalize)?;
                    let (dg_aux, dz) = aux_gradient(
                        r.gates.tokens(),
                        r.gates.experts(),
                        Some(&r.aux.tb),
                        Some(&r.aux.ip),
                        Some(&r.aux.load),
                        &self.effective_loss(),
                    );
                    dg.add_assign(&dg_aux);
                    let rg = router_backward(&r.dr.output, &p.router, &r.gates, &dg, dz.as_ref())?;
                    let mut d_fprime = eg.d_input;
                    d_fprime.add_assign(&rg.d_input);
                    let (d_from_dr, d_dr) = dr_backward(&p.dr, &r.dr, &d_fprime);
                    d_att.add_assign(&d_from_dr);
                    grads.dr = d_dr;
                    grads.router = rg.weights;
                    grads.bank = eg.bank;
                }
                let (_, d_attn) = mha_backward(&p.attn, &pass.attn_cache, &d_att)?;
                grads.attn = d_attn;
                Ok(ModelParams::Come(grads))
            }
        }
    }
}

fn zero_aux(gates: &GateMatrix) -> crate::losses::AuxLoss {
    crate::losses::AuxLoss {
        value: 0.0,
        d_probs: Mat::zeros(gates.tokens(), gates.experts()),
        d_logits: None,
        per_expert: Vec::new(),
        clamped: 0,
    }
}

/// Same selections and admissions as `template`, with combination weights
/// recomputed from `gates`.
pub fn replan(gates: &GateMatrix, template: &DispatchPlan, renormalize: bool) -> Result<DispatchPlan> {
    if template.tokens() != gates.tokens() || template.num_experts != gates.experts() {
        return Err(ComeError::shape(
            "replan",
            format!("{}x{}", template.tokens(), template.num_experts),
            format!("{}x{}", gates.tokens(), gates.experts()),
        ));
    }
    let mut plan = template.clone();
    for (t, routes) in plan.routes.iter_mut().enumerate() {
        let row = gates.probs.row(t);
        let s: f64 = routes.iter().map(|r| row[r.expert]).sum();
        for r in routes.iter_mut() {
            *r = Route {
                weight: if renormalize { row[r.expert] / s } else { row[r.expert] },
                ..*r
            };
        }
    }
    Ok(plan)
}

fn validate_arch(a: &Architecture) -> Result<()> {
    let bad = |m: String| Err(ComeError::InvalidConfig(m));
    if a.width == 0 || a.classes < 2 || a.sources == 0 {
        return bad(format!(
            "width {}, classes {}, sources {} are degenerate",
            a.width, a.classes, a.sources
        ));
    }
    if a.heads == 0 || !a.width.is_multiple_of(a.heads) {
        return bad(format!("width {} is not divisible by {} heads", a.width, a.heads));
    }
    if a.kind == ModelKind::Dense {
        if a.dense_hidden == 0 {
            return bad("dense hidden width must be positive".into());
        }
        return Ok(());
    }
    if a.experts == 0 || a.expert_hidden == 0 {
        return bad("need at least one expert with a positive hidden width".into());
    }
    a.router.validate(a.experts)?;
    if a.use_routed && a.use_traceability && a.experts < a.sources {
        return bad(format!(
            "traceability needs at least one expert per source ({} experts, {} sources)",
            a.experts, a.sources
        ));
    }
    if !(a.use_ste || a.use_see || a.use_routed) {
        return bad("every expert family is disabled".into());
    }
    let c = &a.clustering;
    match c.strategy {
        ClusterStrategy::Fine2coarse if c.coarse == 0 || c.fine <= c.coarse => {
            bad(format!("fine2coarse needs fine > coarse ≥ 1 (got {} and {})", c.fine, c.coarse))
        }
        ClusterStrategy::Multistep if c.multistep.k == 0 || c.multistep.steps == 0 => {
            bad("multistep needs k ≥ 1 and steps ≥ 1".into())
        }
        _ => Ok(()),
    }
}
