//! Expert families of the COME layer: two frozen shared experts, the bank of
//! routed source-specific FFN experts, the dimension reduction applied to
//! `[attended | cluster feature]`, and the additive aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clustering::{cluster_features, ClusterModel};
use crate::error::{ComeError, Result};
use crate::numerics::{scaled_uniform, Mat, Parameters, Seeds, Stream};
use crate::router::DispatchPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedKind {
    Structure,
    Semantic,
}

/// A fixed `tanh(x A + c)` feature extractor. Its parameters are private
/// and nothing ever produces a gradient for them.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenSharedExpert {
    kind: SharedKind,
    seed: u64,
    a: Mat,
    c: Mat,
}

impl FrozenSharedExpert {
    pub fn new(kind: SharedKind, width: usize, seed: u64) -> Self {
        let mut rng = Seeds::new(seed).substream(Stream::Frozen, kind as u64);
        let a = scaled_uniform(width, width, width, &mut rng);
        let c = Mat::from_fn(1, width, |_, _| rng.random_range(-0.5..0.5));
        FrozenSharedExpert { kind, seed, a, c }
    }

    pub fn kind(&self) -> SharedKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn width(&self) -> usize {
        self.a.rows()
    }

    /// SHA-256 of the frozen parameters.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for x in self.a.data().iter().chain(self.c.data()) {
            h.update(x.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// `tanh(x A + c)` row-wise.
pub fn shared_forward(expert: &FrozenSharedExpert, tokens: &Mat) -> Result<Mat> {
    if tokens.cols() != expert.width() {
        return Err(ComeError::shape("shared_forward", expert.width(), tokens.cols()));
    }
    let mut z = tokens.matmul(&expert.a);
    z.add_row_broadcast(&expert.c);
    Ok(z.map(f64::tanh))
}

/// Gradient with respect to the expert's input, given its forward output.
pub fn shared_backward_input(expert: &FrozenSharedExpert, output: &Mat, d_out: &Mat) -> Result<Mat> {
    if !output.same_shape(d_out) {
        return Err(ComeError::shape(
            "shared_backward_input",
            format!("{:?}", output.shape()),
            format!("{:?}", d_out.shape()),
        ));
    }
    let mut dz = d_out.clone();
    for (g, y) in dz.data_mut().iter_mut().zip(output.data()) {
        *g *= 1.0 - y * y;
    }
    Ok(dz.matmul_nt(&expert.a))
}

/// Two-layer tanh FFN, `tanh(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceExpert {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Activations of one FFN over a set of rows.
#[derive(Debug, Clone)]
pub struct FfnCache {
    pub input: Mat,
    pub hidden: Mat,
    pub output: Mat,
}

impl SourceExpert {
    pub fn init(width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        SourceExpert {
            w1: scaled_uniform(width, hidden, width, rng),
            b1: Mat::zeros(1, hidden),
            w2: scaled_uniform(hidden, width, hidden, rng),
            b2: Mat::zeros(1, width),
        }
    }

    pub fn width(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn forward(&self, x: &Mat) -> FfnCache {
        let mut h = x.matmul(&self.w1);
        h.add_row_broadcast(&self.b1);
        let h = h.map(f64::tanh);
        let mut y = h.matmul(&self.w2);
        y.add_row_broadcast(&self.b2);
        FfnCache {
            input: x.clone(),
            hidden: h,
            output: y,
        }
    }

    /// Returns `(dx, grads)`.
    pub fn backward(&self, cache: &FfnCache, dy: &Mat) -> (Mat, SourceExpert) {
        let w2 = cache.hidden.matmul_tn(dy);
        let b2 = dy.col_sums();
        let mut dh = dy.matmul_nt(&self.w2);
        for (g, h) in dh.data_mut().iter_mut().zip(cache.hidden.data()) {
            *g *= 1.0 - h * h;
        }
        let w1 = cache.input.matmul_tn(&dh);
        let b1 = dh.col_sums();
        let dx = dh.matmul_nt(&self.w1);
        (dx, SourceExpert { w1, b1, w2, b2 })
    }

    fn visit_prefixed<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Mat)) {
        f(&format!("{prefix}.w1"), &self.w1);
        f(&format!("{prefix}.b1"), &self.b1);
        f(&format!("{prefix}.w2"), &self.w2);
        f(&format!("{prefix}.b2"), &self.b2);
    }

    fn visit_prefixed_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Mat)) {
        f(&format!("{prefix}.w1"), &mut self.w1);
        f(&format!("{prefix}.b1"), &mut self.b1);
        f(&format!("{prefix}.w2"), &mut self.w2);
        f(&format!("{prefix}.b2"), &mut self.b2);
    }
}

impl Parameters for SourceExpert {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Mat)) {
        self.visit_prefixed("ffn", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        self.visit_prefixed_mut("ffn", f);
    }
}

/// `M'` routed experts; source `s` owns experts `[s·g, (s+1)·g)` with
/// `g = ⌊M'/M⌋`. Experts past `M·g` belong to no source.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank {
    pub experts: Vec<SourceExpert>,
    pub num_sources: usize,
}

impl ExpertBank {
    pub fn init(
        num_experts: usize,
        num_sources: usize,
        width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_experts == 0 || num_sources == 0 {
            return Err(ComeError::InvalidArgument(
                "expert bank needs at least one expert and one source".into(),
            ));
        }
        Ok(ExpertBank {
            experts: (0..num_experts)
                .map(|_| SourceExpert::init(width, hidden, rng))
                .collect(),
            num_sources,
        })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn group_size(&self) -> usize {
        self.experts.len() / self.num_sources
    }

    /// Experts owned by `source` (empty when `M' < M`).
    pub fn group(&self, source: usize) -> std::ops::Range<usize> {
        let g = self.group_size();
        source * g..(source + 1) * g
    }

    /// Owning source of every expert, `None` for remainder experts.
    pub fn owners(&self) -> Vec<Option<usize>> {
        let g = self.group_size();
        (0..self.len())
            .map(|j| match g {
                0 => None,
                _ if j / g < self.num_sources => Some(j / g),
                _ => None,
            })
            .collect()
    }
}

impl Parameters for ExpertBank {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Mat)) {
        for (i, e) in self.experts.iter().enumerate() {
            e.visit_prefixed(&format!("experts.{i}"), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        for (i, e) in self.experts.iter_mut().enumerate() {
            e.visit_prefixed_mut(&format!("experts.{i}"), f);
        }
    }
}

/// Affine map from `[attended | cluster feature]` (width 2D) to width D.
#[derive(Debug, Clone, PartialEq)]
pub struct DimReduction {
    pub w: Mat,
    pub b: Mat,
}

impl DimReduction {
    /// `[I; 0]` with zero bias: the output starts as the attended features.
    pub fn identity(width: usize) -> Self {
        DimReduction {
            w: Mat::from_fn(2 * width, width, |i, j| if i == j { 1.0 } else { 0.0 }),
            b: Mat::zeros(1, width),
        }
    }

    pub fn width(&self) -> usize {
        self.w.cols()
    }
}

impl Parameters for DimReduction {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Mat)) {
        f("dr.w", &self.w);
        f("dr.b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("dr.w", &mut self.w);
        f("dr.b", &mut self.b);
    }
}

/// Output of [`dr_project`]; `input` is the concatenation fed to the map.
#[derive(Debug, Clone)]
pub struct DrOutput {
    pub output: Mat,
    pub input: Mat,
}

/// `F' = [attended | F_c] W + b`, where `F_c` is each token's coarse
/// centroid, or zero when no clustering is supplied.
pub fn dr_project(attended: &Mat, clusters: Option<&ClusterModel>, dr: &DimReduction) -> Result<DrOutput> {
    let d = dr.width();
    if attended.cols() != d {
        return Err(ComeError::shape("dr_project", d, attended.cols()));
    }
    let fc = match clusters {
        Some(model) => {
            if model.len() != attended.rows() {
                return Err(ComeError::InvalidArgument(format!(
                    "cluster model covers {} tokens, batch has {}",
                    model.len(),
                    attended.rows()
                )));
            }
            cluster_features(model)
        }
        None => Mat::zeros(attended.rows(), d),
    };
    let input = attended.hcat(&fc);
    let mut output = input.matmul(&dr.w);
    output.add_row_broadcast(&dr.b);
    Ok(DrOutput { output, input })
}

/// Returns `(∂loss/∂attended, ∂loss/∂DR)`; the cluster branch is a constant.
pub fn dr_backward(dr: &DimReduction, fwd: &DrOutput, d_out: &Mat) -> (Mat, DimReduction) {
    let d = dr.width();
    let grads = DimReduction {
        w: fwd.input.matmul_tn(d_out),
        b: d_out.col_sums(),
    };
    let d_full = d_out.matmul_nt(&dr.w);
    (d_full.col_block(0, d), grads)
}

/// Per-expert activations of a routed forward pass.
#[derive(Debug, Clone)]
pub struct ExpertCache {
    /// Indexed by expert; `None` when the expert admitted no token.
    pub per_expert: Vec<Option<FfnCache>>,
}

/// Routed output: each token receives `Σ w · E_j(F'_token)` over its
/// admitted routes, accumulated in ascending expert order. Overflowed
/// routes contribute nothing.
pub fn expert_forward(bank: &ExpertBank, plan: &DispatchPlan, features: &Mat) -> Result<(Mat, ExpertCache)> {
    if plan.num_experts != bank.len() || plan.tokens() != features.rows() {
        return Err(ComeError::shape(
            "expert_forward",
            format!("{} experts, {} tokens", bank.len(), features.rows()),
            format!("{} experts, {} tokens", plan.num_experts, plan.tokens()),
        ));
    }
    let mut out = Mat::zeros(features.rows(), features.cols());
    let mut per_expert = Vec::with_capacity(bank.len());
    let weight_of = route_weights(plan);
    for (j, expert) in bank.experts.iter().enumerate() {
        let tokens = &plan.admitted[j];
        if tokens.is_empty() {
            per_expert.push(None);
            continue;
        }
        let cache = expert.forward(&features.select_rows(tokens));
        for (row, &t) in tokens.iter().enumerate() {
            let w = weight_of[t][j];
            for (o, y) in out.row_mut(t).iter_mut().zip(cache.output.row(row)) {
                *o += w * y;
            }
        }
        per_expert.push(Some(cache));
    }
    Ok((out, ExpertCache { per_expert }))
}

/// Dense `T×M'` lookup of combination weights for admitted routes.
fn route_weights(plan: &DispatchPlan) -> Vec<Vec<f64>> {
    plan.routes
        .iter()
        .map(|routes| {
            let mut w = vec![0.0; plan.num_experts];
            for r in routes.iter().filter(|r| r.admitted) {
                w[r.expert] = r.weight;
            }
            w
        })
        .collect()
}

/// Gradients of the routed expert output.
#[derive(Debug, Clone)]
pub struct ExpertGrads {
    pub bank: ExpertBank,
    pub d_input: Mat,
    /// `∂loss/∂weight` for every route of every token (0 for overflow).
    pub d_weight: Vec<Vec<f64>>,
}

pub fn expert_backward(
    bank: &ExpertBank,
    plan: &DispatchPlan,
    cache: &ExpertCache,
    d_out: &Mat,
) -> Result<ExpertGrads> {
    if d_out.rows() != plan.tokens() || cache.per_expert.len() != bank.len() {
        return Err(ComeError::shape("expert_backward", plan.tokens(), d_out.rows()));
    }
    let weight_of = route_weights(plan);
    let mut grads = bank.zeroed();
    let mut d_input = Mat::zeros(d_out.rows(), d_out.cols());
    let mut d_by_expert = vec![vec![0.0; bank.len()]; plan.tokens()];
    for (j, expert) in bank.experts.iter().enumerate() {
        let Some(c) = &cache.per_expert[j] else { continue };
        let tokens = &plan.admitted[j];
        let mut dy = Mat::zeros(tokens.len(), d_out.cols());
        for (row, &t) in tokens.iter().enumerate() {
            let upstream = d_out.row(t);
            d_by_expert[t][j] = upstream.iter().zip(c.output.row(row)).map(|(a, b)| a * b).sum();
            let w = weight_of[t][j];
            for (g, u) in dy.row_mut(row).iter_mut().zip(upstream) {
                *g = w * u;
            }
        }
        let (dx, g) = expert.backward(c, &dy);
        for (row, &t) in tokens.iter().enumerate() {
            for (a, b) in d_input.row_mut(t).iter_mut().zip(dx.row(row)) {
                *a += b;
            }
        }
        grads.experts[j] = g;
    }
    let d_weight = plan
        .routes
        .iter()
        .enumerate()
        .map(|(t, routes)| {
            routes
                .iter()
                .map(|r| if r.admitted { d_by_expert[t][r.expert] } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(ExpertGrads {
        bank: grads,
        d_input,
        d_weight,
    })
}

/// `F^E = f_st + f_se + f_s2`.
pub fn come_aggregate(f_st: &Mat, f_se: &Mat, f_s2: &Mat) -> Result<Mat> {
    if !f_st.same_shape(f_se) || !f_st.same_shape(f_s2) {
        return Err(ComeError::shape(
            "come_aggregate",
            format!("{:?}", f_st.shape()),
            format!("{:?} and {:?}", f_se.shape(), f_s2.shape()),
        ));
    }
    let mut out = f_st.clone();
    out.add_assign(f_se);
    out.add_assign(f_s2);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::fine2coarse;
    use crate::numerics::grad_check;
    use crate::router::{build_dispatch, gate, topk_select, RouterWeights, Selection};
    use std::collections::HashSet;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut r = Seeds::new(seed).stream(Stream::Data);
        Mat::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    fn bank(m: usize, sources: usize, d: usize, seed: u64) -> ExpertBank {
        let mut r = Seeds::new(seed).stream(Stream::Init);
        let mut b = ExpertBank::init(m, sources, d, 2 * d, &mut r).unwrap();
        for e in &mut b.experts {
            e.b1 = Mat::from_fn(1, 2 * d, |_, _| r.random_range(-0.3..0.3));
            e.b2 = Mat::from_fn(1, d, |_, _| r.random_range(-0.3..0.3));
        }
        b
    }

    #[test]
    fn shared_zero_input_is_bias_image() {
        let e = FrozenSharedExpert::new(SharedKind::Structure, 6, 42);
        let y = shared_forward(&e, &Mat::zeros(3, 6)).unwrap();
        for row in y.row_iter() {
            for (v, c) in row.iter().zip(e.c.data()) {
                assert_eq!(*v, c.tanh());
            }
        }
    }

    #[test]
    fn shared_is_deterministic_and_kinds_differ() {
        let x = random(5, 6, 1);
        let st = FrozenSharedExpert::new(SharedKind::Structure, 6, 42);
        let st2 = FrozenSharedExpert::new(SharedKind::Structure, 6, 42);
        let se = FrozenSharedExpert::new(SharedKind::Semantic, 6, 42);
        assert_eq!(shared_forward(&st, &x).unwrap(), shared_forward(&st, &x).unwrap());
        assert_eq!(st.digest(), st2.digest());
        assert_ne!(st.digest(), se.digest());
        assert!(shared_forward(&st, &random(2, 5, 1)).is_err());
    }

    #[test]
    fn shared_input_gradient() {
        let e = FrozenSharedExpert::new(SharedKind::Semantic, 5, 3);
        let x = random(4, 5, 2);
        let w = random(4, 5, 9);
        let y = shared_forward(&e, &x).unwrap();
        let dx = shared_backward_input(&e, &y, &w).unwrap();
        let r = grad_check(
            |flat| {
                let xf = Mat::new(4, 5, flat.to_vec()).unwrap();
                let y = shared_forward(&e, &xf).unwrap();
                y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
            },
            x.data(),
            dx.data(),
            1e-5,
        );
        assert!(r.passed(1e-6), "{r:?}");
    }

    #[test]
    fn groups_are_disjoint() {
        let b = bank(10, 4, 3, 1);
        assert_eq!(b.group_size(), 2);
        let mut seen = HashSet::new();
        for s in 0..4 {
            for j in b.group(s) {
                assert!(seen.insert(j));
            }
        }
        assert_eq!(seen.len(), 8);
        assert_eq!(b.owners()[8], None);
        assert_eq!(b.owners()[3], Some(1));
        let single = bank(8, 8, 3, 1);
        assert!((0..8).all(|s| single.group(s).len() == 1));
    }

    #[test]
    fn dr_identity_init_passes_attended_through() {
        let y = random(20, 4, 3);
        let mut r = Seeds::new(1).stream(Stream::Cluster);
        let model = fine2coarse(&y, 6, 3, 20, &mut r).unwrap();
        let dr = DimReduction::identity(4);
        let out = dr_project(&y, Some(&model), &dr).unwrap();
        assert_eq!(out.output, y);
        let none = dr_project(&y, None, &dr).unwrap();
        assert_eq!(none.output, y);
        assert!(dr_project(&y.row_block(0, 5), Some(&model), &dr).is_err());
    }

    #[test]
    fn dr_single_cluster_differs_only_through_token_branch() {
        let y = random(6, 3, 8);
        let mut r = Seeds::new(2).stream(Stream::Cluster);
        let fit = crate::clustering::kmeans(&y, 1, crate::clustering::Init::Seeded(&mut r), 5).unwrap();
        let model = ClusterModel::single_level(fit);
        let mut dr = DimReduction::identity(3);
        dr.w = random(6, 3, 5);
        let out = dr_project(&y, Some(&model), &dr).unwrap();
        let mut token_only = DimReduction::identity(3);
        token_only.w = dr.w.clone();
        for i in 3..6 {
            token_only.w.row_mut(i).fill(0.0);
        }
        let tok = dr_project(&y, Some(&model), &token_only).unwrap();
        // Difference is the same constant row for every token.
        let diff0: Vec<f64> = out.output.row(0).iter().zip(tok.output.row(0)).map(|(a, b)| a - b).collect();
        for t in 1..6 {
            for (j, (a, b)) in out.output.row(t).iter().zip(tok.output.row(t)).enumerate() {
                assert!((a - b - diff0[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dr_gradient() {
        let y = random(12, 4, 4);
        let mut r = Seeds::new(3).stream(Stream::Cluster);
        let model = fine2coarse(&y, 5, 2, 20, &mut r).unwrap();
        let mut dr = DimReduction::identity(4);
        dr.w = random(8, 4, 6);
        dr.b = random(1, 4, 7);
        let w = random(12, 4, 10);
        let fwd = dr_project(&y, Some(&model), &dr).unwrap();
        let (dy, g) = dr_backward(&dr, &fwd, &w);
        let loss = |dr: &DimReduction, y: &Mat| {
            let o = dr_project(y, Some(&model), dr).unwrap().output;
            o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let r1 = grad_check(
            |flat| {
                let mut q = dr.clone();
                q.assign_flat(flat);
                loss(&q, &y)
            },
            &dr.flatten(),
            &g.flatten(),
            1e-5,
        );
        assert!(r1.passed(1e-6), "{r1:?}");
        let r2 = grad_check(
            |flat| loss(&dr, &Mat::new(12, 4, flat.to_vec()).unwrap()),
            y.data(),
            dy.data(),
            1e-5,
        );
        assert!(r2.passed(1e-6), "{r2:?}");
    }

    fn plan_for(f: &Mat, m: usize, k: usize, factor: f64, seed: u64) -> DispatchPlan {
        let mut r = Seeds::new(seed).stream(Stream::Init);
        let w = RouterWeights::init(m, f.cols(), &mut r);
        let mut w = w;
        w.w.scale(20.0);
        let g = gate(f, &w, 1.0).unwrap();
        build_dispatch(&topk_select(&g, k, false).unwrap(), factor).unwrap()
    }

    #[test]
    fn k1_all_to_expert_zero_is_rowwise_ffn() {
        let f = random(7, 4, 1);
        let b = bank(3, 3, 4, 2);
        let sel = Selection {
            experts: vec![vec![0]; 7],
            weights: vec![vec![1.0]; 7],
            num_experts: 3,
            top_k: 1,
        };
        let plan = build_dispatch(&sel, 10.0).unwrap();
        let (out, _) = expert_forward(&b, &plan, &f).unwrap();
        assert!(out.max_abs_diff(&b.experts[0].forward(&f).output) < 1e-15);
    }

    #[test]
    fn zero_experts_give_zero_output() {
        let f = random(6, 4, 1);
        let mut b = bank(4, 2, 4, 2);
        b.visit_mut(&mut |_, m| m.fill(0.0));
        let plan = plan_for(&f, 4, 2, 2.0, 3);
        let (out, _) = expert_forward(&b, &plan, &f).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn routed_output_matches_per_token_loop() {
        let f = random(16, 4, 11);
        let b = bank(4, 2, 4, 12);
        let plan = plan_for(&f, 4, 2, 0.75, 13);
        assert!(!plan.overflow.is_empty());
        let (out, _) = expert_forward(&b, &plan, &f).unwrap();
        for t in 0..16 {
            let mut expect = vec![0.0; 4];
            let mut routes = plan.routes[t].clone();
            routes.sort_by_key(|r| r.expert);
            for r in routes.iter().filter(|r| r.admitted) {
                let y = b.experts[r.expert].forward(&f.row_block(t, 1)).output;
                for (e, v) in expect.iter_mut().zip(y.row(0)) {
                    *e += r.weight * v;
                }
            }
            for (a, e) in out.row(t).iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        let bad = bank(3, 1, 4, 1);
        assert!(expert_forward(&bad, &plan, &f).is_err());
    }

    #[test]
    fn expert_backward_matches_finite_differences() {
        let f = random(10, 3, 21);
        let b = bank(3, 3, 3, 22);
        let plan = plan_for(&f, 3, 2, 0.8, 23);
        let w = random(10, 3, 24);
        let (_, cache) = expert_forward(&b, &plan, &f).unwrap();
        let g = expert_backward(&b, &plan, &cache, &w).unwrap();
        let loss = |bank: &ExpertBank, f: &Mat, plan: &DispatchPlan| {
            let (o, _) = expert_forward(bank, plan, f).unwrap();
            o.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let r = grad_check(
            |flat| {
                let mut q = b.clone();
                q.assign_flat(flat);
                loss(&q, &f, &plan)
            },
            &b.flatten(),
            &g.bank.flatten(),
            1e-5,
        );
        assert!(r.passed(1e-6), "{r:?}");
        let r = grad_check(
            |flat| loss(&b, &Mat::new(10, 3, flat.to_vec()).unwrap(), &plan),
            f.data(),
            g.d_input.data(),
            1e-5,
        );
        assert!(r.passed(1e-6), "{r:?}");
        // d_weight is the derivative with respect to each route weight.
        for t in 0..10 {
            for (ri, r) in plan.routes[t].iter().enumerate() {
                let mut p2 = plan.clone();
                p2.routes[t][ri].weight += 1e-6;
                let num = (loss(&b, &f, &p2) - loss(&b, &f, &plan)) / 1e-6;
                assert!((num - g.d_weight[t][ri]).abs() < 1e-5, "t={t} r={r:?}");
            }
        }
    }

    #[test]
    fn aggregate_is_exact_sum() {
        let a = random(4, 3, 1);
        let b = random(4, 3, 2);
        let c = random(4, 3, 3);
        let z = Mat::zeros(4, 3);
        let sum = come_aggregate(&a, &b, &c).unwrap();
        for i in 0..12 {
            let r = sum.data()[i] - a.data()[i] - b.data()[i] - c.data()[i];
            assert!(r.abs() < 1e-15);
        }
        let mut ab = a.clone();
        ab.add_assign(&b);
        assert_eq!(come_aggregate(&a, &b, &z).unwrap(), ab);
        assert_eq!(come_aggregate(&z, &z, &c).unwrap(), c);
        assert!(come_aggregate(&a, &b, &Mat::zeros(3, 3)).is_err());
    }
}
