//! Linear gating network, temperature-scaled top-K selection and
//! capacity-constrained dispatch.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ComeError, Result};
use crate::numerics::{softmax_backward, softmax_in_place, Mat, Parameters};

/// Trainable gate projection: `W_g` is `M'×D`, `b_g` is `1×M'`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterWeights {
    pub w: Mat,
    pub b: Mat,
}

impl RouterWeights {
    pub fn init(experts: usize, width: usize, rng: &mut impl Rng) -> Self {
        // Small init keeps the initial gate close to uniform.
        let a = 0.1 / (width as f64).sqrt();
        RouterWeights {
            w: Mat::from_fn(experts, width, |_, _| rng.random_range(-a..a)),
            b: Mat::zeros(1, experts),
        }
    }

    pub fn experts(&self) -> usize {
        self.w.rows()
    }
}

impl Parameters for RouterWeights {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Mat)) {
        f("router.w", &self.w);
        f("router.b", &self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("router.w", &mut self.w);
        f("router.b", &mut self.b);
    }
}

/// Routing hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    /// Softmax temperature; logits are divided by it.
    pub temperature: f64,
    pub top_k: usize,
    pub capacity_factor: f64,
    /// Renormalize combination weights over the selected experts instead of
    /// using the raw gate probabilities.
    pub renormalize: bool,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            temperature: 1.0,
            top_k: 1,
            capacity_factor: 1.25,
            renormalize: false,
        }
    }
}

impl RouterConfig {
    pub fn validate(&self, experts: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ComeError::InvalidConfig(format!(
                "router temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.top_k == 0 || self.top_k > experts {
            return Err(ComeError::InvalidConfig(format!(
                "top_k = {} must lie in [1, {experts}]",
                self.top_k
            )));
        }
        if !(self.capacity_factor > 0.0 && self.capacity_factor.is_finite()) {
            return Err(ComeError::InvalidConfig(format!(
                "capacity factor must be positive, got {}",
                self.capacity_factor
            )));
        }
        Ok(())
    }
}

/// Gate probabilities for every token plus the temperature-scaled logits
/// they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    pub probs: Mat,
    pub scaled_logits: Mat,
    pub temperature: f64,
}

impl GateMatrix {
    /// Wraps a given probability matrix (rows must be distributions).
    pub fn from_probs(probs: Mat) -> Result<Self> {
        for (t, row) in probs.row_iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(ComeError::InvalidArgument(format!(
                    "gate row {t} is not a distribution (sum {s})"
                )));
            }
        }
        let scaled_logits = probs.map(|p| p.max(1e-300).ln());
        Ok(GateMatrix {
            probs,
            scaled_logits,
            temperature: 1.0,
        })
    }

    pub fn tokens(&self) -> usize {
        self.probs.rows()
    }

    pub fn experts(&self) -> usize {
        self.probs.cols()
    }
}

/// `g = softmax((F' W_gᵀ + b_g) / τ)` row by row.
pub fn gate(features: &Mat, weights: &RouterWeights, temperature: f64) -> Result<GateMatrix> {
    if features.cols() != weights.w.cols() {
        return Err(ComeError::shape("gate", format!("width {}", weights.w.cols()), features.cols()));
    }
    if !(temperature > 0.0) {
        return Err(ComeError::InvalidArgument(format!("temperature {temperature} ≤ 0")));
    }
    let mut z = features.matmul_nt(&weights.w);
    z.add_row_broadcast(&weights.b);
    z.scale(1.0 / temperature);
    z.ensure_finite("router logits")?;
    let mut probs = z.clone();
    for t in 0..probs.rows() {
        softmax_in_place(probs.row_mut(t));
    }
    Ok(GateMatrix {
        probs,
        scaled_logits: z,
        temperature,
    })
}

/// The `K` experts chosen for each token, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub experts: Vec<Vec<usize>>,
    /// Combination weights aligned with `experts`.
    pub weights: Vec<Vec<f64>>,
    pub num_experts: usize,
    pub top_k: usize,
}

/// Indices of the `k` largest entries of `row`, ties to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Picks the top `k` gates per token. Weights are the raw gate values, or
/// the gates renormalized over the selection when `renormalize` is set.
pub fn topk_select(gates: &GateMatrix, k: usize, renormalize: bool) -> Result<Selection> {
    let m = gates.experts();
    if k == 0 || k > m {
        return Err(ComeError::InvalidArgument(format!("top-k {k} outside [1, {m}]")));
    }
    let mut experts = Vec::with_capacity(gates.tokens());
    let mut weights = Vec::with_capacity(gates.tokens());
    for row in gates.probs.row_iter() {
        let sel = top_k_indices(row, k);
        let mut w: Vec<f64> = sel.iter().map(|&j| row[j]).collect();
        if renormalize {
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
        }
        experts.push(sel);
        weights.push(w);
    }
    Ok(Selection {
        experts,
        weights,
        num_experts: m,
        top_k: k,
    })
}

/// One `(token, expert)` pair of a selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Route {
    pub expert: usize,
    pub weight: f64,
    pub admitted: bool,
}

/// Which selected `(token, expert)` pairs each expert actually processes.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchPlan {
    pub capacity: usize,
    pub num_experts: usize,
    pub top_k: usize,
    /// Per token, its selected routes in selection order.
    pub routes: Vec<Vec<Route>>,
    /// Per expert, admitted tokens in ascending order.
    pub admitted: Vec<Vec<usize>>,
    /// `(token, expert)` pairs dropped because the expert was full.
    pub overflow: Vec<(usize, usize)>,
}

/// `ceil(f · T · K / M')`.
pub fn expert_capacity(tokens: usize, top_k: usize, experts: usize, factor: f64) -> usize {
    (factor * (tokens * top_k) as f64 / experts as f64).ceil() as usize
}

/// Admits tokens to their selected experts in ascending token order until
/// each expert reaches capacity; the rest overflow.
pub fn build_dispatch(selection: &Selection, capacity_factor: f64) -> Result<DispatchPlan> {
    if !(capacity_factor > 0.0 && capacity_factor.is_finite()) {
        return Err(ComeError::InvalidArgument(format!(
            "capacity factor must be positive, got {capacity_factor}"
        )));
    }
    let t = selection.experts.len();
    let m = selection.num_experts;
    let capacity = expert_capacity(t, selection.top_k, m, capacity_factor);
    let mut admitted = vec![Vec::new(); m];
    let mut overflow = Vec::new();
    let mut routes = Vec::with_capacity(t);
    for (token, (sel, w)) in selection.experts.iter().zip(&selection.weights).enumerate() {
        let mut r = Vec::with_capacity(sel.len());
        for (&expert, &weight) in sel.iter().zip(w) {
            if expert >= m {
                return Err(ComeError::InvalidArgument(format!(
                    "token {token} routed to expert {expert} of {m}"
                )));
            }
            let ok = admitted[expert].len() < capacity;
            if ok {
                admitted[expert].push(token);
            } else {
                overflow.push((token, expert));
            }
            r.push(Route {
                expert,
                weight,
                admitted: ok,
            });
        }
        routes.push(r);
    }
    Ok(DispatchPlan {
        capacity,
        num_experts: m,
        top_k: selection.top_k,
        routes,
        admitted,
        overflow,
    })
}

impl DispatchPlan {
    pub fn tokens(&self) -> usize {
        self.routes.len()
    }

    pub fn overflow_rate(&self) -> f64 {
        let pairs = self.tokens() * self.top_k;
        if pairs == 0 {
            0.0
        } else {
            self.overflow.len() as f64 / pairs as f64
        }
    }

    /// Number of tokens that selected each expert (before capacity).
    pub fn selected_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_experts];
        for r in self.routes.iter().flatten() {
            c[r.expert] += 1;
        }
        c
    }

    /// Writes `token,expert,weight,status` rows.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "token,expert,weight,status")?;
        for (t, routes) in self.routes.iter().enumerate() {
            for r in routes {
                let status = if r.admitted { "admitted" } else { "overflow" };
                writeln!(out, "{t},{},{},{status}", r.expert, r.weight)?;
            }
        }
        Ok(())
    }
}

/// Gradient of the loss with respect to the gate probabilities coming from
/// the expert combination.
///
/// `d_weight[t][r]` is `∂loss/∂(combination weight of route r of token t)`;
/// only admitted routes carry a nonzero value. Selection and admission are
/// constants here.
pub fn combination_grad(
    gates: &GateMatrix,
    plan: &DispatchPlan,
    d_weight: &[Vec<f64>],
    renormalize: bool,
) -> Result<Mat> {
    if d_weight.len() != plan.tokens() || gates.tokens() != plan.tokens() {
        return Err(ComeError::shape(
            "combination_grad",
            format!("{} tokens", gates.tokens()),
            format!("{} plan tokens, {} upstream rows", plan.tokens(), d_weight.len()),
        ));
    }
    let mut dg = Mat::zeros(gates.tokens(), gates.experts());
    for (t, (routes, dw)) in plan.routes.iter().zip(d_weight).enumerate() {
        if dw.len() != routes.len() {
            return Err(ComeError::shape("combination_grad", routes.len(), dw.len()));
        }
        if renormalize {
            let s: f64 = routes.iter().map(|r| gates.probs.get(t, r.expert)).sum();
            let inner: f64 = routes.iter().zip(dw).map(|(r, d)| r.weight * d).sum();
            for (r, d) in routes.iter().zip(dw) {
                let cur = dg.get(t, r.expert);
                dg.set(t, r.expert, cur + (d - inner) / s);
            }
        } else {
            for (r, d) in routes.iter().zip(dw) {
                let cur = dg.get(t, r.expert);
                dg.set(t, r.expert, cur + d);
            }
        }
    }
    Ok(dg)
}

/// Router gradients: parameters and routing input.
#[derive(Debug, Clone)]
pub struct RouterGrads {
    pub weights: RouterWeights,
    pub d_input: Mat,
}

/// Backpropagates `dg = ∂loss/∂g` through the softmax and the linear gate.
///
/// `extra_dz`, when given, is added to the gradient with respect to the
/// temperature-scaled logits (for losses defined on logits rather than
/// probabilities).
pub fn router_backward(
    features: &Mat,
    weights: &RouterWeights,
    gates: &GateMatrix,
    dg: &Mat,
    extra_dz: Option<&Mat>,
) -> Result<RouterGrads> {
    if !dg.same_shape(&gates.probs) || features.rows() != gates.tokens() {
        return Err(ComeError::shape(
            "router_backward",
            format!("{}x{}", gates.tokens(), gates.experts()),
            format!("{}x{}", dg.rows(), dg.cols()),
        ));
    }
    let mut dlogits = Mat::zeros(dg.rows(), dg.cols());
    for t in 0..dg.rows() {
        softmax_backward(gates.probs.row(t), dg.row(t), dlogits.row_mut(t));
    }
    if let Some(dz) = extra_dz {
        if !dz.same_shape(&dlogits) {
            return Err(ComeError::shape("router_backward", "logit-shaped gradient", format!("{:?}", dz.shape())));
        }
        dlogits.add_assign(dz);
    }
    dlogits.scale(1.0 / gates.temperature);
    Ok(RouterGrads {
        weights: RouterWeights {
            w: dlogits.matmul_tn(features),
            b: dlogits.col_sums(),
        },
        d_input: dlogits.matmul(&weights.w),
    })
}
