//! Task loss and the auxiliary routing losses: source traceability,
//! importance balance and load balance.
//!
//! Each auxiliary loss returns its value together with the gradient with
//! respect to the gate probabilities (and, for the margin load variant, the
//! scaled logits).

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ComeError, Result};
use crate::numerics::{cv_squared, cv_squared_grad, normal_cdf, normal_pdf, softmax_in_place, Mat};
use crate::router::{top_k_indices, GateMatrix};

/// Floor applied to a token's group gate mass before taking the log.
pub const TB_EPS: f64 = 1e-12;

/// How per-token traceability terms are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

/// What the load loss applies the normal CDF to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// `Φ(g_j)` on the gate probability itself.
    Literal,
    /// `Φ(z_j − z_(K))` on the margin of the scaled logit over the K-th
    /// largest logit among the other experts.
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the traceability loss.
    pub traceability_weight: f64,
    /// Weight of `l_ip + l_load`.
    pub balance_weight: f64,
    pub traceability_reduction: Reduction,
    pub load_mode: LoadMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            traceability_weight: 1.0,
            balance_weight: 0.1,
            traceability_reduction: Reduction::Mean,
            load_mode: LoadMode::Literal,
        }
    }
}

/// Value and gradients of an auxiliary loss.
#[derive(Debug, Clone)]
pub struct AuxLoss {
    pub value: f64,
    /// `∂loss/∂g`, `T×M'`.
    pub d_probs: Mat,
    /// `∂loss/∂z` for losses defined on scaled logits.
    pub d_logits: Option<Mat>,
    /// Per-expert vector the loss was computed from (importance or load).
    pub per_expert: Vec<f64>,
    /// Tokens whose group mass hit the [`TB_EPS`] floor.
    pub clamped: usize,
}

/// `−log Σ_{j∈group(source)} g_j` per token, reduced over tokens.
///
/// `groups[s]` is the expert range owned by source `s`. With singleton
/// groups this is `−log g_d`.
pub fn traceability_loss(
    gates: &GateMatrix,
    sources: &[usize],
    groups: &[Range<usize>],
    reduction: Reduction,
) -> Result<AuxLoss> {
    let t = gates.tokens();
    if sources.len() != t {
        return Err(ComeError::shape("traceability_loss", t, sources.len()));
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / t.max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let mut d = Mat::zeros(t, gates.experts());
    let mut total = 0.0;
    let mut clamped = 0;
    for (tok, &s) in sources.iter().enumerate() {
        let group = groups.get(s).filter(|g| !g.is_empty() && g.end <= gates.experts()).ok_or_else(|| {
            ComeError::InvalidArgument(format!("source {s} has no expert group"))
        })?;
        let row = gates.probs.row(tok);
        let mass: f64 = row[group.clone()].iter().sum();
        if mass < TB_EPS {
            clamped += 1;
            total -= TB_EPS.ln();
            continue;
        }
        total -= mass.ln();
        for j in group.clone() {
            d.set(tok, j, -scale / mass);
        }
    }
    Ok(AuxLoss {
        value: total * scale,
        d_probs: d,
        d_logits: None,
        per_expert: Vec::new(),
        clamped,
    })
}

/// `CV(IP)²` with `IP_j = Σ_tokens g_j`.
pub fn importance_loss(gates: &GateMatrix) -> AuxLoss {
    let ip = gates.probs.col_sums().into_data();
    let grad = cv_squared_grad(&ip);
    let mut d = Mat::zeros(gates.tokens(), gates.experts());
    for t in 0..gates.tokens() {
        d.row_mut(t).copy_from_slice(&grad);
    }
    AuxLoss {
        value: cv_squared(&ip),
        d_probs: d,
        d_logits: None,
        per_expert: ip,
        clamped: 0,
    }
}

/// `CV(L)²` with `L_j = Σ_tokens S_j`; `S_j = Φ(g_j)` in literal mode, or
/// `Φ` of the logit margin in margin mode.
pub fn load_loss(gates: &GateMatrix, mode: LoadMode, top_k: usize) -> AuxLoss {
    let (t, m) = (gates.tokens(), gates.experts());
    let mut load = vec![0.0; m];
    // dS/d(input) per (token, expert), and for margin mode the index of the
    // logit that set the threshold.
    let mut slope = Mat::zeros(t, m);
    let mut pivot = vec![usize::MAX; t * m];
    match mode {
        LoadMode::Literal => {
            for tok in 0..t {
                for j in 0..m {
                    let g = gates.probs.get(tok, j);
                    load[j] += normal_cdf(g);
                    slope.set(tok, j, normal_pdf(g));
                }
            }
        }
        LoadMode::Margin => {
            for tok in 0..t {
                let z = gates.scaled_logits.row(tok);
                let order = top_k_indices(z, m);
                for j in 0..m {
                    let rank = order.iter().position(|&i| i == j).expect("permutation");
                    let pos = if rank < top_k { top_k } else { top_k - 1 };
                    match order.get(pos) {
                        Some(&p) => {
                            let margin = z[j] - z[p];
                            load[j] += normal_cdf(margin);
                            slope.set(tok, j, normal_pdf(margin));
                            pivot[tok * m + j] = p;
                        }
                        None => load[j] += 1.0,
                    }
                }
            }
        }
    }
    let grad = cv_squared_grad(&load);
    let mut d = Mat::zeros(t, m);
    for tok in 0..t {
        for j in 0..m {
            let gs = grad[j] * slope.get(tok, j);
            if gs == 0.0 {
                continue;
            }
            let cur = d.get(tok, j);
            d.set(tok, j, cur + gs);
            let p = pivot[tok * m + j];
            if p != usize::MAX {
                let cur = d.get(tok, p);
                d.set(tok, p, cur - gs);
            }
        }
    }
    let value = cv_squared(&load);
    let (d_probs, d_logits) = match mode {
        LoadMode::Literal => (d, None),
        LoadMode::Margin => (Mat::zeros(t, m), Some(d)),
    };
    AuxLoss {
        value,
        d_probs,
        d_logits,
        per_expert: load,
        clamped: 0,
    }
}

/// Mean softmax cross-entropy over rows of `logits`, with its gradient.
pub fn task_loss(logits: &Mat, labels: &[usize]) -> Result<(f64, Mat)> {
    if labels.len() != logits.rows() {
        return Err(ComeError::shape("task_loss", logits.rows(), labels.len()));
    }
    let c = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(ComeError::InvalidArgument(format!("label {bad} outside [0, {c})")));
    }
    logits.ensure_finite("classifier logits")?;
    let n = logits.rows().max(1) as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = grad.row_mut(i);
        softmax_in_place(g);
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok((loss / n, grad))
}

/// Components of one forward pass and their weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub task_ce: f64,
    pub l_tb: f64,
    pub l_ip: f64,
    pub l_load: f64,
    pub l_balance: f64,
    pub total: f64,
    pub importance: Vec<f64>,
    pub load: Vec<f64>,
    pub tb_clamped: usize,
}

/// `total = task_ce + λ_tb · l_tb + λ_bal · (l_ip + l_load)`.
///
/// Pass `None` for auxiliary losses that were not computed (they count as 0).
pub fn total_loss(
    task_ce: f64,
    tb: Option<&AuxLoss>,
    ip: Option<&AuxLoss>,
    load: Option<&AuxLoss>,
    cfg: &LossConfig,
) -> LossReport {
    let l_tb = tb.map_or(0.0, |l| l.value);
    let l_ip = ip.map_or(0.0, |l| l.value);
    let l_load = load.map_or(0.0, |l| l.value);
    let l_balance = l_ip + l_load;
    LossReport {
        task_ce,
        l_tb,
        l_ip,
        l_load,
        l_balance,
        total: task_ce + cfg.traceability_weight * l_tb + cfg.balance_weight * l_balance,
        importance: ip.map(|l| l.per_expert.clone()).unwrap_or_default(),
        load: load.map(|l| l.per_expert.clone()).unwrap_or_default(),
        tb_clamped: tb.map_or(0, |l| l.clamped),
    }
}

/// Weighted gradient of the auxiliary losses with respect to `(g, z)`.
pub fn aux_gradient(
    tokens: usize,
    experts: usize,
    tb: Option<&AuxLoss>,
    ip: Option<&AuxLoss>,
    load: Option<&AuxLoss>,
    cfg: &LossConfig,
) -> (Mat, Option<Mat>) {
    let mut dg = Mat::zeros(tokens, experts);
    let mut dz: Option<Mat> = None;
    let terms = [
        (tb, cfg.traceability_weight),
        (ip, cfg.balance_weight),
        (load, cfg.balance_weight),
    ];
    for (loss, w) in terms {
        let Some(l) = loss else { continue };
        if w == 0.0 {
            continue;
        }
        dg.add_scaled(&l.d_probs, w);
        if let Some(d) = &l.d_logits {
            dz.get_or_insert_with(|| Mat::zeros(tokens, experts)).add_scaled(d, w);
        }
    }
    (dg, dz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Seeds, Stream};
    use crate::router::{gate, router_backward, RouterWeights};
    use proptest::prelude::*;
    use rand::Rng;

    fn gm(rows: &[Vec<f64>]) -> GateMatrix {
        GateMatrix::from_probs(Mat::from_rows(rows).unwrap()).unwrap()
    }

    fn random_gates(t: usize, m: usize, seed: u64) -> GateMatrix {
        let mut r = Seeds::new(seed).stream(Stream::Data);
        let w = RouterWeights {
            w: Mat::from_fn(m, 4, |_, _| r.random_range(-1.5..1.5)),
            b: Mat::from_fn(1, m, |_, _| r.random_range(-0.5..0.5)),
        };
        let f = Mat::from_fn(t, 4, |_, _| r.random_range(-1.0..1.0));
        gate(&f, &w, 1.0).unwrap()
    }

    fn singletons(m: usize) -> Vec<Range<usize>> {
        (0..m).map(|j| j..j + 1).collect()
    }

    #[test]
    fn traceability_examples() {
        let g = gm(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
        let l = traceability_loss(&g, &[1, 0], &singletons(3), Reduction::Mean).unwrap();
        assert_eq!(l.value, 0.0);

        let g = gm(&[vec![0.25, 0.25, 0.5, 0.0]]);
        let groups = vec![0..2, 2..4];
        let l = traceability_loss(&g, &[0], &groups, Reduction::Mean).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn traceability_singletons_match_loop() {
        let g = random_gates(12, 4, 3);
        let sources: Vec<usize> = (0..12).map(|i| (i * 7) % 4).collect();
        let l = traceability_loss(&g, &sources, &singletons(4), Reduction::Mean).unwrap();
        let mut expect = 0.0;
        for (t, &s) in sources.iter().enumerate() {
            expect += -g.probs.get(t, s).ln();
        }
        expect /= 12.0;
        assert!((l.value - expect).abs() < 1e-12);
        let sum = traceability_loss(&g, &sources, &singletons(4), Reduction::Sum).unwrap();
        assert!((sum.value - 12.0 * expect).abs() < 1e-11);
    }

    #[test]
    fn traceability_clamps_and_rejects() {
        let g = gm(&[vec![1.0, 0.0]]);
        let l = traceability_loss(&g, &[1], &singletons(2), Reduction::Mean).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.value + TB_EPS.ln()).abs() < 1e-12);
        let empty = vec![0..1, 1..1];
        assert!(traceability_loss(&g, &[1], &empty, Reduction::Mean).is_err());
        assert!(traceability_loss(&g, &[5], &singletons(2), Reduction::Mean).is_err());
    }

    #[test]
    fn importance_examples() {
        let uniform = gm(&vec![vec![0.25; 4]; 5]);
        assert_eq!(importance_loss(&uniform).value, 0.0);
        let balanced = gm(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(importance_loss(&balanced).value, 0.0);
        let skewed = gm(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let l = importance_loss(&skewed);
        assert_eq!(l.per_expert, vec![2.0, 0.0]);
        assert!((l.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_examples() {
        let uniform = gm(&vec![vec![0.125; 8]; 3]);
        assert!(load_loss(&uniform, LoadMode::Literal, 1).value.abs() < 1e-12);
        let skewed = gm(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let l = load_loss(&skewed, LoadMode::Literal, 1);
        // L = [2Φ(1), 2Φ(0)] = [1.682689..., 1.0]
        assert!((l.per_expert[0] - 1.682690).abs() < 1e-6);
        assert_eq!(l.per_expert[1], 1.0);
        let mean = (l.per_expert[0] + 1.0) / 2.0;
        let var = ((l.per_expert[0] - mean).powi(2) + (1.0 - mean).powi(2)) / 2.0;
        assert!((l.value - var / (mean * mean)).abs() < 1e-12);
        // ≈ 0.0647598 with Φ(1) = 0.8413447460685429
        assert!((l.value - 0.064759818106).abs() < 1e-9);
        let same_cols = gm(&[vec![0.7, 0.3], vec![0.3, 0.7]]);
        assert!(load_loss(&same_cols, LoadMode::Literal, 1).value.abs() < 1e-12);
    }

    #[test]
    fn task_loss_examples() {
        let (l, _) = task_loss(&Mat::from_rows(&[vec![0.0; 3]]).unwrap(), &[2]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        let (l, _) = task_loss(&Mat::from_rows(&[vec![0.0, 800.0, 0.0]]).unwrap(), &[1]).unwrap();
        assert!(l < 1e-300);
        assert!(task_loss(&Mat::zeros(1, 3), &[3]).is_err());
    }

    #[test]
    fn task_loss_matches_loop_and_gradient() {
        let mut r = Seeds::new(5).stream(Stream::Data);
        let z = Mat::from_fn(6, 4, |_, _| r.random_range(-3.0..3.0));
        let labels = [0, 3, 1, 1, 2, 0];
        let (l, g) = task_loss(&z, &labels).unwrap();
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let s: f64 = z.row(i).iter().map(|v| v.exp()).sum();
            expect += -(z.get(i, y).exp() / s).ln();
        }
        assert!((l - expect / 6.0).abs() < 1e-12);
        let rep = grad_check(
            |flat| task_loss(&Mat::new(6, 4, flat.to_vec()).unwrap(), &labels).unwrap().0,
            z.data(),
            g.data(),
            1e-5,
        );
        assert!(rep.passed(1e-6), "{rep:?}");
    }

    #[test]
    fn total_loss_weights() {
        let g = random_gates(8, 4, 1);
        let tb = traceability_loss(&g, &[0, 1, 2, 3, 0, 1, 2, 3], &singletons(4), Reduction::Mean).unwrap();
        let ip = importance_loss(&g);
        let ld = load_loss(&g, LoadMode::Literal, 1);
        let zero = LossConfig {
            traceability_weight: 0.0,
            balance_weight: 0.0,
            ..Default::default()
        };
        let r = total_loss(0.7, Some(&tb), Some(&ip), Some(&ld), &zero);
        assert_eq!(r.total, 0.7);
        let base = LossConfig::default();
        let r1 = total_loss(0.7, Some(&tb), Some(&ip), Some(&ld), &base);
        let r2 = total_loss(
            0.7,
            Some(&tb),
            Some(&ip),
            Some(&ld),
            &LossConfig {
                balance_weight: 0.2,
                ..base
            },
        );
        let contrib1 = r1.total - r1.task_ce - r1.l_tb;
        let contrib2 = r2.total - r2.task_ce - r2.l_tb;
        assert!((contrib2 - 2.0 * contrib1).abs() < 1e-12);
        assert!((r1.total - (0.7 + r1.l_tb + 0.1 * (r1.l_ip + r1.l_load))).abs() < 1e-12);
    }

    /// Router logits → gates → weighted aux losses, checked end to end.
    fn aux_through_router(mode: LoadMode, seed: u64) -> f64 {
        let (t, m, d) = (10, 4, 3);
        let mut r = Seeds::new(seed).stream(Stream::Data);
        let f = Mat::from_fn(t, d, |_, _| r.random_range(-1.0..1.0));
        let w = RouterWeights {
            w: Mat::from_fn(m, d, |_, _| r.random_range(-1.0..1.0)),
            b: Mat::from_fn(1, m, |_, _| r.random_range(-0.3..0.3)),
        };
        let sources: Vec<usize> = (0..t).map(|i| i % 2).collect();
        let groups = vec![0..2, 2..4];
        let cfg = LossConfig {
            load_mode: mode,
            balance_weight: 0.7,
            ..Default::default()
        };
        let eval = |w: &RouterWeights| {
            let g = gate(&f, w, 0.8).unwrap();
            let tb = traceability_loss(&g, &sources, &groups, Reduction::Mean).unwrap();
            let ip = importance_loss(&g);
            let ld = load_loss(&g, mode, 2);
            (g.clone(), tb, ip, ld)
        };
        let (g, tb, ip, ld) = eval(&w);
        let (dg, dz) = aux_gradient(t, m, Some(&tb), Some(&ip), Some(&ld), &cfg);
        let grads = router_backward(&f, &w, &g, &dg, dz.as_ref()).unwrap();
        let rep = grad_check(
            |flat| {
                let mut q = w.clone();
                crate::numerics::Parameters::assign_flat(&mut q, flat);
                let (_, tb, ip, ld) = eval(&q);
                total_loss(0.0, Some(&tb), Some(&ip), Some(&ld), &cfg).total
            },
            &crate::numerics::Parameters::flatten(&w),
            &crate::numerics::Parameters::flatten(&grads.weights),
            1e-5,
        );
        rep.max_rel_error
    }

    #[test]
    fn aux_gradients_match_finite_differences() {
        for seed in 0..10 {
            assert!(aux_through_router(LoadMode::Literal, seed) < 1e-6);
            assert!(aux_through_router(LoadMode::Margin, seed) < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn importance_permutation_invariant(seed in 0u64..500, rot in 1usize..7) {
            let g = random_gates(7, 5, seed);
            let base = importance_loss(&g).value;
            let perm_tokens: Vec<usize> = (0..7).map(|i| (i + rot) % 7).collect();
            let pt = GateMatrix::from_probs(g.probs.select_rows(&perm_tokens)).unwrap();
            prop_assert!((importance_loss(&pt).value - base).abs() < 1e-12);
            let perm_exp = g.probs.transpose().select_rows(&[4, 2, 0, 3, 1]).transpose();
            let pe = GateMatrix::from_probs(perm_exp).unwrap();
            prop_assert!((importance_loss(&pe).value - base).abs() < 1e-12);
            prop_assert!(base >= 0.0);
            prop_assert!(load_loss(&g, LoadMode::Literal, 1).value >= 0.0);
        }
    }
}
