use serde::{Deserialize, Serialize};

use super::{Mat, Parameters};
use crate::error::{ComeError, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1.4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moments for every parameter matrix, in visit order.
#[derive(Debug, Clone)]
pub struct OptState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new<P: Parameters>(config: AdamWConfig, params: &P) -> Self {
        let mut first = Vec::new();
        params.visit(&mut |_, m| first.push(vec![0.0; m.len()]));
        let second = first.clone();
        OptState {
            config,
            step: 0,
            first,
            second,
        }
    }
}

/// One decoupled-weight-decay Adam update:
///
/// ```text
/// m ← β1 m + (1−β1) g          v ← β2 v + (1−β2) g²
/// m̂ = m / (1−β1ᵗ)              v̂ = v / (1−β2ᵗ)
/// θ ← θ − lr (m̂ / (√v̂ + ε) + λ θ)
/// ```
pub fn adamw_step<P: Parameters>(params: &mut P, grads: &P, state: &mut OptState) -> Result<()> {
    let mut grad_list: Vec<&Mat> = Vec::new();
    grads.visit(&mut |_, m| grad_list.push(m));
    if grad_list.len() != state.first.len() {
        return Err(ComeError::shape(
            "adamw_step",
            format!("{} parameter tensors", state.first.len()),
            grad_list.len(),
        ));
    }
    let mut mismatch = None;
    let mut idx = 0;
    params.visit_mut(&mut |name, p| {
        if idx < grad_list.len() && (!p.same_shape(grad_list[idx]) || p.len() != state.first[idx].len())
        {
            mismatch.get_or_insert_with(|| name.to_string());
        }
        idx += 1;
    });
    if let Some(name) = mismatch {
        return Err(ComeError::shape("adamw_step", "matching shapes", name));
    }

    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let mut idx = 0;
    let (first, second) = (&mut state.first, &mut state.second);
    params.visit_mut(&mut |_, p| {
        let g = grad_list[idx].data();
        let m = &mut first[idx];
        let v = &mut second[idx];
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *theta -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *theta);
        }
        idx += 1;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct One(Mat);

    impl Parameters for One {
        fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Mat)) {
            f("w", &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
            f("w", &mut self.0);
        }
    }

    fn scalar(x: f64) -> One {
        One(Mat::row_vector(&[x]))
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = One(Mat::row_vector(&[1.5, -2.0, 0.25]));
        let before = p.0.clone();
        let g = p.zeroed();
        let mut st = OptState::new(cfg, &p);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st).unwrap();
        }
        assert_eq!(p.0, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        };
        let mut p = scalar(2.0);
        let g = scalar(0.5);
        let mut st = OptState::new(cfg, &p);
        adamw_step(&mut p, &g, &mut st).unwrap();
        // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25; step = 0.5 / (0.5 + 1e-8)
        let expected = 2.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 2.0);
        assert!((p.0.get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn moments_carry_between_steps() {
        let cfg = AdamWConfig::default();
        let mut a = scalar(1.0);
        let mut st = OptState::new(cfg, &a);
        adamw_step(&mut a, &scalar(1.0), &mut st).unwrap();
        adamw_step(&mut a, &scalar(-3.0), &mut st).unwrap();

        // A fresh optimizer fed the summed gradient once lands elsewhere.
        let mut b = scalar(1.0);
        let mut st_b = OptState::new(cfg, &b);
        adamw_step(&mut b, &scalar(-2.0), &mut st_b).unwrap();
        assert!((a.0.get(0, 0) - b.0.get(0, 0)).abs() > 1e-8);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = scalar(1.0);
        let g = One(Mat::row_vector(&[1.0, 2.0]));
        let mut st = OptState::new(AdamWConfig::default(), &p);
        assert!(adamw_step(&mut p, &g, &mut st).is_err());
        assert_eq!(st.step, 0);
    }
}
