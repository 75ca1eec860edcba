//! Multi-head self-attention over the tokens of each sample.
//!
//! Attention never crosses sample boundaries and uses no positional
//! encoding, so permuting the tokens of a sample permutes the output rows
//! the same way.

use rand::Rng;

use crate::error::{ComeError, Result};
use crate::numerics::{scaled_uniform, softmax_backward, softmax_in_place, Mat, Parameters};
use crate::tokens::TokenBatch;

/// Query/key/value/output projections. Head `h` owns columns
/// `[h·dh, (h+1)·dh)` of the query, key and value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: usize,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub bo: Mat,
}

impl MhaParams {
    pub fn init(width: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(ComeError::InvalidArgument(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        Ok(MhaParams {
            heads,
            wq: scaled_uniform(width, width, width, rng),
            wk: scaled_uniform(width, width, width, rng),
            wv: scaled_uniform(width, width, width, rng),
            wo: scaled_uniform(width, width, width, rng),
            bo: Mat::zeros(1, width),
        })
    }

    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }
}

impl Parameters for MhaParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a Mat)) {
        f("attn.wq", &self.wq);
        f("attn.wk", &self.wk);
        f("attn.wv", &self.wv);
        f("attn.wo", &self.wo);
        f("attn.bo", &self.bo);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Mat)) {
        f("attn.wq", &mut self.wq);
        f("attn.wk", &mut self.wk);
        f("attn.wv", &mut self.wv);
        f("attn.wo", &mut self.wo);
        f("attn.bo", &mut self.bo);
    }
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct MhaCache {
    x: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Attention weights, indexed `[sample * heads + head]`, each `T×T`.
    probs: Vec<Mat>,
    concat: Mat,
    tokens_per_sample: usize,
}

impl MhaCache {
    /// Attention weights of `head` within `sample`.
    pub fn weights(&self, sample: usize, head: usize, heads: usize) -> &Mat {
        &self.probs[sample * heads + head]
    }
}

pub fn mha_forward(tokens: &TokenBatch, params: &MhaParams) -> Result<(TokenBatch, MhaCache)> {
    let d = params.width();
    if tokens.width() != d {
        return Err(ComeError::shape("mha_forward", format!("width {d}"), tokens.width()));
    }
    let x = &tokens.features;
    let t = tokens.tokens_per_sample;
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.matmul(&params.wq);
    let k = x.matmul(&params.wk);
    let v = x.matmul(&params.wv);
    let mut concat = Mat::zeros(x.rows(), d);
    let mut probs = Vec::with_capacity(tokens.samples() * params.heads);

    for s in 0..tokens.samples() {
        let base = s * t;
        for h in 0..params.heads {
            let c0 = h * dh;
            let mut p = Mat::zeros(t, t);
            for i in 0..t {
                let qi = &q.row(base + i)[c0..c0 + dh];
                let row = p.row_mut(i);
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k.row(base + j)[c0..c0 + dh];
                    *r = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(row);
            }
            for i in 0..t {
                let out = &mut concat.row_mut(base + i)[c0..c0 + dh];
                for j in 0..t {
                    let w = p.get(i, j);
                    let vj = &v.row(base + j)[c0..c0 + dh];
                    for (o, vv) in out.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
            probs.push(p);
        }
    }

    let mut y = concat.matmul(&params.wo);
    y.add_row_broadcast(&params.bo);
    y.ensure_finite("attention output")?;
    let cache = MhaCache {
        x: x.clone(),
        q,
        k,
        v,
        probs,
        concat,
        tokens_per_sample: t,
    };
    Ok((tokens.with_features(y), cache))
}

/// Gradients of the attention block given `dy = ∂loss/∂output`.
///
/// Returns `(∂loss/∂tokens, ∂loss/∂params)`.
pub fn mha_backward(params: &MhaParams, cache: &MhaCache, dy: &Mat) -> Result<(Mat, MhaParams)> {
    let d = params.width();
    if dy.rows() != cache.x.rows() || dy.cols() != d {
        return Err(ComeError::shape(
            "mha_backward",
            format!("{}x{d}", cache.x.rows()),
            format!("{}x{}", dy.rows(), dy.cols()),
        ));
    }
    let t = cache.tokens_per_sample;
    let samples = cache.x.rows() / t;
    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut grads = params.zeroed();
    grads.wo = cache.concat.matmul_tn(dy);
    grads.bo = dy.col_sums();
    let dconcat = dy.matmul_nt(&params.wo);

    let mut dq = Mat::zeros(cache.x.rows(), d);
    let mut dk = Mat::zeros(cache.x.rows(), d);
    let mut dv = Mat::zeros(cache.x.rows(), d);
    let mut dp = vec![0.0; t];
    let mut ds = vec![0.0; t];
    for s in 0..samples {
        let base = s * t;
        for h in 0..params.heads {
            let c0 = h * dh;
            let p = &cache.probs[s * params.heads + h];
            for i in 0..t {
                let doi = &dconcat.row(base + i)[c0..c0 + dh];
                for j in 0..t {
                    let vj = &cache.v.row(base + j)[c0..c0 + dh];
                    dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    // dV_j += P_ij dO_i
                    let w = p.get(i, j);
                    for (g, o) in dv.row_mut(base + j)[c0..c0 + dh].iter_mut().zip(doi) {
                        *g += w * o;
                    }
                }
                softmax_backward(p.row(i), &dp, &mut ds);
                for j in 0..t {
                    let g = ds[j] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    for c in 0..dh {
                        let kj = cache.k.get(base + j, c0 + c);
                        let qi = cache.q.get(base + i, c0 + c);
                        dq.row_mut(base + i)[c0 + c] += g * kj;
                        dk.row_mut(base + j)[c0 + c] += g * qi;
                    }
                }
            }
        }
    }

    grads.wq = cache.x.matmul_tn(&dq);
    grads.wk = cache.x.matmul_tn(&dk);
    grads.wv = cache.x.matmul_tn(&dv);
    let mut dx = dq.matmul_nt(&params.wq);
    dx.add_assign(&dk.matmul_nt(&params.wk));
    dx.add_assign(&dv.matmul_nt(&params.wv));
    Ok((dx, grads))
}
