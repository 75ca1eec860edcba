use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use super::metrics::{routing_purity, Purity, EVAL_STREAM_BASE};
use crate::datagen::Dataset;
use crate::error::{ComeError, Result};
use crate::model::{ClusterInput, Model};
use crate::numerics::{Mat, Seeds, Stream};

/// One `(token, selected expert)` pair of a routing dump.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteRow {
    pub batch: usize,
    /// Token index over the whole dump.
    pub token: usize,
    pub sample: usize,
    pub source: usize,
    /// Position of this expert in the token's top-K list.
    pub rank: usize,
    pub expert: usize,
    pub weight: f64,
    pub admitted: bool,
    pub fine: Option<usize>,
    pub coarse: Option<usize>,
}

/// Routing decisions of a model over a split, with a 2-D PCA of the
/// routing features.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteDump {
    pub rows: Vec<RouteRow>,
    pub tokens: usize,
    pub sources: Vec<usize>,
    /// `tokens × 2` projection onto the top two principal axes.
    pub projection: Mat,
    pub explained_variance_ratio: [f64; 2],
    pub purity: Purity,
}

impl RouteDump {
    pub fn overflow_rows(&self) -> usize {
        self.rows.iter().filter(|r| !r.admitted).count()
    }

    /// Purity recomputed from the rows alone.
    pub fn purity_from_rows(&self, groups: &[std::ops::Range<usize>]) -> Purity {
        let mut p = Purity {
            tokens: self.tokens,
            ..Default::default()
        };
        for r in self.rows.iter().filter(|r| r.rank == 0) {
            if groups.get(r.source).is_some_and(|g| g.contains(&r.expert)) {
                p.selected_in_group += 1;
                p.admitted_in_group += r.admitted as usize;
            }
        }
        p
    }

    pub fn routes_csv(&self) -> String {
        let mut s = String::from("batch,token,sample,source,rank,expert,weight,status,fine_id,coarse_id\n");
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.batch,
                r.token,
                r.sample,
                r.source,
                r.rank,
                r.expert,
                r.weight,
                if r.admitted { "admitted" } else { "overflow" },
                opt(r.fine),
                opt(r.coarse)
            );
        }
        s
    }

    pub fn projections_csv(&self) -> String {
        let mut s = String::from("token,source,pc1,pc2\n");
        for (t, src) in self.sources.iter().enumerate() {
            let _ = writeln!(s, "{t},{src},{},{}", self.projection.get(t, 0), self.projection.get(t, 1));
        }
        s
    }
}

/// Projects the rows of `x` onto its top two principal axes. Returns the
/// projection and the share of total variance each axis explains.
pub fn pca2(x: &Mat) -> Result<(Mat, [f64; 2])> {
    let (n, d) = x.shape();
    if n == 0 || d == 0 {
        return Err(ComeError::InvalidArgument("PCA of an empty matrix".into()));
    }
    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| x.get(i, j) - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let mut ratio = [0.0; 2];
    let mut proj = Mat::zeros(n, 2);
    for (c, &k) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let big = v.iter().copied().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
        if big < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        ratio[c] = if total > 0.0 { eig.eigenvalues[k].max(0.0) / total } else { 0.0 };
        for i in 0..n {
            let p: f64 = (0..d).map(|j| centered[(i, j)] * v[j]).sum();
            proj.set(i, c, p);
        }
    }
    Ok((proj, ratio))
}

/// Runs `model` over `data` exactly as [`evaluate`](super::evaluate) does
/// and records every routing decision.
pub fn route_dump(model: &Model, data: &Dataset, batch_size: usize, seed: u64) -> Result<RouteDump> {
    if !model.arch.use_routed || model.arch.kind != crate::model::ModelKind::Come {
        return Err(ComeError::InvalidArgument("route dumps need a COME model with routed experts".into()));
    }
    if data.is_empty() || batch_size == 0 {
        return Err(ComeError::InvalidArgument("route dump needs data and a positive batch size".into()));
    }
    let seeds = Seeds::new(seed);
    let groups = model.groups();
    let t = data.tokens;
    let mut rows = Vec::new();
    let mut sources = Vec::new();
    let mut features: Vec<f64> = Vec::new();
    let mut purity = Purity::default();
    for b in 0..data.len().div_ceil(batch_size) {
        let idx = data.chunk_indices(b * batch_size, batch_size);
        let (batch, labels) = data.batch(&idx)?;
        let mut rng = seeds.substream(Stream::Cluster, EVAL_STREAM_BASE + b as u64);
        let pass = model.forward(&batch, &labels, ClusterInput::Compute(&mut rng), None)?;
        let routed = pass.routed.as_ref().expect("COME pass is routed");
        let p = routing_purity(&routed.plan, &batch.sources, &groups);
        purity.tokens += p.tokens;
        purity.selected_in_group += p.selected_in_group;
        purity.admitted_in_group += p.admitted_in_group;
        let offset = sources.len();
        for (local, routes) in routed.plan.routes.iter().enumerate() {
            let (fine, coarse) = match &pass.clusters {
                Some(c) => {
                    let (f, k) = c.assignment(local)?;
                    (Some(f), Some(k))
                }
                None => (None, None),
            };
            for (rank, r) in routes.iter().enumerate() {
                rows.push(RouteRow {
                    batch: b,
                    token: offset + local,
                    sample: idx[local / t],
                    source: batch.sources[local],
                    rank,
                    expert: r.expert,
                    weight: r.weight,
                    admitted: r.admitted,
                    fine,
                    coarse,
                });
            }
        }
        sources.extend_from_slice(&batch.sources);
        features.extend_from_slice(routed.dr.output.data());
    }
    let width = model.arch.width;
    let feats = Mat::new(sources.len(), width, features)?;
    let (projection, explained_variance_ratio) = pca2(&feats)?;
    Ok(RouteDump {
        rows,
        tokens: sources.len(),
        sources,
        projection,
        explained_variance_ratio,
        purity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn pca_recovers_a_dominant_axis() {
        let mut rng = Seeds::new(3).stream(Stream::Data);
        let x = Mat::from_fn(200, 3, |i, j| match j {
            0 => (i as f64 - 100.0) * 0.1,
            _ => rng.random_range(-0.01..0.01),
        });
        let (p, r) = pca2(&x).unwrap();
        assert!(r[0] > 0.99 && r[0] + r[1] <= 1.0 + 1e-12);
        // The first component is the centered first coordinate up to sign.
        assert!((p.get(0, 0).abs() - 9.95).abs() < 0.01);
    }

    #[test]
    fn dump_accounts_for_every_selection() {
        let cfg = super::super::tests::quick();
        let data = super::super::load_data(&cfg).unwrap();
        let out = super::super::train(&cfg, &data).unwrap();
        let d = route_dump(&out.model, &data.test, cfg.train.batch_size, cfg.seed).unwrap();
        let k = out.model.arch.router.top_k;
        assert_eq!(d.rows.len(), d.tokens * k);
        assert_eq!(d.tokens, data.test.len() * data.test.tokens);
        let groups = out.model.groups();
        let again = d.purity_from_rows(&groups);
        assert_eq!(again, d.purity);
        assert!((again.purity() - out.final_eval.purity).abs() < 1e-12);
        assert!((again.admitted_purity() - out.final_eval.admitted_purity).abs() < 1e-12);
        let (a, b) = (d.explained_variance_ratio[0], d.explained_variance_ratio[1]);
        assert!(a >= b && b >= 0.0 && a + b <= 1.0 + 1e-12);
        assert_eq!(d.routes_csv().lines().count(), d.rows.len() + 1);
        assert_eq!(d.projections_csv().lines().count(), d.tokens + 1);
    }
}
