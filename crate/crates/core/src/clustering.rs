//! Lloyd's k-means and the two token-grouping strategies used before routing:
//! fine-to-coarse hierarchical clustering and multi-step clustering with
//! prior carryover and small-cluster suppression.
//!
//! Distances are squared Euclidean. Seeding is k-means++ (D²-weighted) from
//! the caller's stream, ties in assignment go to the lowest centroid index,
//! and an empty cluster is re-seeded at the point farthest from its centroid.

use serde::{Deserialize, Serialize};

use crate::error::{ComeError, Result};
use crate::numerics::{sq_dist, Mat, StreamRng};
use rand::Rng;

/// How Lloyd's iterations are started.
pub enum Init<'a> {
    /// k-means++ seeding drawn from the given stream.
    Seeded(&'a mut StreamRng),
    /// Start from these centroids (one per row).
    WarmStart(&'a Mat),
}

/// One level of Lloyd's algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Mat,
    pub assignments: Vec<usize>,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Two-level clustering of a token set.
///
/// `fine` holds the fine centroids, `coarse` the coarse centroids, and
/// `lineage[f]` the coarse cluster of fine centroid `f`. A single-level
/// clustering is represented with `fine == coarse` and identity lineage.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub fine: Mat,
    pub coarse: Mat,
    pub lineage: Vec<usize>,
    pub fine_assignments: Vec<usize>,
    pub fine_inertia: Vec<f64>,
    pub coarse_inertia: Vec<f64>,
    pub warnings: Vec<String>,
}

impl ClusterModel {
    pub fn single_level(fit: KMeansFit) -> Self {
        let k = fit.k();
        ClusterModel {
            coarse: fit.centroids.clone(),
            fine: fit.centroids,
            lineage: (0..k).collect(),
            fine_assignments: fit.assignments,
            coarse_inertia: fit.inertia_history.clone(),
            fine_inertia: fit.inertia_history,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.fine_assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fine_assignments.is_empty()
    }

    /// `(fine, coarse)` cluster of a token.
    pub fn assignment(&self, token: usize) -> Result<(usize, usize)> {
        let fine = *self.fine_assignments.get(token).ok_or_else(|| {
            ComeError::InvalidArgument(format!(
                "token {token} is not assigned ({} tokens clustered)",
                self.len()
            ))
        })?;
        Ok((fine, self.lineage[fine]))
    }

    pub fn coarse_assignments(&self) -> Vec<usize> {
        self.fine_assignments.iter().map(|&f| self.lineage[f]).collect()
    }

    /// Number of fine centroids feeding each coarse centroid.
    pub fn coarse_fan_in(&self) -> Vec<usize> {
        let mut counts = vec![0; self.coarse.rows()];
        for &c in &self.lineage {
            counts[c] += 1;
        }
        counts
    }
}

/// The cluster feature of a token: its coarse centroid.
pub fn cluster_feature_lookup(model: &ClusterModel, token: usize) -> Result<&[f64]> {
    let (_, coarse) = model.assignment(token)?;
    Ok(model.coarse.row(coarse))
}

/// Cluster features for every token, one row per token.
pub fn cluster_features(model: &ClusterModel) -> Mat {
    let rows: Vec<usize> = model.coarse_assignments();
    model.coarse.select_rows(&rows)
}

/// Number of distinct rows, comparing exact bit patterns.
pub fn distinct_rows(points: &Mat) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .row_iter()
        .map(|r| r.iter().map(|x| (x + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn nearest(point: &[f64], centroids: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.row_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeanspp(points: &Mat, k: usize, rng: &mut StreamRng) -> Mat {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .row_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        // total > 0 whenever k ≤ distinct rows
        let pick = pick.expect("k-means++ ran out of distinct points");
        chosen.push(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    points.select_rows(&chosen)
}

fn assign(points: &Mat, centroids: &Mat) -> (Vec<usize>, Vec<f64>) {
    points.row_iter().map(|p| nearest(p, centroids)).unzip()
}

fn update(points: &Mat, assignments: &[usize], dists: &[f64], k: usize) -> Mat {
    let d = points.cols();
    let mut sums = Mat::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (p, &a) in points.row_iter().zip(assignments) {
        counts[a] += 1;
        for (s, x) in sums.row_mut(a).iter_mut().zip(p) {
            *s += x;
        }
    }
    let mut taken = vec![false; points.rows()];
    for j in 0..k {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            sums.row_mut(j).iter_mut().for_each(|s| *s *= inv);
        } else {
            let far = (0..points.rows())
                .filter(|&i| !taken[i])
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                })
                .expect("more clusters than points");
            taken[far] = true;
            sums.row_mut(j).copy_from_slice(points.row(far));
        }
    }
    sums
}

/// Lloyd's algorithm.
///
/// Stops at an assignment fixpoint or after `max_iters` assignment steps.
/// The returned assignment is always nearest-centroid for the returned
/// centroids.
pub fn kmeans(points: &Mat, k: usize, init: Init<'_>, max_iters: usize) -> Result<KMeansFit> {
    if k == 0 || max_iters == 0 {
        return Err(ComeError::InvalidArgument(
            "k-means needs k ≥ 1 and max_iters ≥ 1".into(),
        ));
    }
    let distinct = distinct_rows(points);
    if k > distinct {
        return Err(ComeError::InvalidArgument(format!(
            "k = {k} exceeds the {distinct} distinct points"
        )));
    }
    let mut centroids = match init {
        Init::Seeded(rng) => kmeanspp(points, k, rng),
        Init::WarmStart(c) => {
            if c.rows() != k || c.cols() != points.cols() {
                return Err(ComeError::shape(
                    "kmeans warm start",
                    format!("{k}x{}", points.cols()),
                    format!("{}x{}", c.rows(), c.cols()),
                ));
            }
            c.clone()
        }
    };

    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut converged = false;
    for iter in 0..max_iters {
        let (next, dists) = assign(points, &centroids);
        history.push(dists.iter().sum());
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        if iter + 1 == max_iters {
            break;
        }
        centroids = update(points, &assignments, &dists, k);
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        inertia_history: history,
        converged,
    })
}

/// Fine-to-coarse clustering: `m` fine clusters over the tokens, then `k`
/// coarse clusters over the fine centroids. Each token inherits the coarse
/// cluster of its fine centroid.
///
/// With fewer distinct tokens than `m`, `m` shrinks to the distinct count
/// (and `k` to at most the new `m`) and a warning is recorded.
pub fn fine2coarse(
    points: &Mat,
    m: usize,
    k: usize,
    max_iters: usize,
    rng: &mut StreamRng,
) -> Result<ClusterModel> {
    if k == 0 || m <= k {
        return Err(ComeError::InvalidArgument(format!(
            "fine2coarse needs m > k ≥ 1 (got m = {m}, k = {k})"
        )));
    }
    let mut warnings = Vec::new();
    let distinct = distinct_rows(points);
    let mut m_eff = m;
    if distinct < m {
        m_eff = distinct;
        warnings.push(format!(
            "only {distinct} distinct tokens ({} total); fine clusters reduced from {m} to {m_eff}",
            points.rows()
        ));
    }
    let fine = kmeans(points, m_eff, Init::Seeded(rng), max_iters)?;

    let mut k_eff = k.min(m_eff);
    let distinct_fine = distinct_rows(&fine.centroids);
    if distinct_fine < k_eff {
        k_eff = distinct_fine;
    }
    if k_eff != k {
        warnings.push(format!("coarse clusters reduced from {k} to {k_eff}"));
    }
    let coarse = kmeans(&fine.centroids, k_eff, Init::Seeded(rng), max_iters)?;

    Ok(ClusterModel {
        fine: fine.centroids,
        coarse: coarse.centroids,
        lineage: coarse.assignments,
        fine_assignments: fine.assignments,
        fine_inertia: fine.inertia_history,
        coarse_inertia: coarse.inertia_history,
        warnings,
    })
}

/// Settings for [`multistep`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiStepConfig {
    pub k: usize,
    pub steps: usize,
    /// Clusters holding fewer than `tau · n` points are suppressed.
    pub tau: f64,
    /// Lloyd iterations per step.
    pub max_iters: usize,
}

impl Default for MultiStepConfig {
    fn default() -> Self {
        MultiStepConfig {
            k: 4,
            steps: 5,
            tau: 0.01,
            max_iters: 20,
        }
    }
}

/// What happened at one outer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Inertia of the step's Lloyd run, before any suppression.
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
    /// `(cluster index at this step, size)` of each suppressed cluster.
    pub suppressed: Vec<(usize, usize)>,
    /// Surviving centroids, carried into the next step.
    pub centroids: Mat,
    /// Assignments after suppression, indexing `centroids`.
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepState {
    pub tau: f64,
    pub steps: Vec<StepRecord>,
}

impl MultiStepState {
    pub fn total_suppressed(&self) -> usize {
        self.steps.iter().map(|s| s.suppressed.len()).sum()
    }
}

/// Repeated k-means where each step warm-starts from the previous step's
/// surviving centroids. After every step, clusters holding fewer than
/// `tau · n` of the still-active points are dropped: their members are
/// marked anomalous, no longer move centroids in later steps, and are
/// assigned to the nearest survivor.
pub fn multistep(
    points: &Mat,
    cfg: MultiStepConfig,
    rng: &mut StreamRng,
) -> Result<(ClusterModel, MultiStepState)> {
    if cfg.steps == 0 {
        return Err(ComeError::InvalidArgument("multistep needs steps ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.tau) {
        return Err(ComeError::InvalidArgument(format!(
            "suppression fraction {} outside [0, 1]",
            cfg.tau
        )));
    }
    let n = points.rows();
    let threshold = cfg.tau * n as f64;
    let mut state = MultiStepState {
        tau: cfg.tau,
        steps: Vec::with_capacity(cfg.steps),
    };
    let mut active: Vec<usize> = (0..n).collect();
    let mut prior: Option<Mat> = None;
    for step in 1..=cfg.steps {
        let subset;
        let pts = if active.len() == n {
            points
        } else {
            subset = points.select_rows(&active);
            &subset
        };
        let fit = match &prior {
            None => kmeans(pts, cfg.k, Init::Seeded(rng), cfg.max_iters)?,
            Some(c) => kmeans(pts, c.rows(), Init::WarmStart(c), cfg.max_iters)?,
        };
        let sizes = fit.cluster_sizes();
        let suppressed: Vec<(usize, usize)> = sizes
            .iter()
            .enumerate()
            .filter(|(_, &s)| (s as f64) < threshold)
            .map(|(j, &s)| (j, s))
            .collect();
        if suppressed.len() == sizes.len() {
            return Err(ComeError::InvalidArgument(format!(
                "every cluster at step {step} is smaller than tau·n = {threshold}; lower tau"
            )));
        }
        let centroids = if suppressed.is_empty() {
            fit.centroids.clone()
        } else {
            let is_suppressed = |j: usize| suppressed.iter().any(|&(s, _)| s == j);
            active = active
                .iter()
                .zip(&fit.assignments)
                .filter(|(_, &a)| !is_suppressed(a))
                .map(|(&i, _)| i)
                .collect();
            let survivors: Vec<usize> = (0..sizes.len()).filter(|&j| !is_suppressed(j)).collect();
            fit.centroids.select_rows(&survivors)
        };
        let assignments = points.row_iter().map(|p| nearest(p, &centroids).0).collect();
        prior = Some(centroids.clone());
        state.steps.push(StepRecord {
            step,
            inertia: fit.inertia(),
            inertia_history: fit.inertia_history,
            suppressed,
            centroids,
            assignments,
        });
    }

    let last = state.steps.last().expect("steps ≥ 1");
    let fit = KMeansFit {
        centroids: last.centroids.clone(),
        assignments: last.assignments.clone(),
        inertia_history: last.inertia_history.clone(),
        converged: true,
    };
    Ok((ClusterModel::single_level(fit), state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Seeds, Stream};

    fn rng(seed: u64) -> StreamRng {
        Seeds::new(seed).stream(Stream::Cluster)
    }

    fn random_points(n: usize, d: usize, seed: u64) -> Mat {
        let mut r = Seeds::new(seed).stream(Stream::Data);
        Mat::from_fn(n, d, |_, _| r.random_range(-3.0..3.0))
    }

    fn inertia_of(points: &Mat, assign: &[usize], k: usize) -> f64 {
        let d = points.cols();
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<usize> = (0..points.rows()).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; d];
            for &i in &members {
                for (m, x) in mean.iter_mut().zip(points.row(i)) {
                    *m += x / members.len() as f64;
                }
            }
            total += members.iter().map(|&i| sq_dist(points.row(i), &mean)).sum::<f64>();
        }
        total
    }

    #[test]
    fn separated_points_are_their_own_centroids() {
        let p = Mat::from_rows(&[vec![0.0, 0.0], vec![5.0, 5.0], vec![-7.0, 2.0]]).unwrap();
        let fit = kmeans(&p, 3, Init::Seeded(&mut rng(1)), 10).unwrap();
        assert_eq!(fit.inertia(), 0.0);
        let mut sizes = fit.cluster_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![1, 1, 1]);
    }

    #[test]
    fn four_point_fixture_matches_brute_force() {
        let p = Mat::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 0.0],
            vec![10.0, 1.0],
        ])
        .unwrap();
        // Brute force over all 2-partitions with both parts nonempty.
        let best = (1u32..(1 << 4) - 1)
            .map(|mask| {
                let a: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
                inertia_of(&p, &a, 2)
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, 1.0);
        for seed in 0..10 {
            let fit = kmeans(&p, 2, Init::Seeded(&mut rng(seed)), 50).unwrap();
            assert!((fit.inertia() - best).abs() < 1e-12);
            let mut c: Vec<Vec<f64>> = fit.centroids.row_iter().map(<[f64]>::to_vec).collect();
            c.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(c, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        }
    }

    #[test]
    fn beats_random_assignments() {
        let p = random_points(200, 8, 11);
        let fit = kmeans(&p, 4, Init::Seeded(&mut rng(2)), 100).unwrap();
        let mut r = Seeds::new(3).stream(Stream::Routing);
        for _ in 0..50 {
            let a: Vec<usize> = (0..200).map(|_| r.random_range(0..4)).collect();
            assert!(fit.inertia() <= inertia_of(&p, &a, 4) + 1e-9);
        }
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..20 {
            let p = random_points(60, 3, 100 + seed);
            let fit = kmeans(&p, 5, Init::Seeded(&mut rng(seed)), 100).unwrap();
            for w in fit.inertia_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * w[0].max(1.0), "{:?}", fit.inertia_history);
            }
        }
    }

    #[test]
    fn assignments_are_nearest_centroid() {
        let p = random_points(80, 4, 5);
        for iters in [1, 2, 3, 100] {
            let fit = kmeans(&p, 6, Init::Seeded(&mut rng(9)), iters).unwrap();
            for (i, &a) in fit.assignments.iter().enumerate() {
                assert_eq!(nearest(p.row(i), &fit.centroids).0, a);
            }
        }
    }

    #[test]
    fn rejects_too_many_clusters() {
        let p = Mat::from_rows(&[vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(kmeans(&p, 3, Init::Seeded(&mut rng(0)), 5).is_err());
        assert!(kmeans(&p, 2, Init::Seeded(&mut rng(0)), 5).is_ok());
        assert!(kmeans(&p, 1, Init::Seeded(&mut rng(0)), 0).is_err());
    }

    #[test]
    fn empty_cluster_is_reseeded_from_farthest_point() {
        // Warm start with a centroid nobody picks.
        let p = Mat::from_rows(&[vec![0.0], vec![1.0], vec![9.0], vec![10.0]]).unwrap();
        let c = Mat::from_rows(&[vec![5.0], vec![100.0]]).unwrap();
        let fit = kmeans(&p, 2, Init::WarmStart(&c), 20).unwrap();
        assert_eq!(fit.cluster_sizes().iter().filter(|&&s| s == 0).count(), 0);
        assert!(fit.inertia() <= 1.0 + 1e-12);
    }

    #[test]
    fn deterministic_given_seed() {
        let p = random_points(100, 4, 8);
        let a = fine2coarse(&p, 16, 8, 50, &mut rng(4)).unwrap();
        let b = fine2coarse(&p, 16, 8, 50, &mut rng(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fine2coarse_lineage_is_a_partition() {
        let p = random_points(128, 6, 12);
        let model = fine2coarse(&p, 16, 8, 50, &mut rng(1)).unwrap();
        assert_eq!(model.fine.rows(), 16);
        assert_eq!(model.coarse.rows(), 8);
        assert_eq!(model.coarse_fan_in().iter().sum::<usize>(), 16);
        assert!(model.coarse_fan_in().iter().all(|&c| c >= 1));
        for t in 0..p.rows() {
            let (f, c) = model.assignment(t).unwrap();
            assert_eq!(c, model.lineage[f]);
            assert_eq!(cluster_feature_lookup(&model, t).unwrap(), model.coarse.row(c));
        }
        assert!(cluster_feature_lookup(&model, p.rows()).is_err());
    }

    #[test]
    fn fine2coarse_on_exact_positions() {
        let p = Mat::from_fn(16, 2, |i, j| if j == 0 { i as f64 } else { (i * i) as f64 * 0.1 });
        let model = fine2coarse(&p, 16, 8, 50, &mut rng(3)).unwrap();
        assert_eq!(*model.fine_inertia.last().unwrap(), 0.0);
        assert!(model.warnings.is_empty());
    }

    #[test]
    fn fine2coarse_falls_back_on_small_batches() {
        let p = random_points(10, 3, 2);
        let model = fine2coarse(&p, 16, 8, 50, &mut rng(3)).unwrap();
        assert_eq!(model.fine.rows(), 10);
        assert_eq!(model.warnings.len(), 1);
        assert!(fine2coarse(&p, 4, 4, 10, &mut rng(3)).is_err());
    }

    #[test]
    fn coarse_feature_is_mean_of_member_fine_centroids() {
        let p = random_points(128, 5, 21);
        let model = fine2coarse(&p, 16, 4, 500, &mut rng(7)).unwrap();
        for c in 0..model.coarse.rows() {
            let members: Vec<usize> = (0..16).filter(|&f| model.lineage[f] == c).collect();
            for j in 0..5 {
                let mean = members.iter().map(|&f| model.fine.get(f, j)).sum::<f64>()
                    / members.len() as f64;
                assert!((mean - model.coarse.get(c, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_cluster_lookups_identical() {
        let p = random_points(20, 3, 4);
        let fit = kmeans(&p, 1, Init::Seeded(&mut rng(0)), 10).unwrap();
        let model = ClusterModel::single_level(fit);
        let first = cluster_feature_lookup(&model, 0).unwrap().to_vec();
        for t in 1..20 {
            assert_eq!(cluster_feature_lookup(&model, t).unwrap(), &first[..]);
        }
    }

    #[test]
    fn multistep_single_step_equals_kmeans() {
        let p = random_points(90, 4, 6);
        let cfg = MultiStepConfig {
            k: 4,
            steps: 1,
            tau: 0.0,
            max_iters: 30,
        };
        let (model, state) = multistep(&p, cfg, &mut rng(5)).unwrap();
        let fit = kmeans(&p, 4, Init::Seeded(&mut rng(5)), 30).unwrap();
        assert!(model.fine.max_abs_diff(&fit.centroids) < 1e-12);
        assert_eq!(model.fine_assignments, fit.assignments);
        assert_eq!(state.total_suppressed(), 0);
    }

    #[test]
    fn multistep_warm_start_never_worsens() {
        let p = random_points(100, 3, 7);
        let cfg = MultiStepConfig {
            k: 4,
            steps: 5,
            tau: 0.0,
            max_iters: 2,
        };
        let (_, state) = multistep(&p, cfg, &mut rng(1)).unwrap();
        for w in state.steps.windows(2) {
            assert!(w[1].inertia <= w[0].inertia + 1e-12);
        }
    }

    #[test]
    fn multistep_suppresses_planted_outlier() {
        let mut rows = Vec::new();
        let mut r = Seeds::new(1).stream(Stream::Data);
        for c in 0..3 {
            for _ in 0..33 {
                rows.push(vec![
                    c as f64 * 10.0 + r.random_range(-0.5..0.5),
                    r.random_range(-0.5..0.5),
                ]);
            }
        }
        rows.push(vec![500.0, 500.0]);
        let p = Mat::from_rows(&rows).unwrap();
        let cfg = MultiStepConfig {
            k: 4,
            steps: 5,
            tau: 0.05,
            max_iters: 20,
        };
        let (model, state) = multistep(&p, cfg, &mut rng(2)).unwrap();
        let first = &state.steps[0];
        assert_eq!(first.suppressed.len(), 1);
        assert_eq!(first.suppressed[0].1, 1);
        assert_eq!(model.fine.rows(), 3);
        let outlier_cluster = model.fine_assignments[99];
        assert_eq!(nearest(p.row(99), &model.fine).0, outlier_cluster);
        for s in &state.steps {
            assert!(s.centroids.rows() <= 4);
        }
    }

    #[test]
    fn multistep_rejects_tau_suppressing_everything() {
        let p = random_points(40, 2, 3);
        let cfg = MultiStepConfig {
            k: 4,
            steps: 2,
            tau: 0.9,
            max_iters: 10,
        };
        assert!(multistep(&p, cfg, &mut rng(0)).is_err());
    }
}
