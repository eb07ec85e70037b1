//! Cluster statistics over key embeddings: hard assignment, offline
//! k-means for initialization and periodic resets, and the per-iteration
//! momentum update of centroids and variances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, check_dims, dist_sq_unchecked, l2_normalize, Matrix};

pub const DEFAULT_KMEANS_MAX_ITERS: usize = 100;

/// Momentum ratios and the freeze/reset schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub beta1: f64,
    pub beta2: f64,
    pub frozen_until: u64,
    pub reset_every: u64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            beta1: 0.99,
            beta2: 0.99,
            frozen_until: 313,
            reset_every: 1000,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta1) {
            return Err(Error::invalid("beta1", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta2", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    centroids: Matrix,
    variances: Vec<f64>,
    counts: Vec<usize>,
    params: ClusterParams,
}

/// Result of assigning a batch against the current centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub indices: Vec<usize>,
    /// Per-cluster mean of the assigned rows; zero where the count is zero.
    pub batch_means: Matrix,
    pub batch_counts: Vec<usize>,
    /// Per-cluster `(1/|S|) Σ ‖z − μ‖² / d`; zero where the count is zero.
    pub batch_variances: Vec<f64>,
}

impl Assignment {
    pub fn num_clusters(&self) -> usize {
        self.batch_counts.len()
    }
}

impl ClusterState {
    pub fn new(centroids: Matrix, variances: Vec<f64>, params: ClusterParams) -> Result<Self> {
        if centroids.rows() == 0 {
            return Err(Error::invalid("num_clusters", "must be >= 1"));
        }
        if variances.len() != centroids.rows() {
            return Err(Error::DimMismatch {
                expected: centroids.rows(),
                got: variances.len(),
            });
        }
        if variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("variances", "must be >= 0"));
        }
        params.validate()?;
        let l = centroids.rows();
        Ok(Self {
            centroids,
            variances,
            counts: vec![0; l],
            params,
        })
    }

    pub(crate) fn restore(
        centroids: Matrix,
        variances: Vec<f64>,
        counts: Vec<usize>,
        params: ClusterParams,
    ) -> Result<Self> {
        let mut s = Self::new(centroids, variances, params)?;
        if counts.len() != s.num_clusters() {
            return Err(Error::corrupt("clusters", "count vector length mismatch"));
        }
        s.counts = counts;
        Ok(s)
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn params(&self) -> &ClusterParams {
        &self.params
    }

    pub fn set_params(&mut self, params: ClusterParams) -> Result<()> {
        params.validate()?;
        self.params = params;
        Ok(())
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, z: &[f64]) -> Result<usize> {
        check_dims(self.dim(), z.len())?;
        Ok(nearest(&self.centroids, z).0)
    }

    pub fn assign_batch(&self, z: &Matrix) -> Result<Assignment> {
        if !z.is_empty() {
            check_dims(self.dim(), z.cols())?;
        }
        let indices: Vec<usize> = z
            .iter_rows()
            .map(|r| nearest(&self.centroids, r).0)
            .collect();
        Ok(summarize(z, &indices, self.num_clusters()))
    }

    /// Momentum step for every cluster that received members in `asg`:
    /// `c ← normalize(β1·c + (1−β1)·μ)`, `σ² ← β2·σ² + (1−β2)·var`.
    pub fn momentum_update(&mut self, asg: &Assignment) -> Result<()> {
        if asg.num_clusters() != self.num_clusters() {
            return Err(Error::StaleAssignment {
                expected: self.num_clusters(),
                got: asg.num_clusters(),
            });
        }
        check_dims(self.dim(), asg.batch_means.cols())?;
        let (b1, b2) = (self.params.beta1, self.params.beta2);
        for i in 0..self.num_clusters() {
            self.counts[i] = asg.batch_counts[i];
            if asg.batch_counts[i] == 0 {
                continue;
            }
            let mut c: Vec<f64> = self.centroids.row(i).iter().map(|x| b1 * x).collect();
            axpy(1.0 - b1, asg.batch_means.row(i), &mut c);
            // an exactly cancelling blend keeps the previous direction
            if let Ok(c) = l2_normalize(&c) {
                self.centroids.row_mut(i).copy_from_slice(&c);
            }
            self.variances[i] = b2 * self.variances[i] + (1.0 - b2) * asg.batch_variances[i];
        }
        Ok(())
    }

    /// Re-derives the state from `pool` by k-means when `iter` is a positive
    /// multiple of `reset_every` and the pool holds at least L rows.
    /// Returns whether a reset happened.
    pub fn maybe_reset(&mut self, pool: &Matrix, iter: u64, seed: u64) -> Result<bool> {
        let every = self.params.reset_every;
        if iter == 0 || every == 0 || iter % every != 0 || pool.rows() < self.num_clusters() {
            return Ok(false);
        }
        let fresh = kmeans_with(
            pool,
            self.num_clusters(),
            seed.wrapping_add(iter),
            DEFAULT_KMEANS_MAX_ITERS,
            self.params,
        )?;
        *self = fresh;
        Ok(true)
    }
}

/// `(index, squared distance)` of the closest row of `centroids`.
fn nearest(centroids: &Matrix, z: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter_rows().enumerate() {
        let d = dist_sq_unchecked(z, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn summarize(z: &Matrix, indices: &[usize], l: usize) -> Assignment {
    let d = z.cols();
    let mut means = Matrix::zeros(l, d);
    let mut counts = vec![0usize; l];
    for (row, &i) in z.iter_rows().zip(indices) {
        axpy(1.0, row, means.row_mut(i));
        counts[i] += 1;
    }
    for i in 0..l {
        if counts[i] > 0 {
            let inv = 1.0 / counts[i] as f64;
            means.row_mut(i).iter_mut().for_each(|x| *x *= inv);
        }
    }
    let mut vars = vec![0.0; l];
    for (row, &i) in z.iter_rows().zip(indices) {
        vars[i] += dist_sq_unchecked(row, means.row(i));
    }
    for i in 0..l {
        if counts[i] > 0 {
            vars[i] /= counts[i] as f64 * d as f64;
        }
    }
    Assignment {
        indices: indices.to_vec(),
        batch_means: means,
        batch_counts: counts,
        batch_variances: vars,
    }
}

/// Mean and scalar variance `(1/|S|) Σ ‖z − mean‖² / d` of a set of vectors.
pub fn batch_stats<R: AsRef<[f64]>>(set: &[R]) -> Result<(Vec<f64>, f64)> {
    let first = set.first().ok_or(Error::EmptySet)?.as_ref();
    let d = first.len();
    let mut mean = vec![0.0; d];
    for v in set {
        let v = v.as_ref();
        check_dims(d, v.len())?;
        axpy(1.0, v, &mut mean);
    }
    let n = set.len() as f64;
    mean.iter_mut().for_each(|x| *x /= n);
    let mut ss = 0.0;
    for v in set {
        ss += dist_sq_unchecked(v.as_ref(), &mean);
    }
    Ok((mean, ss / n / d as f64))
}

/// Raw Lloyd output before normalization, with the within-cluster sum of
/// squares recorded after the seeding assignment and after every iteration.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centers: Matrix,
    pub labels: Vec<usize>,
    pub wcss_history: Vec<f64>,
    pub iterations: usize,
    pub repairs: usize,
}

fn kmeans_plus_plus(points: &Matrix, l: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut centers = Matrix::zeros(l, points.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| dist_sq_unchecked(p, centers.row(0)))
        .collect();
    for k in 1..l {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(k).copy_from_slice(points.row(pick));
        for (i, p) in points.iter_rows().enumerate() {
            let d = dist_sq_unchecked(p, centers.row(k));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centers
}

fn wcss(points: &Matrix, centers: &Matrix, labels: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(labels)
        .map(|(p, &i)| dist_sq_unchecked(p, centers.row(i)))
        .sum()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or `max_iters` is reached. A cluster left without members is
/// re-seeded at the point farthest from its former centroid.
pub fn lloyd(points: &Matrix, l: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    if l == 0 {
        return Err(Error::invalid("num_clusters", "must be >= 1"));
    }
    if points.rows() < l {
        return Err(Error::TooFewPoints {
            needed: l,
            got: points.rows(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(points, l, &mut rng);
    let mut labels: Vec<usize> = points.iter_rows().map(|p| nearest(&centers, p).0).collect();
    let mut history = vec![wcss(points, &centers, &labels)];
    let mut repairs = 0;
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let asg = summarize(points, &labels, l);
        let mut taken = vec![false; points.rows()];
        for i in 0..l {
            if asg.batch_counts[i] > 0 {
                centers.row_mut(i).copy_from_slice(asg.batch_means.row(i));
                continue;
            }
            let former = centers.row(i).to_vec();
            let mut far = (usize::MAX, -1.0);
            for (j, p) in points.iter_rows().enumerate() {
                let d = dist_sq_unchecked(p, &former);
                if !taken[j] && d > far.1 {
                    far = (j, d);
                }
            }
            if far.0 != usize::MAX {
                taken[far.0] = true;
                centers.row_mut(i).copy_from_slice(points.row(far.0));
                repairs += 1;
            }
        }
        let next: Vec<usize> = points.iter_rows().map(|p| nearest(&centers, p).0).collect();
        let changed = next != labels;
        labels = next;
        history.push(wcss(points, &centers, &labels));
        if !changed {
            break;
        }
    }
    Ok(KMeansFit {
        centers,
        labels,
        wcss_history: history,
        iterations,
        repairs,
    })
}

/// Best of `restarts` independent [`lloyd`] runs by final WCSS; restart `r`
/// is seeded with `seed + r`.
pub fn lloyd_restarts(
    points: &Matrix,
    l: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<KMeansFit> {
    let mut best = lloyd(points, l, seed, max_iters)?;
    for r in 1..restarts as u64 {
        let fit = lloyd(points, l, seed.wrapping_add(r), max_iters)?;
        if fit.wcss_history.last() < best.wcss_history.last() {
            best = fit;
        }
    }
    Ok(best)
}

/// k-means with default momentum/schedule parameters.
pub fn kmeans(points: &Matrix, l: usize, seed: u64, max_iters: usize) -> Result<ClusterState> {
    kmeans_with(points, l, seed, max_iters, ClusterParams::default())
}

/// Runs [`lloyd`] and converts the fit into a [`ClusterState`] with unit
/// centroids and per-cluster scalar variances.
pub fn kmeans_with(
    points: &Matrix,
    l: usize,
    seed: u64,
    max_iters: usize,
    params: ClusterParams,
) -> Result<ClusterState> {
    let fit = lloyd(points, l, seed, max_iters)?;
    let asg = summarize(points, &fit.labels, l);
    let d = points.cols();
    let mut centroids = Matrix::zeros(l, d);
    for i in 0..l {
        let raw = if asg.batch_counts[i] > 0 {
            asg.batch_means.row(i)
        } else {
            fit.centers.row(i)
        };
        let unit = l2_normalize(raw)
            .or_else(|_| {
                // mean cancelled out; fall back to any member direction
                fit.labels
                    .iter()
                    .position(|&lab| lab == i)
                    .map_or(Err(Error::EmptySet), |j| l2_normalize(points.row(j)))
            })
            .unwrap_or_else(|_| {
                let mut e = vec![0.0; d];
                e[0] = 1.0;
                e
            });
        centroids.row_mut(i).copy_from_slice(&unit);
    }
    let mut state = ClusterState::new(centroids, asg.batch_variances.clone(), params)?;
    state.counts = asg.batch_counts;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, norm};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand_distr::{Distribution, Normal};

    fn state(rows: &[[f64; 2]]) -> ClusterState {
        let m = Matrix::from_rows(2, rows).unwrap();
        ClusterState::new(m, vec![0.1; rows.len()], ClusterParams::default()).unwrap()
    }

    #[test]
    fn restarts_never_worse() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let pts = Matrix::from_rows(3, rows.iter()).unwrap();
        let single = lloyd(&pts, 5, 4, 100).unwrap();
        let multi = lloyd_restarts(&pts, 5, 4, 100, 6).unwrap();
        assert!(multi.wcss_history.last().unwrap() <= single.wcss_history.last().unwrap());
    }

    #[test]
    fn assign_examples() {
        let s = state(&[[1.0, 0.0], [0.0, 1.0]]);
        let z = l2_normalize(&[0.9, 0.1]).unwrap();
        assert_eq!(s.assign(&z).unwrap(), 0);

        let s3 = state(&[[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        // equidistant from clusters 1 and 2
        let z = l2_normalize(&[1.0, 1.0]).unwrap();
        assert_eq!(s3.assign(&z).unwrap(), 1);

        let s1 = state(&[[0.6, 0.8]]);
        assert_eq!(s1.assign(&[-1.0, 0.0]).unwrap(), 0);
        assert!(s1.assign(&[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn assign_batch_examples() {
        let s = state(&[[1.0, 0.0], [0.0, 1.0]]);
        let z = Matrix::from_rows(2, [[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let a = s.assign_batch(&z).unwrap();
        assert_eq!(a.batch_counts, vec![1, 1]);
        assert_eq!(a.batch_means, *s.centroids());

        let z = Matrix::from_rows(2, [[0.9, 0.1], [0.8, -0.1], [1.0, 0.2]]).unwrap();
        let a = s.assign_batch(&z).unwrap();
        assert_eq!(a.batch_counts, vec![3, 0]);
        assert_eq!(a.batch_means.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn assign_batch_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = state(&[[0.6, 0.8], [-0.8, 0.6]]);
        let pts: Vec<[f64; 2]> = (0..6)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let a = s
            .assign_batch(&Matrix::from_rows(2, &pts).unwrap())
            .unwrap();
        for (p, &got) in pts.iter().zip(&a.indices) {
            let d0 = (p[0] - 0.6).powi(2) + (p[1] - 0.8).powi(2);
            let d1 = (p[0] + 0.8).powi(2) + (p[1] - 0.6).powi(2);
            let want = if d1 < d0 { 1 } else { 0 };
            assert_eq!(got, want);
        }
    }

    #[test]
    fn batch_stats_examples() {
        let (m, v) = batch_stats(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(m, vec![0.5, 0.5]);
        assert!((v - 0.25).abs() < 1e-15);
        let (m, v) = batch_stats(&[[0.3, 0.4]]).unwrap();
        assert_eq!((m, v), (vec![0.3, 0.4], 0.0));
        let (m, v) = batch_stats(&[[0.3, 0.4], [0.3, 0.4]]).unwrap();
        assert_eq!((m, v), (vec![0.3, 0.4], 0.0));
        assert!(matches!(batch_stats::<[f64; 2]>(&[]), Err(Error::EmptySet)));
    }

    fn blobs(seed: u64, centers: &[Vec<f64>], per: usize, sd: f64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let d = centers[0].len();
        let mut rows = Vec::new();
        for _ in 0..per {
            for c in centers {
                rows.push(
                    c.iter()
                        .map(|x| x + noise.sample(&mut rng))
                        .collect::<Vec<_>>(),
                );
            }
        }
        Matrix::from_rows(d, rows).unwrap()
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let centers = vec![vec![2.0, 0.5, 0.0], vec![-0.5, 0.0, 2.0]];
        let pts = blobs(3, &centers, 50, 0.05);
        let s = kmeans(&pts, 2, 9, 100).unwrap();
        for c in &centers {
            let truth = l2_normalize(c).unwrap();
            let best = s
                .centroids()
                .iter_rows()
                .map(|r| dot(r, &truth).unwrap().clamp(-1.0, 1.0).acos())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.05, "angular distance {best}");
        }
    }

    #[test]
    fn kmeans_single_cluster_is_normalized_mean() {
        let pts = Matrix::from_rows(2, [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let s = kmeans(&pts, 1, 0, 100).unwrap();
        let want = l2_normalize(&[2.0 / 3.0, 2.0 / 3.0]).unwrap();
        for (a, b) in s.centroids().row(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_identical_points_repairs_without_crash() {
        let pts = Matrix::from_rows(2, vec![[0.6, 0.8]; 10]).unwrap();
        let fit = lloyd(&pts, 2, 1, 100).unwrap();
        assert!(fit.repairs > 0);
        let s = kmeans(&pts, 2, 1, 100).unwrap();
        assert_eq!(s.num_clusters(), 2);
        for r in s.centroids().iter_rows() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_too_few_points() {
        let pts = Matrix::from_rows(2, [[1.0, 0.0]]).unwrap();
        assert!(matches!(
            kmeans(&pts, 2, 0, 10),
            Err(Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn lloyd_wcss_non_increasing() {
        for seed in 0..20 {
            let centers = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]];
            let pts = blobs(seed, &centers, 40, 0.6);
            let fit = lloyd(&pts, 4, seed, 100).unwrap();
            for w in fit.wcss_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12 * w[0].abs(), "{:?}", fit.wcss_history);
            }
        }
    }

    #[test]
    fn momentum_update_examples() {
        let mut s = state(&[[1.0, 0.0]]);
        s.set_params(ClusterParams {
            beta1: 0.9,
            ..ClusterParams::default()
        })
        .unwrap();
        let z = Matrix::from_rows(2, [[0.0, 1.0]]).unwrap();
        let a = s.assign_batch(&z).unwrap();
        s.momentum_update(&a).unwrap();
        let want = l2_normalize(&[0.9, 0.1]).unwrap();
        assert!((s.centroids().row(0)[0] - want[0]).abs() < 1e-12);
        assert!((s.centroids().row(0)[1] - want[1]).abs() < 1e-12);

        let mut s = state(&[[1.0, 0.0], [0.0, 1.0]]);
        s.set_params(ClusterParams {
            beta1: 1.0,
            beta2: 1.0,
            ..ClusterParams::default()
        })
        .unwrap();
        let before = s.clone();
        let z = Matrix::from_rows(2, [[0.8, 0.6], [0.6, 0.8], [0.1, 0.99]]).unwrap();
        let a = s.assign_batch(&z).unwrap();
        s.momentum_update(&a).unwrap();
        assert_eq!(s.centroids(), before.centroids());
        assert_eq!(s.variances(), before.variances());

        let mut s = state(&[[1.0, 0.0], [0.0, 1.0]]);
        s.set_params(ClusterParams {
            beta1: 0.0,
            beta2: 0.0,
            ..ClusterParams::default()
        })
        .unwrap();
        let a = s.assign_batch(&z).unwrap();
        s.momentum_update(&a).unwrap();
        let (m0, v0) = batch_stats(&[[0.8, 0.6]]).unwrap();
        let (m1, v1) = batch_stats(&[[0.6, 0.8], [0.1, 0.99]]).unwrap();
        assert_eq!(s.centroids().row(0), l2_normalize(&m0).unwrap().as_slice());
        assert_eq!(s.centroids().row(1), l2_normalize(&m1).unwrap().as_slice());
        assert!((s.variances()[0] - v0).abs() < 1e-15);
        assert!((s.variances()[1] - v1).abs() < 1e-15);
    }

    #[test]
    fn stale_assignment_rejected() {
        let s2 = state(&[[1.0, 0.0], [0.0, 1.0]]);
        let mut s3 = state(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]);
        let a = s2
            .assign_batch(&Matrix::from_rows(2, [[1.0, 0.0]]).unwrap())
            .unwrap();
        assert!(matches!(
            s3.momentum_update(&a),
            Err(Error::StaleAssignment { .. })
        ));
    }

    #[test]
    fn reset_schedule() {
        let pool = blobs(1, &[vec![1.0, 0.2], vec![-0.2, 1.0]], 30, 0.05);
        let mut s = state(&[[1.0, 0.0], [0.0, 1.0]]);
        let before = s.clone();
        assert!(!s.maybe_reset(&pool, 999, 5).unwrap());
        assert_eq!(s, before);
        assert!(!s.maybe_reset(&pool, 0, 5).unwrap());
        assert!(s.maybe_reset(&pool, 1000, 5).unwrap());
        assert_ne!(s.centroids(), before.centroids());
        assert_eq!(s.params(), before.params());
        let mut t = before.clone();
        assert!(!t.maybe_reset(&Matrix::zeros(0, 2), 2000, 5).unwrap());
        assert_eq!(t, before);
    }

    #[test]
    fn momentum_converges_on_stationary_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let truth = [vec![0.8, 0.6, 0.0], vec![0.0, 0.6, 0.8]];
        let noise = Normal::new(0.0, 0.1).unwrap();
        let init = Matrix::from_rows(3, [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let mut s = ClusterState::new(init, vec![0.0; 2], ClusterParams::default()).unwrap();
        let mut steps = Vec::new();
        for _ in 0..600 {
            let rows: Vec<Vec<f64>> = (0..32)
                .map(|j| {
                    let t = &truth[j % 2];
                    let v: Vec<f64> = t.iter().map(|x| x + noise.sample(&mut rng)).collect();
                    l2_normalize(&v).unwrap()
                })
                .collect();
            let z = Matrix::from_rows(3, &rows).unwrap();
            let prev = s.centroids().clone();
            let a = s.assign_batch(&z).unwrap();
            s.momentum_update(&a).unwrap();
            let step: f64 = (0..2)
                .map(|i| dist_sq_unchecked(prev.row(i), s.centroids().row(i)).sqrt())
                .sum();
            steps.push(step);
            for r in s.centroids().iter_rows() {
                assert!((norm(r) - 1.0).abs() < 1e-9);
            }
        }
        let window = |a: usize| steps[a..a + 100].iter().sum::<f64>() / 100.0;
        let trend: Vec<f64> = (0..5).map(|k| window(k * 100)).collect();
        assert!(trend[0] > trend[1] && trend[1] > trend[4], "{trend:?}");
        assert!(trend[4] < 0.2 * trend[0], "{trend:?}");
    }

    proptest! {
        #[test]
        fn assign_permutation_equivariant(
            seed in 0u64..500,
            perm_seed in 0u64..500,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = 4;
            let rows: Vec<Vec<f64>> = (0..l)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut perm: Vec<usize> = (0..l).collect();
            let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..l).rev() {
                perm.swap(i, prng.random_range(0..=i));
            }
            let a = ClusterState::new(Matrix::from_rows(3, &rows).unwrap(), vec![0.0; l], ClusterParams::default()).unwrap();
            let permuted: Vec<&Vec<f64>> = perm.iter().map(|&p| &rows[p]).collect();
            let b = ClusterState::new(Matrix::from_rows(3, permuted).unwrap(), vec![0.0; l], ClusterParams::default()).unwrap();
            let ia = a.assign(&z).unwrap();
            let ib = b.assign(&z).unwrap();
            prop_assert_eq!(perm[ib], ia);
        }

        #[test]
        fn momentum_update_keeps_unit_norm(seed in 0u64..200, b1 in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = state(&[[1.0, 0.0], [0.0, 1.0], [-0.6, -0.8]]);
            s.set_params(ClusterParams { beta1: b1, ..ClusterParams::default() }).unwrap();
            let rows: Vec<Vec<f64>> = (0..10)
                .map(|_| l2_normalize(&[rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).unwrap())
                .collect();
            let a = s.assign_batch(&Matrix::from_rows(2, &rows).unwrap()).unwrap();
            s.momentum_update(&a).unwrap();
            for r in s.centroids().iter_rows() {
                prop_assert!((norm(r) - 1.0).abs() < 1e-9);
            }
            prop_assert!(s.variances().iter().all(|v| *v >= 0.0));
        }
    }
}
