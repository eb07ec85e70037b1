//! Direct-embedding simulation of the push and pull forces: unit vectors are
//! optimized in place (no encoder) under the combined loss, with full-batch
//! negatives.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::clustering::{batch_stats, kmeans_with, ClusterParams, ClusterState};
use crate::error::{Error, Result};
use crate::losses::{total_loss, ClusterView, LossOptions, LossWeights, Temperatures};
use crate::numerics::{dist_sq_unchecked, dot_unchecked, l2_normalize, Matrix};
use crate::rng::stream;

/// Coordinates written per point in the trajectory CSV.
pub const CSV_COORDS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub steps: usize,
    pub weights: LossWeights,
    pub temps: Temperatures,
    pub step_size: f64,
    /// Spread of the initial points around their hidden class direction.
    pub init_spread: f64,
    /// Noise used to form each point's positive twin.
    pub twin_noise: f64,
    /// Use the hidden class directions as centroids and the true classes as
    /// assignments instead of momentum clustering.
    pub fixed_centroids: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            n: 64,
            classes: 4,
            dim: 8,
            steps: 100,
            weights: LossWeights::default(),
            temps: Temperatures::default(),
            step_size: 0.05,
            init_spread: 0.6,
            twin_noise: 0.05,
            fixed_centroids: false,
            beta1: 0.99,
            beta2: 0.99,
            seed: 0,
        }
    }
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.n < self.classes {
            return Err(Error::invalid("n", "need n >= classes >= 1"));
        }
        if self.n < 2 {
            return Err(Error::invalid("n", "must be >= 2"));
        }
        if self.dim < 2 {
            return Err(Error::invalid("dim", "must be >= 2"));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid("step_size", "must be > 0"));
        }
        if !(self.init_spread >= 0.0) || !(self.twin_noise >= 0.0) {
            return Err(Error::invalid("init_spread", "noise levels must be >= 0"));
        }
        self.weights.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsState {
    pub embeddings: Matrix,
    pub labels: Vec<usize>,
    pub clusters: ClusterState,
    pub step: usize,
    pub step_size: f64,
}

fn gaussian_unit<R: Rng>(center: &[f64], spread: f64, rng: &mut R) -> Vec<f64> {
    let sd = spread / (center.len() as f64).sqrt();
    loop {
        let v: Vec<f64> = center
            .iter()
            .map(|c| {
                let e: f64 = StandardNormal.sample(rng);
                c + sd * e
            })
            .collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

impl DynamicsState {
    pub fn new(cfg: &DynamicsConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, &[0]);
        let zero = vec![0.0; cfg.dim];
        let dirs: Vec<Vec<f64>> = (0..cfg.classes)
            .map(|_| gaussian_unit(&zero, 1.0, &mut rng))
            .collect();
        let labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.classes).collect();
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|&c| gaussian_unit(&dirs[c], cfg.init_spread, &mut rng))
            .collect();
        let embeddings = Matrix::from_rows(cfg.dim, rows.iter())?;
        let params = ClusterParams {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            frozen_until: 0,
            reset_every: 0,
        };
        let clusters = if cfg.fixed_centroids {
            let centroids = Matrix::from_rows(cfg.dim, dirs.iter())?;
            let variances = (0..cfg.classes)
                .map(|c| {
                    let members: Vec<&[f64]> = rows
                        .iter()
                        .zip(&labels)
                        .filter(|(_, &l)| l == c)
                        .map(|(r, _)| r.as_slice())
                        .collect();
                    batch_stats(&members).map(|(_, v)| v)
                })
                .collect::<Result<Vec<f64>>>()?;
            ClusterState::new(centroids, variances, params)?
        } else {
            kmeans_with(&embeddings, cfg.classes, cfg.seed, 100, params)?
        };
        Ok(Self {
            embeddings,
            labels,
            clusters,
            step: 0,
            step_size: cfg.step_size,
        })
    }

    /// One projected gradient step on every embedding, all gradients taken
    /// at the same snapshot.
    pub fn step(&mut self, cfg: &DynamicsConfig) -> Result<f64> {
        let n = self.embeddings.rows();
        let opts = LossOptions::default();
        let clusters_on = cfg.weights.lambda2 != 0.0 || cfg.weights.lambda3 != 0.0;
        let mut next = Matrix::zeros(n, cfg.dim);
        let mut loss_sum = 0.0;
        for i in 0..n {
            let z = self.embeddings.row(i);
            let mut rng = stream(cfg.seed, &[1, self.step as u64, i as u64]);
            let twin = gaussian_unit(z, cfg.twin_noise, &mut rng);
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let negatives = self.embeddings.select_rows(&others);
            let view = if clusters_on {
                let assigned = if cfg.fixed_centroids {
                    self.labels[i]
                } else {
                    self.clusters.assign(z)?
                };
                Some(ClusterView {
                    assigned,
                    centroids: self.clusters.centroids(),
                    sigma_sq: self.clusters.variances()[assigned],
                })
            } else {
                None
            };
            let loss = total_loss(z, &twin, &negatives, view, &cfg.weights, &cfg.temps, &opts)?;
            loss_sum += loss.value;
            let moved: Vec<f64> = z
                .iter()
                .zip(&loss.grad_z)
                .map(|(x, g)| x - self.step_size * g)
                .collect();
            let unit = l2_normalize(&moved).unwrap_or_else(|_| z.to_vec());
            next.row_mut(i).copy_from_slice(&unit);
        }
        self.embeddings = next;
        if !cfg.fixed_centroids && clusters_on {
            let asg = self.clusters.assign_batch(&self.embeddings)?;
            self.clusters.momentum_update(&asg)?;
        }
        self.step += 1;
        Ok(loss_sum / n as f64)
    }
}

/// Every position, the initial one first.
pub fn simulate(cfg: &DynamicsConfig) -> Result<(DynamicsState, Vec<Matrix>)> {
    let mut state = DynamicsState::new(cfg)?;
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    trajectory.push(state.embeddings.clone());
    for _ in 0..cfg.steps {
        state.step(cfg)?;
        trajectory.push(state.embeddings.clone());
    }
    Ok((state, trajectory))
}

/// Mean cosine similarity over all distinct pairs.
pub fn mean_pairwise_similarity(z: &Matrix) -> f64 {
    let n = z.rows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            sum += dot_unchecked(z.row(i), z.row(j));
        }
    }
    sum / (n * (n - 1) / 2).max(1) as f64
}

/// Mean Euclidean distance over pairs sharing a label.
pub fn mean_within_class_distance(z: &Matrix, labels: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..z.rows() {
        for j in i + 1..z.rows() {
            if labels[i] == labels[j] {
                sum += dist_sq_unchecked(z.row(i), z.row(j)).sqrt();
                pairs += 1;
            }
        }
    }
    sum / pairs.max(1) as f64
}

/// Trajectory CSV `step,point_id,class,coord0,...`, at most
/// [`CSV_COORDS`] coordinates per point.
pub fn write_trajectory_csv(trajectory: &[Matrix], labels: &[usize], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let dim = trajectory.first().map_or(0, Matrix::cols);
    let shown = dim.min(CSV_COORDS);
    write!(w, "step,point_id,class")?;
    for c in 0..shown {
        write!(w, ",coord{c}")?;
    }
    writeln!(w)?;
    for (step, z) in trajectory.iter().enumerate() {
        for (i, row) in z.iter_rows().enumerate() {
            write!(w, "{step},{i},{}", labels[i])?;
            for v in &row[..shown] {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Full-precision sidecar: `CUEDYN1`, u32 frames, u32 n, u32 dim, then f64
/// little-endian coordinates frame by frame.
pub fn write_full_state(trajectory: &[Matrix], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let (n, dim) = trajectory.first().map_or((0, 0), |m| (m.rows(), m.cols()));
    w.write_all(b"CUEDYN1")?;
    for v in [trajectory.len(), n, dim] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for z in trajectory {
        for v in z.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}
