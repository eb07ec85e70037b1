//! The pretraining loop: view pairs, query/key passes, the combined loss,
//! SGD on the query network, EMA into the key network, queue and cluster
//! maintenance, metrics.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rayon::prelude::*;

use crate::clustering::{kmeans_with, ClusterState};
use crate::config::ExperimentConfig;
use crate::data::{batches, make_views, Dataset};
use crate::encoder::{
    cosine_lr, cosine_momentum, sgd_step, EncoderPair, OptimState, QueryNet, Stage,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss, ClusterView};
use crate::numerics::{axpy, norm, Matrix, MIN_NORM};
use crate::queue::FeatureQueue;
use crate::rng::{derive_seed, stream};

/// Samples per gradient chunk. Chunks are summed in index order, so the
/// result does not depend on how many threads ran them.
const CHUNK: usize = 32;

pub const METRICS_HEADER: &str =
    "step,loss_total,loss1,loss2,loss3,lr,m,cluster_entropy,wallclock_ms";

/// Base seeds of the independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub augment: u64,
    pub init: u64,
    pub cluster: u64,
}

impl RunSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            data: derive_seed(seed, &[1]),
            augment: derive_seed(seed, &[2]),
            init: derive_seed(seed, &[3]),
            cluster: derive_seed(seed, &[4]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub pair: EncoderPair,
    pub opt: OptimState,
    pub queue: FeatureQueue,
    pub clusters: Option<ClusterState>,
    pub num_clusters: usize,
    pub iteration: u64,
    /// Length of the cosine schedules.
    pub total_steps: u64,
    pub seeds: RunSeeds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss_total: f64,
    pub loss1: f64,
    pub loss2: f64,
    pub loss3: f64,
    pub lr: f64,
    pub m: f64,
    pub cluster_entropy: f64,
    pub wallclock_ms: u64,
}

impl MetricsRecord {
    /// One CSV line; floats use the shortest representation that parses back
    /// to the same value.
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            self.step,
            self.loss_total,
            self.loss1,
            self.loss2,
            self.loss3,
            self.lr,
            self.m,
            self.cluster_entropy,
            self.wallclock_ms
        )
    }
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_line())?;
    }
    w.flush()?;
    Ok(())
}

impl TrainState {
    /// Fresh state for training on `train`.
    pub fn new(config: &ExperimentConfig, train: &Dataset) -> Result<Self> {
        config.validate()?;
        if train.dim() != config.input_dim {
            return Err(Error::DimMismatch {
                expected: config.input_dim,
                got: train.dim(),
            });
        }
        let num_clusters = match config.num_clusters {
            Some(l) => l,
            None if train.class_count > 0 => train.class_count,
            None => {
                return Err(Error::invalid(
                    "num_clusters",
                    "required when the dataset has no labels",
                ))
            }
        };
        let seeds = RunSeeds::from_seed(config.seed);
        let pair = EncoderPair::new(&config.arch(), config.m0, seeds.init)?;
        let opt = OptimState::new(
            &pair.theta,
            config.base_lr,
            config.sgd_momentum,
            config.weight_decay,
        );
        let steps_per_epoch = (train.len() / config.batch_size) as u64;
        Ok(Self {
            config: config.clone(),
            queue: FeatureQueue::new(config.queue_capacity, config.embedding_dim)?,
            pair,
            opt,
            clusters: None,
            num_clusters,
            iteration: 0,
            total_steps: steps_per_epoch * config.epochs as u64,
            seeds,
        })
    }

    /// True once the clustering terms are live.
    pub fn clusters_active(&self) -> bool {
        self.clusters.is_some() && self.iteration >= self.config.frozen_until
    }
}

struct ChunkOut {
    grads: QueryNet,
    components: [f64; 3],
    keys: Vec<Vec<f64>>,
    assigned: Vec<usize>,
}

/// One optimization step on the samples `batch` of `data`.
pub fn train_step(
    state: &mut TrainState,
    data: &Dataset,
    batch: &[usize],
) -> Result<MetricsRecord> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let started = Instant::now();
    let cfg = &state.config;
    let it = state.iteration;

    // Clusters come alive at the end of the freeze window, once the queue
    // can seed L centroids.
    if state.clusters.is_none() && it >= cfg.frozen_until && state.queue.len() >= state.num_clusters
    {
        let pool = state.queue.sample_pool()?;
        let init = kmeans_with(
            &pool,
            state.num_clusters,
            derive_seed(state.seeds.cluster, &[it]),
            cfg.kmeans_max_iters,
            cfg.cluster_params(),
        )?;
        debug!("clusters initialized at step {it}");
        state.clusters = Some(init);
    }

    let negatives = state.queue.negatives_snapshot();
    let weights = cfg.weights();
    let temps = cfg.temperatures();
    let opts = cfg.loss_options();
    let inv_b = 1.0 / batch.len() as f64;
    let pair = &state.pair;
    let live = it >= cfg.frozen_until;
    let clusters = state.clusters.as_ref().filter(|_| live);
    let policy = cfg.augment;
    let aug_seed = state.seeds.augment;

    let chunks: Vec<Result<ChunkOut>> = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, idx)| {
            let mut out = ChunkOut {
                grads: pair.theta.zeros_like(),
                components: [0.0; 3],
                keys: Vec::with_capacity(idx.len()),
                assigned: Vec::with_capacity(idx.len()),
            };
            for (j, &sample) in idx.iter().enumerate() {
                let pos = (ci * CHUNK + j) as u64;
                let mut rng = stream(aug_seed, &[it, pos]);
                let (v, v2) = make_views(data.samples.row(sample), &policy, &mut rng);
                let (z, tape) = pair.forward_query(&v)?;
                let key = pair.forward_key(&v2)?;
                let view = match clusters {
                    Some(c) => {
                        let assigned = c.assign(&z)?;
                        out.assigned.push(assigned);
                        Some(ClusterView {
                            assigned,
                            centroids: c.centroids(),
                            sigma_sq: c.variances()[assigned],
                        })
                    }
                    None => None,
                };
                let loss = total_loss(&z, &key, &negatives, view, &weights, &temps, &opts)?;
                for (acc, c) in out.components.iter_mut().zip(loss.components) {
                    *acc += c;
                }
                let g: Vec<f64> = loss.grad_z.iter().map(|g| g * inv_b).collect();
                pair.backward_into(&tape, &g, &mut out.grads)?;
                out.keys.push(key);
            }
            Ok(out)
        })
        .collect();

    let mut grads = state.pair.theta.zeros_like();
    let mut components = [0.0; 3];
    let mut keys = Vec::with_capacity(batch.len());
    let mut assigned = Vec::with_capacity(batch.len());
    for chunk in chunks {
        let chunk = chunk.map_err(|e| match e {
            // Diverged parameters surface as a NaN norm in the forward pass.
            Error::ZeroNorm(n) if !n.is_finite() => Error::NonFiniteLoss {
                step: it,
                total: f64::NAN,
                l1: f64::NAN,
                l2: f64::NAN,
                l3: f64::NAN,
            },
            e => e,
        })?;
        grads.accumulate(&chunk.grads);
        for (acc, c) in components.iter_mut().zip(chunk.components) {
            *acc += c;
        }
        keys.extend(chunk.keys);
        assigned.extend(chunk.assigned);
    }
    for c in components.iter_mut() {
        *c *= inv_b;
    }
    let loss_total = weights.combine(components);
    if !loss_total.is_finite() || components.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step: it,
            total: loss_total,
            l1: components[0],
            l2: components[1],
            l3: components[2],
        });
    }

    let lr = cosine_lr(it, state.total_steps.max(it), cfg.base_lr)?;
    let m = cosine_momentum(it, state.total_steps.max(it), cfg.m0)?;
    state.opt.lr = lr;
    sgd_step(&mut state.pair.theta, &grads, &mut state.opt)?;
    state.pair.m = m;
    state.pair.ema_update();

    state.queue.enqueue_batch(&keys)?;

    let mut cluster_entropy = 0.0;
    if let Some(c) = state.clusters.as_mut().filter(|_| live) {
        let key_matrix = Matrix::from_rows(cfg.embedding_dim, keys.iter())?;
        let asg = c.assign_batch(&key_matrix)?;
        c.momentum_update(&asg)?;
        let pool = state.queue.sample_pool()?;
        if c.maybe_reset(&pool, it, state.seeds.cluster)? {
            debug!("clusters reset at step {it}");
        }
        cluster_entropy = occupancy_entropy(&assigned, state.num_clusters);
    }

    state.iteration += 1;
    Ok(MetricsRecord {
        step: it,
        loss_total,
        loss1: components[0],
        loss2: components[1],
        loss3: components[2],
        lr,
        m,
        cluster_entropy,
        wallclock_ms: if state.config.log_wallclock {
            started.elapsed().as_millis() as u64
        } else {
            0
        },
    })
}

/// Shannon entropy (nats) of the cluster occupancy histogram.
pub fn occupancy_entropy(assigned: &[usize], l: usize) -> f64 {
    if assigned.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; l];
    for &a in assigned {
        counts[a] += 1;
    }
    let n = assigned.len() as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Runs the epochs of `state.config` from the state's current iteration.
pub fn run_epochs(state: &mut TrainState, train: &Dataset) -> Result<Vec<MetricsRecord>> {
    let cfg = state.config.clone();
    let per_epoch = (train.len() / cfg.batch_size) as u64;
    let mut records = Vec::with_capacity(state.total_steps as usize);
    if per_epoch == 0 {
        return Ok(records);
    }
    let start_epoch = state.iteration / per_epoch;
    let skip = (state.iteration % per_epoch) as usize;
    for epoch in start_epoch..cfg.epochs as u64 {
        let order = batches(train.len(), cfg.batch_size, state.seeds.data, epoch)?;
        let from = if epoch == start_epoch { skip } else { 0 };
        for batch in &order[from..] {
            records.push(train_step(state, train, batch)?);
        }
        if let Some(last) = records.last() {
            info!(
                "epoch {epoch}: loss {:.4} (l1 {:.4}, l2 {:.4}, l3 {:.4})",
                last.loss_total, last.loss1, last.loss2, last.loss3
            );
        }
    }
    Ok(records)
}

/// Full pretraining on `train`.
pub fn pretrain(
    config: &ExperimentConfig,
    train: &Dataset,
) -> Result<(TrainState, Vec<MetricsRecord>)> {
    let mut state = TrainState::new(config, train)?;
    let records = run_epochs(&mut state, train)?;
    Ok((state, records))
}

/// Frozen features of every sample: raw for the linear probe and
/// ℓ2-normalized for kNN (all-zero rows stay zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub raw: Matrix,
    pub normalized: Matrix,
}

pub fn extract_features(pair: &EncoderPair, data: &Dataset, stage: Stage) -> Result<Features> {
    if data.dim() != pair.input_dim() {
        return Err(Error::DimMismatch {
            expected: pair.input_dim(),
            got: data.dim(),
        });
    }
    let rows: Vec<Vec<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| pair.features(data.samples.row(i), stage))
        .collect::<Result<_>>()?;
    let width = rows.first().map_or(0, Vec::len);
    let raw = Matrix::from_rows(width, rows.iter())?;
    let mut normalized = raw.clone();
    for i in 0..normalized.rows() {
        let row = normalized.row_mut(i);
        let n = norm(row);
        if n > MIN_NORM {
            let mut unit = vec![0.0; row.len()];
            axpy(1.0 / n, row, &mut unit);
            row.copy_from_slice(&unit);
        } else {
            row.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(Features { raw, normalized })
}
