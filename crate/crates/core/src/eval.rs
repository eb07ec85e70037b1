//! Frozen-feature evaluation: linear probe, kNN, and the clustering metrics
//! NMI, AMI, ARI and Hungarian-matched accuracy.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::batches;
use crate::error::{Error, Result};
use crate::numerics::{dot_unchecked, Matrix};

/// Cross-tabulation of two labelings after compacting each to `0..r` / `0..c`
/// in ascending label order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub row_sums: Vec<u64>,
    pub col_sums: Vec<u64>,
    pub n: u64,
}

impl ContingencyTable {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::LengthMismatch(a.len(), b.len()));
        }
        let ra = compact(a);
        let rb = compact(b);
        let r = ra.iter().max().map_or(0, |m| m + 1);
        let c = rb.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; c]; r];
        for (&i, &j) in ra.iter().zip(&rb) {
            counts[i][j] += 1;
        }
        let row_sums = counts.iter().map(|row| row.iter().sum()).collect();
        let col_sums = (0..c)
            .map(|j| counts.iter().map(|row| row[j]).sum())
            .collect();
        Ok(Self {
            counts,
            row_sums,
            col_sums,
            n: a.len() as u64,
        })
    }

    pub fn rows(&self) -> usize {
        self.counts.len()
    }

    pub fn cols(&self) -> usize {
        self.col_sums.len()
    }

    /// True when both labelings describe the same partition.
    pub fn is_bijective(&self) -> bool {
        self.rows() == self.cols()
            && self
                .counts
                .iter()
                .all(|row| row.iter().filter(|&&v| v > 0).count() == 1)
    }

    fn mutual_information(&self) -> f64 {
        let n = self.n as f64;
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &nij) in row.iter().enumerate() {
                if nij > 0 {
                    let nij = nij as f64;
                    let outer = self.row_sums[i] as f64 * self.col_sums[j] as f64;
                    mi += nij / n * (n * nij / outer).ln();
                }
            }
        }
        mi.max(0.0)
    }
}

fn compact(labels: &[usize]) -> Vec<usize> {
    let mut ids = BTreeMap::new();
    for &l in labels {
        ids.entry(l).or_insert(0usize);
    }
    for (k, v) in ids.values_mut().enumerate() {
        *v = k;
    }
    labels.iter().map(|l| ids[l]).collect()
}

fn entropy(marginal: &[u64], n: u64) -> f64 {
    let n = n as f64;
    -marginal
        .iter()
        .filter(|&&m| m > 0)
        .map(|&m| {
            let p = m as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Mutual information normalized by the geometric mean of the two entropies.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(a, b)?;
    if t.n == 0 {
        return Ok(1.0);
    }
    let ha = entropy(&t.row_sums, t.n);
    let hb = entropy(&t.col_sums, t.n);
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    if t.is_bijective() {
        return Ok(1.0);
    }
    Ok((t.mutual_information() / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Mutual information adjusted for chance under the hypergeometric model,
/// normalized by the arithmetic mean of the entropies.
pub fn ami(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(a, b)?;
    if t.n == 0 || t.is_bijective() {
        return Ok(1.0);
    }
    let ha = entropy(&t.row_sums, t.n);
    let hb = entropy(&t.col_sums, t.n);
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi = t.mutual_information();
    let emi = expected_mutual_information(&t);
    let denom = 0.5 * (ha + hb) - emi;
    if denom.abs() < 1e-15 {
        return Ok(0.0);
    }
    Ok((mi - emi) / denom)
}

/// Expected MI of two random labelings with the table's marginals.
pub fn expected_mutual_information(t: &ContingencyTable) -> f64 {
    let n = t.n as usize;
    let nf = n as f64;
    let mut lf = vec![0.0f64; n + 1];
    for k in 1..=n {
        lf[k] = lf[k - 1] + (k as f64).ln();
    }
    let mut emi = 0.0;
    for &ai in &t.row_sums {
        let ai = ai as usize;
        for &bj in &t.col_sums {
            let bj = bj as usize;
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            let fixed = lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj] - lf[n];
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (ai as f64 * bj as f64)).ln();
                let log_p = fixed - lf[nij] - lf[ai - nij] - lf[bj - nij] - lf[n + nij - ai - bj];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

fn choose2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index over the pair-counting contingency formula.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    let t = ContingencyTable::new(a, b)?;
    let index: f64 = t.counts.iter().flatten().map(|&v| choose2(v)).sum();
    let sa: f64 = t.row_sums.iter().map(|&v| choose2(v)).sum();
    let sb: f64 = t.col_sums.iter().map(|&v| choose2(v)).sum();
    let total = choose2(t.n);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Minimum-cost perfect assignment on a square matrix (shortest augmenting
/// paths with potentials). Returns `assign[row] = col`.
pub fn hungarian_min(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Best one-to-one cluster-to-class matching accuracy.
pub fn acc_hungarian(pred: &[usize], truth: &[usize], class_count: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if let Some(&bad) = truth.iter().find(|&&l| l >= class_count) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: class_count,
        });
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    let size = class_count.max(pred.iter().max().map_or(0, |m| m + 1));
    let mut counts = vec![vec![0i64; size]; size];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1;
    }
    let cost: Vec<Vec<i64>> = counts
        .iter()
        .map(|row| row.iter().map(|&c| -c).collect())
        .collect();
    let assign = hungarian_min(&cost);
    let matched: i64 = assign.iter().enumerate().map(|(i, &j)| counts[i][j]).sum();
    Ok(matched as f64 / pred.len() as f64)
}

/// Cosine kNN on unit-norm rows. With `weighted`, votes carry the neighbor's
/// similarity clamped at zero; if every weight is zero the plain count
/// decides. Ties go to the lowest class index.
pub fn knn_classify(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    k: usize,
    weighted: bool,
) -> Result<Vec<usize>> {
    if train.rows() != train_labels.len() {
        return Err(Error::LengthMismatch(train.rows(), train_labels.len()));
    }
    if k == 0 {
        return Err(Error::invalid("k", "must be >= 1"));
    }
    if k > train.rows() {
        return Err(Error::KTooLarge { k, n: train.rows() });
    }
    if test.rows() > 0 && test.cols() != train.cols() {
        return Err(Error::DimMismatch {
            expected: train.cols(),
            got: test.cols(),
        });
    }
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let out = (0..test.rows())
        .into_par_iter()
        .map(|t| {
            let q = test.row(t);
            let mut sims: Vec<(f64, usize)> = train
                .iter_rows()
                .enumerate()
                .map(|(i, r)| (dot_unchecked(q, r), i))
                .collect();
            sims.select_nth_unstable_by(k - 1, |x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            let neigh = &sims[..k];
            let mut votes = vec![0.0f64; classes];
            if weighted {
                for &(s, i) in neigh {
                    votes[train_labels[i]] += s.max(0.0);
                }
            }
            if !weighted || votes.iter().all(|&v| v == 0.0) {
                votes.iter_mut().for_each(|v| *v = 0.0);
                for &(_, i) in neigh {
                    votes[train_labels[i]] += 1.0;
                }
            }
            argmax_low(&votes)
        })
        .collect();
    Ok(out)
}

fn argmax_low(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 3.0,
            momentum: 0.9,
            weight_decay: 1e-6,
            batch_size: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub top5: f64,
}

/// Multinomial logistic regression on frozen features, trained with
/// minibatch SGD (momentum, weight decay, cosine learning rate).
///
/// Both feature sets are divided by one scalar, the root-mean-square row norm
/// of the training set, so the learning rate means the same thing for any
/// feature scale while orthogonal rotations stay harmless.
pub fn linear_probe(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
    class_count: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.rows() != train_labels.len() {
        return Err(Error::LengthMismatch(train.rows(), train_labels.len()));
    }
    if test.rows() != test_labels.len() {
        return Err(Error::LengthMismatch(test.rows(), test_labels.len()));
    }
    if train.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if test.rows() > 0 && test.cols() != train.cols() {
        return Err(Error::DimMismatch {
            expected: train.cols(),
            got: test.cols(),
        });
    }
    for &l in train_labels.iter().chain(test_labels) {
        if l >= class_count {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: class_count,
            });
        }
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("probe.batch_size", "must be >= 1"));
    }
    let d = train.cols();
    let c = class_count;
    let ms: f64 = train.as_slice().iter().map(|v| v * v).sum::<f64>() / train.rows() as f64;
    let scale = if ms > 0.0 { 1.0 / ms.sqrt() } else { 1.0 };

    // Weights laid out as c rows of (d + 1), the last entry being the bias.
    let width = d + 1;
    let mut w = vec![0.0f64; c * width];
    let mut vel = vec![0.0f64; c * width];
    let mut grad = vec![0.0f64; c * width];
    let bs = cfg.batch_size.min(train.rows());
    let per_epoch = train.rows() / bs;
    let total = (cfg.epochs * per_epoch) as f64;
    let mut step = 0usize;
    let mut logits = vec![0.0f64; c];
    let mut x = vec![0.0f64; width];
    for epoch in 0..cfg.epochs {
        for batch in batches(train.rows(), bs, cfg.seed, epoch as u64)? {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in &batch {
                for (xi, &v) in x.iter_mut().zip(train.row(i)) {
                    *xi = v * scale;
                }
                x[d] = 1.0;
                softmax_logits(&w, &x, &mut logits);
                logits[train_labels[i]] -= 1.0;
                for (k, &gk) in logits.iter().enumerate() {
                    for (g, &xi) in grad[k * width..(k + 1) * width].iter_mut().zip(&x) {
                        *g += gk * xi;
                    }
                }
            }
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            let inv = 1.0 / batch.len() as f64;
            for ((wi, vi), &gi) in w.iter_mut().zip(vel.iter_mut()).zip(&grad) {
                *vi = cfg.momentum * *vi + gi * inv + cfg.weight_decay * *wi;
                *wi -= lr * *vi;
            }
            step += 1;
        }
    }

    if test.rows() == 0 {
        return Ok(ProbeResult {
            top1: 0.0,
            top5: 0.0,
        });
    }
    let topk = 5.min(c);
    let mut hit1 = 0usize;
    let mut hit5 = 0usize;
    for (row, &label) in test.iter_rows().zip(test_labels) {
        for (xi, &v) in x.iter_mut().zip(row) {
            *xi = v * scale;
        }
        x[d] = 1.0;
        for (k, l) in logits.iter_mut().enumerate() {
            *l = dot_unchecked(&w[k * width..(k + 1) * width], &x);
        }
        // Rank of the true class: classes strictly ahead of it, with ties
        // broken toward the lower index.
        let s = logits[label];
        let rank = logits
            .iter()
            .enumerate()
            .filter(|&(k, &v)| v > s || (v == s && k < label))
            .count();
        hit1 += usize::from(rank == 0);
        hit5 += usize::from(rank < topk);
    }
    let n = test.rows() as f64;
    Ok(ProbeResult {
        top1: hit1 as f64 / n,
        top5: hit5 as f64 / n,
    })
}

fn softmax_logits(w: &[f64], x: &[f64], out: &mut [f64]) {
    let width = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        *o = dot_unchecked(&w[k * width..(k + 1) * width], x);
    }
    let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}
