//! Synthetic Gaussian-mixture data, stochastic view pairs, epoch batching and
//! dataset import/export (CSV and a compact binary format).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Matrix};
use crate::rng;

/// Magic prefix of the binary dataset format.
pub const BINARY_MAGIC: &[u8; 5] = b"CUED1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Matrix,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(samples: Matrix, labels: Option<Vec<usize>>, class_count: usize) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::Format("dataset has no samples".into()));
        }
        if let Some(l) = &labels {
            if l.len() != samples.rows() {
                return Err(Error::LengthMismatch(l.len(), samples.rows()));
            }
            if let Some(&bad) = l.iter().find(|&&v| v >= class_count) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: class_count,
                });
            }
        }
        Ok(Self {
            samples,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Splits into the first `n_first` rows and the rest.
    pub fn split_at(&self, n_first: usize) -> Result<(Dataset, Dataset)> {
        if n_first == 0 || n_first >= self.len() {
            return Err(Error::invalid("split", "both halves must be non-empty"));
        }
        let a: Vec<usize> = (0..n_first).collect();
        let b: Vec<usize> = (n_first..self.len()).collect();
        Ok((self.subset(&a), self.subset(&b)))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            class_count: self.class_count,
        }
    }

    /// Loads either format, chosen by the file's leading bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let mut head = [0u8; 5];
        let n = File::open(path)?.read(&mut head)?;
        if n == 5 && &head == BINARY_MAGIC {
            read_binary(path)
        } else {
            read_csv(path)
        }
    }
}

/// Gaussian mixture: class means uniform on the unit sphere, isotropic noise
/// with per-coordinate standard deviation `spread / √dim` (expected noise
/// norm ≈ `spread`). Labels cycle `0, 1, …, classes−1`, so classes are
/// balanced to within one sample.
pub fn synth_gmm(n: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::invalid("n", "need n >= classes >= 1"));
    }
    if dim == 0 {
        return Err(Error::invalid("dim", "must be >= 1"));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::invalid("spread", "must be > 0"));
    }
    let mut mean_rng = rng::stream(seed, &[0]);
    let mut means = Vec::with_capacity(classes);
    while means.len() < classes {
        let v: Vec<f64> = (0..dim)
            .map(|_| StandardNormal.sample(&mut mean_rng))
            .collect();
        if let Ok(u) = l2_normalize(&v) {
            means.push(u);
        }
    }
    let sd = spread / (dim as f64).sqrt();
    let mut noise_rng = rng::stream(seed, &[1]);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for &m in &means[c] {
            let e: f64 = StandardNormal.sample(&mut noise_rng);
            data.push(m + sd * e);
        }
        labels.push(c);
    }
    Dataset::new(Matrix::from_vec(n, dim, data)?, Some(labels), classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub noise_sigma: f64,
    pub dropout_prob: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            dropout_prob: 0.1,
            scale_lo: 0.9,
            scale_hi: 1.1,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            dropout_prob: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("augment.noise_sigma", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::invalid("augment.dropout_prob", "must lie in [0, 1)"));
        }
        if !(self.scale_lo > 0.0) || !(self.scale_lo <= self.scale_hi) || !self.scale_hi.is_finite()
        {
            return Err(Error::invalid(
                "augment.scale_lo",
                "need 0 < scale_lo <= scale_hi",
            ));
        }
        Ok(())
    }

    /// One stochastic transform: additive noise, coordinate dropout, then a
    /// global scale.
    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut v: Vec<f64> = x
            .iter()
            .map(|&xi| {
                let e: f64 = StandardNormal.sample(rng);
                xi + self.noise_sigma * e
            })
            .collect();
        for vi in v.iter_mut() {
            if rng.random::<f64>() < self.dropout_prob {
                *vi = 0.0;
            }
        }
        let scale = if self.scale_hi > self.scale_lo {
            rng.random_range(self.scale_lo..self.scale_hi)
        } else {
            self.scale_lo
        };
        for vi in v.iter_mut() {
            *vi *= scale;
        }
        v
    }
}

/// Two independent draws of the augmentation applied to `x`.
pub fn make_views<R: Rng + ?Sized>(
    x: &[f64],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> (Vec<f64>, Vec<f64>) {
    let v = policy.apply(x, rng);
    let v2 = policy.apply(x, rng);
    (v, v2)
}

/// Index batches for one epoch: a shuffle keyed by `(seed, epoch)`, cut into
/// `batch_size` chunks with the trailing partial batch dropped.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[epoch]));
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..ds.dim()).map(|i| format!("f{i}")).collect();
    if ds.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in ds.samples.iter_rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = &ds.labels {
            rec.push(l[i].to_string());
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    let has_labels = header.iter().last() == Some("label");
    let dim = header.len() - usize::from(has_labels);
    for (i, name) in header.iter().take(dim).enumerate() {
        if name != format!("f{i}") {
            return Err(Error::Format(format!("unexpected column `{name}` at {i}")));
        }
    }
    if dim == 0 {
        return Err(Error::Format("no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(Error::Format(format!("row {line}: wrong field count")));
        }
        for f in rec.iter().take(dim) {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("row {line}: bad number `{f}`")))?;
            if !v.is_finite() {
                return Err(Error::Format(format!("row {line}: non-finite value")));
            }
            data.push(v);
        }
        if has_labels {
            let f = &rec[dim];
            labels.push(
                f.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("row {line}: bad label `{f}`")))?,
            );
        }
    }
    let n = data.len() / dim;
    let samples = Matrix::from_vec(n, dim, data)?;
    if has_labels {
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(samples, Some(labels), classes)
    } else {
        Dataset::new(samples, None, 0)
    }
}

pub fn write_binary(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&(ds.len() as u32).to_le_bytes())?;
    w.write_all(&(ds.dim() as u32).to_le_bytes())?;
    w.write_all(&[u8::from(ds.labels.is_some())])?;
    for &v in ds.samples.as_slice() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    if let Some(l) = &ds.labels {
        for &v in l {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let truncated = || Error::Format("binary dataset is truncated".into());
    if bytes.len() < 14 || &bytes[..5] != BINARY_MAGIC {
        return Err(Error::Format("missing CUED1 header".into()));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let n = u32_at(5);
    let dim = u32_at(9);
    let has_labels = match bytes[13] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad has_labels byte {b}"))),
    };
    let feat_end = 14 + n * dim * 4;
    let end = feat_end + if has_labels { n * 4 } else { 0 };
    if bytes.len() < end {
        return Err(truncated());
    }
    if bytes.len() > end {
        return Err(Error::Format("trailing bytes after dataset".into()));
    }
    let data: Vec<f64> = bytes[14..feat_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite feature value".into()));
    }
    let samples = Matrix::from_vec(n, dim, data)?;
    if has_labels {
        let labels: Vec<usize> = bytes[feat_end..end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(samples, Some(labels), classes)
    } else {
        Dataset::new(samples, None, 0)
    }
}
