//! Evaluation of a trained encoder with every protocol at once, and the
//! sweep over which loss terms are active.

use std::io::Write;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::clustering::lloyd_restarts;
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::encoder::{EncoderPair, Stage};
use crate::error::{Error, Result};
use crate::eval::{acc_hungarian, ami, ari, knn_classify, linear_probe, nmi, ProbeConfig};
use crate::trainer::{extract_features, pretrain};

/// All evaluation numbers of one encoder, as fractions in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    pub knn20: f64,
    pub knn100: f64,
    pub nmi: f64,
    pub ami: f64,
    pub ari: f64,
    pub acc: f64,
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 8] = [
        "top1", "top5", "20-NN", "100-NN", "NMI", "AMI", "ARI", "ACC",
    ];

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.top1,
            self.top5,
            self.knn20,
            self.knn100,
            self.nmi,
            self.ami,
            self.ari,
            self.acc,
        ]
    }

    fn from_array(a: [f64; 8]) -> Self {
        Self {
            top1: a[0],
            top5: a[1],
            knn20: a[2],
            knn100: a[3],
            nmi: a[4],
            ami: a[5],
            ari: a[6],
            acc: a[7],
        }
    }
}

pub struct EvalSettings {
    pub stage: Stage,
    pub probe: ProbeConfig,
    pub knn_weighted: bool,
    pub kmeans_seed: u64,
    pub kmeans_max_iters: usize,
    pub kmeans_restarts: usize,
}

fn knn_accuracy(
    train: &crate::Matrix,
    train_labels: &[usize],
    test: &crate::Matrix,
    test_labels: &[usize],
    k: usize,
    weighted: bool,
) -> Result<f64> {
    let pred = knn_classify(train, train_labels, test, k.min(train.rows()), weighted)?;
    let hits = pred.iter().zip(test_labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / test_labels.len().max(1) as f64)
}

/// Classification protocols train on `train` and score `test`; clustering
/// runs k-means (L = class count) on the normalized `test` features.
pub fn evaluate(
    pair: &EncoderPair,
    train: &Dataset,
    test: &Dataset,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let (Some(trl), Some(tel)) = (train.labels.as_deref(), test.labels.as_deref()) else {
        return Err(Error::invalid("dataset", "evaluation needs labels"));
    };
    let classes = train.class_count.max(test.class_count);
    let ftr = extract_features(pair, train, settings.stage)?;
    let fte = extract_features(pair, test, settings.stage)?;
    let probe = linear_probe(&ftr.raw, trl, &fte.raw, tel, classes, &settings.probe)?;
    let knn20 = knn_accuracy(
        &ftr.normalized,
        trl,
        &fte.normalized,
        tel,
        20,
        settings.knn_weighted,
    )?;
    let knn100 = knn_accuracy(
        &ftr.normalized,
        trl,
        &fte.normalized,
        tel,
        100,
        settings.knn_weighted,
    )?;
    let fit = lloyd_restarts(
        &fte.normalized,
        classes,
        settings.kmeans_seed,
        settings.kmeans_max_iters,
        settings.kmeans_restarts,
    )?;
    Ok(EvalReport {
        top1: probe.top1,
        top5: probe.top5,
        knn20,
        knn100,
        nmi: nmi(&fit.labels, tel)?,
        ami: ami(&fit.labels, tel)?,
        ari: ari(&fit.labels, tel)?,
        acc: acc_hungarian(&fit.labels, tel, classes)?,
    })
}

/// The four rows of the sweep: contrastive alone, plus each clustering
/// term, plus both.
pub const MASKS: [(&str, [bool; 3]); 4] = [
    ("l1", [true, false, false]),
    ("l1+l2", [true, true, false]),
    ("l1+l3", [true, false, true]),
    ("l1+l2+l3", [true, true, true]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub mask: [bool; 3],
    /// Median over seeds.
    pub median: EvalReport,
    pub per_seed: Vec<EvalReport>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and evaluates every mask for every seed. The base weights supply
/// the magnitude of each active term.
pub fn run_ablation(base: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "need at least one seed"));
    }
    let mut rows = Vec::with_capacity(MASKS.len());
    for (name, mask) in MASKS {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.probe.seed = seed;
            let w = base.weights().as_array();
            cfg.lambda1 = if mask[0] { w[0] } else { 0.0 };
            cfg.lambda2 = if mask[1] { w[1] } else { 0.0 };
            cfg.lambda3 = if mask[2] { w[2] } else { 0.0 };
            let (train, test) = cfg.dataset.load(seed)?;
            let test = test.unwrap_or_else(|| train.clone());
            let (state, _) = pretrain(&cfg, &train)?;
            let settings = EvalSettings {
                stage: cfg.eval_stage,
                probe: cfg.probe,
                knn_weighted: cfg.knn_weighted,
                kmeans_seed: seed,
                kmeans_max_iters: cfg.kmeans_max_iters,
                kmeans_restarts: cfg.eval_kmeans_restarts,
            };
            let report = evaluate(&state.pair, &train, &test, &settings)?;
            info!("{name} seed {seed}: {report:?}");
            per_seed.push(report);
        }
        let mut med = [0.0; 8];
        for (c, slot) in med.iter_mut().enumerate() {
            *slot = median(per_seed.iter().map(|r| r.as_array()[c]).collect());
        }
        rows.push(AblationRow {
            name: name.to_string(),
            mask,
            median: EvalReport::from_array(med),
            per_seed,
        });
    }
    Ok(rows)
}

/// CSV with one row per mask; metric columns in percent.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "config,lambda1,lambda2,lambda3")?;
    for c in EvalReport::COLUMNS {
        write!(w, ",{c}")?;
    }
    writeln!(w)?;
    for r in rows {
        write!(
            w,
            "{},{},{},{}",
            r.name, r.mask[0] as u8, r.mask[1] as u8, r.mask[2] as u8
        )?;
        for v in r.median.as_array() {
            write!(w, ",{:.2}", 100.0 * v)?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}
