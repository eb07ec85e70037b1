//! Experiment configuration: every hyperparameter, schedule and seed of a
//! run, read from JSON with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterParams, DEFAULT_KMEANS_MAX_ITERS};
use crate::data::{synth_gmm, AugmentPolicy, Dataset};
use crate::encoder::{ArchConfig, Stage};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::losses::{LossOptions, LossWeights, Temperatures, DEFAULT_VARIANCE_EPS};
use crate::queue::DEFAULT_QUEUE_CAPACITY;

/// Where training (and optional held-out) samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Gaussian mixture; the first `n` samples train, the next `test_n` test.
    Synthetic {
        n: usize,
        classes: usize,
        dim: usize,
        spread: f64,
        #[serde(default)]
        test_n: usize,
        /// Generation seed; the run seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
    Binary {
        path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            n: 4096,
            classes: 8,
            dim: 32,
            spread: 1.35,
            test_n: 1024,
            seed: None,
        }
    }
}

impl DatasetSource {
    /// Loads `(train, test)`.
    pub fn load(&self, run_seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        match self {
            DatasetSource::Synthetic {
                n,
                classes,
                dim,
                spread,
                test_n,
                seed,
            } => {
                let all = synth_gmm(
                    n + test_n,
                    *classes,
                    *dim,
                    *spread,
                    seed.unwrap_or(run_seed),
                )?;
                if *test_n == 0 {
                    return Ok((all, None));
                }
                let (train, test) = all.split_at(*n)?;
                Ok((train, Some(test)))
            }
            DatasetSource::Csv { path, test_path } | DatasetSource::Binary { path, test_path } => {
                let train = load_file(path)?;
                let test = test_path.as_deref().map(load_file).transpose()?;
                Ok((train, test))
            }
        }
    }
}

fn load_file(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    Dataset::load(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub input_dim: usize,
    pub embedding_dim: usize,
    pub backbone_widths: Vec<usize>,
    pub projection_hidden: Vec<usize>,
    pub prediction_hidden: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub tau_contrastive: f64,
    pub tau_centroid: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub queue_capacity: usize,
    /// Number of clusters L; the dataset's class count when absent.
    pub num_clusters: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub m0: f64,
    pub frozen_until: u64,
    pub reset_every: u64,
    pub seed: u64,
    pub centroid_negatives_include_assigned: bool,
    pub knn_weighted: bool,
    pub augment: AugmentPolicy,
    pub variance_eps: f64,
    pub kmeans_max_iters: usize,
    /// Record elapsed milliseconds in the metrics; off keeps the CSV
    /// byte-reproducible.
    pub log_wallclock: bool,
    /// Encoder stage read by evaluation.
    pub eval_stage: Stage,
    /// k-means restarts of the clustering protocol (best WCSS kept).
    pub eval_kmeans_restarts: usize,
    pub probe: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            input_dim: 32,
            embedding_dim: 32,
            backbone_widths: vec![128, 128],
            projection_hidden: vec![128],
            prediction_hidden: vec![128],
            batch_size: 256,
            epochs: 30,
            base_lr: 0.3,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            tau_contrastive: 0.2,
            tau_centroid: 0.2,
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.01,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            num_clusters: None,
            beta1: 0.99,
            beta2: 0.99,
            m0: 0.996,
            frozen_until: 313,
            reset_every: 1000,
            seed: 0,
            centroid_negatives_include_assigned: false,
            knn_weighted: true,
            augment: AugmentPolicy::default(),
            variance_eps: DEFAULT_VARIANCE_EPS,
            kmeans_max_iters: DEFAULT_KMEANS_MAX_ITERS,
            log_wallclock: false,
            eval_stage: Stage::Backbone,
            eval_kmeans_restarts: 10,
            probe: ProbeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig {
            key: json_error_key(&e.to_string()),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            input_dim: self.input_dim,
            backbone_widths: self.backbone_widths.clone(),
            projection_hidden: self.projection_hidden.clone(),
            prediction_hidden: self.prediction_hidden.clone(),
            embedding_dim: self.embedding_dim,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn temperatures(&self) -> Temperatures {
        Temperatures {
            contrastive: self.tau_contrastive,
            centroid: self.tau_centroid,
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            variance_eps: self.variance_eps,
            centroid_negatives_include_assigned: self.centroid_negatives_include_assigned,
        }
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            beta1: self.beta1,
            beta2: self.beta2,
            frozen_until: self.frozen_until,
            reset_every: self.reset_every,
        }
    }

    /// Checks every field, naming the first offending key.
    pub fn validate(&self) -> Result<()> {
        self.arch().validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size", "must be >= 2"));
        }
        positive("base_lr", self.base_lr)?;
        unit_interval("sgd_momentum", self.sgd_momentum, false)?;
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        positive("tau_contrastive", self.tau_contrastive)?;
        positive("tau_centroid", self.tau_centroid)?;
        for (key, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(key, "must be >= 0"));
            }
        }
        if self.queue_capacity == 0 {
            return Err(Error::invalid("queue_capacity", "must be >= 1"));
        }
        if self.num_clusters == Some(0) {
            return Err(Error::invalid("num_clusters", "must be >= 1"));
        }
        unit_interval("beta1", self.beta1, true)?;
        unit_interval("beta2", self.beta2, true)?;
        unit_interval("m0", self.m0, true)?;
        positive("variance_eps", self.variance_eps)?;
        if self.kmeans_max_iters == 0 {
            return Err(Error::invalid("kmeans_max_iters", "must be >= 1"));
        }
        if self.eval_kmeans_restarts == 0 {
            return Err(Error::invalid("eval_kmeans_restarts", "must be >= 1"));
        }
        self.augment.validate()?;
        positive("probe.lr", self.probe.lr)?;
        if self.probe.batch_size == 0 {
            return Err(Error::invalid("probe.batch_size", "must be >= 1"));
        }
        match &self.dataset {
            DatasetSource::Synthetic {
                n,
                classes,
                dim,
                spread,
                ..
            } => {
                if *classes == 0 || n < classes {
                    return Err(Error::invalid("dataset.n", "need n >= classes >= 1"));
                }
                if *dim != self.input_dim {
                    return Err(Error::invalid("dataset.dim", "must equal input_dim"));
                }
                positive("dataset.spread", *spread)?;
            }
            DatasetSource::Csv { .. } | DatasetSource::Binary { .. } => {}
        }
        Ok(())
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(key, format!("must be > 0, got {v}")))
    }
}

fn unit_interval(key: &str, v: f64, closed: bool) -> Result<()> {
    let ok = if closed {
        (0.0..=1.0).contains(&v)
    } else {
        (0.0..1.0).contains(&v)
    };
    if ok {
        Ok(())
    } else {
        let range = if closed { "[0, 1]" } else { "[0, 1)" };
        Err(Error::invalid(key, format!("must lie in {range}, got {v}")))
    }
}

/// Pulls the field name out of a serde_json message such as
/// "unknown field `foo`, expected ...".
fn json_error_key(msg: &str) -> String {
    msg.split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| "config".to_owned())
}
