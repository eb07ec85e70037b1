//! Binary checkpoints of a [`TrainState`].
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "CUECO1" | u32 version | u32 len | config JSON (len bytes)
//! section*: u8 name_len | name | u32 tensor_count | tensor*
//! tensor:   u8 dtype (0 = f32, 1 = f64, 2 = u64) | u8 rank | u64 dims[rank] | payload
//! ```
//!
//! Sections appear in the order theta, xi, optimizer, queue, clusters, rng,
//! iteration. Floating-point tensors are written as f64 by default, which
//! makes a resumed run bit-identical to an uninterrupted one; f32 halves the
//! size at the cost of exact resumption.

use std::path::Path;

use crate::clustering::{ClusterParams, ClusterState};
use crate::config::ExperimentConfig;
use crate::encoder::{EncoderPair, OptimState, ParamBlocks};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::queue::FeatureQueue;
use crate::trainer::{RunSeeds, TrainState};

pub const MAGIC: &[u8; 6] = b"CUECO1";
pub const VERSION: u32 = 1;

const SECTIONS: [&str; 7] = [
    "theta",
    "xi",
    "optimizer",
    "queue",
    "clusters",
    "rng",
    "iteration",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

enum Tensor {
    Float(Vec<usize>, Vec<f64>),
    Int(Vec<usize>, Vec<u64>),
}

struct Writer {
    buf: Vec<u8>,
    precision: Precision,
}

impl Writer {
    fn section(&mut self, name: &str, tensors: Vec<Tensor>) {
        self.buf.push(name.len() as u8);
        self.buf.extend_from_slice(name.as_bytes());
        self.buf
            .extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            let (tag, dims) = match &t {
                Tensor::Float(d, _) => (
                    match self.precision {
                        Precision::F32 => 0u8,
                        Precision::F64 => 1u8,
                    },
                    d,
                ),
                Tensor::Int(d, _) => (2u8, d),
            };
            self.buf.push(tag);
            self.buf.push(dims.len() as u8);
            for &d in dims {
                self.buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                Tensor::Float(_, v) => {
                    for x in v {
                        match self.precision {
                            Precision::F32 => self.buf.extend_from_slice(&(x as f32).to_le_bytes()),
                            Precision::F64 => self.buf.extend_from_slice(&x.to_le_bytes()),
                        }
                    }
                }
                Tensor::Int(_, v) => {
                    for x in v {
                        self.buf.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
    }
}

fn blocks<P: ParamBlocks>(p: &P) -> Vec<Tensor> {
    p.param_blocks()
        .into_iter()
        .map(|b| Tensor::Float(vec![b.len()], b.to_vec()))
        .collect()
}

fn matrix(m: &Matrix) -> Tensor {
    Tensor::Float(vec![m.rows(), m.cols()], m.as_slice().to_vec())
}

pub fn encode(state: &TrainState, precision: Precision) -> Vec<u8> {
    let mut w = Writer {
        buf: Vec::new(),
        precision,
    };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(&state.config).expect("config serializes");
    w.buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    w.buf.extend_from_slice(&json);

    w.section("theta", blocks(&state.pair.theta));
    w.section("xi", blocks(&state.pair.xi));

    let o = &state.opt;
    let mut opt = vec![Tensor::Float(
        vec![4],
        vec![o.lr, o.momentum, o.weight_decay, state.pair.m],
    )];
    opt.extend(
        o.velocity
            .iter()
            .map(|v| Tensor::Float(vec![v.len()], v.clone())),
    );
    w.section("optimizer", opt);

    let q = &state.queue;
    w.section(
        "queue",
        vec![
            Tensor::Int(
                vec![3],
                vec![q.capacity() as u64, q.dim() as u64, q.total_enqueued()],
            ),
            matrix(&q.negatives_snapshot()),
        ],
    );

    let clusters = match &state.clusters {
        None => vec![Tensor::Int(vec![1], vec![0])],
        Some(c) => {
            let p = c.params();
            vec![
                Tensor::Int(vec![1], vec![1]),
                matrix(c.centroids()),
                Tensor::Float(vec![c.num_clusters()], c.variances().to_vec()),
                Tensor::Int(
                    vec![c.num_clusters()],
                    c.counts().iter().map(|&x| x as u64).collect(),
                ),
                Tensor::Float(vec![2], vec![p.beta1, p.beta2]),
                Tensor::Int(vec![2], vec![p.frozen_until, p.reset_every]),
            ]
        }
    };
    w.section("clusters", clusters);

    let s = state.seeds;
    w.section(
        "rng",
        vec![Tensor::Int(
            vec![4],
            vec![s.data, s.augment, s.init, s.cluster],
        )],
    );
    w.section(
        "iteration",
        vec![Tensor::Int(
            vec![3],
            vec![
                state.iteration,
                state.total_steps,
                state.num_clusters as u64,
            ],
        )],
    );
    w.buf
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    save_checkpoint_with(state, path, Precision::default())
}

pub fn save_checkpoint_with(state: &TrainState, path: &Path, precision: Precision) -> Result<()> {
    std::fs::write(path, encode(state, precision))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode(&std::fs::read(path)?)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::corrupt(
                self.section,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            )),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn fail<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(Error::corrupt(self.section, detail))
    }

    fn begin(&mut self, name: &'static str) -> Result<usize> {
        self.section = name;
        let len = self.u8()? as usize;
        let got = self.take(len)?;
        if got != name.as_bytes() {
            return self.fail(format!(
                "expected section `{name}`, found `{}`",
                String::from_utf8_lossy(got)
            ));
        }
        Ok(self.u32()? as usize)
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let tag = self.u8()?;
        let rank = self.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(usize::try_from(self.u64()?).or_else(|_| self.fail("dimension overflow"))?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .map_or_else(|| self.fail("dimension overflow"), Ok)?;
        match tag {
            0 => {
                let raw = self.take(
                    count
                        .checked_mul(4)
                        .map_or_else(|| self.fail("size overflow"), Ok)?,
                )?;
                let v = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                Ok(Tensor::Float(dims, v))
            }
            1 => {
                let raw = self.take(
                    count
                        .checked_mul(8)
                        .map_or_else(|| self.fail("size overflow"), Ok)?,
                )?;
                let v = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(Tensor::Float(dims, v))
            }
            2 => {
                let raw = self.take(
                    count
                        .checked_mul(8)
                        .map_or_else(|| self.fail("size overflow"), Ok)?,
                )?;
                let v = raw
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Ok(Tensor::Int(dims, v))
            }
            t => self.fail(format!("unknown dtype tag {t}")),
        }
    }

    fn floats(&mut self, want: &[usize]) -> Result<Vec<f64>> {
        match self.tensor()? {
            Tensor::Float(d, v) if d == want => Ok(v),
            Tensor::Float(d, _) => self.fail(format!("shape {d:?}, expected {want:?}")),
            Tensor::Int(..) => self.fail("expected a float tensor"),
        }
    }

    fn ints(&mut self, want: &[usize]) -> Result<Vec<u64>> {
        match self.tensor()? {
            Tensor::Int(d, v) if d == want => Ok(v),
            Tensor::Int(d, _) => self.fail(format!("shape {d:?}, expected {want:?}")),
            Tensor::Float(..) => self.fail("expected an integer tensor"),
        }
    }

    fn any_floats(&mut self, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        match self.tensor()? {
            Tensor::Float(d, v) if d.len() == rank => Ok((d, v)),
            _ => self.fail(format!("expected a rank-{rank} float tensor")),
        }
    }

    fn expect_count(&self, got: usize, want: usize) -> Result<()> {
        if got != want {
            return self.fail(format!("{got} tensors, expected {want}"));
        }
        Ok(())
    }

    fn load_blocks<P: ParamBlocks>(&mut self, name: &'static str, target: &mut P) -> Result<()> {
        let n = self.begin(name)?;
        let shapes = target.block_shapes();
        self.expect_count(n, shapes.len())?;
        let mut loaded = Vec::with_capacity(n);
        for &len in &shapes {
            loaded.push(self.floats(&[len])?);
        }
        for (dst, src) in target.param_blocks_mut().into_iter().zip(loaded) {
            dst.copy_from_slice(&src);
        }
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader {
        bytes,
        pos: 0,
        section: "header",
    };
    if r.take(MAGIC.len())? != MAGIC {
        return r.fail("bad magic, not a checkpoint");
    }
    let version = r.u32()?;
    if version != VERSION {
        return r.fail(format!(
            "format version {version}, this build reads version {VERSION}"
        ));
    }
    r.section = "config";
    let len = r.u32()? as usize;
    let json = r.take(len)?;
    let config: ExperimentConfig =
        serde_json::from_slice(json).or_else(|e| r.fail(format!("config JSON: {e}")))?;

    let mut pair = EncoderPair::new(&config.arch(), config.m0, 0)
        .or_else(|e| r.fail(format!("config architecture: {e}")))?;
    r.load_blocks(SECTIONS[0], &mut pair.theta)?;
    r.load_blocks(SECTIONS[1], &mut pair.xi)?;

    let n = r.begin(SECTIONS[2])?;
    let shapes = pair.theta.block_shapes();
    r.expect_count(n, shapes.len() + 1)?;
    let hyper = r.floats(&[4])?;
    let mut velocity = Vec::with_capacity(shapes.len());
    for &len in &shapes {
        velocity.push(r.floats(&[len])?);
    }
    let opt = OptimState {
        lr: hyper[0],
        momentum: hyper[1],
        weight_decay: hyper[2],
        velocity,
    };
    pair.m = hyper[3];

    let n = r.begin(SECTIONS[3])?;
    r.expect_count(n, 2)?;
    let meta = r.ints(&[3])?;
    let (dims, data) = r.any_floats(2)?;
    let rows = Matrix::from_vec(dims[0], dims[1], data).or_else(|e| r.fail(e.to_string()))?;
    let queue = FeatureQueue::restore(meta[0] as usize, meta[1] as usize, &rows, meta[2])
        .or_else(|e| r.fail(e.to_string()))?;

    let n = r.begin(SECTIONS[4])?;
    let present = r.ints(&[1])?[0];
    let clusters = match present {
        0 => {
            r.expect_count(n, 1)?;
            None
        }
        1 => {
            r.expect_count(n, 6)?;
            let (dims, data) = r.any_floats(2)?;
            let l = dims[0];
            let centroids =
                Matrix::from_vec(l, dims[1], data).or_else(|e| r.fail(e.to_string()))?;
            let variances = r.floats(&[l])?;
            let counts = r.ints(&[l])?.into_iter().map(|c| c as usize).collect();
            let betas = r.floats(&[2])?;
            let sched = r.ints(&[2])?;
            let params = ClusterParams {
                beta1: betas[0],
                beta2: betas[1],
                frozen_until: sched[0],
                reset_every: sched[1],
            };
            Some(
                ClusterState::restore(centroids, variances, counts, params)
                    .or_else(|e| r.fail(e.to_string()))?,
            )
        }
        other => return r.fail(format!("bad presence flag {other}")),
    };

    let n = r.begin(SECTIONS[5])?;
    r.expect_count(n, 1)?;
    let s = r.ints(&[4])?;
    let seeds = RunSeeds {
        data: s[0],
        augment: s[1],
        init: s[2],
        cluster: s[3],
    };

    let n = r.begin(SECTIONS[6])?;
    r.expect_count(n, 1)?;
    let it = r.ints(&[3])?;
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }

    Ok(TrainState {
        config,
        pair,
        opt,
        queue,
        clusters,
        num_clusters: it[2] as usize,
        iteration: it[0],
        total_steps: it[1],
        seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DatasetSource;
    use crate::data::synth_gmm;
    use crate::trainer::{pretrain, train_step};

    fn config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic {
                n: 48,
                classes: 3,
                dim: 5,
                spread: 0.3,
                test_n: 0,
                seed: Some(2),
            },
            input_dim: 5,
            embedding_dim: 4,
            backbone_widths: vec![6],
            projection_hidden: vec![],
            prediction_hidden: vec![5],
            batch_size: 8,
            epochs: 1,
            queue_capacity: 20,
            frozen_until: 2,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = config();
        let data = synth_gmm(48, 3, 5, 0.3, 2).unwrap();
        let (state, _) = pretrain(&cfg, &data).unwrap();
        assert!(state.clusters.is_some());
        let back = decode(&encode(&state, Precision::F64)).unwrap();
        assert_eq!(back, state);
        assert_eq!(
            encode(&back, Precision::F64),
            encode(&state, Precision::F64)
        );
    }

    #[test]
    fn f32_round_trip_is_exact_on_stored_values() {
        let cfg = config();
        let data = synth_gmm(48, 3, 5, 0.3, 2).unwrap();
        let (state, _) = pretrain(&cfg, &data).unwrap();
        let once = decode(&encode(&state, Precision::F32)).unwrap();
        let twice = decode(&encode(&once, Precision::F32)).unwrap();
        assert_eq!(once, twice);
        let a = once.pair.theta.flatten();
        let b = state.pair.theta.flatten();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }

    #[test]
    fn resume_matches_next_step() {
        let mut cfg = config();
        cfg.epochs = 2;
        let data = synth_gmm(48, 3, 5, 0.3, 2).unwrap();
        let mut state = crate::trainer::TrainState::new(&cfg, &data).unwrap();
        let batch: Vec<usize> = (0..8).collect();
        for _ in 0..3 {
            train_step(&mut state, &data, &batch).unwrap();
        }
        let mut resumed = decode(&encode(&state, Precision::F64)).unwrap();
        let a = train_step(&mut state, &data, &batch).unwrap();
        let b = train_step(&mut resumed, &data, &batch).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corruption_is_reported_with_section() {
        let cfg = config();
        let data = synth_gmm(48, 3, 5, 0.3, 2).unwrap();
        let (state, _) = pretrain(&cfg, &data).unwrap();
        let bytes = encode(&state, Precision::F64);

        let cut = &bytes[..bytes.len() - 5];
        match decode(cut) {
            Err(Error::CorruptFile { section, .. }) => assert_eq!(section, "iteration"),
            other => panic!("unexpected {other:?}"),
        }

        let mut wrong = bytes.clone();
        wrong[6..10].copy_from_slice(&7u32.to_le_bytes());
        match decode(&wrong) {
            Err(Error::CorruptFile { section, detail }) => {
                assert_eq!(section, "header");
                assert!(detail.contains("version 7"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::CorruptFile { .. })));
        assert!(matches!(
            decode(&bytes[..3]),
            Err(Error::CorruptFile { .. })
        ));
    }
}
