use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cueco::checkpoint::save_checkpoint;
use cueco::config::{DatasetSource, ExperimentConfig};
use cueco::data::{synth_gmm, write_csv, Dataset};
use cueco::encoder::{EncoderPair, Mlp, QueryNet};
use cueco::trainer::TrainState;
use cueco::Matrix;

fn cueco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cueco"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_of(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Synthetic {
            n: 64,
            classes: 4,
            dim: 6,
            spread: 0.3,
            test_n: 32,
            seed: Some(1),
        },
        input_dim: 6,
        embedding_dim: 4,
        backbone_widths: vec![8],
        projection_hidden: vec![8],
        prediction_hidden: vec![8],
        batch_size: 16,
        epochs: 2,
        queue_capacity: 48,
        frozen_until: 3,
        ..ExperimentConfig::default()
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Checkpoint whose query network is the identity on `dim` inputs.
fn identity_checkpoint(dir: &Path, dim: usize) -> PathBuf {
    let cfg = ExperimentConfig {
        dataset: DatasetSource::Synthetic {
            n: 8,
            classes: 2,
            dim,
            spread: 0.3,
            test_n: 0,
            seed: Some(0),
        },
        input_dim: dim,
        embedding_dim: dim,
        backbone_widths: vec![dim],
        projection_hidden: vec![],
        prediction_hidden: vec![],
        batch_size: 4,
        epochs: 0,
        ..ExperimentConfig::default()
    };
    let data = synth_gmm(8, 2, dim, 0.3, 0).unwrap();
    let mut state = TrainState::new(&cfg, &data).unwrap();
    let theta = QueryNet {
        backbone: Mlp::identity(dim),
        projection: Mlp::identity(dim),
        prediction: Mlp::identity(dim),
    };
    state.pair = EncoderPair::from_query(theta, state.pair.m).unwrap();
    let p = dir.join("identity.cueco");
    save_checkpoint(&state, &p).unwrap();
    p
}

/// Two classes in the positive orthant (ReLU-safe), split by x0 versus x1.
fn separable(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let noise = synth_gmm(n, 2, 3, 0.2, seed).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let r = noise.samples.row(i);
        let y = i % 2;
        let (a, b) = (1.0 + 0.1 * r[0].abs(), 0.3 * r[1].abs());
        let v = if y == 0 {
            [a, b, r[2].abs()]
        } else {
            [b, a, r[2].abs()]
        };
        rows.push(v.to_vec());
        labels.push(y);
    }
    let ds = Dataset::new(Matrix::from_rows(3, rows.iter()).unwrap(), Some(labels), 2).unwrap();
    let p = dir.join(name);
    write_csv(&ds, &p).unwrap();
    p
}

#[test]
fn pretrain_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = dir.path().join("run");
    let o = cueco(&["pretrain", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoint.cueco").is_file());
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics
        .starts_with("step,loss_total,loss1,loss2,loss3,lr,m,cluster_entropy,wallclock_ms\n"));
    assert_eq!(metrics.lines().count(), 1 + 8);
}

#[test]
fn pretrain_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = cueco(&[
            "--seed",
            "5",
            "pretrain",
            "--config",
            s(&cfg),
            "--out",
            s(out),
        ]);
        assert!(o.status.success());
    }
    for f in ["checkpoint.cueco", "metrics.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn pretrain_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = cueco(&["pretrain", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"tau_contrastive": -0.2}"#).unwrap();
    let o = cueco(&["pretrain", "--config", s(&p), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau_contrastive"));

    let missing = dir.path().join("nope.json");
    let o = cueco(&["pretrain", "--config", s(&missing), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn pretrain_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.base_lr = 1e300;
    cfg.epochs = 4;
    let p = write_config(dir.path(), &cfg);
    let o = cueco(&[
        "pretrain",
        "--config",
        s(&p),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn eval_linear_on_identity_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 3);
    let train = separable(dir.path(), "train.csv", 200, 1);
    let test = separable(dir.path(), "test.csv", 100, 2);
    let o = cueco(&[
        "eval",
        "linear",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&train),
        "--test-data",
        s(&test),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json_of(&o);
    assert!(v["top1"].as_f64().unwrap() >= 0.99, "{v}");
    assert_eq!(v["top5"].as_f64().unwrap(), 1.0);
}

#[test]
fn eval_knn_and_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 3);
    let train = separable(dir.path(), "train.csv", 40, 1);
    let csv = dir.path().join("m.csv");
    let o = cueco(&[
        "eval",
        "knn",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&train),
        "--k",
        "5",
        "--csv",
        s(&csv),
    ]);
    assert!(o.status.success());
    assert_eq!(json_of(&o)["accuracy"].as_f64().unwrap(), 1.0);
    assert!(std::fs::read_to_string(&csv)
        .unwrap()
        .starts_with("metric,value\n"));

    let o = cueco(&[
        "eval",
        "knn",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&train),
        "--k",
        "41",
    ]);
    assert_eq!(o.status.code(), Some(2));

    let o = cueco(&[
        "eval",
        "cluster",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&train),
    ]);
    assert!(o.status.success());
    let v = json_of(&o);
    for key in ["acc", "nmi", "ami", "ari"] {
        assert_eq!(v[key].as_f64().unwrap(), 1.0, "{key}: {v}");
    }
}

#[test]
fn eval_missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = identity_checkpoint(dir.path(), 3);
    let o = cueco(&[
        "eval",
        "knn",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&dir.path().join("none.csv")),
    ]);
    assert_eq!(o.status.code(), Some(4));
    let o = cueco(&[
        "eval",
        "linear",
        "--checkpoint",
        s(&dir.path().join("none.cueco")),
        "--data",
        s(&ckpt),
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn ablate_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.probe.epochs = 5;
    let p = write_config(dir.path(), &cfg);
    let out = dir.path().join("ablation.csv");
    let o = cueco(&[
        "ablate",
        "--config",
        s(&p),
        "--out",
        s(&out),
        "--seeds",
        "0,1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(
        lines[0],
        "config,lambda1,lambda2,lambda3,top1,top5,20-NN,100-NN,NMI,AMI,ARI,ACC"
    );
    for line in &lines[1..] {
        for v in line.split(',').skip(4) {
            let v: f64 = v.parse().unwrap();
            assert!(v.is_finite() && (-100.0..=100.0).contains(&v), "{line}");
        }
    }
}

#[test]
fn dynamics_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj.csv");
    let o = cueco(&[
        "dynamics",
        "--n",
        "12",
        "--classes",
        "3",
        "--steps",
        "0",
        "--weights",
        "1,0,0",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 12);
    assert!(text.starts_with("step,point_id,class,coord0,"));

    let o = cueco(&[
        "dynamics",
        "--n",
        "12",
        "--classes",
        "3",
        "--steps",
        "10",
        "--weights",
        "1,0,0",
        "--out",
        s(&out),
    ]);
    let v = json_of(&o);
    assert!(
        v["mean_similarity_final"].as_f64().unwrap()
            < v["mean_similarity_initial"].as_f64().unwrap()
    );

    let o = cueco(&["dynamics", "--weights", "1,0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = cueco(&["dynamics", "--n", "2", "--classes", "3", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}
