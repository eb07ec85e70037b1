use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};
use serde_json::json;

use cueco::ablation::{run_ablation, write_ablation_csv};
use cueco::checkpoint::{load_checkpoint, save_checkpoint};
use cueco::clustering::lloyd_restarts;
use cueco::config::ExperimentConfig;
use cueco::data::Dataset;
use cueco::dynamics::{
    mean_pairwise_similarity, mean_within_class_distance, simulate, write_full_state,
    write_trajectory_csv, DynamicsConfig,
};
use cueco::encoder::Stage;
use cueco::eval::{acc_hungarian, ami, ari, knn_classify, linear_probe, nmi};
use cueco::losses::LossWeights;
use cueco::trainer::{extract_features, pretrain, write_metrics_csv};
use cueco::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;
const EXIT_MISSING: u8 = 4;

#[derive(Parser)]
#[command(
    name = "cueco",
    version,
    about = "Contrastive learning with online momentum clustering"
)]
struct Cli {
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder and write `checkpoint.cueco` and `metrics.csv`.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate frozen features of a checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate the four loss-term configurations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds (default: five seeds from --seed or 0).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Optimize unit embeddings directly and record their trajectories.
    Dynamics(DynamicsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Linear,
    Knn,
    Cluster,
}

#[derive(Args)]
struct EvalArgs {
    protocol: Protocol,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training split (or the only split).
    #[arg(long)]
    data: PathBuf,
    /// Held-out split; without it the metrics are computed on `--data`.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Encoder stage (backbone, projection, prediction); the checkpoint's
    /// configured stage by default.
    #[arg(long)]
    stage: Option<Stage>,
    /// Also write the metrics as `metric,value` rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct DynamicsArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// λ1,λ2,λ3
    #[arg(long, value_delimiter = ',', default_value = "1,0.1,0.01")]
    weights: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    /// Pin centroids to the hidden class directions.
    #[arg(long)]
    fixed_centroids: bool,
    #[arg(long)]
    out: PathBuf,
    /// Optional full-precision binary of every frame.
    #[arg(long)]
    full_state: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig { .. }
        | Error::KTooLarge { .. }
        | Error::LabelOutOfRange { .. }
        | Error::DimMismatch { .. }
        | Error::TooFewPoints { .. }
        | Error::Json(_) => EXIT_CONFIG,
        Error::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        _ => EXIT_FAILURE,
    }
}

fn fail(e: Error) -> ExitCode {
    error!("{e}");
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn require_file(path: &Path) -> Result<(), ExitCode> {
    if path.is_file() {
        Ok(())
    } else {
        eprintln!("error: {} not found", path.display());
        Err(ExitCode::from(EXIT_MISSING))
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, ExitCode> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read config {}: {e}", path.display());
        ExitCode::from(EXIT_CONFIG)
    })?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_CONFIG)
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_pretrain(config: &Path, out: &Path, seed: Option<u64>) -> ExitCode {
    let cfg = match load_config(config, seed) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let run = || -> cueco::Result<()> {
        let (train, _) = cfg.dataset.load(cfg.seed)?;
        let (state, metrics) = pretrain(&cfg, &train)?;
        std::fs::create_dir_all(out)?;
        save_checkpoint(&state, &out.join("checkpoint.cueco"))?;
        write_metrics_csv(&metrics, &out.join("metrics.csv"))?;
        info!("{} steps written to {}", metrics.len(), out.display());
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn cmd_eval(args: &EvalArgs) -> ExitCode {
    for p in [
        Some(&args.checkpoint),
        Some(&args.data),
        args.test_data.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        if let Err(code) = require_file(p) {
            return code;
        }
    }
    let run = || -> cueco::Result<serde_json::Value> {
        let state = load_checkpoint(&args.checkpoint)?;
        let stage = args.stage.unwrap_or(state.config.eval_stage);
        let train = Dataset::load(&args.data)?;
        let test = match &args.test_data {
            Some(p) => Dataset::load(p)?,
            None => train.clone(),
        };
        let labels = |d: &Dataset| {
            d.labels.clone().ok_or_else(|| Error::InvalidConfig {
                key: "data".into(),
                reason: "evaluation needs labelled data".into(),
            })
        };
        let classes = train.class_count.max(test.class_count);
        let ftr = extract_features(&state.pair, &train, stage)?;
        let fte = extract_features(&state.pair, &test, stage)?;
        Ok(match args.protocol {
            Protocol::Linear => {
                let r = linear_probe(
                    &ftr.raw,
                    &labels(&train)?,
                    &fte.raw,
                    &labels(&test)?,
                    classes,
                    &state.config.probe,
                )?;
                json!({"top1": r.top1, "top5": r.top5})
            }
            Protocol::Knn => {
                let tel = labels(&test)?;
                let pred = knn_classify(
                    &ftr.normalized,
                    &labels(&train)?,
                    &fte.normalized,
                    args.k,
                    state.config.knn_weighted,
                )?;
                let hits = pred.iter().zip(&tel).filter(|(a, b)| a == b).count();
                json!({"k": args.k, "accuracy": hits as f64 / tel.len() as f64})
            }
            Protocol::Cluster => {
                let tel = labels(&test)?;
                let fit = lloyd_restarts(
                    &fte.normalized,
                    classes,
                    state.config.seed,
                    state.config.kmeans_max_iters,
                    state.config.eval_kmeans_restarts,
                )?;
                json!({
                    "nmi": nmi(&fit.labels, &tel)?,
                    "ami": ami(&fit.labels, &tel)?,
                    "ari": ari(&fit.labels, &tel)?,
                    "acc": acc_hungarian(&fit.labels, &tel, classes)?,
                })
            }
        })
    };
    match run() {
        Ok(v) => {
            println!("{v}");
            if let Some(path) = &args.csv {
                let mut text = String::from("metric,value\n");
                if let Some(obj) = v.as_object() {
                    for (k, val) in obj {
                        text.push_str(&format!("{k},{val}\n"));
                    }
                }
                if let Err(e) = std::fs::write(path, text) {
                    return fail(e.into());
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn cmd_ablate(config: &Path, out: &Path, seeds: Option<Vec<u64>>, seed: Option<u64>) -> ExitCode {
    let cfg = match load_config(config, None) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let seeds = seeds.unwrap_or_else(|| {
        let base = seed.unwrap_or(0);
        (base..base + 5).collect()
    });
    match run_ablation(&cfg, &seeds).and_then(|rows| {
        write_ablation_csv(&rows, out)?;
        Ok(rows)
    }) {
        Ok(rows) => {
            let summary: Vec<_> = rows
                .iter()
                .map(|r| json!({"config": r.name, "median": r.median}))
                .collect();
            println!("{}", serde_json::Value::Array(summary));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn cmd_dynamics(args: &DynamicsArgs, seed: Option<u64>) -> ExitCode {
    let run = || -> cueco::Result<serde_json::Value> {
        if args.weights.len() != 3 {
            return Err(Error::invalid(
                "weights",
                "expected three comma-separated values",
            ));
        }
        let weights = LossWeights::new(args.weights[0], args.weights[1], args.weights[2])?;
        let cfg = DynamicsConfig {
            n: args.n,
            classes: args.classes,
            dim: args.dim,
            steps: args.steps,
            weights,
            step_size: args.step_size,
            fixed_centroids: args.fixed_centroids,
            seed: seed.unwrap_or(0),
            ..DynamicsConfig::default()
        };
        let (state, traj) = simulate(&cfg)?;
        write_trajectory_csv(&traj, &state.labels, &args.out)?;
        if let Some(p) = &args.full_state {
            write_full_state(&traj, p)?;
        }
        let (first, last) = (&traj[0], &traj[traj.len() - 1]);
        Ok(json!({
            "steps": args.steps,
            "mean_similarity_initial": mean_pairwise_similarity(first),
            "mean_similarity_final": mean_pairwise_similarity(last),
            "within_class_distance_initial": mean_within_class_distance(first, &state.labels),
            "within_class_distance_final": mean_within_class_distance(last, &state.labels),
        }))
    };
    match run() {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CUECO_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match &cli.command {
        Command::Pretrain { config, out } => cmd_pretrain(config, out, cli.seed),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate { config, out, seeds } => cmd_ablate(config, out, seeds.clone(), cli.seed),
        Command::Dynamics(args) => cmd_dynamics(args, cli.seed),
    }
}
