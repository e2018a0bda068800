//! `lpvmpc` command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
//! run aborts or fails at runtime.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lpvmpc::ga::{bench_sphere, run_ga, GaConfig, SelectionMode, Sphere};
use lpvmpc::harness::{
    compute_metrics, genes_to_weights, run_closed_loop, Adaptation, ClosedLoopFitness, ExperimentConfig, RunLog,
    TunedWeights,
};
use lpvmpc::nn::{self, generate_dataset, ManeuverPlan, MlpModel, StiffnessDataset, TrainConfig, DEFAULT_LAYERS};
use lpvmpc::vehicle::{PacejkaCoeffs, VehicleParams};
use lpvmpc::Error;

#[derive(Parser, Debug)]
#[command(name = "lpvmpc", version, about = "Adaptive LPV-MPC vehicle control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one closed-loop experiment and write the per-step log as CSV
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the fixed nominal stiffness instead of the estimator
        #[arg(long)]
        no_adapt: bool,
        /// Weights JSON written by `tune-ga`
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        qp_tol: Option<f64>,
        #[arg(long)]
        qp_max_iter: Option<usize>,
    },
    /// Tune the MPC weights with the genetic algorithm
    TuneGa {
        #[arg(long)]
        config: PathBuf,
        /// Best weights as JSON
        #[arg(long)]
        out: PathBuf,
        /// Per-generation CSV `gen,best_fitness,mean_fitness`
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        no_adapt: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        generations: Option<usize>,
    },
    /// Generate a stiffness dataset from randomized maneuvers
    GenData {
        #[arg(long, default_value_t = 10_752)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Optional experiment config providing vehicle and tire parameters
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the stiffness estimator on a dataset CSV
    TrainNn {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TrainConfig as JSON; flags below override it
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch CSV `epoch,train_loss,val_loss`
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Compare hybrid, roulette-only and tournament-only selection on the 5D sphere
    BenchGa {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        generations: usize,
    },
    /// Print tracking metrics of a run log as JSON
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a named preset experiment config
    Preset {
        #[arg(long, default_value = "desk_track_v1")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Json(_)
            | Error::InfeasibleBounds(_)
            | Error::DimensionMismatch(_)
            | Error::DegenerateTargets
            | Error::Io(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Simulate { config, out, no_adapt, weights, seed, qp_tol, qp_max_iter } => {
            simulate(&config, &out, no_adapt, weights.as_deref(), seed, qp_tol, qp_max_iter)
        }
        Command::TuneGa { config, out, history, no_adapt, seed, generations } => {
            tune_ga(&config, &out, history.as_deref(), no_adapt, seed, generations)
        }
        Command::GenData { points, seed, out, config } => gen_data(points, seed, &out, config.as_deref()),
        Command::TrainNn { data, out, train_config, epochs, batch_size, learning_rate, seed, history } => {
            let mut cfg = match train_config {
                Some(p) => serde_json::from_str(&read(&p)?).map_err(Error::from)?,
                None => TrainConfig::default(),
            };
            cfg.epochs = epochs.unwrap_or(cfg.epochs);
            cfg.batch_size = batch_size.unwrap_or(cfg.batch_size);
            cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
            cfg.seed = seed.unwrap_or(cfg.seed);
            train_nn(&data, &out, &cfg, history.as_deref())
        }
        Command::BenchGa { seeds, out, generations } => bench_ga(seeds, &out, generations),
        Command::Report { run, config } => report(&run, &config),
        Command::Preset { name, out } => {
            let cfg = match name.as_str() {
                "desk_track_v1" => ExperimentConfig::desk_track_v1(),
                other => return Err(Failure::Config(format!("unknown preset {other}"))),
            };
            fs::write(&out, cfg.to_json()? + "\n")?;
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    if !path.exists() {
        return Err(Failure::Config(format!("config {} does not exist", path.display())));
    }
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(
    config: &Path,
    out: &Path,
    no_adapt: bool,
    weights: Option<&Path>,
    seed: Option<u64>,
    qp_tol: Option<f64>,
    qp_max_iter: Option<usize>,
) -> CliResult {
    let mut cfg = load_config(config)?;
    if no_adapt {
        cfg.adaptation = Adaptation::Off;
    }
    if let Some(w) = weights {
        let tuned: TunedWeights = serde_json::from_str(&read(w)?).map_err(Error::from)?;
        cfg.mpc = tuned.apply(&cfg.mpc);
    }
    cfg.seed = seed.unwrap_or(cfg.seed);
    cfg.mpc.qp_tol = qp_tol.unwrap_or(cfg.mpc.qp_tol);
    cfg.mpc.qp_max_iter = qp_max_iter.unwrap_or(cfg.mpc.qp_max_iter);
    cfg.validate()?;

    let log = run_closed_loop(&cfg)?;
    log.save(out)?;
    eprintln!("wrote {} records to {}", log.len(), out.display());
    match log.aborted {
        Some(reason) => Err(Failure::Runtime(format!("run aborted: {reason:?}"))),
        None => Ok(()),
    }
}

fn tune_ga(
    config: &Path,
    out: &Path,
    history: Option<&Path>,
    no_adapt: bool,
    seed: Option<u64>,
    generations: Option<usize>,
) -> CliResult {
    let mut cfg = load_config(config)?;
    if no_adapt {
        cfg.adaptation = Adaptation::Off;
    }
    let ga = GaConfig {
        seed: seed.unwrap_or(cfg.ga.seed),
        generations: generations.unwrap_or(cfg.ga.generations),
        ..cfg.ga.clone()
    };
    let model = cfg.load_estimator()?;
    let fitness = ClosedLoopFitness { scenario: cfg, estimator: model.as_ref() };
    let result = run_ga(&fitness, &ga)?;
    let (q_diag, r_diag) = genes_to_weights(&result.best.genes)?;
    let tuned = TunedWeights { q_diag, r_diag, fitness: result.best.fitness };
    fs::write(out, serde_json::to_string_pretty(&tuned).map_err(Error::from)? + "\n")?;
    if let Some(h) = history {
        result.write_history_csv(fs::File::create(h)?)?;
    }
    eprintln!("best fitness {:.6} after {} evaluations", result.best.fitness, result.evaluations);
    Ok(())
}

fn gen_data(points: usize, seed: u64, out: &Path, config: Option<&Path>) -> CliResult {
    let (params, coeffs) = match config {
        Some(p) => {
            let cfg = load_config(p)?;
            (cfg.vehicle, cfg.tire)
        }
        None => {
            let p = VehicleParams::default();
            (p, PacejkaCoeffs::default_for(&p))
        }
    };
    let ds = generate_dataset(&params, &coeffs, &ManeuverPlan::default(), points, seed)?;
    ds.save(out)?;
    eprintln!("wrote {} rows to {}", ds.len(), out.display());
    Ok(())
}

fn train_nn(data: &Path, out: &Path, cfg: &TrainConfig, history: Option<&Path>) -> CliResult {
    let ds = StiffnessDataset::load(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = MlpModel::new(&DEFAULT_LAYERS, &mut rng)?;
    let (model, hist, prep) = nn::train::train_with_split(model, &ds, cfg)?;
    model.save(out)?;
    if let Some(h) = history {
        let mut wr = csv::Writer::from_path(h).map_err(Error::from)?;
        wr.write_record(["epoch", "train_loss", "val_loss"]).map_err(Error::from)?;
        for (e, (tr, va)) in hist.train.iter().zip(&hist.validation).enumerate() {
            wr.write_record([e.to_string(), tr.to_string(), va.to_string()]).map_err(Error::from)?;
        }
        wr.flush()?;
    }
    let feats = ds.feature_rows();
    let targets = ds.target_rows();
    let r2 = |idx: &[usize]| {
        let p: Vec<Vec<f64>> = idx.iter().map(|&i| model.predict_raw(&feats[i])).collect();
        let t: Vec<Vec<f64>> = idx.iter().map(|&i| targets[i].clone()).collect();
        nn::r2_score(&p, &t).ok()
    };
    let summary = serde_json::json!({
        "train_loss": hist.train.last(),
        "val_loss": hist.validation.last(),
        "r2_train": r2(&prep.train_idx),
        "r2_val": r2(&prep.val_idx),
    });
    println!("{summary}");
    Ok(())
}

fn bench_ga(seeds: u64, out: &Path, generations: usize) -> CliResult {
    fs::create_dir_all(out)?;
    let mut summary = serde_json::Map::new();
    for mode in SelectionMode::ALL {
        let cfg = GaConfig { generations, selection: mode, ..GaConfig::default() };
        let runs = bench_sphere(&cfg, &Sphere::default(), seeds)?;
        let path = out.join(format!("{}.csv", mode.name()));
        let mut wr = csv::Writer::from_path(&path).map_err(Error::from)?;
        wr.write_record(["seed", "gen", "best_fitness", "mean_fitness"]).map_err(Error::from)?;
        for (s, run) in runs.iter().enumerate() {
            for h in &run.history {
                wr.write_record([
                    (cfg.seed + s as u64).to_string(),
                    h.gen.to_string(),
                    h.best_fitness.to_string(),
                    h.mean_fitness.to_string(),
                ])
                .map_err(Error::from)?;
            }
        }
        wr.flush()?;
        let mean = runs.iter().map(|r| r.best.fitness).sum::<f64>() / runs.len().max(1) as f64;
        summary.insert(mode.name().into(), serde_json::json!(mean));
    }
    println!("{}", serde_json::Value::Object(summary));
    Ok(())
}

fn report(run: &Path, config: &Path) -> CliResult {
    let cfg = ExperimentConfig::load(config)?;
    cfg.mpc.validate()?;
    let log = RunLog::load(run)?;
    let metrics = compute_metrics(&log, &cfg.mpc).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&metrics).map_err(Error::from)?);
    Ok(())
}
