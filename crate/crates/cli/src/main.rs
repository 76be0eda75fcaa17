//! `ldfv`: command-line surface for dataset generation, training, rollout,
//! evaluation, spectra, and speed benchmarking.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ldfv_core::checkpoint::load_checkpoint;
use ldfv_core::config::{load_config, RunConfig};
use ldfv_core::datagen::{build_dataset, load_split, random_initial_condition};
use ldfv_core::fluxblock::{AblationSwitches, ModelParams};
use ldfv_core::grid::Trajectory;
use ldfv_core::io::{load_trajectory, save_trajectory};
use ldfv_core::metrics::{bench_speed, energy_spectrum, report, Observable};
use ldfv_core::solver::{classical_rollout, project_state};
use ldfv_core::training::{fit, rollout};

#[derive(Parser)]
#[command(name = "ldfv", about = "Learnable finite-volume flow solver toolkit")]
struct Cli {
    /// Configuration file (sectioned key = value text).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to the LDFV_THREADS environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the train/test dataset described by the config.
    Gen,
    /// Train the learned solver on a generated dataset.
    Train {
        /// Dataset directory; defaults to <out>/dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Roll a checkpoint (or "physics-only") forward from an initial state.
    Rollout {
        /// Checkpoint path, or "physics-only" for the classical coarse solver.
        #[arg(long)]
        checkpoint: String,
        /// Trajectory file whose first state seeds the rollout.
        #[arg(long)]
        initial: PathBuf,
        /// Steps to take; defaults to run.rollout_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate a checkpoint (or "physics-only") on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: String,
        /// Dataset directory; defaults to <out>/dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Correlation observable: state or vorticity.
        #[arg(long, default_value = "state")]
        observable: String,
    },
    /// Emit the energy spectrum of one stored state as CSV.
    Spectrum {
        #[arg(long)]
        trajectory: PathBuf,
        /// State index within the trajectory.
        #[arg(long, default_value_t = 0)]
        step: usize,
    },
    /// Compare wall-time per physical second between two solver setups.
    Bench {
        /// Second config; defaults to the primary one.
        #[arg(long)]
        config_b: Option<PathBuf>,
        /// Simulated horizon in physical seconds.
        #[arg(long)]
        horizon: f64,
        /// Grid for side A: fine (classical DNS) or coarse (learned solver).
        #[arg(long, default_value = "fine")]
        mode_a: String,
        /// Grid for side B.
        #[arg(long, default_value = "coarse")]
        mode_b: String,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    let env_threads = std::env::var("LDFV_THREADS")
        .ok()
        .map(|v| v.parse::<usize>().context("LDFV_THREADS must be an integer"))
        .transpose()?;
    if let Some(t) = cli.threads.or(env_threads) {
        cfg.threads = t;
        cfg.train.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Freeze the effective configuration (defaults included) into the run's
/// output directory.
fn echo_config(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

/// Resolve a model argument: either a stored checkpoint or the reserved
/// "physics-only" name for the zero-weight classical solver.
fn resolve_model(arg: &str, cfg: &RunConfig) -> Result<(ModelParams, AblationSwitches, String)> {
    if arg == "physics-only" {
        let params = ModelParams::zeros(cfg.hyper, cfg.k_c.max(2), false)?;
        let switches = AblationSwitches {
            enable_physics: true,
            enable_learnable: false,
            enable_spectral: false,
            enable_temporal_correction: false,
        };
        return Ok((params, switches, "physics-only".into()));
    }
    let (params, meta) = load_checkpoint(arg).with_context(|| format!("loading {arg}"))?;
    if meta.kind != cfg.dataset.system.kind.name() {
        bail!(
            "checkpoint was trained for {} but the config describes {}",
            meta.kind,
            cfg.dataset.system.kind.name()
        );
    }
    Ok((params, cfg.switches, arg.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli)?;
    match &cli.cmd {
        Cmd::Gen => cmd_gen(&cfg),
        Cmd::Train { dataset } => cmd_train(&cfg, dataset.as_deref()),
        Cmd::Rollout { checkpoint, initial, steps } => {
            cmd_rollout(&cfg, checkpoint, initial, *steps)
        }
        Cmd::Eval { checkpoint, dataset, observable } => {
            cmd_eval(&cfg, checkpoint, dataset.as_deref(), observable)
        }
        Cmd::Spectrum { trajectory, step } => cmd_spectrum(&cfg, trajectory, *step),
        Cmd::Bench { config_b, horizon, mode_a, mode_b } => {
            cmd_bench(&cli, &cfg, config_b.as_deref(), *horizon, mode_a, mode_b)
        }
    }
}

fn dataset_dir(cfg: &RunConfig, arg: Option<&Path>) -> PathBuf {
    arg.map(Path::to_path_buf).unwrap_or_else(|| cfg.out.join("dataset"))
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    echo_config(cfg)?;
    let dir = cfg.out.join("dataset");
    let manifest = build_dataset(&cfg.dataset, &dir)?;
    println!(
        "dataset: {} train + {} test trajectories in {}",
        manifest.train.len(),
        manifest.test.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, dataset: Option<&Path>) -> Result<()> {
    echo_config(cfg)?;
    let dir = dataset_dir(cfg, dataset);
    let trajs = load_split(&dir, "train")
        .with_context(|| format!("loading train split from {}", dir.display()))?;
    let params = ModelParams::init(cfg.seed, cfg.hyper, cfg.k_c, cfg.with_corrector)?;
    let out = cfg.out.join("train");
    let outcome = fit(&trajs, &cfg.dataset.system, params, &cfg.train, &out)?;
    let last = outcome.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained: {} optimizer steps, final batch loss {last:.6e}, checkpoint {}",
        outcome.history.len(),
        outcome.checkpoint.display()
    );
    Ok(())
}

fn cmd_rollout(cfg: &RunConfig, checkpoint: &str, initial: &Path, steps: Option<usize>) -> Result<()> {
    echo_config(cfg)?;
    let source = load_trajectory(initial)
        .with_context(|| format!("loading initial state from {}", initial.display()))?;
    let init = source.states[0].clone();
    let dt = source.dt;
    let steps = steps.unwrap_or(cfg.rollout_steps);
    let (params, switches, model_id) = resolve_model(checkpoint, cfg)?;
    let preds = rollout(&init, steps, &params, &cfg.dataset.system, &switches, dt)?;
    let mut states = vec![init];
    states.extend(preds);
    let traj = Trajectory::new(states, dt, source.t0)?;
    let path = cfg.out.join("rollout.ldfv");
    save_trajectory(&path, &traj)?;
    println!("rollout: {model_id}, {steps} steps -> {}", path.display());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &str,
    dataset: Option<&Path>,
    observable: &str,
) -> Result<()> {
    echo_config(cfg)?;
    let obs = Observable::parse(observable)?;
    let dir = dataset_dir(cfg, dataset);
    let labels = load_split(&dir, "test")
        .with_context(|| format!("loading test split from {}", dir.display()))?;
    let (params, switches, model_id) = resolve_model(checkpoint, cfg)?;

    let mut pred_tails = Vec::with_capacity(labels.len());
    let mut label_tails = Vec::with_capacity(labels.len());
    for traj in &labels {
        let steps = traj.states.len() - 1;
        if steps == 0 {
            bail!("test trajectories need at least 2 states to evaluate a rollout");
        }
        let preds = rollout(
            &traj.states[0],
            steps,
            &params,
            &cfg.dataset.system,
            &switches,
            traj.dt,
        )?;
        pred_tails.push(Trajectory::new(preds, traj.dt, traj.t0 + traj.dt)?);
        label_tails.push(Trajectory::new(
            traj.states[1..].to_vec(),
            traj.dt,
            traj.t0 + traj.dt,
        )?);
    }
    let rep = report(
        &pred_tails,
        &label_tails,
        obs,
        cfg.pcc_threshold,
        &model_id,
        &dir.display().to_string(),
    )?;
    let eval_dir = cfg.out.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    std::fs::write(
        eval_dir.join("report.json"),
        serde_json::to_string_pretty(&rep)?,
    )?;
    let mut csv = String::from("step,pcc\n");
    for (k, p) in rep.pcc_series.iter().enumerate() {
        match p {
            Some(v) => csv.push_str(&format!("{},{v}\n", k + 1)),
            None => csv.push_str(&format!("{},undefined\n", k + 1)),
        }
    }
    std::fs::write(eval_dir.join("pcc.csv"), csv)?;
    println!(
        "eval: model {model_id} rmse {:.6e} mae {:.6e} mnad {} hct {:.4} s -> {}",
        rep.rmse,
        rep.mae,
        rep.mnad.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "undefined".into()),
        rep.hct_seconds,
        eval_dir.join("report.json").display()
    );
    Ok(())
}

fn cmd_spectrum(cfg: &RunConfig, trajectory: &Path, step: usize) -> Result<()> {
    echo_config(cfg)?;
    let traj = load_trajectory(trajectory)?;
    if step >= traj.states.len() {
        bail!(
            "step {step} out of range; trajectory has {} states",
            traj.states.len()
        );
    }
    let (k, e) = energy_spectrum(&traj.states[step])?;
    let mut csv = String::from("k,E\n");
    for (kk, ee) in k.iter().zip(&e) {
        csv.push_str(&format!("{kk},{ee}\n"));
    }
    let path = cfg.out.join("spectrum.csv");
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(&path, csv)?;
    println!("spectrum: state {step} -> {}", path.display());
    Ok(())
}

/// Wall-seconds per physical second for one side of the benchmark.
fn bench_side(cfg: &RunConfig, mode: &str, horizon: f64) -> Result<f64> {
    let spec = &cfg.dataset;
    let sys = &spec.system;
    match mode {
        "fine" => {
            let steps = (horizon / spec.fine_dt).round() as usize;
            if steps == 0 {
                bail!("horizon {horizon} is shorter than one fine step");
            }
            let ic = random_initial_condition(cfg.seed, spec)?;
            Ok(bench_speed(
                || classical_rollout(&ic, sys, spec.fine_dt, steps).map(|_| ()),
                horizon,
                3,
            )?)
        }
        "coarse" => {
            let dt = spec.coarse_dt();
            let steps = (horizon / dt).round() as usize;
            if steps == 0 {
                bail!("horizon {horizon} is shorter than one coarse step");
            }
            let fine_ic = random_initial_condition(cfg.seed, spec)?;
            let mut ic = ldfv_core::grid::downsample_spatial(&fine_ic, spec.spatial_factor)?;
            if sys.kind.is_nse() {
                ic = project_state(&ic, 1.0)?;
            }
            let params = ModelParams::init(cfg.seed, cfg.hyper, cfg.k_c, cfg.with_corrector)?;
            let switches = cfg.switches;
            Ok(bench_speed(
                || rollout(&ic, steps, &params, sys, &switches, dt).map(|_| ()),
                horizon,
                3,
            )?)
        }
        other => bail!("unknown bench mode {other:?}; expected fine or coarse"),
    }
}

fn cmd_bench(
    cli: &Cli,
    cfg: &RunConfig,
    config_b: Option<&Path>,
    horizon: f64,
    mode_a: &str,
    mode_b: &str,
) -> Result<()> {
    echo_config(cfg)?;
    let cfg_b = match config_b {
        Some(p) => {
            let mut c = load_config(p)?;
            if let Some(seed) = cli.seed {
                c.seed = seed;
            }
            c
        }
        None => cfg.clone(),
    };
    let a = bench_side(cfg, mode_a, horizon)?;
    let b = bench_side(&cfg_b, mode_b, horizon)?;
    let report = serde_json::json!({
        "horizon_seconds": horizon,
        "a": { "mode": mode_a, "wall_per_physical": a },
        "b": { "mode": mode_b, "wall_per_physical": b },
        "speedup_a_over_b": a / b,
    });
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("bench.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "bench: {mode_a} {a:.4} vs {mode_b} {b:.4} wall-s per physical-s, speedup {:.2}x -> {}",
        a / b,
        path.display()
    );
    Ok(())
}
