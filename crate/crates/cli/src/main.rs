//! `pfrnn`: generate maze data, train and evaluate particle filter RNNs,
//! run ablations and grid searches, and export SVG plots.
//!
//! Exit codes: 0 success, 1 internal error, 2 bad arguments or config,
//! 3 I/O failure or unreadable input, 4 training produced NaN/inf.

mod config;
mod manifest;
mod plot;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use pfrnn::checkpoint::Checkpoint;
use pfrnn::error::Error;
use pfrnn::experiment::{ablation_variants, rank, run_jobs, write_csv, Grid, Job, RunSummary};
use pfrnn::maze::{generate_dataset, load_dataset, Dataset, DatasetSpec};
use pfrnn::model::{map_planes, ModelKind};
use pfrnn::train::{evaluate_checkpoint, particle_trace, train_with, EpochMetrics};
use serde::Serialize;

use config::{ConfigError, Overrides, RawConfig, RunConfig};
use manifest::RunManifest;

#[derive(Parser, Debug)]
#[command(name = "pfrnn", version, about = "Particle filter recurrent networks on a simulated localization task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a maze and write train/val/test trajectories
    GenData(GenDataArgs),
    /// Train one model from a config file and flags
    Train(RunArgs),
    /// Score a checkpoint on a dataset split and print JSON
    Eval(EvalArgs),
    /// Train the ten ablation variants of a particle model
    Ablate(RunArgs),
    /// Grid search over learning rate, batch size, clip and weight decay
    Grid(GridArgs),
    /// Export SVG charts from a metrics CSV, or particle frames from a checkpoint
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Maze side length in cells
    #[arg(long, default_value_t = 10)]
    maze_size: usize,
    /// Training trajectories (validation and test add a tenth and a fifth)
    #[arg(long, default_value_t = 1000)]
    num_traj: usize,
    /// Steps per trajectory
    #[arg(long, default_value_t = 50)]
    traj_len: usize,
    /// Map and data seed (falls back to PFRNN_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of cells that are obstacles
    #[arg(long, default_value_t = 0.3)]
    density: f64,
    /// Validation trajectories (overrides the default tenth)
    #[arg(long)]
    val: Option<usize>,
    /// Test trajectories (overrides the default fifth)
    #[arg(long)]
    test: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Flat key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated model kinds to search (default: the config's model)
    #[arg(long)]
    models: Option<String>,
    /// Learning rates
    #[arg(long, default_value = "1e-4,3e-4,5e-4")]
    grid_lr: String,
    /// Batch sizes
    #[arg(long, default_value = "32,64,128")]
    grid_batch_size: String,
    /// Gradient clips
    #[arg(long, default_value = "3,5")]
    grid_clip: String,
    /// Weight decays
    #[arg(long, default_value = "1e-3,1e-4")]
    grid_l2: String,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// train, val or test
    #[arg(long, default_value = "test")]
    split: String,
    /// Comma-separated evaluation seeds (default: those in the checkpoint)
    #[arg(long)]
    eval_seeds: Option<String>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["metrics", "checkpoint"]))]
struct PlotArgs {
    /// Metrics CSV (per-epoch rows give loss curves, run summaries give bars)
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Column to plot (default train_loss or test_last_step_mse)
    #[arg(long, requires = "metrics")]
    column: Option<String>,
    /// Checkpoint for particle frames
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    /// Dataset directory for particle frames
    #[arg(long, requires = "checkpoint")]
    data: Option<PathBuf>,
    /// Trajectory index within the split
    #[arg(long, default_value_t = 0, requires = "checkpoint")]
    trajectory: usize,
    /// Split holding the trajectory
    #[arg(long, default_value = "test", requires = "checkpoint")]
    split: String,
    /// Sampling seed for the particle run
    #[arg(long, default_value_t = 0, requires = "checkpoint")]
    seed: u64,
    /// SVG file (metrics) or directory of frames (checkpoint)
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Diverged { .. } | Error::NonFinite(_) | Error::Degenerate(_) => 4,
                Error::Config(_) => 2,
                Error::Io(_) | Error::Format(_) | Error::Json(_) | Error::Map(_) => 3,
                _ => 1,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Grid(a) => grid(a),
        Command::Plot(a) => plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var("PFRNN_SEED") {
        Ok(s) => Ok(Some(
            s.trim().parse().map_err(|_| ConfigError(format!("PFRNN_SEED={s:?} is not an integer")))?,
        )),
        Err(_) => Ok(None),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let seed = a.seed.or(env_seed()?).unwrap_or(0);
    if a.num_traj == 0 || a.traj_len == 0 {
        bail!(ConfigError("--num-traj and --traj-len must be positive".into()));
    }
    if !(0.0..1.0).contains(&a.density) {
        bail!(ConfigError(format!("--density {} must lie in [0, 1)", a.density)));
    }
    let mut spec = DatasetSpec::new(a.maze_size, a.num_traj, a.traj_len, seed);
    spec.density = a.density;
    spec.val = a.val.unwrap_or(spec.val);
    spec.test = a.test.unwrap_or(spec.test);
    if spec.val == 0 || spec.test == 0 {
        bail!(ConfigError("--val and --test must be positive".into()));
    }
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("gen-data", None, &spec, vec![seed])?;
    manifest.write(&a.out)?;
    let data = generate_dataset(&spec, &a.out)?;
    manifest.finish(&a.out, &[&a.out], "ok")?;
    eprintln!(
        "wrote {} / {} / {} trajectories of {} steps to {} ({} landmarks)",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        spec.traj_len,
        a.out.display(),
        data.map.landmarks().len()
    );
    Ok(())
}

/// Config file, then flags, then the seed fallback.
fn load_config(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<(RawConfig, RunConfig)> {
    let mut raw = match path {
        Some(p) => RawConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RawConfig::default(),
    };
    overrides.apply(&mut raw);
    raw.apply_seed_fallback()?;
    let cfg = raw.resolve()?;
    Ok((raw, cfg))
}

/// Load the dataset named by the config and fit the model to it.
fn prepare(cfg: &mut RunConfig, manifest: &mut RunManifest, config_path: Option<&Path>) -> anyhow::Result<Dataset> {
    let dir = cfg.data_dir()?.to_path_buf();
    if let Some(p) = config_path {
        manifest.add_inputs(p)?;
    }
    manifest.add_inputs(&dir)?;
    let data = load_dataset(&dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    cfg.fit_map(data.meta.spec.maze_size)?;
    manifest.config = serde_json::to_value(&*cfg)?;
    Ok(data)
}

#[derive(Serialize)]
struct MetricRow<'a> {
    run: &'a str,
    epoch: usize,
    train_loss: f64,
    train_pred: Option<f64>,
    train_elbo: Option<f64>,
    grad_norm: f64,
    val_last_step_mse: f64,
}

impl<'a> MetricRow<'a> {
    fn new(run: &'a str, m: &EpochMetrics) -> Self {
        Self {
            run,
            epoch: m.epoch,
            train_loss: m.train_loss,
            train_pred: m.train_pred,
            train_elbo: m.train_elbo,
            grad_norm: m.grad_norm,
            val_last_step_mse: m.val_last_step_mse,
        }
    }
}

fn train(a: RunArgs) -> anyhow::Result<()> {
    let (_, mut cfg) = load_config(a.config.as_deref(), &a.overrides)?;
    create_dir(&a.out)?;
    let mut seeds = vec![cfg.train.seed];
    seeds.extend(&cfg.train.eval_seeds);
    let mut manifest = RunManifest::new("train", a.config.as_deref(), &cfg, seeds)?;
    let data = prepare(&mut cfg, &mut manifest, a.config.as_deref())?;
    manifest.write(&a.out)?;

    let run = format!("{}-s{}", cfg.spec.kind.name(), cfg.train.seed);
    let metrics_path = a.out.join("metrics.csv");
    let ckpt_path = a.out.join("model.ckpt");
    let mut writer = csv::Writer::from_path(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut write_err = None;
    let result = train_with(&cfg.spec, &data, &cfg.train, |m| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  grad {:.3}  val last-step mse {:.4}",
            m.epoch, m.train_loss, m.grad_norm, m.val_last_step_mse
        );
        if write_err.is_none() {
            if let Err(e) = writer.serialize(MetricRow::new(&run, m)).and_then(|_| Ok(writer.flush()?)) {
                write_err = Some(e);
            }
        }
    });
    if let Some(e) = write_err {
        return Err(e).context("writing metrics.csv");
    }
    writer.flush()?;
    drop(writer);
    match result {
        Ok(outcome) => {
            outcome.checkpoint.save(&ckpt_path)?;
            manifest.finish(&a.out, &[&ckpt_path, &metrics_path], "ok")?;
            let best = outcome.checkpoint.best_epoch;
            let val = best.and_then(|e| outcome.history.iter().find(|m| m.epoch == e)).map(|m| m.val_last_step_mse);
            println!(
                "{}",
                serde_json::json!({ "run": run, "best_epoch": best, "val_last_step_mse": val, "checkpoint": ckpt_path })
            );
            Ok(())
        }
        Err(Error::Diverged { epoch, reason, last_good }) => {
            let path = a.out.join("last_good.ckpt");
            last_good.save(&path)?;
            manifest.finish(&a.out, &[&path, &metrics_path], "diverged")?;
            Err(Error::Diverged { epoch, reason, last_good })
                .with_context(|| format!("last good parameters saved to {}", path.display()))
        }
        Err(e) => {
            manifest.finish(&a.out, &[&metrics_path], "failed")?;
            Err(e.into())
        }
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>, ConfigError> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| ConfigError(format!("invalid value {v:?} in --{flag}"))))
        .collect()
}

fn split<'a>(data: &'a Dataset, name: &str) -> Result<&'a [pfrnn::maze::Trajectory], ConfigError> {
    match name {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        other => Err(ConfigError(format!("unknown split {other:?} (train, val or test)"))),
    }
}

fn load_for_checkpoint(ckpt: &Path, dir: &Path) -> anyhow::Result<(Checkpoint, Dataset)> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let data = load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if let Some(m) = &ck.spec.map_encoder {
        if m.map_size != data.map.size() {
            bail!(ConfigError(format!(
                "checkpoint expects a {0}x{0} maze, dataset has {1}x{1}",
                m.map_size,
                data.map.size()
            )));
        }
    }
    Ok((ck, data))
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (ck, data) = load_for_checkpoint(&a.checkpoint, &a.data)?;
    let trajs = split(&data, &a.split)?;
    let seeds = match &a.eval_seeds {
        Some(s) => parse_list("eval-seeds", s)?,
        None => ck.config.eval_seeds.clone(),
    };
    if seeds.is_empty() {
        bail!(ConfigError("no evaluation seeds".into()));
    }
    let report = evaluate_checkpoint(&ck, &data, trajs, &seeds)?;
    let per_seed: Vec<_> = report
        .per_seed
        .iter()
        .map(|(s, m)| serde_json::json!({ "seed": s, "last_step_mse": m.last_step_mse, "seq_mse": m.seq_mse }))
        .collect();
    let out = serde_json::json!({
        "model": ck.spec.kind.name(),
        "split": a.split,
        "trajectories": trajs.len(),
        "last_step_mse": report.last_step_mse,
        "last_step_mse_std": report.last_step_mse_std,
        "seq_mse": report.seq_mse,
        "per_seed": per_seed,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn log_row(r: &RunSummary) {
    match (&r.error, r.test_last_step_mse) {
        (Some(e), _) => eprintln!("{:<24} failed: {e}", r.label),
        (None, Some(t)) => eprintln!("{:<24} test last-step mse {t:.4}", r.label),
        _ => eprintln!("{:<24} done", r.label),
    }
}

fn write_rows(path: &Path, rows: &[RunSummary]) -> anyhow::Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(rows, std::io::BufWriter::new(file))?;
    Ok(())
}

fn run_suite(a: &RunArgs, command: &str, file: &str, jobs: impl FnOnce(&RunConfig) -> anyhow::Result<Vec<Job>>) -> anyhow::Result<()> {
    let (_, mut cfg) = load_config(a.config.as_deref(), &a.overrides)?;
    if cfg.workers == 0 {
        bail!(ConfigError("workers must be at least 1".into()));
    }
    create_dir(&a.out)?;
    let mut seeds = vec![cfg.train.seed];
    seeds.extend(&cfg.train.eval_seeds);
    let mut manifest = RunManifest::new(command, a.config.as_deref(), &cfg, seeds)?;
    let data = prepare(&mut cfg, &mut manifest, a.config.as_deref())?;
    let jobs = jobs(&cfg)?;
    manifest.write(&a.out)?;
    eprintln!("{} runs on {} worker(s)", jobs.len(), cfg.workers);
    let mut rows = run_jobs(&jobs, &data, cfg.workers, log_row);
    if command == "grid" {
        rank(&mut rows);
    }
    let path = a.out.join(file);
    write_rows(&path, &rows)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    manifest.finish(&a.out, &[&path], if failed == 0 { "ok" } else { "partial" })?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", path.display())?;
    if failed > 0 {
        eprintln!("{failed} of {} runs failed; see the error column", rows.len());
    }
    Ok(())
}

fn ablate(a: RunArgs) -> anyhow::Result<()> {
    run_suite(&a, "ablate", "ablation.csv", |cfg| {
        if !cfg.spec.kind.is_particle() {
            bail!(ConfigError("ablate needs a particle model (pf_lstm or pf_gru)".into()));
        }
        Ok(ablation_variants(&cfg.spec, &cfg.train)?)
    })
}

fn grid(a: GridArgs) -> anyhow::Result<()> {
    let grid = Grid {
        lr: parse_list("grid-lr", &a.grid_lr)?,
        batch_size: parse_list("grid-batch-size", &a.grid_batch_size)?,
        clip: parse_list("grid-clip", &a.grid_clip)?,
        l2: parse_list("grid-l2", &a.grid_l2)?,
    };
    let models = a.models.clone();
    run_suite(&a.run, "grid", "grid.csv", move |cfg| {
        let kinds = match &models {
            Some(m) => m
                .split(',')
                .map(|k| ModelKind::parse(k).map_err(|e| ConfigError(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?,
            None => vec![cfg.spec.kind],
        };
        let mut jobs = Vec::new();
        for kind in kinds {
            let mut spec = cfg.spec.clone();
            if kind != spec.kind {
                spec.kind = kind;
                spec.hidden = pfrnn::experiment::desk_spec(kind).hidden;
            }
            spec.validate().map_err(|e| ConfigError(e.to_string()))?;
            for config in grid.configs(&cfg.train) {
                config.validate().map_err(|e| ConfigError(e.to_string()))?;
                jobs.push(Job {
                    label: format!(
                        "{}-lr{}-b{}-c{}-l2{}",
                        kind.name(),
                        config.lr,
                        config.batch_size,
                        config.clip,
                        config.l2
                    ),
                    spec: spec.clone(),
                    config,
                });
            }
        }
        if jobs.is_empty() {
            bail!(ConfigError("empty grid".into()));
        }
        Ok(jobs)
    })
}

fn plot(a: PlotArgs) -> anyhow::Result<()> {
    if let Some(metrics) = &a.metrics {
        let text = fs::read_to_string(metrics).with_context(|| format!("reading {}", metrics.display()))?;
        let svg = plot::metrics_chart(&text, a.column.as_deref())?;
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
        println!("{}", a.out.display());
        return Ok(());
    }
    let (Some(ckpt), Some(dir)) = (&a.checkpoint, &a.data) else {
        bail!(ConfigError("plot needs --metrics, or --checkpoint with --data".into()));
    };
    let (ck, data) = load_for_checkpoint(ckpt, dir)?;
    let trajs = split(&data, &a.split)?;
    let traj = trajs.get(a.trajectory).ok_or_else(|| {
        ConfigError(format!("--trajectory {} out of range ({} in {})", a.trajectory, trajs.len(), a.split))
    })?;
    let mut model = ck.to_model()?;
    let planes = ck.spec.map_encoder.as_ref().map(|_| map_planes(&data.map));
    let frames = particle_trace(&mut model, traj, &ck.normalizer, planes.as_ref(), a.seed)?;
    create_dir(&a.out)?;
    for (t, frame) in frames.iter().enumerate() {
        let path = a.out.join(format!("frame_{t:03}.svg"));
        fs::write(&path, plot::particle_frame(&data.map, frame, t)).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("{} frames in {}", frames.len(), a.out.display());
    Ok(())
}
