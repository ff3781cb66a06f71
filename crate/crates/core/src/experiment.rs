//! Multi-run drivers: seeds, grid search and the ablation table.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maze::{Dataset, DatasetSpec};
use crate::model::{map_planes, ModelKind, ModelSpec};
use crate::train::{evaluate_seeds, train, EvalReport, Normalizer, TrainConfig, TrainOutcome};

/// Desk-scale localization data: maze 10, 1000/100/200 trajectories of 50
/// steps.
pub fn desk_dataset(seed: u64) -> DatasetSpec {
    DatasetSpec {
        val: 100,
        test: 200,
        ..DatasetSpec::new(10, 1000, 50, seed)
    }
}

/// Desk-scale model: hidden 32 for particle cells, 40 for baselines,
/// two 32-wide encoder layers and no map encoder.
pub fn desk_spec(kind: ModelKind) -> ModelSpec {
    let hidden = if kind.is_particle() { 32 } else { 40 };
    let mut spec = ModelSpec::new(kind, hidden);
    spec.encoder_widths = [32, 32];
    spec.cell.init_logstd = -3.0;
    spec
}

pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        seed,
        ..TrainConfig::default()
    }
}

/// Hidden size of a `kind` model whose parameter count is closest to `target`.
pub fn matching_hidden(target: &ModelSpec, kind: ModelKind) -> Result<usize> {
    let goal = target.param_count()? as f64;
    let mut best = (f64::INFINITY, 1);
    for h in 1..=8 * target.hidden.max(4) {
        let spec = ModelSpec {
            kind,
            hidden: h,
            ..target.clone()
        };
        let gap = (spec.param_count()? as f64 - goal).abs();
        if gap < best.0 {
            best = (gap, h);
        }
    }
    Ok(best.1)
}

/// One training run to launch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub label: String,
    pub spec: ModelSpec,
    pub config: TrainConfig,
}

/// Summary of a finished (or failed) job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub kind: String,
    pub hidden: usize,
    pub particles: usize,
    pub params: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clip: f64,
    pub l2: f64,
    pub beta: f64,
    pub pred_weight: f64,
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub val_last_step_mse: Option<f64>,
    pub test_last_step_mse: Option<f64>,
    pub test_last_step_std: Option<f64>,
    pub test_seq_mse: Option<f64>,
    pub error: Option<String>,
}

impl RunSummary {
    fn new(job: &Job) -> Self {
        Self {
            label: job.label.clone(),
            kind: job.spec.kind.name().to_string(),
            hidden: job.spec.hidden,
            particles: job.spec.particles(),
            params: job.spec.param_count().unwrap_or(0),
            lr: job.config.lr,
            batch_size: job.config.batch_size,
            clip: job.config.clip,
            l2: job.config.l2,
            beta: job.config.beta,
            pred_weight: job.config.pred_weight,
            seed: job.config.seed,
            best_epoch: None,
            val_last_step_mse: None,
            test_last_step_mse: None,
            test_last_step_std: None,
            test_seq_mse: None,
            error: None,
        }
    }
}

/// Train `job` and score its best checkpoint on the test split.
pub fn run_job(job: &Job, data: &Dataset) -> Result<(TrainOutcome, EvalReport)> {
    let mut out = train(&job.spec, data, &job.config)?;
    let norm = Normalizer::from_meta(&data.meta);
    let planes = job.spec.map_encoder.as_ref().map(|_| map_planes(&data.map));
    let report = evaluate_seeds(
        &mut out.model,
        &data.test,
        &norm,
        planes.as_ref(),
        &job.config.eval_seeds,
        job.config.batch_size,
    )?;
    Ok((out, report))
}

fn summarize(job: &Job, result: Result<(TrainOutcome, EvalReport)>) -> RunSummary {
    let mut row = RunSummary::new(job);
    match result {
        Ok((out, report)) => {
            row.best_epoch = out.checkpoint.best_epoch;
            row.val_last_step_mse = out
                .checkpoint
                .best_epoch
                .and_then(|e| out.history.get(e - 1))
                .map(|m| m.val_last_step_mse);
            row.test_last_step_mse = Some(report.last_step_mse);
            row.test_last_step_std = Some(report.last_step_mse_std);
            row.test_seq_mse = Some(report.seq_mse);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Run every job on up to `workers` threads. Failures are recorded in the
/// row rather than stopping the others. Rows come back in job order.
pub fn run_jobs(jobs: &[Job], data: &Dataset, workers: usize, on_done: impl Fn(&RunSummary) + Sync) -> Vec<RunSummary> {
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<RunSummary>>> = Mutex::new(vec![None; jobs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let row = summarize(job, run_job(job, data));
                on_done(&row);
                rows.lock().expect("results lock")[i] = Some(row);
            });
        }
    });
    rows.into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Sort by validation metric, failed runs last.
pub fn rank(rows: &mut [RunSummary]) {
    rows.sort_by(|a, b| match (a.val_last_step_mse, b.val_last_step_mse) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

/// Values searched for each hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub clip: Vec<f64>,
    pub l2: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            lr: vec![1e-4, 3e-4, 5e-4],
            batch_size: vec![32, 64, 128],
            clip: vec![3.0, 5.0],
            l2: vec![1e-3, 1e-4],
        }
    }
}

impl Grid {
    pub fn len(&self) -> usize {
        self.lr.len() * self.batch_size.len() * self.clip.len() * self.l2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &lr in &self.lr {
            for &batch_size in &self.batch_size {
                for &clip in &self.clip {
                    for &l2 in &self.l2 {
                        out.push(TrainConfig {
                            lr,
                            batch_size,
                            clip,
                            l2,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Every (spec, config) pair, ranked by validation last-step error.
pub fn grid_search(
    specs: &[ModelSpec],
    grid: &Grid,
    base: &TrainConfig,
    data: &Dataset,
    workers: usize,
) -> Result<Vec<RunSummary>> {
    if specs.is_empty() || grid.is_empty() {
        return Err(Error::Config("grid search needs at least one model and one value per axis".into()));
    }
    let jobs: Vec<Job> = specs
        .iter()
        .flat_map(|spec| {
            grid.configs(base).into_iter().map(move |config| Job {
                label: format!(
                    "{}-lr{}-b{}-c{}-l2{}",
                    spec.kind.name(),
                    config.lr,
                    config.batch_size,
                    config.clip,
                    config.l2
                ),
                spec: spec.clone(),
                config,
            })
        })
        .collect();
    let mut rows = run_jobs(&jobs, data, workers, |_| {});
    rank(&mut rows);
    Ok(rows)
}

pub const ABLATION_PARTICLES: [usize; 5] = [1, 5, 10, 20, 30];

/// The ten ablation variants of a particle model: particle counts, no
/// resampling, tanh instead of BN-ReLU, no ELBO, ELBO only, and a BN-ReLU
/// baseline of matching size.
pub fn ablation_variants(base: &ModelSpec, config: &TrainConfig) -> Result<Vec<Job>> {
    if !base.kind.is_particle() {
        return Err(Error::Config("ablations start from a particle model".into()));
    }
    base.validate()?;
    let name = if base.kind.is_lstm() { "PF-LSTM" } else { "PF-GRU" };
    let job = |label: String, spec: ModelSpec, config: TrainConfig| Job { label, spec, config };
    let mut jobs = Vec::with_capacity(10);
    for k in ABLATION_PARTICLES {
        let mut spec = base.clone();
        spec.cell.particles = k;
        jobs.push(job(format!("{name}-P{k}"), spec, config.clone()));
    }
    let mut spec = base.clone();
    spec.cell.resample = false;
    jobs.push(job(format!("{name}-NoResample"), spec, config.clone()));
    let mut spec = base.clone();
    spec.cell.bn_relu = false;
    jobs.push(job(format!("{name}-NoBNReLU"), spec, config.clone()));
    jobs.push(job(
        format!("{name}-NoELBO"),
        base.clone(),
        TrainConfig {
            beta: 0.0,
            pred_weight: 1.0,
            ..config.clone()
        },
    ));
    jobs.push(job(
        format!("{name}-ELBOonly"),
        base.clone(),
        TrainConfig {
            beta: 1.0,
            pred_weight: 0.0,
            ..config.clone()
        },
    ));
    let kind = if base.kind.is_lstm() { ModelKind::LstmBnRelu } else { ModelKind::GruBnRelu };
    let hidden = matching_hidden(base, kind)?;
    let baseline = ModelSpec {
        kind,
        hidden,
        ..base.clone()
    };
    let label = if base.kind.is_lstm() { "LSTM-BNReLU" } else { "GRU-BNReLU" };
    jobs.push(job(label.to_string(), baseline, config.clone()));
    Ok(jobs)
}

pub fn ablation_suite(base: &ModelSpec, config: &TrainConfig, data: &Dataset, workers: usize) -> Result<Vec<RunSummary>> {
    let jobs = ablation_variants(base, config)?;
    Ok(run_jobs(&jobs, data, workers, |_| {}))
}

pub fn write_csv<W: Write>(rows: &[RunSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
