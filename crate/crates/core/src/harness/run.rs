use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::report::RunReport;
use super::{theta_error, ExperimentConfig};
use crate::data::{generate, Dataset, DatasetTriple};
use crate::hybrid::{hybrid_predict, HybridModel};
use crate::nn::ParamVector;
use crate::optim::{AdamState, BatchMode, Method, StepMetrics, Trainer};
use crate::{rng, Error, Result};

pub type CurvePoint = StepMetrics;

/// One (method, hyperparameter, seed) cell of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hyper: Option<f64>,
    pub seed: u64,
}

impl CellId {
    pub fn label(&self) -> String {
        match (self.hyper, self.method.hyper_name()) {
            (Some(h), Some(n)) => format!("{}-{n}{h}-seed{}", self.method, self.seed),
            _ => format!("{}-seed{}", self.method, self.seed),
        }
    }
}

/// Outcome of one cell. Metric fields are `None` when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hyper: Option<f64>,
    pub seed: u64,
    pub theta_init: Vec<f64>,
    pub theta: Vec<f64>,
    pub theta_rmse: Option<f64>,
    pub test_y_rmse: Option<f64>,
    pub val_y_rmse: Option<f64>,
    pub val_loss: Option<f64>,
    pub train_loss: Option<f64>,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub failed: Option<String>,
    pub curve: Vec<CurvePoint>,
    /// Not serialised.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl CellRecord {
    pub fn id(&self) -> CellId {
        CellId {
            method: self.method,
            hyper: self.hyper,
            seed: self.seed,
        }
    }

    pub fn ok(&self) -> bool {
        self.failed.is_none()
    }
}

/// Resumable training state of a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub id: CellId,
    pub iteration: usize,
    pub theta_init: Vec<f64>,
    pub params: ParamVector,
    pub adam: AdamState,
    pub curve: Vec<CurvePoint>,
}

impl CellState {
    pub fn init(cfg: &ExperimentConfig, id: CellId) -> Result<Self> {
        let params = cfg.model.init_params(&cfg.theta_init, id.seed)?;
        let n = params.theta().len() + params.phi().len();
        Ok(CellState {
            id,
            iteration: 0,
            theta_init: params.theta().to_vec(),
            params,
            adam: AdamState::new(n),
            curve: Vec::new(),
        })
    }
}

/// Where and how often a cell writes checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointPlan {
    pub path: PathBuf,
    /// Save every `every` iterations (0: only when stopping).
    pub every: usize,
}

pub(crate) fn trainer(cfg: &ExperimentConfig, id: CellId) -> Result<Trainer> {
    let (reg, sam) = id.method.configure(id.hyper, cfg.fisher_damping)?;
    let mut t = Trainer::new(cfg.model.clone(), cfg.optimizer.clone(), reg, sam)?;
    t.reduction = cfg.reduction.clone();
    Ok(t)
}

fn is_run_failure(e: &Error) -> bool {
    !matches!(e, Error::Config(_) | Error::Layout(_) | Error::UnknownParam(_) | Error::Io { .. })
}

fn batch(cfg: &ExperimentConfig, train: &Dataset, seed: u64, iteration: usize) -> Option<(crate::Tensor, crate::Tensor)> {
    match cfg.optimizer.batch {
        BatchMode::Full => None,
        BatchMode::Minibatch { size } if size >= train.len() => None,
        BatchMode::Minibatch { size } => {
            let mut r = rng::stream(seed, "minibatch", iteration as u64);
            let idx = rand::seq::index::sample(&mut r, train.len(), size).into_vec();
            Some(train.select(&idx))
        }
    }
}

/// Trains `state` up to iteration `until` (capped at the configured count).
/// A failing step leaves `state` at the last good iterate and returns the
/// error.
pub fn advance(
    cfg: &ExperimentConfig,
    data: &DatasetTriple,
    state: &mut CellState,
    until: usize,
    plan: Option<&CheckpointPlan>,
) -> Result<()> {
    let t = trainer(cfg, state.id)?;
    let until = until.min(cfg.optimizer.iterations);
    let last = cfg.optimizer.iterations - 1;
    while state.iteration < until {
        let i = state.iteration;
        let mb = batch(cfg, &data.train, state.id.seed, i);
        let (x, y) = match &mb {
            Some((x, y)) => (x, y),
            None => (&data.train.x, &data.train.y),
        };
        let mut params = state.params.clone();
        let mut adam = state.adam.clone();
        let m = t.step(&mut params, &mut adam, x, y, i)?;
        state.params = params;
        state.adam = adam;
        state.iteration += 1;
        if i % cfg.log_interval == 0 || i == last {
            state.curve.push(m);
        }
        if let Some(p) = plan {
            if p.every > 0 && state.iteration % p.every == 0 {
                save_checkpoint(&p.path, &Checkpoint::from_state(cfg, state))?;
            }
        }
    }
    Ok(())
}

/// Test y-RMSE and loss of `pv` on `ds`.
pub fn test_metrics(model: &HybridModel, pv: &ParamVector, ds: &Dataset) -> Result<(f64, f64)> {
    let pred = hybrid_predict(model, pv, &ds.x)?;
    let sq: f64 = pred.data().iter().zip(ds.y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let n = ds.y.data().len().max(1) as f64;
    let batch = ds.len().max(1) as f64;
    Ok(((sq / n).sqrt(), sq / batch))
}

/// Evaluates a finished (or failed) state into a record.
pub fn finish(
    cfg: &ExperimentConfig,
    data: &DatasetTriple,
    state: &CellState,
    failure: Option<String>,
    wall_time_s: f64,
) -> Result<CellRecord> {
    let truth = cfg.task.params.theta();
    let theta = state.params.theta().to_vec();
    let mut rec = CellRecord {
        method: state.id.method,
        hyper: state.id.hyper,
        seed: state.id.seed,
        theta_init: state.theta_init.clone(),
        theta: theta.clone(),
        theta_rmse: None,
        test_y_rmse: None,
        val_y_rmse: None,
        val_loss: None,
        train_loss: None,
        iterations: state.iteration,
        failed: failure,
        curve: state.curve.clone(),
        wall_time_s,
    };
    if rec.failed.is_some() {
        return Ok(rec);
    }
    let metrics = (|| -> Result<_> {
        let test = test_metrics(&cfg.model, &state.params, &data.test)?;
        let val = test_metrics(&cfg.model, &state.params, &data.val)?;
        let train = test_metrics(&cfg.model, &state.params, &data.train)?;
        Ok((test, val, train))
    })();
    match metrics {
        Ok((test, val, train)) if [test.0, val.0, train.1].iter().all(|v| v.is_finite()) => {
            rec.theta_rmse = Some(theta_error(&theta, &truth)?);
            rec.test_y_rmse = Some(test.0);
            rec.val_y_rmse = Some(val.0);
            rec.val_loss = Some(val.1);
            rec.train_loss = Some(train.1);
        }
        Ok(_) => rec.failed = Some("non-finite evaluation metrics".into()),
        Err(e) if is_run_failure(&e) => rec.failed = Some(e.to_string()),
        Err(e) => return Err(e),
    }
    Ok(rec)
}

/// Continues `state` to the configured iteration count and evaluates it.
/// Training failures are recorded in the returned record.
pub fn complete(
    cfg: &ExperimentConfig,
    data: &DatasetTriple,
    mut state: CellState,
    plan: Option<&CheckpointPlan>,
) -> Result<CellRecord> {
    let t0 = Instant::now();
    let failure = match advance(cfg, data, &mut state, cfg.optimizer.iterations, plan) {
        Ok(()) => None,
        Err(e) if is_run_failure(&e) => {
            log::warn!("{} failed: {e}", state.id.label());
            Some(e.to_string())
        }
        Err(e) => return Err(e),
    };
    finish(cfg, data, &state, failure, t0.elapsed().as_secs_f64())
}

pub fn run_cell(cfg: &ExperimentConfig, data: &DatasetTriple, id: CellId) -> Result<CellRecord> {
    complete(cfg, data, CellState::init(cfg, id)?, None)
}

/// Generates the datasets and runs every cell on `jobs` worker threads.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: usize) -> Result<RunReport> {
    cfg.validate()?;
    let data = generate(&cfg.task, cfg.data_seed, cfg.noise_seed)?;
    run_experiment_with_data(cfg, &data, jobs)
}

pub fn run_experiment_with_data(cfg: &ExperimentConfig, data: &DatasetTriple, jobs: usize) -> Result<RunReport> {
    cfg.validate()?;
    for ds in [&data.train, &data.val, &data.test] {
        if ds.spec != cfg.task {
            return Err(Error::config(format!(
                "{} dataset was generated from a different task spec",
                ds.split.name()
            )));
        }
    }
    let cells = cfg.cells();
    log::info!("{}: {} cells on {} worker(s)", cfg.name, cells.len(), jobs.max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot build worker pool: {e}")))?;
    let records = pool.install(|| {
        cells
            .par_iter()
            .map(|&id| {
                let r = run_cell(cfg, data, id);
                if let Ok(r) = &r {
                    log::info!(
                        "{}: θ = {:?}, θ-RMSE {:?}, {:.1}s",
                        id.label(),
                        r.theta,
                        r.theta_rmse,
                        r.wall_time_s
                    );
                }
                r
            })
            .collect::<Result<Vec<_>>>()
    })?;
    RunReport::assemble(cfg, data, records)
}
