//! Table-style evaluation on synthetic data: the hidden model and the two
//! observation-space baselines predict a held-out bag, and each prediction
//! is scored by exact W1 against the samples that were not retained.
//!
//! Filtering sees only the bags before the target; smoothing sees every bag
//! except the target. No model, head or baseline is trained on the target.

use std::fmt;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::Matrix;
use crate::data::{empirical_batch, gen_synthetic, AggregateSeries, DataError, SyntheticKind, SyntheticSpec};
use crate::infer::{self, InferError};
use crate::learn::{self, BaselineKind, LearnError, ObservationModel, TrainConfig};
use crate::ot::{self, OtError};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("target {target} is not usable for {task}: {reason}")]
    Target { target: usize, task: Task, reason: String },
    #[error("synthetic data has no held-out samples")]
    NoHeldOut,
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Infer(#[from] InferError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ot(#[from] OtError),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Filter,
    Smooth,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Filter => "filtering",
            Task::Smooth => "smoothing",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Legend,
    Ou,
    Nn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Legend => "LEGEND",
            Method::Ou => "OU",
            Method::Nn => "NN",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<BaselineKind> for Method {
    fn from(kind: BaselineKind) -> Self {
        match kind {
            BaselineKind::Ou => Method::Ou,
            BaselineKind::Nn => Method::Nn,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub dataset: String,
    pub task: Task,
    pub dim: usize,
    pub method: Method,
    pub target: usize,
    pub error: f64,
    pub seed: u64,
    /// Seconds; reported but kept out of the CSV so reruns compare equal.
    pub wall_time: f64,
}

impl EvalRecord {
    pub const CSV_HEADER: &'static str = "dataset,task,dim,method,target,w1,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.dataset, self.task, self.dim, self.method, self.target, self.error, self.seed
        )
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: SyntheticKind,
    pub dim: usize,
    pub seed: u64,
    pub target: usize,
    pub dynamics: TrainConfig,
    pub heads: TrainConfig,
    pub baselines: TrainConfig,
}

impl ExperimentConfig {
    /// Model noise and initial law follow the generating process; training
    /// budgets are sized for a laptop.
    pub fn new(kind: SyntheticKind, dim: usize, seed: u64) -> Result<Self> {
        let spec = SyntheticSpec::new(kind, dim);
        let dynamics = TrainConfig {
            iterations: 2000,
            seed,
            sigma_root: Some(spec.model_sigma_root()?),
            initial: Some(spec.initial()?),
            dt: spec.dt,
            substeps_per_obs: spec.substeps,
            ..TrainConfig::default()
        };
        Ok(Self {
            kind,
            dim,
            seed,
            target: 2,
            heads: TrainConfig {
                iterations: 1000,
                learning_rate: 1e-4,
                ..dynamics.clone()
            },
            baselines: dynamics.clone(),
            dynamics,
        })
    }

    pub fn spec(&self) -> SyntheticSpec {
        SyntheticSpec::new(self.kind, self.dim)
    }

    fn record(&self, task: Task, method: Method, error: f64, wall_time: f64) -> EvalRecord {
        EvalRecord {
            dataset: self.kind.to_string(),
            task,
            dim: self.dim,
            method,
            target: self.target,
            error,
            seed: self.seed,
            wall_time,
        }
    }
}

/// Bags strictly before `target`.
pub fn filtering_split(observed: &AggregateSeries, target: usize) -> Result<AggregateSeries> {
    if target == 0 || !observed.contains(target - 1) {
        return Err(ExperimentError::Target {
            target,
            task: Task::Filter,
            reason: "no observed bag before it".into(),
        });
    }
    Ok(observed.prefix(target - 1)?)
}

/// Every bag except `target`, which must be interior.
pub fn smoothing_split(observed: &AggregateSeries, target: usize) -> Result<AggregateSeries> {
    if target <= observed.first_time() || target >= observed.last_time() || !observed.contains(target - 1) {
        return Err(ExperimentError::Target {
            target,
            task: Task::Smooth,
            reason: "needs observed bags before and after it".into(),
        });
    }
    Ok(observed.without(target)?)
}

/// Baseline prediction: the observed bag at `from`, advanced `gaps` gaps.
pub fn baseline_prediction(
    model: &ObservationModel,
    observations: &AggregateSeries,
    from: usize,
    gaps: usize,
    num_samples: usize,
    rng: &Rng,
) -> Result<Matrix> {
    let start = empirical_batch(observations, from, num_samples, &rng.child(0))?;
    Ok(model.propagate(&start, gaps, &rng.child(1))?)
}

struct Prepared {
    train: AggregateSeries,
    truth: Matrix,
    samples: usize,
}

fn prepare(cfg: &ExperimentConfig, task: Task) -> Result<Prepared> {
    let data = gen_synthetic(&cfg.spec(), cfg.seed)?;
    let held = data.held_out.ok_or(ExperimentError::NoHeldOut)?;
    let truth = held.get(cfg.target)?.clone();
    let train = match task {
        Task::Filter => filtering_split(&data.observed, cfg.target)?,
        Task::Smooth => smoothing_split(&data.observed, cfg.target)?,
    };
    let samples = truth.nrows().min(train.get(cfg.target - 1)?.nrows());
    let truth = truth.slice(ndarray::s![0..samples, ..]).to_owned();
    Ok(Prepared { train, truth, samples })
}

fn score(prediction: &Matrix, truth: &Matrix) -> Result<f64> {
    Ok(ot::w1_exact(prediction, truth)?.0)
}

fn baselines(cfg: &ExperimentConfig, task: Task, prep: &Prepared) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for kind in [BaselineKind::Ou, BaselineKind::Nn] {
        let start = Instant::now();
        let (model, _) = learn::train_baseline(&prep.train, kind, &cfg.baselines)?;
        let pred = baseline_prediction(&model, &prep.train, cfg.target - 1, 1, prep.samples, &Rng::new(cfg.seed).child(40))?;
        out.push(cfg.record(task, kind.into(), score(&pred, &prep.truth)?, start.elapsed().as_secs_f64()));
    }
    Ok(out)
}

/// Filtering: predict `Y_target` from the bags before it.
pub fn run_filtering(cfg: &ExperimentConfig) -> Result<Vec<EvalRecord>> {
    let prep = prepare(cfg, Task::Filter)?;
    let start = Instant::now();
    let (model, _, _) = learn::train_dynamics(&prep.train, &cfg.dynamics)?;
    let (head, _) = infer::train_filter(&model, &prep.train, &cfg.heads)?;
    let pred = infer::predict_next(&model, &head, &prep.train, prep.samples, &Rng::new(cfg.seed).child(41))?;
    let mut out = vec![cfg.record(Task::Filter, Method::Legend, score(&pred, &prep.truth)?, start.elapsed().as_secs_f64())];
    out.extend(baselines(cfg, Task::Filter, &prep)?);
    Ok(out)
}

/// Smoothing: predict the missing `Y_target` from every other bag.
pub fn run_smoothing(cfg: &ExperimentConfig) -> Result<Vec<EvalRecord>> {
    let prep = prepare(cfg, Task::Smooth)?;
    let start = Instant::now();
    let (model, _, _) = learn::train_dynamics(&prep.train, &cfg.dynamics)?;
    let (fwd, _) = infer::train_filter(&model, &prep.train, &cfg.heads)?;
    let (bwd, _) = infer::train_backward(&model, &prep.train, &cfg.heads)?;
    let (smooth, _) = infer::train_smoother(&model, &prep.train, &fwd, &bwd, &cfg.heads)?;
    let pred = infer::predict_missing(&model, &smooth, &prep.train, cfg.target, prep.samples, &Rng::new(cfg.seed).child(42))?;
    let mut out = vec![cfg.record(Task::Smooth, Method::Legend, score(&pred, &prep.truth)?, start.elapsed().as_secs_f64())];
    out.extend(baselines(cfg, Task::Smooth, &prep)?);
    Ok(out)
}

/// Median of a nonempty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series() -> AggregateSeries {
        let rng = Rng::new(0);
        AggregateSeries::new(
            vec![0, 1, 2, 3],
            (0..4).map(|t| rng.child(t).normal_matrix(10, 2)).collect(),
            "s",
        )
        .unwrap()
    }

    #[test]
    fn splits_drop_the_target() {
        let s = series();
        assert_eq!(filtering_split(&s, 2).unwrap().times(), &[0, 1]);
        assert_eq!(smoothing_split(&s, 2).unwrap().times(), &[0, 1, 3]);
        assert!(filtering_split(&s, 0).is_err());
        assert!(smoothing_split(&s, 0).is_err());
        assert!(smoothing_split(&s, 3).is_err());
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn record_row_matches_header() {
        let cfg = ExperimentConfig::new(SyntheticKind::Syn1, 2, 7).unwrap();
        let row = cfg.record(Task::Smooth, Method::Nn, 0.25, 1.0).csv_row();
        assert_eq!(row, "syn1,smoothing,2,NN,2,0.25,7");
        assert_eq!(row.split(',').count(), EvalRecord::CSV_HEADER.split(',').count());
    }
}
