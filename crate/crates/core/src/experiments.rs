//! Ready-made synthetic tasks and a one-call fitting routine shared by the
//! CLI and the integration tests.

use serde::{Deserialize, Serialize};

use crate::data::{CausalMask, TimeSeries};
use crate::error::{ExcapError, Result};
use crate::model::{ExcapConfig, ExcapModel, Pipeline, Prepared};
use crate::objectives::Task;
use crate::reference::{train_reference, ReferenceConfig};
use crate::scm::{ClassRule, Link, Motif, MotifShape, ScmSpec, ScmTask};
use crate::trainer::{train, TrainConfig, TrainState};

/// Binary motif classification: class 1 carries one sine period in variable 0
/// on top of a noisy lag-1 chain `x_0 → x_1 → x_2`. The period sums to zero,
/// so instance normalization does not leak the label through the row mean.
pub fn motif_spec(n: usize, t: usize) -> ScmSpec {
    let start = 3 * t / 8;
    let end = start + (t / 10).max(2);
    ScmSpec {
        n,
        t,
        adjacency: chain_adjacency(n),
        noise_std: 0.5,
        link: Link::Linear,
        motif: Some(Motif {
            start,
            end,
            amplitude: 3.0,
            variables: vec![0],
            class_rule: ClassRule::Presence,
            shape: MotifShape::FullSine,
        }),
        task: ScmTask::Classification,
        sampling_rate_hz: 1.0,
        burn_in: 50,
    }
}

/// One-step forecasting on a lag-1 linear SCM with the given adjacency.
pub fn forecast_spec(adjacency: Vec<Vec<bool>>, t: usize) -> ScmSpec {
    ScmSpec {
        n: adjacency.len(),
        t,
        adjacency,
        noise_std: 0.3,
        link: Link::Linear,
        motif: None,
        task: ScmTask::Forecasting,
        sampling_rate_hz: 1.0,
        burn_in: 50,
    }
}

/// Budget used for the motif task: 30 reference epochs, 10 EXCAP epochs.
pub fn motif_fit_config(seed: u64) -> FitConfig {
    let mut cfg = FitConfig::default();
    cfg.reference.seed = seed;
    cfg.model.seed = seed;
    cfg.train.epochs = 10;
    cfg.train.learning_rate = 0.01;
    cfg.train.seed = seed;
    cfg
}

/// Budget used for the forecasting task.
pub fn forecast_fit_config(seed: u64) -> FitConfig {
    let mut cfg = motif_fit_config(seed);
    cfg.reference.epochs = 10;
    cfg.train.epochs = 20;
    cfg
}

/// Self-loops plus `x_{i-1} → x_i`.
pub fn chain_adjacency(n: usize) -> Vec<Vec<bool>> {
    (0..n).map(|i| (0..n).map(|j| j == i || j + 1 == i).collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FitConfig {
    pub reference: ReferenceConfig,
    pub model: ExcapConfig,
    pub train: TrainConfig,
}

pub struct Fitted {
    pub pipeline: Pipeline,
    pub state: TrainState,
    pub train: Vec<Prepared>,
    /// Mean loss of the reference model per epoch.
    pub reference_trace: Vec<f64>,
}

/// Trains the reference model, prepares the data and trains EXCAP under `mask`.
pub fn fit(data: &[TimeSeries], task: Task, mask: CausalMask, cfg: &FitConfig) -> Result<Fitted> {
    let first = data.first().ok_or_else(|| ExcapError::config("no training data"))?;
    let (reference, reference_trace) = train_reference(data, task, cfg.reference)?;
    let model = ExcapModel::new(first.n_vars(), task, mask, cfg.model.clone())?;
    let mut pipeline = Pipeline::new(reference, model)?;
    let train_data = pipeline.prepare_all(data)?;
    let state = train(&mut pipeline.model, &train_data, &cfg.train)?;
    Ok(Fitted {
        pipeline,
        state,
        train: train_data,
        reference_trace,
    })
}

/// Refits only the EXCAP model on already prepared data, reusing a trained
/// reference model.
pub fn refit(base: &Pipeline, data: &[Prepared], mask: CausalMask, cfg: &FitConfig) -> Result<(Pipeline, TrainState)> {
    let model = ExcapModel::new(base.model.n_vars, base.model.task, mask, cfg.model.clone())?;
    let mut pipeline = Pipeline::new(base.reference.clone(), model)?;
    let state = train(&mut pipeline.model, data, &cfg.train)?;
    Ok((pipeline, state))
}
