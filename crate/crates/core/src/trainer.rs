//! Minibatch training of the EXCAP model with the staged loss schedule.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::decoder::aggregate_saliency_graph;
use crate::error::{ExcapError, Result};
use crate::model::{ExcapModel, Pipeline, Prepared};
use crate::nn::Binder;
use crate::objectives::{
    attention_weights, clustering_loss_graph, separation_loss_graph, staged_schedule, task_loss_graph, LossParts,
    LossWeights, SeparationMode,
};
use crate::optim::{Sgd, SgdConfig};
use crate::tensor::Tensor;

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    /// `None` uses the staged default schedule for `epochs`.
    pub loss: Option<LossWeights>,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            momentum: 0.9,
            clip_norm: Some(5.0),
            loss: None,
            ema_decay: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        self.loss.clone().unwrap_or_else(|| LossWeights::staged(self.epochs))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ExcapError::config("batch_size must be ≥ 1"));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(ExcapError::config("learning_rate must be ≥ 0 and momentum in [0,1)"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(ExcapError::config("ema_decay must lie in [0,1)"));
        }
        self.weights().validate()
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weights().weight_decay,
            clip_norm: self.clip_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub task: f64,
    pub dist: f64,
    pub clus: f64,
    pub total: f64,
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub optimizer: Sgd,
    /// EMA prototypes (high, low), `N×d_z` each.
    pub prototypes: Option<(Tensor, Tensor)>,
    pub trace: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: &ExcapModel, cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            optimizer: Sgd::new(cfg.sgd(), model.params()),
            prototypes: None,
            trace: Vec::new(),
        }
    }
}

/// Loss value, gradients and live group means of one minibatch.
pub struct BatchOutcome {
    pub parts: LossParts,
    pub total: f64,
    pub grads: Vec<Option<Tensor>>,
    pub high_mean: Option<Tensor>,
    pub low_mean: Option<Tensor>,
}

fn mean_of(g: &mut Graph, vs: &[Var]) -> Option<Var> {
    let (&first, rest) = vs.split_first()?;
    let mut s = first;
    for &v in rest {
        s = g.add(s, v);
    }
    Some(g.scale(s, 1.0 / vs.len() as f64))
}

/// Evaluates `α·L_task + β·L_dist + γ·L_clus` on a batch and differentiates it.
///
/// Samples lacking a salient or a background segment do not enter `L_dist`.
/// `L_clus` acts on the batch means of the aggregated embeddings, with
/// weights averaged from each sample's attention profiles. `prototype_low`
/// anchors the triplet mode; without it the detached batch mean is used.
pub fn batch_objective(
    model: &ExcapModel,
    batch: &[&Prepared],
    (alpha, beta, gamma): (f64, f64, f64),
    loss: &LossWeights,
    prototype_low: Option<&Tensor>,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(ExcapError::config("empty batch"));
    }
    let mut g = Graph::new();
    let mut p = Binder::new(model.params());
    let mut task_terms = Vec::with_capacity(batch.len());
    let mut highs = Vec::new();
    let mut lows = Vec::new();
    let mut pairs = Vec::new();
    let n = model.n_vars;
    let mut w = Tensor::zeros(n, n);
    for s in batch {
        let target = s
            .target
            .as_ref()
            .ok_or_else(|| ExcapError::config(format!("sample {} has no label or target", s.id)))?;
        let x = g.constant(s.x.clone());
        let global = g.constant(s.global.clone());
        let f = model.forward(&mut g, &mut p, x, global, &s.segments.boundaries, &model.mask)?;
        task_terms.push(task_loss_graph(&mut g, f.pred, target));
        let (hh, hl) = aggregate_saliency_graph(&mut g, &f.z, &s.segments.saliency_flags);
        if let Some(h) = hh {
            highs.push(h);
        }
        if let Some(l) = hl {
            lows.push(l);
        }
        if let (Some(h), Some(l)) = (hh, hl) {
            pairs.push((h, l));
        }
        w.add_assign(&attention_weights(s.attention.scores()));
    }
    w.scale_assign(1.0 / batch.len() as f64);

    let task = mean_of(&mut g, &task_terms).expect("nonempty batch");
    let high_mean = mean_of(&mut g, &highs);
    let low_mean = mean_of(&mut g, &lows);

    let anchor = match (loss.separation_mode, prototype_low, low_mean) {
        (SeparationMode::Triplet, Some(c), _) => Some(g.constant(c.clone())),
        (SeparationMode::Triplet, None, Some(l)) => Some(g.constant(g.value(l).clone())),
        (SeparationMode::Triplet, None, None) => Some(g.constant(Tensor::zeros(n, model.d_z()))),
        _ => None,
    };
    let mut dist_terms = Vec::with_capacity(pairs.len());
    for &(h, l) in &pairs {
        dist_terms.push(separation_loss_graph(&mut g, h, l, loss.delta, loss.separation_mode, anchor)?);
    }
    let dist = mean_of(&mut g, &dist_terms);

    let mut groups = Vec::new();
    if let Some(c) = high_mean {
        groups.push((c, &w));
    }
    if let Some(c) = low_mean {
        groups.push((c, &w));
    }
    let clus = (!groups.is_empty()).then(|| clustering_loss_graph(&mut g, &groups));

    let mut total = g.scale(task, alpha);
    if let Some(d) = dist {
        let d = g.scale(d, beta);
        total = g.add(total, d);
    }
    if let Some(c) = clus {
        let c = g.scale(c, gamma);
        total = g.add(total, c);
    }

    let parts = LossParts {
        task: g.scalar(task),
        dist: dist.map_or(0.0, |v| g.scalar(v)),
        clus: clus.map_or(0.0, |v| g.scalar(v)),
    };
    let total_value = g.scalar(total);
    if !total_value.is_finite() || total_value.abs() > DIVERGENCE_LIMIT {
        return Err(ExcapError::Divergence(format!(
            "batch loss {total_value} (task {}, dist {}, clus {})",
            parts.task, parts.dist, parts.clus
        )));
    }
    let mut grads = g.backward(total);
    let grads = p.gradients(&mut grads);
    Ok(BatchOutcome {
        parts,
        total: total_value,
        grads,
        high_mean: high_mean.map(|v| g.value(v).clone()),
        low_mean: low_mean.map(|v| g.value(v).clone()),
    })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn ema(slot: &mut Option<Tensor>, batch: Option<Tensor>, decay: f64) {
    let Some(b) = batch else { return };
    match slot {
        Some(e) => {
            e.scale_assign(decay);
            let mut b = b;
            b.scale_assign(1.0 - decay);
            e.add_assign(&b);
        }
        None => *slot = Some(b),
    }
}

/// Runs epochs `state.epoch..until` (capped at `cfg.epochs`).
pub fn train_until(
    model: &mut ExcapModel,
    data: &[Prepared],
    cfg: &TrainConfig,
    state: &mut TrainState,
    until: usize,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ExcapError::config("no training data"));
    }
    let weights = cfg.weights();
    let until = until.min(cfg.epochs);
    while state.epoch < until {
        let epoch = state.epoch;
        let (alpha, beta, gamma) = staged_schedule(epoch, &weights);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut sums = [0.0; 4];
        let (mut ph, mut pl) = match state.prototypes.take() {
            Some((h, l)) => (Some(h), Some(l)),
            None => (None, None),
        };
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let out = batch_objective(model, &batch, (alpha, beta, gamma), &weights, pl.as_ref())
                .map_err(|e| match e {
                    ExcapError::Divergence(m) => ExcapError::Divergence(format!("epoch {epoch}: {m}")),
                    other => other,
                })?;
            state.optimizer.step(model.params_mut(), &out.grads);
            if !model.params().all_finite() {
                return Err(ExcapError::Divergence(format!("epoch {epoch}: non-finite parameters")));
            }
            ema(&mut ph, out.high_mean, cfg.ema_decay);
            ema(&mut pl, out.low_mean, cfg.ema_decay);
            let b = batch.len() as f64;
            sums[0] += b * out.parts.task;
            sums[1] += b * out.parts.dist;
            sums[2] += b * out.parts.clus;
            sums[3] += b * out.total;
        }
        let m = data.len() as f64;
        let d_z = model.d_z();
        let n = model.n_vars;
        state.prototypes = match (ph, pl) {
            (None, None) => None,
            (h, l) => Some((
                h.unwrap_or_else(|| Tensor::zeros(n, d_z)),
                l.unwrap_or_else(|| Tensor::zeros(n, d_z)),
            )),
        };
        state.trace.push(EpochRecord {
            epoch,
            alpha,
            beta,
            gamma,
            task: sums[0] / m,
            dist: sums[1] / m,
            clus: sums[2] / m,
            total: sums[3] / m,
        });
        state.epoch += 1;
    }
    Ok(())
}

/// Full run from scratch.
pub fn train(model: &mut ExcapModel, data: &[Prepared], cfg: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(model, cfg);
    train_until(model, data, cfg, &mut state, cfg.epochs)?;
    Ok(state)
}

/// Mean Frobenius distance between salient and background aggregates over
/// samples that have both.
pub fn separation_statistic(pipeline: &Pipeline, data: &[Prepared]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in data {
        let mut g = Graph::new();
        let mut p = Binder::new(pipeline.model.params());
        let x = g.constant(s.x.clone());
        let global = g.constant(s.global.clone());
        let f = pipeline
            .model
            .forward(&mut g, &mut p, x, global, &s.segments.boundaries, &pipeline.model.mask)?;
        if let (Some(h), Some(l)) = aggregate_saliency_graph(&mut g, &f.z, &s.segments.saliency_flags) {
            let d = g.sub(h, l);
            sum += g.value(d).sq_norm().sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(ExcapError::Undefined("no sample has both salient and background segments".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub pipeline: Pipeline,
    pub train: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(f)?)
    }
}

pub fn write_trace_csv(trace: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
