//! The frozen reference model whose temporal attention drives segmentation.
//!
//! An LSTM with weights shared across variables runs along time for each
//! variable. Hidden states and raw inputs are projected, concatenated and
//! scored with `v·tanh(·)`, then softmaxed over time per variable. The task
//! head reads the attention-weighted sum of the input-side projection only,
//! so the prediction depends on where attention lands rather than on what the
//! recurrent state remembers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{AttentionMap, TimeSeries};
use crate::error::{ExcapError, Result};
use crate::nn::{Binder, Linear, Lstm, ParamStore};
use crate::objectives::{task_loss_batch, Target, Task};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Rows whose standard deviation falls below this are treated as constant.
pub const NORM_EPS: f64 = 1e-5;

/// Normalized values plus the per-variable statistics used.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Tensor,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Per-variable zero mean, unit (population) variance.
pub fn instance_normalize(x: &TimeSeries) -> Tensor {
    normalize_values(x.values()).values
}

pub fn normalize_values(x: &Tensor) -> Normalized {
    let (n, t) = x.shape();
    let mut values = Tensor::zeros(n, t);
    let mut mean = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let m = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64;
        let sd = var.sqrt();
        let s = if sd > NORM_EPS { sd } else { 1.0 };
        for (o, v) in values.row_mut(r).iter_mut().zip(row) {
            *o = if sd > NORM_EPS { (v - m) / s } else { 0.0 };
        }
        mean.push(m);
        scale.push(s);
    }
    Normalized { values, mean, scale }
}

/// The supervised target of one sequence. Forecasting targets with one value
/// per variable are expressed in that variable's normalized units.
pub fn target_for(x: &TimeSeries, task: Task, norm: &Normalized) -> Result<Target> {
    match task {
        Task::Classification { classes } => {
            let c = x
                .label
                .ok_or_else(|| ExcapError::config(format!("sequence {} has no label", x.id)))?;
            if c >= classes {
                return Err(ExcapError::config(format!(
                    "sequence {} has label {c} but the head has {classes} classes",
                    x.id
                )));
            }
            Ok(Target::Class(c))
        }
        Task::Regression { outputs } => {
            let y = x
                .targets
                .as_ref()
                .ok_or_else(|| ExcapError::config(format!("sequence {} has no targets", x.id)))?;
            if y.len() != outputs {
                return Err(ExcapError::config(format!(
                    "sequence {} has {} targets but the head has {outputs} outputs",
                    x.id,
                    y.len()
                )));
            }
            if outputs == norm.mean.len() {
                Ok(Target::Values(
                    y.iter()
                        .enumerate()
                        .map(|(i, v)| (v - norm.mean[i]) / norm.scale[i])
                        .collect(),
                ))
            } else {
                Ok(Target::Values(y.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub lstm_hidden: usize,
    /// Adds a backward LSTM so the score at `t` sees context on both sides.
    pub bidirectional: bool,
    pub projection_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            lstm_hidden: 8,
            bidirectional: true,
            projection_dim: 8,
            epochs: 30,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ReferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lstm_hidden == 0 || self.projection_dim == 0 || self.batch_size == 0 {
            return Err(ExcapError::config("reference sizes and batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(ExcapError::config("reference learning rate must be ≥ 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceModel {
    pub config: ReferenceConfig,
    pub n_vars: usize,
    pub task: Task,
    /// False until [`train_reference`] has run at least one epoch.
    pub trained: bool,
    store: ParamStore,
    lstm: Lstm,
    lstm_rev: Option<Lstm>,
    p_h: Linear,
    p_x: Linear,
    v: Linear,
    head: Linear,
}

impl ReferenceModel {
    /// Randomly initialised (untrained) model.
    pub fn new(n_vars: usize, task: Task, config: ReferenceConfig) -> Result<Self> {
        config.validate()?;
        if n_vars == 0 || task.outputs() == 0 {
            return Err(ExcapError::config("reference model needs N ≥ 1 and D ≥ 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let h = config.lstm_hidden;
        let p = config.projection_dim;
        let lstm = Lstm::new(&mut store, &mut rng, "ref.lstm", 1, h);
        let lstm_rev = config
            .bidirectional
            .then(|| Lstm::new(&mut store, &mut rng, "ref.lstm_rev", 1, h));
        let dirs = if config.bidirectional { 2 } else { 1 };
        let p_h = Linear::new(&mut store, &mut rng, "ref.p_h", dirs * h, p, false);
        let p_x = Linear::new(&mut store, &mut rng, "ref.p_x", 1, p, true);
        let v = Linear::new(&mut store, &mut rng, "ref.v", 2 * p, 1, false);
        let head = Linear::new(&mut store, &mut rng, "ref.head", n_vars * p, task.outputs(), true);
        Ok(Self {
            config,
            n_vars,
            task,
            trained: false,
            store,
            lstm,
            lstm_rev,
            p_h,
            p_x,
            v,
            head,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Attention `(B·N)×T` and task outputs `B×D` for normalized inputs.
    fn forward(&self, g: &mut Graph, p: &mut Binder, xs: &[&Tensor]) -> (Var, Var) {
        let b = xs.len();
        let n = self.n_vars;
        let t_len = xs[0].cols();
        let rows = b * n;
        let d = self.config.projection_dim;
        let mut stacked = Vec::with_capacity(t_len * rows);
        let steps: Vec<Var> = (0..t_len)
            .map(|t| {
                let col: Vec<f64> = xs.iter().flat_map(|x| (0..n).map(move |r| x.get(r, t))).collect();
                stacked.extend_from_slice(&col);
                g.constant(Tensor::col_vector(col))
            })
            .collect();
        let hs = self.lstm.run(g, p, &steps, false);
        let mut h_all = g.concat_rows(&hs);
        if let Some(rev) = &self.lstm_rev {
            let hr = rev.run(g, p, &steps, true);
            let hr = g.concat_rows(&hr);
            h_all = g.concat_cols(&[h_all, hr]);
        }
        let x_all = g.constant(Tensor::col_vector(stacked));
        let ph = self.p_h.forward(g, p, h_all);
        let ph = g.tanh(ph);
        let px = self.p_x.forward(g, p, x_all);
        let px = g.tanh(px);
        let joint = g.concat_cols(&[ph, px]);
        let e = self.v.forward(g, p, joint);
        let e = g.reshape(e, t_len, rows);
        let e = g.transpose(e);
        let attn = g.softmax_rows(e);

        let a_t = g.transpose(attn);
        let a_col = g.reshape(a_t, t_len * rows, 1);
        let weighted = g.mul_col(px, a_col);
        let weighted = g.reshape(weighted, t_len, rows * d);
        let pooled = g.sum_rows(weighted);
        let pooled = g.reshape(pooled, b, n * d);
        let out = self.head.forward(g, p, pooled);
        (attn, out)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rows() != self.n_vars {
            return Err(ExcapError::dim(format!(
                "reference model expects {} variables, input has {}",
                self.n_vars,
                x.rows()
            )));
        }
        if x.cols() < 2 {
            return Err(ExcapError::dim("reference model needs T ≥ 2"));
        }
        Ok(())
    }

    /// Attention for an already normalized `N×T` matrix.
    pub fn attention_normalized(&self, x: &Tensor) -> Result<AttentionMap> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store);
        let (attn, _) = self.forward(&mut g, &mut p, &[x]);
        AttentionMap::new(g.value(attn).clone())
    }

    /// Task outputs (logits or normalized forecasts) for a normalized input.
    pub fn predict_normalized(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let mut p = Binder::new(&self.store);
        let (_, out) = self.forward(&mut g, &mut p, &[x]);
        Ok(g.value(out).data().to_vec())
    }
}

/// Normalizes `x` and returns its attention map.
pub fn compute_attention(x: &TimeSeries, model: &ReferenceModel) -> Result<AttentionMap> {
    model.attention_normalized(&instance_normalize(x))
}

/// Fits a reference model on the task labels. Returns the model and the
/// mean training loss of each epoch.
pub fn train_reference(data: &[TimeSeries], task: Task, config: ReferenceConfig) -> Result<(ReferenceModel, Vec<f64>)> {
    let first = data.first().ok_or_else(|| ExcapError::config("no training sequences"))?;
    let mut model = ReferenceModel::new(first.n_vars(), task, config)?;
    let mut inputs = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for x in data {
        model.check_input(x.values())?;
        if x.len() != first.len() {
            return Err(ExcapError::dim("reference training needs equal-length sequences"));
        }
        let norm = normalize_values(x.values());
        targets.push(target_for(x, task, &norm)?);
        inputs.push(norm.values);
    }

    let mut opt = Adam::new(config.learning_rate, Some(5.0), &model.store);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let xs: Vec<&Tensor> = batch.iter().map(|&i| &inputs[i]).collect();
            let ys: Vec<Target> = batch.iter().map(|&i| targets[i].clone()).collect();
            let mut g = Graph::new();
            let mut p = Binder::new(&model.store);
            let (_, out) = model.forward(&mut g, &mut p, &xs);
            let loss = task_loss_batch(&mut g, out, &ys);
            let lv = g.scalar(loss);
            if !lv.is_finite() || lv > 1e6 {
                return Err(ExcapError::Divergence(format!(
                    "reference loss {lv} at epoch {epoch}; lower the learning rate"
                )));
            }
            total += lv * batch.len() as f64;
            let mut grads = g.backward(loss);
            let grads = p.gradients(&mut grads);
            opt.step(&mut model.store, &grads);
        }
        trace.push(total / data.len() as f64);
        model.trained = true;
    }
    Ok((model, trace))
}
