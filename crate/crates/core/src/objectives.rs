//! Task losses, latent separation and clustering losses, the weighted total
//! objective and the staged weight schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{ExcapError, Result};
use crate::tensor::Tensor;

/// Guard for `log` of probabilities.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// Per-sequence labels; one decoder branch per class.
    Classification { classes: usize },
    /// One regression target per output.
    Regression { outputs: usize },
}

impl Task {
    pub fn outputs(&self) -> usize {
        match *self {
            Task::Classification { classes } => classes,
            Task::Regression { outputs } => outputs,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

/// `−(1/D) Σ y_j log softmax(ŷ)_j` for classification, `(1/D) Σ (ŷ_j − y_j)²`
/// for regression.
pub fn task_loss(predictions: &[f64], target: &Target) -> Result<f64> {
    let d = predictions.len() as f64;
    match target {
        Target::Class(c) => {
            if *c >= predictions.len() {
                return Err(ExcapError::dim(format!("class {c} out of range for {} outputs", predictions.len())));
            }
            let mut p = predictions.to_vec();
            crate::autodiff::softmax_in_place(&mut p);
            Ok(-p[*c].max(LOG_EPS).ln() / d)
        }
        Target::Values(y) => {
            if y.len() != predictions.len() {
                return Err(ExcapError::dim(format!("{} targets for {} outputs", y.len(), predictions.len())));
            }
            Ok(predictions.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d)
        }
    }
}

/// Graph version of [`task_loss`] for a `1×D` prediction row.
pub fn task_loss_graph(g: &mut Graph, pred: Var, target: &Target) -> Var {
    let d = g.shape(pred).1;
    match target {
        Target::Class(c) => {
            let logp = g.log_softmax_rows(pred);
            let mut onehot = Tensor::zeros(1, d);
            onehot.data_mut()[*c] = 1.0;
            let y = g.constant(onehot);
            let picked = g.mul(logp, y);
            let s = g.sum(picked);
            g.scale(s, -1.0 / d as f64)
        }
        Target::Values(y) => {
            let y = g.constant(Tensor::row_vector(y.clone()));
            let diff = g.sub(pred, y);
            let sq = g.square(diff);
            g.mean(sq)
        }
    }
}

/// Mean of [`task_loss`] over the rows of a `B×D` prediction matrix.
pub fn task_loss_batch(g: &mut Graph, pred: Var, targets: &[Target]) -> Var {
    let (b, d) = g.shape(pred);
    assert_eq!(b, targets.len(), "one target per prediction row");
    if targets.iter().all(|t| matches!(t, Target::Class(_))) {
        let logp = g.log_softmax_rows(pred);
        let mut onehot = Tensor::zeros(b, d);
        for (r, t) in targets.iter().enumerate() {
            if let Target::Class(c) = t {
                onehot.set(r, *c, 1.0);
            }
        }
        let y = g.constant(onehot);
        let picked = g.mul(logp, y);
        let s = g.sum(picked);
        g.scale(s, -1.0 / (d * b) as f64)
    } else {
        let mut y = Tensor::zeros(b, d);
        for (r, t) in targets.iter().enumerate() {
            match t {
                Target::Values(v) => y.row_mut(r).copy_from_slice(v),
                Target::Class(_) => panic!("mixed classification and regression targets"),
            }
        }
        let y = g.constant(y);
        let diff = g.sub(pred, y);
        let sq = g.square(diff);
        g.mean(sq)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SeparationMode {
    /// `Σ_i max(0, δ − ‖h_high − c_i‖ + ‖h_low − c_i‖)` against the
    /// background prototype.
    Triplet,
    /// `(1/N) Σ_i [‖h_high − h_low‖² − δ]_+`: penalizes squared distance above δ.
    SquaredExcess,
    /// `(1/N) Σ_i [δ − ‖h_high − h_low‖²]_+`: enforces separation ≥ δ.
    #[default]
    Separation,
}

/// Plain separation loss over per-variable aggregates (`N×d_z` each).
/// `prototypes` is required only in [`SeparationMode::Triplet`].
pub fn separation_loss(
    h_high: &Tensor,
    h_low: &Tensor,
    delta: f64,
    mode: SeparationMode,
    prototypes: Option<&Tensor>,
) -> Result<f64> {
    let mut g = Graph::new();
    let hh = g.constant(h_high.clone());
    let hl = g.constant(h_low.clone());
    let proto = prototypes.map(|p| g.constant(p.clone()));
    let l = separation_loss_graph(&mut g, hh, hl, delta, mode, proto)?;
    Ok(g.scalar(l))
}

pub fn separation_loss_graph(
    g: &mut Graph,
    h_high: Var,
    h_low: Var,
    delta: f64,
    mode: SeparationMode,
    prototypes: Option<Var>,
) -> Result<Var> {
    let n = g.shape(h_high).0 as f64;
    if g.shape(h_high) != g.shape(h_low) {
        return Err(ExcapError::dim("h_high and h_low shapes differ"));
    }
    Ok(match mode {
        SeparationMode::SquaredExcess | SeparationMode::Separation => {
            let diff = g.sub(h_high, h_low);
            let sq = g.square(diff);
            let dist = g.sum_cols(sq);
            let hinge_in = if mode == SeparationMode::Separation {
                let neg = g.scale(dist, -1.0);
                g.add_scalar(neg, delta)
            } else {
                g.add_scalar(dist, -delta)
            };
            let h = g.relu(hinge_in);
            let s = g.sum(h);
            g.scale(s, 1.0 / n)
        }
        SeparationMode::Triplet => {
            let c = prototypes.ok_or_else(|| ExcapError::config("triplet separation needs prototypes"))?;
            let dh = g.sub(h_high, c);
            let dh = g.square(dh);
            let dh = g.sum_cols(dh);
            let dh = g.sqrt_eps(dh, 1e-12);
            let dl = g.sub(h_low, c);
            let dl = g.square(dl);
            let dl = g.sum_cols(dl);
            let dl = g.sqrt_eps(dl, 1e-12);
            let m = g.sub(dl, dh);
            let m = g.add_scalar(m, delta);
            let h = g.relu(m);
            g.sum(h)
        }
    })
}

/// Attention-aware prototypes for the high and low groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    /// `N×d_z` prototypes per group.
    pub high: Tensor,
    pub low: Tensor,
    /// Symmetric `N×N` weights in `[0,1]` per group.
    pub w_high: Tensor,
    pub w_low: Tensor,
}

impl Prototypes {
    pub fn validate(&self) -> Result<()> {
        for w in [&self.w_high, &self.w_low] {
            let n = w.rows();
            if w.cols() != n || n != self.high.rows() || n != self.low.rows() {
                return Err(ExcapError::dim("prototype weights must be N×N matching N prototypes"));
            }
            for i in 0..n {
                for j in 0..n {
                    let v = w.get(i, j);
                    if !(0.0..=1.0).contains(&v) || (v - w.get(j, i)).abs() > 1e-12 {
                        return Err(ExcapError::invalid("prototype weights", "must be symmetric with entries in [0,1]"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `(1/2N) Σ_k Σ_{i,j} w_ij^{(k)} ‖c_i^{(k)} − c_j^{(k)}‖²` over ordered pairs.
pub fn clustering_loss(p: &Prototypes) -> Result<f64> {
    p.validate()?;
    let mut g = Graph::new();
    let ch = g.constant(p.high.clone());
    let cl = g.constant(p.low.clone());
    let l = clustering_loss_graph(&mut g, &[(ch, &p.w_high), (cl, &p.w_low)]);
    Ok(g.scalar(l))
}

/// Uses `Σ_{ij} w_ij ‖c_i − c_j‖² = 2 Σ_i deg_i ‖c_i‖² − 2 Σ_ij w_ij ⟨c_i, c_j⟩`.
pub fn clustering_loss_graph(g: &mut Graph, groups: &[(Var, &Tensor)]) -> Var {
    let n = g.shape(groups[0].0).0 as f64;
    let mut total: Option<Var> = None;
    for &(c, w) in groups {
        let nn = w.rows();
        let deg: Vec<f64> = (0..nn).map(|i| w.row(i).iter().sum()).collect();
        let deg = g.constant(Tensor::col_vector(deg));
        let wv = g.constant(w.clone());
        let sq = g.square(c);
        let norms = g.sum_cols(sq);
        let weighted = g.mul(norms, deg);
        let a = g.sum(weighted);
        let a = g.scale(a, 2.0);
        let wc = g.matmul(wv, c);
        let cross = g.mul(c, wc);
        let b = g.sum(cross);
        let b = g.scale(b, -2.0);
        let part = g.add(a, b);
        total = Some(match total {
            Some(t) => g.add(t, part),
            None => part,
        });
    }
    let t = total.expect("at least one group");
    g.scale(t, 1.0 / (2.0 * n))
}

/// Gaussian-kernel weights from per-variable attention profiles, bandwidth
/// set to the median off-diagonal distance.
pub fn attention_weights(profiles: &Tensor) -> Tensor {
    let n = profiles.rows();
    let mut dist = Tensor::zeros(n, n);
    let mut off = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let d: f64 = profiles
                .row(i)
                .iter()
                .zip(profiles.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist.set(i, j, d);
            if i < j {
                off.push(d);
            }
        }
    }
    off.sort_by(f64::total_cmp);
    let bw = if off.is_empty() {
        0.0
    } else if off.len() % 2 == 1 {
        off[off.len() / 2]
    } else {
        0.5 * (off[off.len() / 2 - 1] + off[off.len() / 2])
    };
    let mut w = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = dist.get(i, j);
            let v = if bw > 0.0 { (-(d * d) / (2.0 * bw * bw)).exp() } else { 1.0 };
            w.set(i, j, v);
        }
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knot {
    pub epoch: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub schedule: Vec<Knot>,
    /// λ in `λ‖θ‖²`.
    pub weight_decay: f64,
    /// Margin δ.
    pub delta: f64,
    pub separation_mode: SeparationMode,
}

impl LossWeights {
    /// Knots at epoch 0, 60% and 100% of the budget.
    pub fn staged(epochs: usize) -> Self {
        let last = epochs.saturating_sub(1).max(1);
        let mid = ((last as f64) * 0.6).round() as usize;
        let mid = mid.clamp(1, last.max(2) - 1).min(last);
        let mut schedule = vec![Knot {
            epoch: 0,
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.05,
        }];
        if mid > 0 && mid < last {
            schedule.push(Knot {
                epoch: mid,
                alpha: 1.0,
                beta: 0.3,
                gamma: 0.2,
            });
        }
        schedule.push(Knot {
            epoch: last,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.5,
        });
        Self {
            schedule,
            weight_decay: 1e-4,
            delta: 1.0,
            separation_mode: SeparationMode::Separation,
        }
    }

    /// Constant weights; `beta = gamma = 0` gives the task-only ablation.
    pub fn constant(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            schedule: vec![Knot {
                epoch: 0,
                alpha,
                beta,
                gamma,
            }],
            weight_decay: 1e-4,
            delta: 1.0,
            separation_mode: SeparationMode::Separation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(ExcapError::config("loss schedule is empty"));
        }
        if self.schedule.windows(2).any(|w| w[0].epoch >= w[1].epoch) {
            return Err(ExcapError::config("schedule epochs must be strictly increasing"));
        }
        for k in &self.schedule {
            for (name, v) in [("alpha", k.alpha), ("beta", k.beta), ("gamma", k.gamma)] {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(ExcapError::config(format!("{name} must be a nonnegative finite weight, got {v}")));
                }
            }
        }
        if !self.schedule.iter().any(|k| k.alpha > 0.0) {
            return Err(ExcapError::config("alpha must be positive somewhere in the schedule"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(ExcapError::config("weight decay must be ≥ 0"));
        }
        if !(self.delta > 0.0) {
            return Err(ExcapError::config("margin delta must be positive"));
        }
        Ok(())
    }
}

/// Piecewise-linear interpolation between knots, constant outside them.
pub fn staged_schedule(epoch: usize, cfg: &LossWeights) -> (f64, f64, f64) {
    let s = &cfg.schedule;
    let first = s[0];
    if epoch <= first.epoch {
        return (first.alpha, first.beta, first.gamma);
    }
    for w in s.windows(2) {
        let (a, b) = (w[0], w[1]);
        if epoch <= b.epoch {
            let f = (epoch - a.epoch) as f64 / (b.epoch - a.epoch) as f64;
            let lerp = |x: f64, y: f64| x + f * (y - x);
            return (lerp(a.alpha, b.alpha), lerp(a.beta, b.beta), lerp(a.gamma, b.gamma));
        }
    }
    let last = s[s.len() - 1];
    (last.alpha, last.beta, last.gamma)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub task: f64,
    pub dist: f64,
    pub clus: f64,
}

/// `α·task + β·dist + γ·clus`. Weight decay lives in the optimiser.
pub fn total_loss(parts: LossParts, alpha: f64, beta: f64, gamma: f64) -> Result<f64> {
    for (name, v) in [("alpha", alpha), ("beta", beta), ("gamma", gamma)] {
        if !(v >= 0.0) {
            return Err(ExcapError::config(format!("{name} must be nonnegative, got {v}")));
        }
    }
    for (name, v) in [("task", parts.task), ("dist", parts.dist), ("clus", parts.clus)] {
        if !v.is_finite() {
            return Err(ExcapError::Divergence(format!("{name} loss is not finite")));
        }
    }
    Ok(alpha * parts.task + beta * parts.dist + gamma * parts.clus)
}
