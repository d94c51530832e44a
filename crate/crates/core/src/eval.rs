//! Faithfulness and robustness evaluation: ranking metrics, deletion tests,
//! stability, Lipschitz probing, runtime scaling and baseline explainers.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_in_place;
use crate::data::{CausalMask, Degradation, LipschitzSample};
use crate::error::{ExcapError, Result};
use crate::model::{Differentiable, Pipeline, Prepared};
use crate::objectives::{task_loss, Target};
use crate::scm::perturb_mask;
use crate::tensor::Tensor;

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(ExcapError::dim(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ExcapError::invalid("scores", "NaN score"));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from mid-ranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(ExcapError::Undefined("AUROC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: mean over positives of the precision at their score
/// threshold, tied scores sharing one threshold.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(ExcapError::Undefined("AUPRC needs at least one positive".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut seen, mut tp, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let block_pos = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        tp += block_pos;
        ap += block_pos as f64 * tp as f64 / seen as f64;
        i = j + 1;
    }
    Ok(ap / pos as f64)
}

/// Pearson correlation of two equally long samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(ExcapError::dim("pearson needs two samples of equal length ≥ 2"));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(ExcapError::Undefined("pearson of a constant sample".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn mid_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on mid-ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ExcapError::dim("spearman needs samples of equal length"));
    }
    pearson(&mid_ranks(a), &mid_ranks(b))
}

/// Scales nonnegative scores to sum 1; an all-zero map becomes uniform.
pub fn normalize_attribution(mut e: Tensor) -> Result<Tensor> {
    if e.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(ExcapError::invalid("attribution", "entries must be finite and nonnegative"));
    }
    let s = e.sum();
    if s > 0.0 {
        e.scale_assign(1.0 / s);
    } else {
        let u = 1.0 / e.len() as f64;
        e.data_mut().fill(u);
    }
    Ok(e)
}

/// EXCAP's importance map: each variable's attention weighted by that
/// variable's mean attention over the enclosing segment, normalized to sum 1.
/// Variables that concentrate their attention outrank ones spreading it thin.
pub fn extract_attribution(p: &Prepared) -> Result<Tensor> {
    let mut e = p.attention.scores().clone();
    for w in p.segments.boundaries.windows(2) {
        for r in 0..e.rows() {
            let span = &mut e.row_mut(r)[w[0]..w[1]];
            let m = span.iter().sum::<f64>() / span.len() as f64;
            span.iter_mut().for_each(|v| *v *= m);
        }
    }
    normalize_attribution(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    #[default]
    Top,
    Bottom,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Pointwise,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingProtocol {
    pub k_percent: f64,
    pub target: MaskTarget,
    pub granularity: Granularity,
}

impl Default for MaskingProtocol {
    fn default() -> Self {
        Self {
            k_percent: 15.0,
            target: MaskTarget::Top,
            granularity: Granularity::Pointwise,
        }
    }
}

impl MaskingProtocol {
    pub fn new(k_percent: f64, target: MaskTarget) -> Result<Self> {
        let p = Self {
            k_percent,
            target,
            ..Default::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_percent > 0.0 && self.k_percent < 100.0) {
            return Err(ExcapError::config(format!("k_percent must lie in (0,100), got {}", self.k_percent)));
        }
        Ok(())
    }

    /// Number of cells to mask in an `N×T` input.
    pub fn budget(&self, n: usize, t: usize) -> usize {
        let cells = (n * t) as f64;
        // Guard against 15·20/100 landing a hair above an integer.
        let raw = self.k_percent * cells / 100.0;
        let r = raw.round();
        if (raw - r).abs() < 1e-9 { r as usize } else { raw.ceil() as usize }
    }
}

/// Cells `(variable, time)` selected for masking.
pub fn select_cells(e: &Tensor, boundaries: &[usize], protocol: &MaskingProtocol, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    protocol.validate()?;
    let (n, t) = e.shape();
    let budget = protocol.budget(n, t);
    if protocol.target == MaskTarget::Random {
        return Ok(sample(rng, n * t, budget).into_iter().map(|i| (i / t, i % t)).collect());
    }
    let descending = protocol.target == MaskTarget::Top;
    match protocol.granularity {
        Granularity::Pointwise => {
            // Time-major order gives ties to the lower time index, then variable.
            let mut cells: Vec<(usize, usize)> = (0..t).flat_map(|c| (0..n).map(move |r| (r, c))).collect();
            cells.sort_by(|&(r1, c1), &(r2, c2)| {
                let o = e.get(r1, c1).total_cmp(&e.get(r2, c2));
                if descending { o.reverse() } else { o }
            });
            cells.truncate(budget);
            Ok(cells)
        }
        Granularity::Segment => {
            let mut units = Vec::new();
            for w in boundaries.windows(2) {
                for r in 0..n {
                    let m = e.row(r)[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64;
                    units.push((m, r, w[0], w[1]));
                }
            }
            units.sort_by(|a, b| {
                let o = a.0.total_cmp(&b.0);
                if descending { o.reverse() } else { o }
            });
            let mut cells = Vec::with_capacity(budget);
            for (_, r, lo, hi) in units {
                if cells.len() >= budget {
                    break;
                }
                cells.extend((lo..hi).map(|c| (r, c)));
            }
            Ok(cells)
        }
    }
}

/// Zeroes the given cells (zero is the per-variable mean after normalization).
pub fn apply_cell_mask(x: &Tensor, cells: &[(usize, usize)]) -> Tensor {
    let mut out = x.clone();
    for &(r, c) in cells {
        out.set(r, c, 0.0);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auroc,
    Auprc,
    Mse,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
            Metric::Mse => "mse",
        }
    }
}

fn binary_label(t: &Option<Target>, id: &str) -> Result<bool> {
    match t {
        Some(Target::Class(c)) => Ok(*c == 1),
        _ => Err(ExcapError::config(format!("sample {id} has no class label"))),
    }
}

/// AUROC/AUPRC treat class 1 as positive and score by its probability; MSE
/// is the mean task loss.
pub fn evaluate_metric(pipeline: &Pipeline, data: &[Prepared], metric: Metric) -> Result<f64> {
    if data.is_empty() {
        return Err(ExcapError::config("no evaluation data"));
    }
    match metric {
        Metric::Mse => mse_with_mask(pipeline, data, &pipeline.model.mask),
        Metric::Auroc | Metric::Auprc => {
            let labels = data.iter().map(|p| binary_label(&p.target, &p.id)).collect::<Result<Vec<_>>>()?;
            let scores = data.iter().map(|p| pipeline.score(p)).collect::<Result<Vec<_>>>()?;
            if metric == Metric::Auroc { auroc(&scores, &labels) } else { auprc(&scores, &labels) }
        }
    }
}

/// Mean task loss when the trained decoder reads its inputs through `mask`
/// instead of the mask it was trained with.
pub fn mse_with_mask(pipeline: &Pipeline, data: &[Prepared], mask: &CausalMask) -> Result<f64> {
    if data.is_empty() {
        return Err(ExcapError::config("no evaluation data"));
    }
    let mut s = 0.0;
    for p in data {
        let t = p
            .target
            .as_ref()
            .ok_or_else(|| ExcapError::config(format!("sample {} has no target", p.id)))?;
        s += task_loss(&pipeline.predict_with_mask(p, mask)?, t)?;
    }
    Ok(s / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRobustnessRow {
    pub flips: usize,
    /// MSE minus the MSE under the reference mask, one entry per draw.
    pub excess: Vec<f64>,
    pub mean_excess: f64,
}

/// Swaps randomly perturbed masks into the trained decoder, `draws` masks per
/// flip count, and reports the MSE excess over `reference`.
pub fn mask_robustness(
    pipeline: &Pipeline,
    data: &[Prepared],
    reference: &CausalMask,
    flips: &[usize],
    draws: usize,
    seed: u64,
) -> Result<(f64, Vec<MaskRobustnessRow>)> {
    if draws == 0 {
        return Err(ExcapError::config("mask robustness needs at least one draw"));
    }
    let base = mse_with_mask(pipeline, data, reference)?;
    let mut rows = Vec::with_capacity(flips.len());
    for &k in flips {
        let mut excess = Vec::with_capacity(draws);
        for d in 0..draws {
            let m = perturb_mask(reference, k, seed.wrapping_mul(1_000_003) ^ ((k as u64) << 20 | d as u64))?;
            excess.push(mse_with_mask(pipeline, data, &m)? - base);
        }
        let mean_excess = excess.iter().sum::<f64>() / draws as f64;
        rows.push(MaskRobustnessRow { flips: k, excess, mean_excess });
    }
    Ok((base, rows))
}

/// Re-runs the whole pipeline on a modified normalized input, keeping the target.
pub fn reprepare(pipeline: &Pipeline, p: &Prepared, x: Tensor) -> Result<Prepared> {
    let mut q = pipeline.prepare_normalized(&p.id, x, p.sampling_rate_hz)?;
    q.target = p.target.clone();
    Ok(q)
}

/// Masks each input according to its attribution and protocol, then compares
/// the metric before and after.
pub fn mask_and_score(
    pipeline: &Pipeline,
    data: &[Prepared],
    attributions: &[Tensor],
    protocol: &MaskingProtocol,
    metric: Metric,
    seed: u64,
) -> Result<Degradation> {
    if attributions.len() != data.len() {
        return Err(ExcapError::dim("one attribution per sample"));
    }
    let before = evaluate_metric(pipeline, data, metric)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked = data
        .iter()
        .zip(attributions)
        .map(|(p, e)| {
            if e.shape() != p.x.shape() {
                return Err(ExcapError::dim(format!("attribution {:?} vs input {:?}", e.shape(), p.x.shape())));
            }
            let cells = select_cells(e, &p.segments.boundaries, protocol, &mut rng)?;
            reprepare(pipeline, p, apply_cell_mask(&p.x, &cells))
        })
        .collect::<Result<Vec<_>>>()?;
    let after = evaluate_metric(pipeline, &masked, metric)
        .map_err(|e| ExcapError::Undefined(format!("metric after masking: {e}")))?;
    Ok(Degradation::new(before, after))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub per_seed_delta: Vec<f64>,
    pub coefficient: f64,
}

/// Sample standard deviation over mean.
pub fn stability(deltas: &[f64]) -> Result<StabilityResult> {
    if deltas.len() < 2 {
        return Err(ExcapError::config("stability needs at least two seeds"));
    }
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return Err(ExcapError::Undefined(format!("stability with nonpositive mean {mean}")));
    }
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(StabilityResult {
        per_seed_delta: deltas.to_vec(),
        coefficient: var.sqrt() / mean,
    })
}

/// Per-(variable, segment) mean attribution over fixed boundaries.
pub fn segment_explanation(e: &Tensor, boundaries: &[usize]) -> Vec<f64> {
    let mut g = Vec::with_capacity(e.rows() * (boundaries.len() - 1));
    for r in 0..e.rows() {
        for w in boundaries.windows(2) {
            g.push(e.row(r)[w[0]..w[1]].iter().sum::<f64>() / (w[1] - w[0]) as f64);
        }
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzRow {
    pub sigma: f64,
    pub input_delta: f64,
    pub output_delta: f64,
    /// Mean and standard deviation of the per-trial ratio.
    pub l_emp: f64,
    pub l_emp_std: f64,
    pub trials: Vec<LipschitzSample>,
}

/// Adds Gaussian noise to every input and measures how far the segment-level
/// explanation moves, on the clean segmentation.
pub fn lipschitz_probe(pipeline: &Pipeline, data: &[Prepared], sigmas: &[f64], trials: usize, seed: u64) -> Result<Vec<LipschitzRow>> {
    if data.is_empty() || trials == 0 {
        return Err(ExcapError::config("lipschitz probe needs data and at least one trial"));
    }
    let clean: Vec<Vec<f64>> = data
        .iter()
        .map(|p| Ok(segment_explanation(&extract_attribution(p)?, &p.segments.boundaries)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(sigmas.len());
    for (si, &sigma) in sigmas.iter().enumerate() {
        if !(sigma >= 0.0) {
            return Err(ExcapError::config(format!("sigma must be ≥ 0, got {sigma}")));
        }
        let mut samples = Vec::with_capacity(trials);
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((si as u64) << 32 | trial as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
            let (mut din, mut dout) = (0.0, 0.0);
            for (p, g0) in data.iter().zip(&clean) {
                if sigma == 0.0 {
                    continue;
                }
                let normal = Normal::new(0.0, sigma).expect("finite sigma");
                let noise: Vec<f64> = (0..p.x.len()).map(|_| normal.sample(&mut rng)).collect();
                let noise = Tensor::from_vec(p.x.rows(), p.x.cols(), noise);
                let mut x = p.x.clone();
                x.add_assign(&noise);
                let q = pipeline.prepare_normalized(&p.id, x, p.sampling_rate_hz)?;
                let g1 = segment_explanation(&extract_attribution(&q)?, &p.segments.boundaries);
                din += noise.sq_norm().sqrt();
                dout += g0.iter().zip(&g1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            }
            let m = data.len() as f64;
            let (din, dout) = (din / m, dout / m);
            samples.push(LipschitzSample {
                sigma,
                input_delta_norm: din,
                output_delta_norm: dout,
                ratio: if din > 0.0 { dout / din } else { 0.0 },
            });
        }
        let k = samples.len() as f64;
        let mean = |f: fn(&LipschitzSample) -> f64| samples.iter().map(f).sum::<f64>() / k;
        let l_emp = mean(|s| s.ratio);
        let l_emp_std = if samples.len() > 1 {
            (samples.iter().map(|s| (s.ratio - l_emp).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(LipschitzRow {
            sigma,
            input_delta: mean(|s| s.input_delta_norm),
            output_delta: mean(|s| s.output_delta_norm),
            l_emp,
            l_emp_std,
            trials: samples,
        });
    }
    Ok(rows)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

/// Median wall-clock milliseconds per call of the workload built for each T.
/// Rounds interleave the lengths so drift in machine load hits all of them.
pub fn runtime_scaling<W, B>(mut build: B, t_values: &[usize], warmup: usize, iters: usize) -> Result<Vec<(usize, f64)>>
where
    B: FnMut(usize) -> Result<W>,
    W: FnMut() -> Result<()>,
{
    if t_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ExcapError::config("T values must be strictly increasing"));
    }
    if iters == 0 {
        return Err(ExcapError::config("at least one timed iteration"));
    }
    let mut work = t_values.iter().map(|&t| build(t)).collect::<Result<Vec<_>>>()?;
    for w in work.iter_mut() {
        for _ in 0..warmup {
            w()?;
        }
    }
    let mut times = vec![Vec::with_capacity(iters); t_values.len()];
    for _ in 0..iters {
        for (w, ts) in work.iter_mut().zip(times.iter_mut()) {
            let start = Instant::now();
            w()?;
            ts.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(t_values.iter().copied().zip(times.iter_mut().map(|ts| median(ts))).collect())
}

/// Single-head self-attention over time, quadratic in T; the runtime contrast.
pub struct SelfAttentionContrast {
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
}

impl SelfAttentionContrast {
    pub fn new(n_vars: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = || {
            let s = 1.0 / (n_vars as f64).sqrt();
            Tensor::from_vec(n_vars, d, (0..n_vars * d).map(|_| rng.random_range(-s..s)).collect())
        };
        Self {
            w_q: w(),
            w_k: w(),
            w_v: w(),
        }
    }

    /// `softmax(QKᵀ/√d)V` for an `N×T` input; returns `T×d`.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let xt = x.transpose();
        let q = xt.matmul(&self.w_q);
        let k = xt.matmul(&self.w_k);
        let v = xt.matmul(&self.w_v);
        let d = q.cols() as f64;
        let mut s = q.matmul(&k.transpose());
        s.scale_assign(1.0 / d.sqrt());
        for r in 0..s.rows() {
            softmax_in_place(s.row_mut(r));
        }
        s.matmul(&v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Random,
    GradSaliency,
    IntegratedGradients,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Random => "random",
            Baseline::GradSaliency => "grad_saliency",
            Baseline::IntegratedGradients => "integrated_gradients",
        }
    }
}

/// Raw integrated gradients from the zero baseline with a right Riemann sum.
pub fn integrated_gradients(f: &dyn Differentiable, x: &Tensor, steps: usize) -> Result<Tensor> {
    if steps < 1 {
        return Err(ExcapError::config("integrated gradients needs steps ≥ 1"));
    }
    let mut acc = Tensor::zeros(x.rows(), x.cols());
    for s in 1..=steps {
        let a = s as f64 / steps as f64;
        let (_, g) = f.value_and_grad(&x.map(|v| v * a))?;
        acc.add_assign(&g);
    }
    acc.scale_assign(1.0 / steps as f64);
    for (o, v) in acc.data_mut().iter_mut().zip(x.data()) {
        *o *= v;
    }
    Ok(acc)
}

/// Baseline importance map normalized to sum 1. Signed methods are ranked by
/// magnitude.
pub fn baseline_attribution(f: &dyn Differentiable, x: &Tensor, method: Baseline, steps: usize, seed: u64) -> Result<Tensor> {
    let raw = match method {
        Baseline::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::from_vec(x.rows(), x.cols(), (0..x.len()).map(|_| rng.random::<f64>()).collect())
        }
        Baseline::GradSaliency => f.value_and_grad(x)?.1.map(f64::abs),
        Baseline::IntegratedGradients => integrated_gradients(f, x, steps)?.map(f64::abs),
    };
    normalize_attribution(raw)
}
