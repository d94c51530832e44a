//! Attention-guided segmentation: windowed max pooling, quantile change-point
//! detection, top-k boundary pruning, padding and positional encoding.

use serde::{Deserialize, Serialize};

use crate::data::{AttentionMap, SegmentSet};
use crate::error::{ExcapError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyRule {
    /// Segment mean attention above the uniform level `1/T`.
    Mean,
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub pool_kernel: usize,
    pub changepoint_quantile: f64,
    pub l_max: usize,
    /// Padded segment length; `None` uses the series length.
    pub t_max: Option<usize>,
    pub saliency: SaliencyRule,
    pub pe_amplitude: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            pool_kernel: 3,
            changepoint_quantile: 0.9,
            l_max: 8,
            t_max: None,
            saliency: SaliencyRule::Mean,
            pe_amplitude: 0.1,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_kernel == 0 || self.pool_kernel % 2 == 0 {
            return Err(ExcapError::config("pool_kernel must be odd and positive"));
        }
        if !(0.0..1.0).contains(&self.changepoint_quantile) {
            return Err(ExcapError::config("changepoint_quantile must lie in [0,1)"));
        }
        if self.l_max < 2 {
            return Err(ExcapError::config("L_max must be at least 2"));
        }
        if self.t_max == Some(0) {
            return Err(ExcapError::config("T_max must be positive"));
        }
        if let SaliencyRule::Threshold(v) = self.saliency {
            if !(v > 0.0 && v < 1.0) {
                return Err(ExcapError::config("saliency threshold must lie in (0,1)"));
            }
        }
        Ok(())
    }
}

/// Centered windowed max, windows truncated at the edges.
pub fn pool_attention(a: &[f64], kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel % 2 == 0 || kernel > a.len() {
        return Err(ExcapError::config(format!(
            "pool kernel {kernel} must be odd and at most T = {}",
            a.len()
        )));
    }
    let half = kernel / 2;
    Ok((0..a.len())
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(a.len());
            a[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Linear-interpolation quantile (the common "type 7" definition).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// `|a[t] − a[t−1]|` with a zero in front so there is one value per step.
fn first_differences(a: &[f64]) -> Vec<f64> {
    std::iter::once(0.0)
        .chain(a.windows(2).map(|w| (w[1] - w[0]).abs()))
        .collect()
}

/// Boundaries `{0, T}` plus every `b` with `|a[b] − a[b−1]| > threshold`.
pub fn changepoints_above(a: &[f64], threshold: f64) -> Vec<usize> {
    let d = first_differences(a);
    let mut b = vec![0];
    b.extend((1..a.len()).filter(|&t| d[t] > threshold));
    b.push(a.len());
    b
}

/// Threshold is the `quantile` of the first differences. The leading zero
/// difference makes quantile 0 mean "any change at all".
pub fn detect_changepoints(a: &[f64], q: f64) -> Vec<usize> {
    changepoints_above(a, quantile(&first_differences(a), q))
}

/// Change magnitude of each interior boundary against its predecessor in `b`.
pub fn boundary_deltas(b: &[usize], a: &[f64]) -> Vec<f64> {
    (1..b.len() - 1).map(|j| (a[b[j]] - a[b[j - 1]]).abs()).collect()
}

/// Keeps the endpoints and the `l_max − 2` interior boundaries with the
/// largest change magnitude, earlier boundary first on ties.
pub fn prune_boundaries(b: &[usize], a: &[f64], l_max: usize) -> Result<Vec<usize>> {
    if l_max < 2 {
        return Err(ExcapError::config("L_max must be at least 2"));
    }
    validate_boundaries(b, a.len())?;
    let budget = l_max - 2;
    let interior = b.len() - 2;
    if interior <= budget {
        return Ok(b.to_vec());
    }
    let delta = boundary_deltas(b, a);
    let mut rank: Vec<usize> = (0..interior).collect();
    rank.sort_by(|&i, &j| delta[j].total_cmp(&delta[i]).then(i.cmp(&j)));
    let mut keep: Vec<usize> = rank[..budget].iter().map(|&i| b[i + 1]).collect();
    keep.sort_unstable();
    let mut out = Vec::with_capacity(budget + 2);
    out.push(0);
    out.extend(keep);
    out.push(a.len());
    Ok(out)
}

fn validate_boundaries(b: &[usize], t: usize) -> Result<()> {
    if b.len() < 2 || b[0] != 0 || b[b.len() - 1] != t || b.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ExcapError::invalid(
            "boundaries",
            format!("must increase strictly from 0 to {t}, got {b:?}"),
        ));
    }
    Ok(())
}

/// `amplitude·sin` on even rows and `amplitude·cos` on odd rows, the
/// frequency falling with the row pair index.
pub fn positional_encoding(n: usize, t_max: usize, amplitude: f64) -> Tensor {
    let mut pe = Tensor::zeros(n, t_max);
    for r in 0..n {
        let freq = 1.0 / 10000f64.powf((2 * (r / 2)) as f64 / n as f64);
        for t in 0..t_max {
            let angle = t as f64 * freq;
            pe.set(r, t, amplitude * if r % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Slices, pads and encodes the segments of a normalized `N×T` input.
pub fn build_segments(x: &Tensor, boundaries: &[usize], cfg: &SegmenterConfig, a: &AttentionMap) -> Result<SegmentSet> {
    let (n, t) = x.shape();
    validate_boundaries(boundaries, t)?;
    if a.scores().shape() != (n, t) {
        return Err(ExcapError::dim(format!(
            "attention is {:?} but input is {n}×{t}",
            a.scores().shape()
        )));
    }
    let t_max = cfg.t_max.unwrap_or(t);
    let pe = positional_encoding(n, t_max, cfg.pe_amplitude);
    let threshold = match cfg.saliency {
        SaliencyRule::Mean => 1.0 / t as f64,
        SaliencyRule::Threshold(v) => v,
    };
    let mut padded = Vec::new();
    let mut lengths = Vec::new();
    let mut seg_attn = Vec::new();
    for w in boundaries.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let len = hi - lo;
        if len > t_max {
            return Err(ExcapError::invalid(
                "segment",
                format!("length {len} at [{lo},{hi}) exceeds T_max = {t_max}"),
            ));
        }
        let mut s = pe.clone();
        for r in 0..n {
            for (k, v) in x.row(r)[lo..hi].iter().enumerate() {
                s.set(r, k, v + pe.get(r, k));
            }
        }
        let mass: f64 = (0..n).map(|r| a.scores().row(r)[lo..hi].iter().sum::<f64>()).sum();
        padded.push(s);
        lengths.push(len);
        seg_attn.push(mass / (n * len) as f64);
    }
    Ok(SegmentSet {
        boundaries: boundaries.to_vec(),
        saliency_flags: seg_attn.iter().map(|&m| m > threshold).collect(),
        padded_segments: padded,
        original_lengths: lengths,
        segment_attention: seg_attn,
        positional_encoding_applied: cfg.pe_amplitude != 0.0,
        t_max,
    })
}

/// Pooled attention averaged over variables.
pub fn pooled_mean_attention(a: &AttentionMap, kernel: usize) -> Result<Vec<f64>> {
    let (n, t) = a.scores().shape();
    let mut mean = vec![0.0; t];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(pool_attention(a.scores().row(r), kernel)?) {
            *m += v / n as f64;
        }
    }
    Ok(mean)
}

/// Boundaries for one sequence: pool, detect, prune.
pub fn segment_boundaries(a: &AttentionMap, cfg: &SegmenterConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let pooled = pooled_mean_attention(a, cfg.pool_kernel)?;
    let detected = detect_changepoints(&pooled, cfg.changepoint_quantile);
    prune_boundaries(&detected, &pooled, cfg.l_max)
}

/// Full segmentation of a normalized input given its attention map.
pub fn segment(x: &Tensor, a: &AttentionMap, cfg: &SegmenterConfig) -> Result<SegmentSet> {
    let b = segment_boundaries(a, cfg)?;
    build_segments(x, &b, cfg, a)
}
