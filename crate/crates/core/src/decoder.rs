//! Causally masked decoding: one independent branch per output, each seeing
//! only its parent variables.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::CausalMask;
use crate::error::{ExcapError, Result};
use crate::nn::{Binder, LayerNorm, Linear, Lstm, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// BiLSTM hidden size per direction.
    pub hidden: usize,
    pub attention_dim: usize,
    /// Width of the fused representation `h_j`.
    pub fusion_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden: 8,
            attention_dim: 8,
            fusion_dim: 16,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.attention_dim == 0 || self.fusion_dim < 2 {
            return Err(ExcapError::config("decoder sizes must be positive (fusion_dim ≥ 2)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderBranch {
    fwd: Lstm,
    bwd: Lstm,
    attn: Linear,
    attn_v: Linear,
    gate: Linear,
    p_a: Linear,
    p_g: Linear,
    norm: LayerNorm,
    head: Linear,
    n_vars: usize,
    d_z: usize,
    /// Largest segment count the branch accepts.
    pub l_max: usize,
}

impl DecoderBranch {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &DecoderConfig,
        n_vars: usize,
        d_z: usize,
        l_max: usize,
    ) -> Self {
        let input = n_vars * d_z;
        let h = cfg.hidden;
        Self {
            fwd: Lstm::new(store, rng, &format!("{name}.fwd"), input, h),
            bwd: Lstm::new(store, rng, &format!("{name}.bwd"), input, h),
            attn: Linear::new(store, rng, &format!("{name}.attn"), 2 * h, cfg.attention_dim, true),
            attn_v: Linear::new(store, rng, &format!("{name}.attn_v"), cfg.attention_dim, 1, false),
            gate: Linear::new(store, rng, &format!("{name}.gate"), d_z, 1, true),
            p_a: Linear::new(store, rng, &format!("{name}.p_a"), 2 * h, cfg.fusion_dim, true),
            p_g: Linear::new(store, rng, &format!("{name}.p_g"), input, cfg.fusion_dim, false),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cfg.fusion_dim),
            head: Linear::new(store, rng, &format!("{name}.head"), cfg.fusion_dim, 1, true),
            n_vars,
            d_z,
            l_max,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.fwd.params();
        v.extend(self.bwd.params());
        for l in [&self.attn, &self.attn_v, &self.gate, &self.p_a, &self.p_g] {
            v.extend(l.params());
        }
        v.extend(self.norm.params());
        v.extend(self.head.params());
        v
    }

    /// `ŷ_j` (`1×1`) from the masked segment tensors, each `N×d_z`.
    pub fn decode(&self, g: &mut Graph, p: &mut Binder, xs: &[Var]) -> Result<Var> {
        let l = xs.len();
        if l == 0 {
            return Err(ExcapError::invalid("segments", "decoder needs at least one segment"));
        }
        if l > self.l_max {
            return Err(ExcapError::dim(format!("{l} segments exceed decoder capacity {}", self.l_max)));
        }
        let width = self.n_vars * self.d_z;
        let steps: Vec<Var> = xs.iter().map(|&x| g.reshape(x, 1, width)).collect();
        let f = self.fwd.run(g, p, &steps, false);
        let b = self.bwd.run(g, p, &steps, true);
        let hs: Vec<Var> = f.iter().zip(&b).map(|(&f, &b)| g.concat_cols(&[f, b])).collect();
        let hs = g.concat_rows(&hs);

        let e = self.attn.forward(g, p, hs);
        let e = g.tanh(e);
        let e = self.attn_v.forward(g, p, e);
        let e = g.transpose(e);
        let alpha = g.softmax_rows(e);
        let pooled = g.matmul(alpha, hs);

        let mut u = xs[0];
        for &x in &xs[1..] {
            u = g.add(u, x);
        }
        let u = g.scale(u, 1.0 / l as f64);
        let gate = self.gate.forward(g, p, u);
        let gate = g.sigmoid(gate);
        let gated = g.mul_col(u, gate);
        let gated = g.reshape(gated, 1, width);

        let a = self.p_a.forward(g, p, pooled);
        let c = self.p_g.forward(g, p, gated);
        let fused = g.add(a, c);
        let h = self.norm.forward(g, p, fused);
        Ok(self.head.forward(g, p, h))
    }
}

/// Keeps the parent rows of an `N×d_z` block and substitutes constant zeros
/// for the rest, so non-parents have no path into the result.
pub fn apply_mask_graph(g: &mut Graph, x: Var, mask_row: &[bool]) -> Var {
    let (n, d) = g.shape(x);
    if mask_row.iter().all(|&m| m) {
        return x;
    }
    let rows: Vec<Var> = (0..n)
        .map(|i| {
            if mask_row[i] {
                g.slice_rows(x, i, i + 1)
            } else {
                g.constant(Tensor::zeros(1, d))
            }
        })
        .collect();
    g.concat_rows(&rows)
}

/// Plain masking of `L` blocks (`N×d_z` each) on the variable axis.
pub fn apply_mask(xs: &[Tensor], mask_row: &[bool]) -> Result<Vec<Tensor>> {
    if !mask_row.iter().any(|&m| m) {
        return Err(ExcapError::invalid("mask row", "every output needs at least one parent"));
    }
    xs.iter()
        .map(|x| {
            if x.rows() != mask_row.len() {
                return Err(ExcapError::dim(format!("mask has {} variables, input {}", mask_row.len(), x.rows())));
            }
            let mut out = x.clone();
            for (i, &m) in mask_row.iter().enumerate() {
                if !m {
                    out.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
                }
            }
            Ok(out)
        })
        .collect()
}

/// `[Dec_1(x ⊙ M_1), …, Dec_D(x ⊙ M_D)]` as a `1×D` row.
pub fn predict_all(g: &mut Graph, p: &mut Binder, xs: &[Var], mask: &CausalMask, branches: &[DecoderBranch]) -> Result<Var> {
    if branches.len() != mask.d() {
        return Err(ExcapError::dim(format!("{} branches for a mask with D = {}", branches.len(), mask.d())));
    }
    if let Some(&x) = xs.first() {
        if g.shape(x).0 != mask.n() {
            return Err(ExcapError::dim(format!("mask has N = {}, input has {}", mask.n(), g.shape(x).0)));
        }
    }
    let mut outs = Vec::with_capacity(branches.len());
    for (j, branch) in branches.iter().enumerate() {
        let masked: Vec<Var> = xs.iter().map(|&x| apply_mask_graph(g, x, mask.row(j))).collect();
        outs.push(branch.decode(g, p, &masked)?);
    }
    Ok(g.concat_cols(&outs))
}

/// Means of salient and background segment embeddings. A group with no
/// segments yields `None`.
pub fn aggregate_saliency_graph(g: &mut Graph, z: &[Var], flags: &[bool]) -> (Option<Var>, Option<Var>) {
    let mut group = |want: bool| {
        let members: Vec<Var> = z.iter().zip(flags).filter(|(_, &f)| f == want).map(|(&v, _)| v).collect();
        if members.is_empty() {
            return None;
        }
        let mut s = members[0];
        for &m in &members[1..] {
            s = g.add(s, m);
        }
        Some(g.scale(s, 1.0 / members.len() as f64))
    };
    let high = group(true);
    let low = group(false);
    (high, low)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyAggregate {
    pub high: Tensor,
    pub low: Tensor,
    pub high_empty: bool,
    pub low_empty: bool,
}

/// Plain aggregation; an empty group becomes zeros and raises its flag.
pub fn aggregate_saliency(z: &[Tensor], flags: &[bool]) -> Result<SaliencyAggregate> {
    if z.is_empty() || z.len() != flags.len() {
        return Err(ExcapError::dim("one saliency flag per segment, at least one segment"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = z.iter().map(|t| g.constant(t.clone())).collect();
    let (h, l) = aggregate_saliency_graph(&mut g, &vars, flags);
    let (r, c) = z[0].shape();
    let get = |v: Option<Var>| v.map(|v| g.value(v).clone()).unwrap_or_else(|| Tensor::zeros(r, c));
    Ok(SaliencyAggregate {
        high: get(h),
        low: get(l),
        high_empty: h.is_none(),
        low_empty: l.is_none(),
    })
}
