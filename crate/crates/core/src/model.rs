//! The full model: frozen preprocessing (normalization, reference attention,
//! segmentation, spectral plan) followed by the trainable encoder, fusion
//! projection and masked decoder.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Graph, Var};
use crate::data::{AttentionMap, CausalMask, SegmentSet, TimeSeries};
use crate::decoder::{predict_all, DecoderBranch, DecoderConfig};
use crate::encoder::{Tcn, TcnConfig};
use crate::error::{ExcapError, Result};
use crate::nn::{xavier, Binder, ParamId, ParamStore};
use crate::objectives::{Target, Task};
use crate::reference::{normalize_values, target_for, ReferenceModel};
use crate::segmenter::{positional_encoding, segment, SegmenterConfig};
use crate::spectral::{feature_operator, global_features, plan, SpectralConfig, SpectralPlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExcapConfig {
    pub segmenter: SegmenterConfig,
    pub spectral: SpectralConfig,
    pub encoder: TcnConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
}

impl ExcapConfig {
    pub fn validate(&self) -> Result<()> {
        self.segmenter.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcapModel {
    pub config: ExcapConfig,
    pub task: Task,
    pub n_vars: usize,
    pub mask: CausalMask,
    store: ParamStore,
    tcn: Tcn,
    w_f: ParamId,
    branches: Vec<DecoderBranch>,
}

/// Everything about one input that does not depend on trainable weights.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    /// Instance-normalized `N×T` values.
    pub x: Tensor,
    pub sampling_rate_hz: f64,
    pub attention: AttentionMap,
    pub segments: SegmentSet,
    pub plan: SpectralPlan,
    /// `N×F` global features under `plan`.
    pub global: Tensor,
    pub target: Option<Target>,
}

/// Graph outputs of one forward pass.
pub struct Forward {
    /// `1×D` branch outputs.
    pub pred: Var,
    /// Encoder embeddings per segment, `N×d_z` each, before fusion.
    pub z: Vec<Var>,
}

impl ExcapModel {
    pub fn new(n_vars: usize, task: Task, mask: CausalMask, config: ExcapConfig) -> Result<Self> {
        config.validate()?;
        if mask.d() != task.outputs() || mask.n() != n_vars {
            return Err(ExcapError::dim(format!(
                "mask is {}×{} but the task needs D = {} outputs over N = {n_vars} variables",
                mask.d(),
                mask.n(),
                task.outputs()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let tcn = Tcn::new(&mut store, &mut rng, config.encoder.clone())?;
        let d_z = config.encoder.d_z;
        let w_f = store.add("fusion.w_f", xavier(&mut rng, config.spectral.feature_dim(), d_z));
        let branches = (0..task.outputs())
            .map(|j| {
                DecoderBranch::new(
                    &mut store,
                    &mut rng,
                    &format!("dec{j}"),
                    &config.decoder,
                    n_vars,
                    d_z,
                    config.segmenter.l_max,
                )
            })
            .collect();
        Ok(Self {
            config,
            task,
            n_vars,
            mask,
            store,
            tcn,
            w_f,
            branches,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.tcn.params()
    }

    pub fn fusion_param(&self) -> ParamId {
        self.w_f
    }

    pub fn branch_params(&self, j: usize) -> Vec<ParamId> {
        self.branches[j].params()
    }

    pub fn d_z(&self) -> usize {
        self.config.encoder.d_z
    }

    /// Builds the trainable part of the model on top of `x` (`N×T`) and
    /// `global` (`N×F`), with fixed segment boundaries.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &mut Binder,
        x: Var,
        global: Var,
        boundaries: &[usize],
        mask: &CausalMask,
    ) -> Result<Forward> {
        let (n, _) = g.shape(x);
        if n != self.n_vars {
            return Err(ExcapError::dim(format!("model expects N = {}, input has {n}", self.n_vars)));
        }
        let longest = boundaries.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
        let pe = positional_encoding(n, longest, self.config.segmenter.pe_amplitude);
        let w_f = p.var(g, self.w_f);
        let proj = g.matmul(global, w_f);
        let mut z = Vec::with_capacity(boundaries.len() - 1);
        let mut fused = Vec::with_capacity(boundaries.len() - 1);
        for w in boundaries.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let seg = g.slice_cols(x, lo, hi);
            let seg = if self.config.segmenter.pe_amplitude != 0.0 {
                let mut pe_k = Tensor::zeros(n, hi - lo);
                for r in 0..n {
                    pe_k.row_mut(r).copy_from_slice(&pe.row(r)[..hi - lo]);
                }
                let pe_k = g.constant(pe_k);
                g.add(seg, pe_k)
            } else {
                seg
            };
            let zk = self.tcn.encode(g, p, seg);
            z.push(zk);
            fused.push(g.add(zk, proj));
        }
        let pred = predict_all(g, p, &fused, mask, &self.branches)?;
        Ok(Forward { pred, z })
    }
}

/// Reference model and EXCAP model bundled with the preprocessing between them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pipeline {
    pub reference: ReferenceModel,
    pub model: ExcapModel,
}

impl Pipeline {
    pub fn new(reference: ReferenceModel, model: ExcapModel) -> Result<Self> {
        if reference.n_vars != model.n_vars {
            return Err(ExcapError::dim(format!(
                "reference model has N = {}, EXCAP model N = {}",
                reference.n_vars, model.n_vars
            )));
        }
        Ok(Self { reference, model })
    }

    /// Normalizes and prepares a raw series; the target is resolved when the
    /// series carries one.
    pub fn prepare(&self, ts: &TimeSeries) -> Result<Prepared> {
        let norm = normalize_values(ts.values());
        let mut p = self.prepare_normalized(&ts.id, norm.values.clone(), ts.sampling_rate_hz())?;
        if ts.label.is_some() || ts.targets.is_some() {
            p.target = Some(target_for(ts, self.model.task, &norm)?);
        }
        Ok(p)
    }

    /// Prepares an already normalized matrix (masked or noised inputs).
    pub fn prepare_normalized(&self, id: &str, x: Tensor, fs: f64) -> Result<Prepared> {
        let cfg = &self.model.config;
        cfg.spectral.validate(x.cols())?;
        let attention = self.reference.attention_normalized(&x)?;
        let segments = segment(&x, &attention, &cfg.segmenter)?;
        let plan = plan(&x, fs, &cfg.spectral)?;
        let global = global_features(&x, &plan, &cfg.spectral)?;
        Ok(Prepared {
            id: id.to_string(),
            x,
            sampling_rate_hz: fs,
            attention,
            segments,
            plan,
            global,
            target: None,
        })
    }

    pub fn prepare_all(&self, data: &[TimeSeries]) -> Result<Vec<Prepared>> {
        data.iter().map(|ts| self.prepare(ts)).collect()
    }

    /// Raw branch outputs under the model's own mask.
    pub fn predict(&self, p: &Prepared) -> Result<Vec<f64>> {
        self.predict_with_mask(p, &self.model.mask)
    }

    pub fn predict_with_mask(&self, p: &Prepared, mask: &CausalMask) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.model.store);
        let x = g.constant(p.x.clone());
        let global = g.constant(p.global.clone());
        let f = self.model.forward(&mut g, &mut b, x, global, &p.segments.boundaries, mask)?;
        Ok(g.value(f.pred).data().to_vec())
    }

    /// Encoder embeddings per segment (`N×d_z` each).
    pub fn embeddings(&self, p: &Prepared) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.model.store);
        let x = g.constant(p.x.clone());
        let global = g.constant(p.global.clone());
        let f = self.model.forward(&mut g, &mut b, x, global, &p.segments.boundaries, &self.model.mask)?;
        Ok(f.z.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// A scalar score per input: probability of class 1 for binary
    /// classification, otherwise the first output.
    pub fn score(&self, p: &Prepared) -> Result<f64> {
        let mut out = self.predict(p)?;
        if self.model.task.is_classification() {
            softmax_in_place(&mut out);
            Ok(out[out.len().min(2) - 1])
        } else {
            Ok(out[0])
        }
    }

    /// Runs from a raw series to raw branch outputs.
    pub fn predict_series(&self, ts: &TimeSeries) -> Result<Vec<f64>> {
        self.predict(&self.prepare(ts)?)
    }

    /// The model as a differentiable function of the normalized input with
    /// segmentation and spectral levels frozen at `p`.
    pub fn frozen(&self, p: &Prepared, output: Output) -> Result<FrozenModel<'_>> {
        let t = p.x.cols();
        let mut ops = HashMap::new();
        for &level in &p.plan.levels {
            if let std::collections::hash_map::Entry::Vacant(e) = ops.entry(level) {
                e.insert(feature_operator(t, level, &self.model.config.spectral)?);
            }
        }
        Ok(FrozenModel {
            pipeline: self,
            boundaries: p.segments.boundaries.clone(),
            levels: p.plan.levels.clone(),
            operators: ops,
            output,
        })
    }
}

/// Which scalar of the prediction a gradient explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    /// Raw branch output `j`.
    Branch(usize),
    /// Log-softmax probability of class `c`.
    LogProb(usize),
}

/// A scalar function of an `N×T` input with its gradient.
pub trait Differentiable {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)>;
}

pub struct FrozenModel<'a> {
    pipeline: &'a Pipeline,
    boundaries: Vec<usize>,
    levels: Vec<usize>,
    operators: HashMap<usize, Tensor>,
    output: Output,
}

impl FrozenModel<'_> {
    /// Builds `ŷ` on a graph where `x` is a leaf.
    pub fn build(&self, g: &mut Graph, b: &mut Binder, x: Var) -> Result<Forward> {
        let n = g.shape(x).0;
        let rows: Vec<Var> = (0..n)
            .map(|r| {
                let xr = g.slice_rows(x, r, r + 1);
                let op = g.constant(self.operators[&self.levels[r]].clone());
                g.matmul(xr, op)
            })
            .collect();
        let global = g.concat_rows(&rows);
        let m = &self.pipeline.model;
        m.forward(g, b, x, global, &self.boundaries, &m.mask)
    }
}

impl Differentiable for FrozenModel<'_> {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.pipeline.model.store);
        let xv = g.variable(x.clone());
        let f = self.build(&mut g, &mut b, xv)?;
        let out = match self.output {
            Output::Branch(j) => g.slice_cols(f.pred, j, j + 1),
            Output::LogProb(c) => {
                let lp = g.log_softmax_rows(f.pred);
                g.slice_cols(lp, c, c + 1)
            }
        };
        let value = g.scalar(out);
        let grads = g.backward(out);
        let grad = grads
            .get(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        Ok((value, grad))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::MaskSource;
    use crate::encoder::BlockSpec;
    use crate::reference::ReferenceConfig;
    use rand::Rng;

    pub(crate) fn tiny_config() -> ExcapConfig {
        ExcapConfig {
            segmenter: SegmenterConfig {
                l_max: 5,
                ..Default::default()
            },
            spectral: SpectralConfig {
                j_max: 2,
                t_prime: 4,
                trend_bins: 4,
                ..Default::default()
            },
            encoder: TcnConfig {
                input_proj_dim: 4,
                blocks: vec![BlockSpec {
                    channels: 4,
                    kernel: 3,
                    dilation: 1,
                }],
                d_z: 4,
                ..Default::default()
            },
            decoder: DecoderConfig {
                hidden: 4,
                attention_dim: 4,
                fusion_dim: 4,
            },
            seed: 0,
        }
    }

    fn pipeline(n: usize, mask: CausalMask) -> Pipeline {
        let task = Task::Regression { outputs: mask.d() };
        let reference = ReferenceModel::new(n, task, ReferenceConfig::default()).unwrap();
        let model = ExcapModel::new(n, task, mask, tiny_config()).unwrap();
        Pipeline::new(reference, model).unwrap()
    }

    fn random_series(n: usize, t: usize, seed: u64) -> TimeSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::from_vec(n, t, (0..n * t).map(|_| rng.random_range(-1.0..1.0)).collect());
        TimeSeries::new("r", v, 4.0).unwrap()
    }

    #[test]
    fn mask_shape_must_match_task() {
        let task = Task::Regression { outputs: 2 };
        let mask = CausalMask::all_ones(3, 2, MaskSource::Ingested);
        assert!(matches!(
            ExcapModel::new(2, task, mask, tiny_config()),
            Err(ExcapError::Dimension(_))
        ));
    }

    #[test]
    fn prediction_is_deterministic_with_one_output_per_branch() {
        let p = pipeline(3, CausalMask::identity(3, MaskSource::Ingested));
        let ts = random_series(3, 24, 1);
        let a = p.predict_series(&ts).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, p.predict_series(&ts).unwrap());
    }

    #[test]
    fn frozen_gradient_matches_finite_differences() {
        let p = pipeline(2, CausalMask::all_ones(1, 2, MaskSource::Ingested));
        let prep = p.prepare(&random_series(2, 20, 2)).unwrap();
        let f = p.frozen(&prep, Output::Branch(0)).unwrap();
        let (v0, grad) = f.value_and_grad(&prep.x).unwrap();
        let direct = p.predict(&prep).unwrap()[0];
        assert!((v0 - direct).abs() < 1e-12);
        let h = 1e-6;
        for &(r, c) in &[(0, 0), (1, 7), (0, 19)] {
            let mut plus = prep.x.clone();
            plus.set(r, c, plus.get(r, c) + h);
            let mut minus = prep.x.clone();
            minus.set(r, c, minus.get(r, c) - h);
            let fd = (f.value_and_grad(&plus).unwrap().0 - f.value_and_grad(&minus).unwrap().0) / (2.0 * h);
            let an = grad.get(r, c);
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "({r},{c}) {fd} vs {an}");
        }
    }

    #[test]
    fn non_parent_gradient_is_exactly_zero() {
        let mask = CausalMask::from_rows(
            &[vec![true, false, false], vec![false, true, true], vec![true, false, true]],
            MaskSource::Ingested,
        )
        .unwrap();
        let p = pipeline(3, mask.clone());
        let prep = p.prepare(&random_series(3, 24, 3)).unwrap();
        for j in 0..3 {
            let (_, grad) = p.frozen(&prep, Output::Branch(j)).unwrap().value_and_grad(&prep.x).unwrap();
            for i in 0..3 {
                let zero = grad.row(i).iter().all(|&v| v == 0.0);
                assert_eq!(zero, !mask.get(j, i), "branch {j} variable {i}");
            }
        }
    }
}
