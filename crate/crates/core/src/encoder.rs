//! Shared dilated causal TCN mapping each segment to one `d_z` embedding per
//! variable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{EmbeddingOrigin, LatentEmbedding};
use crate::error::{ExcapError, Result};
use crate::nn::{Binder, CausalConv, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    MeanOverTime,
    MaxOverTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TcnConfig {
    pub input_proj_dim: usize,
    pub blocks: Vec<BlockSpec>,
    pub d_z: usize,
    pub aggregation: Aggregation,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            input_proj_dim: 16,
            blocks: [1, 2, 4]
                .iter()
                .map(|&dilation| BlockSpec {
                    channels: 16,
                    kernel: 3,
                    dilation,
                })
                .collect(),
            d_z: 32,
            aggregation: Aggregation::MeanOverTime,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_proj_dim == 0 || self.d_z == 0 {
            return Err(ExcapError::config("encoder widths must be positive"));
        }
        for b in &self.blocks {
            if b.kernel < 2 || b.dilation == 0 || b.channels == 0 {
                return Err(ExcapError::config(format!(
                    "encoder block {b:?} needs kernel ≥ 2, dilation ≥ 1, channels ≥ 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: CausalConv,
    pub conv2: CausalConv,
    pub skip: Option<CausalConv>,
}

impl ResidualBlock {
    pub fn forward(&self, g: &mut Graph, p: &mut Binder, x: Var, batch: usize) -> Var {
        let h = self.conv1.forward(g, p, x, batch);
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h, batch);
        let h = g.relu(h);
        let res = match &self.skip {
            Some(c) => c.forward(g, p, x, batch),
            None => x,
        };
        let y = g.add(h, res);
        g.relu(y)
    }

    /// Past steps one output position depends on.
    pub fn receptive_field(&self) -> usize {
        self.conv1.reach() + self.conv2.reach()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tcn {
    pub config: TcnConfig,
    input: CausalConv,
    pub blocks: Vec<ResidualBlock>,
    output: CausalConv,
}

impl Tcn {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, config: TcnConfig) -> Result<Self> {
        config.validate()?;
        let input = CausalConv::new(store, rng, "tcn.in", 1, config.input_proj_dim, 1, 1);
        let mut cin = config.input_proj_dim;
        let mut blocks = Vec::new();
        for (i, b) in config.blocks.iter().enumerate() {
            let conv1 = CausalConv::new(store, rng, &format!("tcn.b{i}.c1"), cin, b.channels, b.kernel, b.dilation);
            let conv2 = CausalConv::new(store, rng, &format!("tcn.b{i}.c2"), b.channels, b.channels, b.kernel, b.dilation);
            let skip = (cin != b.channels).then(|| CausalConv::new(store, rng, &format!("tcn.b{i}.skip"), cin, b.channels, 1, 1));
            blocks.push(ResidualBlock { conv1, conv2, skip });
            cin = b.channels;
        }
        let output = CausalConv::new(store, rng, "tcn.out", cin, config.d_z, 1, 1);
        Ok(Self {
            config,
            input,
            blocks,
            output,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.input.params();
        for b in &self.blocks {
            v.extend(b.conv1.params());
            v.extend(b.conv2.params());
            if let Some(s) = &b.skip {
                v.extend(s.params());
            }
        }
        v.extend(self.output.params());
        v
    }

    pub fn receptive_field(&self) -> usize {
        self.blocks.iter().map(ResidualBlock::receptive_field).sum()
    }

    /// `N×len` valid segment steps to `N×d_z`. Only the valid steps are
    /// convolved, so padding never reaches the aggregate.
    pub fn encode(&self, g: &mut Graph, p: &mut Binder, segment: Var) -> Var {
        let n = g.shape(segment).0;
        let mut h = self.input.forward(g, p, segment, n);
        for b in &self.blocks {
            h = b.forward(g, p, h, n);
        }
        let h = self.output.forward(g, p, h, n);
        let agg = match self.config.aggregation {
            Aggregation::MeanOverTime => g.mean_cols(h),
            Aggregation::MaxOverTime => g.max_cols(h),
        };
        g.reshape(agg, n, self.config.d_z)
    }
}

/// Plain evaluation of one padded segment (`N×T_max`) of valid `length`.
pub fn encode_segment(tcn: &Tcn, store: &ParamStore, segment: &Tensor, length: usize) -> Result<Tensor> {
    if length == 0 || length > segment.cols() {
        return Err(ExcapError::invalid(
            "segment length",
            format!("must lie in 1..={}, got {length}", segment.cols()),
        ));
    }
    let mut valid = Tensor::zeros(segment.rows(), length);
    for r in 0..segment.rows() {
        valid.row_mut(r).copy_from_slice(&segment.row(r)[..length]);
    }
    let mut g = Graph::new();
    let mut p = Binder::new(store);
    let x = g.constant(valid);
    let z = tcn.encode(&mut g, &mut p, x);
    Ok(g.value(z).clone())
}

/// Row `i` of an `N×d_z` block as an embedding of variable `i`.
pub fn embeddings_of(z: &Tensor, origin: EmbeddingOrigin) -> Result<Vec<LatentEmbedding>> {
    (0..z.rows())
        .map(|i| LatentEmbedding::new(z.row(i).to_vec(), origin, i, z.cols()))
        .collect()
}

/// Inner product `⟨z_i, z_j⟩`.
pub fn pattern_similarity(a: &LatentEmbedding, b: &LatentEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(ExcapError::dim(format!("embedding sizes {} and {}", a.dim(), b.dim())));
    }
    Ok(a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum())
}
