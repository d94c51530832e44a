//! Shared data model: sequences, attention maps, segments, causal masks,
//! latent embeddings and explanation reports, plus their file formats.
//!
//! All reals are `f64`. Types validate their invariants on construction and
//! are immutable afterwards, so they can be shared freely across threads.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ExcapError, Result};
use crate::tensor::Tensor;

/// A multivariate sequence `X ∈ R^{N×T}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    values: Tensor,
    sampling_rate_hz: f64,
    /// Per-sequence class index.
    pub label: Option<usize>,
    /// Regression targets, one per output.
    pub targets: Option<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(id: impl Into<String>, values: Tensor, sampling_rate_hz: f64) -> Result<Self> {
        let ts = Self {
            id: id.into(),
            values,
            sampling_rate_hz,
            label: None,
            targets: None,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_targets(mut self, targets: Vec<f64>) -> Self {
        self.targets = Some(targets);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let what = format!("sequence '{}'", self.id);
        let (n, t) = self.values.shape();
        if n < 1 || t < 2 {
            return Err(ExcapError::invalid(what, format!("need N ≥ 1 and T ≥ 2, got {n}×{t}")));
        }
        if !(self.sampling_rate_hz > 0.0 && self.sampling_rate_hz.is_finite()) {
            return Err(ExcapError::invalid(what, "sampling rate must be positive"));
        }
        for v in 0..n {
            for (step, x) in self.values.row(v).iter().enumerate() {
                if !x.is_finite() {
                    return Err(ExcapError::invalid(
                        what,
                        format!("non-finite value at variable {v}, t={step}"),
                    ));
                }
            }
        }
        if let Some(targets) = &self.targets {
            if targets.iter().any(|x| !x.is_finite()) {
                return Err(ExcapError::invalid(what, "non-finite target"));
            }
        }
        Ok(())
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn sampling_rate_hz(&self) -> f64 {
        self.sampling_rate_hz
    }

    pub fn n_vars(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-variable attention normalised over time: every row is a probability
/// vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAttention")]
pub struct AttentionMap {
    scores: Tensor,
}

#[derive(Deserialize)]
struct RawAttention {
    scores: Tensor,
}

impl TryFrom<RawAttention> for AttentionMap {
    type Error = ExcapError;

    fn try_from(raw: RawAttention) -> Result<Self> {
        Self::new(raw.scores)
    }
}

pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

impl AttentionMap {
    pub fn new(scores: Tensor) -> Result<Self> {
        for r in 0..scores.rows() {
            let row = scores.row(r);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(ExcapError::invalid("attention map", format!("row {r} has entries outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(ExcapError::invalid("attention map", format!("row {r} sums to {s}")));
            }
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn n_vars(&self) -> usize {
        self.scores.rows()
    }

    pub fn len(&self) -> usize {
        self.scores.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Attention-derived segmentation of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSet {
    /// `0 = b_0 < b_1 < … < b_L = T`.
    pub boundaries: Vec<usize>,
    /// One `N×T_max` matrix per segment: zero-padded slice plus positional
    /// encoding.
    pub padded_segments: Vec<Tensor>,
    pub original_lengths: Vec<usize>,
    pub saliency_flags: Vec<bool>,
    /// Mean attention (over variables and the segment span) per segment.
    pub segment_attention: Vec<f64>,
    pub positional_encoding_applied: bool,
    pub t_max: usize,
}

impl SegmentSet {
    pub fn num_segments(&self) -> usize {
        self.original_lengths.len()
    }

    pub fn span(&self, k: usize) -> std::ops::Range<usize> {
        self.boundaries[k]..self.boundaries[k + 1]
    }

    pub fn validate(&self, t: usize, l_max: usize) -> Result<()> {
        let b = &self.boundaries;
        let bad = |m: String| Err(ExcapError::invalid("segment set", m));
        if b.len() < 2 || b[0] != 0 || *b.last().unwrap() != t {
            return bad(format!("boundaries must run from 0 to {t}: {b:?}"));
        }
        if b.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("boundaries not strictly increasing: {b:?}"));
        }
        let l = b.len() - 1;
        if l > l_max {
            return bad(format!("{l} segments exceed L_max={l_max}"));
        }
        if self.original_lengths.len() != l || self.saliency_flags.len() != l || self.padded_segments.len() != l {
            return bad("per-segment vectors disagree with boundary count".into());
        }
        for k in 0..l {
            let len = b[k + 1] - b[k];
            if self.original_lengths[k] != len || len > self.t_max {
                return bad(format!("segment {k} length {len} inconsistent (T_max={})", self.t_max));
            }
        }
        Ok(())
    }

    /// Exported view for inspection.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "boundaries": self.boundaries,
            "saliency_flags": self.saliency_flags,
            "segment_attention": self.segment_attention,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    #[default]
    Ingested,
    GroundTruthScm,
    Random,
    Perturbed,
}

/// Binary `D×N` matrix; entry `(j, i)` is 1 iff input `i` is a causal
/// parent of output `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MaskFile", into = "MaskFile")]
pub struct CausalMask {
    d: usize,
    n: usize,
    entries: Vec<bool>,
    source: MaskSource,
}

/// On-disk mask layout: `{"D": int, "N": int, "entries": [[0|1]]}`.
#[derive(Serialize, Deserialize)]
struct MaskFile {
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "N")]
    n: usize,
    entries: Vec<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<MaskSource>,
}

impl TryFrom<MaskFile> for CausalMask {
    type Error = ExcapError;

    fn try_from(f: MaskFile) -> Result<Self> {
        if f.entries.len() != f.d || f.entries.iter().any(|r| r.len() != f.n) {
            return Err(ExcapError::invalid("causal mask", format!("entries do not form a {}×{} matrix", f.d, f.n)));
        }
        let mut rows = Vec::with_capacity(f.d);
        for (j, r) in f.entries.iter().enumerate() {
            let mut row = Vec::with_capacity(f.n);
            for &e in r {
                match e {
                    0 => row.push(false),
                    1 => row.push(true),
                    other => {
                        return Err(ExcapError::invalid("causal mask", format!("row {j} has non-binary entry {other}")))
                    }
                }
            }
            rows.push(row);
        }
        CausalMask::from_rows(&rows, f.source.unwrap_or_default())
    }
}

impl From<CausalMask> for MaskFile {
    fn from(m: CausalMask) -> Self {
        MaskFile {
            d: m.d,
            n: m.n,
            entries: (0..m.d).map(|j| m.row(j).iter().map(|&b| b as u8).collect()).collect(),
            source: Some(m.source),
        }
    }
}

impl CausalMask {
    pub fn from_rows(rows: &[Vec<bool>], source: MaskSource) -> Result<Self> {
        let d = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if d == 0 || n == 0 {
            return Err(ExcapError::invalid("causal mask", "empty mask"));
        }
        let mut entries = Vec::with_capacity(d * n);
        for (j, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(ExcapError::invalid("causal mask", "ragged rows"));
            }
            if !r.iter().any(|&b| b) {
                return Err(ExcapError::invalid("causal mask", format!("output {j} has no causal parent")));
            }
            entries.extend_from_slice(r);
        }
        Ok(Self { d, n, entries, source })
    }

    pub fn all_ones(d: usize, n: usize, source: MaskSource) -> Self {
        Self {
            d,
            n,
            entries: vec![true; d * n],
            source,
        }
    }

    pub fn identity(n: usize, source: MaskSource) -> Self {
        let rows: Vec<Vec<bool>> = (0..n).map(|j| (0..n).map(|i| i == j).collect()).collect();
        Self::from_rows(&rows, source).expect("identity rows are nonempty")
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn source(&self) -> MaskSource {
        self.source
    }

    pub fn with_source(mut self, source: MaskSource) -> Self {
        self.source = source;
        self
    }

    pub fn get(&self, j: usize, i: usize) -> bool {
        self.entries[j * self.n + i]
    }

    pub fn row(&self, j: usize) -> &[bool] {
        &self.entries[j * self.n..(j + 1) * self.n]
    }

    pub fn parents(&self, j: usize) -> Vec<usize> {
        self.row(j).iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    /// `‖self − other‖²_F`, i.e. the number of differing entries.
    pub fn frobenius_sq(&self, other: &CausalMask) -> usize {
        assert_eq!((self.d, self.n), (other.d, other.n), "mask shape mismatch");
        self.entries.iter().zip(&other.entries).filter(|(a, b)| a != b).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingOrigin {
    Segment,
    HighAgg,
    LowAgg,
    Prototype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEmbedding {
    pub vector: Vec<f64>,
    pub origin: EmbeddingOrigin,
    pub variable_index: usize,
}

impl LatentEmbedding {
    pub fn new(vector: Vec<f64>, origin: EmbeddingOrigin, variable_index: usize, d_z: usize) -> Result<Self> {
        if vector.len() != d_z {
            return Err(ExcapError::dim(format!("embedding length {} != d_z {d_z}", vector.len())));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(ExcapError::invalid("latent embedding", "non-finite entry"));
        }
        Ok(Self {
            vector,
            origin,
            variable_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub before: f64,
    pub after: f64,
    pub delta_percent: f64,
}

impl Degradation {
    pub fn new(before: f64, after: f64) -> Self {
        Self {
            before,
            after,
            delta_percent: 100.0 * (after - before) / before,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzSample {
    pub sigma: f64,
    pub input_delta_norm: f64,
    pub output_delta_norm: f64,
    pub ratio: f64,
}

/// Attribution, degradation, stability, Lipschitz and runtime results of one
/// experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    /// Nonnegative `N×T` importance map summing to 1.
    pub attribution: Tensor,
    pub degradation: BTreeMap<String, Degradation>,
    pub stability: Option<f64>,
    pub lipschitz_samples: Vec<LipschitzSample>,
    /// Sequence length → milliseconds per batch.
    pub runtime: BTreeMap<usize, f64>,
}

pub const ATTRIBUTION_SUM_TOLERANCE: f64 = 1e-9;

impl ExplanationReport {
    pub fn validate(&self) -> Result<()> {
        if self.attribution.data().iter().any(|&v| !(v >= 0.0)) {
            return Err(ExcapError::invalid("report", "attribution has negative or NaN entries"));
        }
        let s = self.attribution.sum();
        if (s - 1.0).abs() > ATTRIBUTION_SUM_TOLERANCE {
            return Err(ExcapError::invalid("report", format!("attribution not normalised: sums to {s}")));
        }
        for (metric, d) in &self.degradation {
            let expect = 100.0 * (d.after - d.before) / d.before;
            if !(expect - d.delta_percent).abs().le(&(1e-9 * (1.0 + expect.abs()))) {
                return Err(ExcapError::invalid("report", format!("delta_percent for {metric} inconsistent")));
            }
        }
        if let Some(st) = self.stability {
            if !(st >= 0.0) {
                return Err(ExcapError::invalid("report", "stability must be ≥ 0"));
            }
        }
        Ok(())
    }
}

pub fn save_report(report: &ExplanationReport, path: &Path) -> Result<()> {
    report.validate()?;
    fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<ExplanationReport> {
    let report: ExplanationReport = serde_json::from_str(&fs::read_to_string(path)?)?;
    report.validate()?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Csv,
    Json,
}

impl DatasetFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::Json,
            _ => Self::Csv,
        }
    }
}

/// Per-sequence metadata stored next to a dataset CSV.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SidecarEntry {
    pub label: Option<usize>,
    pub targets: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampling_rate_hz: Option<f64>,
}

/// `data.csv` → `data.meta.json`.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<TimeSeries>> {
    let series = match format {
        DatasetFormat::Json => {
            let text = fs::read_to_string(path)?;
            if text.trim().is_empty() {
                return Err(ExcapError::Parse {
                    location: path.display().to_string(),
                    message: "no sequences".into(),
                });
            }
            let v: Vec<TimeSeries> = serde_json::from_str(&text)?;
            v
        }
        DatasetFormat::Csv => load_csv(path)?,
    };
    if series.is_empty() {
        return Err(ExcapError::Parse {
            location: path.display().to_string(),
            message: "no sequences".into(),
        });
    }
    for s in &series {
        s.validate()?;
    }
    Ok(series)
}

fn load_csv(path: &Path) -> Result<Vec<TimeSeries>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(usize, Vec<f64>)>> = HashMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let loc = |col: usize| format!("{}:{line}:{col}", path.display());
        if record.len() < 3 {
            return Err(ExcapError::Parse {
                location: loc(1),
                message: "expected sequence_id, variable_index and at least one value".into(),
            });
        }
        let id = record[0].to_string();
        let var: usize = record[1].parse().map_err(|_| ExcapError::Parse {
            location: loc(2),
            message: format!("bad variable index '{}'", &record[1]),
        })?;
        let mut values = Vec::with_capacity(record.len() - 2);
        for (c, cell) in record.iter().enumerate().skip(2) {
            let v: f64 = cell.parse().map_err(|_| ExcapError::Parse {
                location: loc(c + 1),
                message: format!("sequence '{id}' variable {var} t={}: cannot parse '{cell}'", c - 2),
            })?;
            if !v.is_finite() {
                return Err(ExcapError::Parse {
                    location: loc(c + 1),
                    message: format!("sequence '{id}' variable {var} t={}: non-finite value", c - 2),
                });
            }
            values.push(v);
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((var, values));
    }
    let side = sidecar_path(path);
    let meta: HashMap<String, SidecarEntry> = if side.exists() {
        serde_json::from_str(&fs::read_to_string(&side)?)?
    } else {
        HashMap::new()
    };
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut vars = rows.remove(&id).expect("recorded above");
        vars.sort_by_key(|(v, _)| *v);
        let t = vars[0].1.len();
        for (expect, (v, vals)) in vars.iter().enumerate() {
            if *v != expect {
                return Err(ExcapError::invalid(format!("sequence '{id}'"), format!("variable indices must be 0..N-1, found {v}")));
            }
            if vals.len() != t {
                return Err(ExcapError::invalid(format!("sequence '{id}'"), format!("variable {v} has {} steps, expected {t}", vals.len())));
            }
        }
        let n = vars.len();
        let data: Vec<f64> = vars.into_iter().flat_map(|(_, v)| v).collect();
        let m = meta.get(&id).cloned().unwrap_or_default();
        let mut ts = TimeSeries::new(id, Tensor::from_vec(n, t, data), m.sampling_rate_hz.unwrap_or(1.0))?;
        ts.label = m.label;
        ts.targets = m.targets;
        out.push(ts);
    }
    Ok(out)
}

/// Writes the CSV layout read by [`load_dataset`] plus its sidecar.
pub fn save_dataset_csv(series: &[TimeSeries], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    let t_max = series.iter().map(TimeSeries::len).max().unwrap_or(0);
    let mut header = vec!["sequence_id".to_string(), "variable_index".to_string()];
    header.extend((0..t_max).map(|t| format!("t{t}")));
    w.write_record(&header)?;
    let mut meta = BTreeMap::new();
    for s in series {
        for v in 0..s.n_vars() {
            let mut rec = vec![s.id.clone(), v.to_string()];
            rec.extend(s.values().row(v).iter().map(|x| format!("{x:?}")));
            w.write_record(&rec)?;
        }
        meta.insert(
            s.id.clone(),
            SidecarEntry {
                label: s.label,
                targets: s.targets.clone(),
                sampling_rate_hz: Some(s.sampling_rate_hz()),
            },
        );
    }
    w.flush()?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}
