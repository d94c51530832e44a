//! TOML run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use excap::eval::{Granularity, MaskTarget};
use excap::experiments::{chain_adjacency, forecast_spec, motif_spec};
use excap::model::ExcapConfig;
use excap::reference::ReferenceConfig;
use excap::scm::ScmSpec;
use excap::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub model: ExcapConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

/// Built-in synthetic tasks, expanded into a full SCM spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Binary motif classification on a lag-1 chain.
    Motif,
    /// One-step forecasting on a lag-1 chain.
    Forecast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Existing files. When absent the data comes from `gen-data`.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub mask_path: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub n: usize,
    pub t: usize,
    /// Full SCM description; overrides `preset`.
    pub scm: Option<ScmSpec>,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            test_path: None,
            mask_path: None,
            preset: None,
            n: 3,
            t: 128,
            scm: None,
            train_size: 500,
            test_size: 200,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// The generator spec, if this dataset is synthetic.
    pub fn scm_spec(&self) -> Option<ScmSpec> {
        if let Some(s) = &self.scm {
            return Some(s.clone());
        }
        self.preset.map(|p| match p {
            Preset::Motif => motif_spec(self.n, self.t),
            Preset::Forecast => forecast_spec(chain_adjacency(self.n), self.t),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MaskChoice {
    /// The mask file of the dataset (the SCM graph for generated data).
    #[default]
    Ingested,
    AllOnes,
    Random,
    /// The ingested mask with `flips` entries toggled.
    Perturbed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub source: MaskChoice,
    pub density: f64,
    pub flips: usize,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            source: MaskChoice::Ingested,
            density: 0.5,
            flips: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub k_percent: f64,
    pub granularity: Granularity,
    pub targets: Vec<MaskTarget>,
    pub baselines: bool,
    pub ig_steps: usize,
    pub sigmas: Vec<f64>,
    pub lipschitz_trials: usize,
    /// Test samples used by the Lipschitz probe.
    pub lipschitz_samples: usize,
    pub runtime_t: Vec<usize>,
    pub runtime_warmup: usize,
    pub runtime_iters: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            k_percent: 15.0,
            granularity: Granularity::Pointwise,
            targets: vec![MaskTarget::Top, MaskTarget::Random, MaskTarget::Bottom],
            baselines: false,
            ig_steps: 128,
            sigmas: vec![0.01, 0.02, 0.05],
            lipschitz_trials: 3,
            lipschitz_samples: 50,
            runtime_t: vec![128, 256, 512, 1024],
            runtime_warmup: 3,
            runtime_iters: 11,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // relative paths inside the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out);
        for p in [&mut cfg.dataset.train_path, &mut cfg.dataset.test_path, &mut cfg.dataset.mask_path]
            .into_iter()
            .flatten()
        {
            rebase(p);
        }
        Ok(cfg)
    }

    /// Checks everything that does not need the data itself.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        let d = &self.dataset;
        if d.train_path.is_none() && d.scm_spec().is_none() {
            return Err(CliError::Config("dataset needs train_path, preset or scm".into()));
        }
        for p in [&d.train_path, &d.test_path, &d.mask_path].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Config(format!("referenced path {} does not exist", p.display())));
            }
        }
        if let Some(spec) = d.scm_spec() {
            spec.validate()?;
            if d.train_size == 0 || d.test_size == 0 {
                return Err(CliError::Config("train_size and test_size must be positive".into()));
            }
        }
        self.reference.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if !(self.mask.density > 0.0 && self.mask.density <= 1.0) {
            return Err(CliError::Config("mask density must lie in (0,1]".into()));
        }
        let e = &self.evaluation;
        excap::eval::MaskingProtocol::new(e.k_percent, MaskTarget::Top)?;
        if e.ig_steps == 0 || e.lipschitz_trials == 0 || e.runtime_iters == 0 {
            return Err(CliError::Config("ig_steps, lipschitz_trials and runtime_iters must be ≥ 1".into()));
        }
        if e.sigmas.iter().any(|&s| !(s > 0.0)) {
            return Err(CliError::Config("sigmas must be positive".into()));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    pub fn train_path(&self) -> PathBuf {
        self.dataset.train_path.clone().unwrap_or_else(|| self.data_dir().join("train.csv"))
    }

    /// Falls back to the training file when no test split exists.
    pub fn test_path(&self) -> PathBuf {
        match (&self.dataset.test_path, &self.dataset.train_path) {
            (Some(p), _) => p.clone(),
            (None, Some(train)) => train.clone(),
            (None, None) => self.data_dir().join("test.csv"),
        }
    }

    pub fn mask_path(&self) -> Option<PathBuf> {
        match (&self.dataset.mask_path, &self.dataset.train_path) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(_)) => None,
            (None, None) => Some(self.data_dir().join("mask.json")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "seeds = [0]\nout = \"run\"\n[dataset]\npreset = \"motif\"\nn = 3\nt = 32\n"
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = toml::from_str(minimal()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.evaluation.k_percent, 15.0);
        assert_eq!(cfg.dataset.scm_spec().unwrap().t, 32);
        assert_eq!(cfg.train_path(), PathBuf::from("run/data/train.csv"));
    }

    #[test]
    fn empty_seeds_rejected() {
        let mut cfg: RunConfig = toml::from_str(minimal()).unwrap();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn missing_path_rejected() {
        let mut cfg: RunConfig = toml::from_str(minimal()).unwrap();
        cfg.dataset.train_path = Some("/definitely/not/here.csv".into());
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("/definitely/not/here.csv"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = format!("{}bogus = 1\n", minimal());
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn bundled_configs_validate() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let mut seen = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "toml") {
                RunConfig::load(&path).unwrap().validate().unwrap();
                seen += 1;
            }
        }
        assert!(seen >= 3);
    }

    #[test]
    fn invalid_scm_rejected() {
        let mut cfg: RunConfig = toml::from_str(minimal()).unwrap();
        let mut spec = cfg.dataset.scm_spec().unwrap();
        spec.adjacency.pop();
        cfg.dataset.scm = Some(spec);
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
