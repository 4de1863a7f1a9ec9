use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use qeforge::corpus::DEFAULT_MAX_SIZE;
use qeforge::ensemble::stacking::DEFAULT_RIDGE_ALPHAS;
use qeforge::ensemble::{default_grid, GbtConfig, MetaSetting, RegressorKind};
use qeforge::estimator::EstimatorConfig;
use qeforge::predictor::{PredictorHyper, PredictorTrainConfig};
use qeforge::synthetic::{BenchmarkConfig, LOW_RESOURCE};

/// Everything an experiment needs. Missing JSON fields take the full-size
/// defaults (hidden 400, batch 64, Adam at 2e-3); [`ExperimentConfig::desk_scale`]
/// is the small configuration used when no file is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: Option<String>,
    pub data: DataConfig,
    pub predictor: PredictorSettings,
    pub estimator: EstimatorConfig,
    pub ensemble: EnsembleSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Corpus files. Without them a synthetic benchmark is generated from
    /// `synthetic` and the experiment seed.
    pub files: Option<DataFiles>,
    pub synthetic: BenchmarkConfig,
    pub vocab_min_freq: u64,
    pub vocab_max_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            files: None,
            synthetic: BenchmarkConfig::default(),
            vocab_min_freq: 1,
            vocab_max_size: DEFAULT_MAX_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    /// QE splits keyed by language pair (`et-en`, `en-de`, ...).
    pub qe: BTreeMap<String, QePaths>,
    /// Clean parallel corpora for predictor pretraining, keyed by pair.
    #[serde(default)]
    pub pretrain: BTreeMap<String, PathBuf>,
    /// Parallel corpora drawn on by the data-size presets, keyed by pair.
    #[serde(default)]
    pub augment: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QePaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSettings {
    pub model: PredictorHyper,
    pub training: PredictorTrainConfig,
    /// Epochs on a parallel corpus before transfer.
    pub pretrain_epochs: usize,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        PredictorSettings {
            model: PredictorHyper::rnn(),
            training: PredictorTrainConfig::default(),
            pretrain_epochs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    pub regressor: RegressorKind,
    pub folds: usize,
    pub ridge_alphas: Vec<f64>,
    pub gbt_grid: Vec<GbtConfig>,
    /// Development rows the meta-regressor is fit on.
    pub pairs: Vec<String>,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        let gbt_grid = default_grid(RegressorKind::Gbt)
            .into_iter()
            .filter_map(|s| match s {
                MetaSetting::Gbt(c) => Some(c),
                MetaSetting::Ridge { .. } => None,
            })
            .collect();
        EnsembleSettings {
            regressor: RegressorKind::Ridge,
            folds: qeforge::ensemble::stacking::DEFAULT_FOLDS,
            ridge_alphas: DEFAULT_RIDGE_ALPHAS.to_vec(),
            gbt_grid,
            pairs: LOW_RESOURCE.iter().map(|p| p.to_string()).collect(),
        }
    }
}

impl EnsembleSettings {
    pub fn grid(&self, kind: RegressorKind) -> Vec<MetaSetting> {
        match kind {
            RegressorKind::Ridge => self.ridge_alphas.iter().map(|&alpha| MetaSetting::Ridge { alpha }).collect(),
            RegressorKind::Gbt => self.gbt_grid.iter().copied().map(MetaSetting::Gbt).collect(),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            preset: None,
            data: DataConfig::default(),
            predictor: PredictorSettings::default(),
            estimator: EstimatorConfig::default(),
            ensemble: EnsembleSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small models that train on the synthetic benchmark in about a minute
    /// per sub-model on one CPU core.
    pub fn desk_scale() -> Self {
        let mut c = ExperimentConfig::default();
        let m = &mut c.predictor.model;
        m.hidden = 24;
        m.emb_dim = 24;
        m.dropout = 0.3;
        c.predictor.training.epochs = 30;
        c.predictor.training.batch_size = 16;
        c.predictor.pretrain_epochs = 20;
        c.estimator.hidden = 24;
        c.estimator.batch_size = 16;
        c
    }

    /// Reads a JSON config. Relative data paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(files) = &mut cfg.data.files {
            let base = path.parent().unwrap_or(Path::new("."));
            files.resolve(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.predictor.model.validate()?;
        self.predictor.training.validate()?;
        ensure!(self.predictor.pretrain_epochs > 0, "predictor.pretrain_epochs must be at least 1");
        self.estimator.validate()?;
        ensure!(self.data.vocab_max_size > 4, "data.vocab_max_size leaves no room for words");
        ensure!(self.ensemble.folds >= 2, "ensemble.folds must be at least 2");
        ensure!(!self.ensemble.pairs.is_empty(), "ensemble.pairs is empty");
        ensure!(
            !self.ensemble.ridge_alphas.is_empty() && self.ensemble.ridge_alphas.iter().all(|a| *a >= 0.0 && a.is_finite()),
            "ensemble.ridge_alphas must be a non-empty list of finite values ≥ 0"
        );
        ensure!(!self.ensemble.gbt_grid.is_empty(), "ensemble.gbt_grid is empty");
        match &self.data.files {
            Some(files) => files.check_exist()?,
            None => self.data.synthetic.validate()?,
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

impl DataFiles {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for q in self.qe.values_mut() {
            fix(&mut q.train);
            fix(&mut q.valid);
            if let Some(t) = &mut q.test {
                fix(t);
            }
        }
        self.pretrain.values_mut().chain(self.augment.values_mut()).for_each(fix);
    }

    fn check_exist(&self) -> Result<()> {
        if self.qe.is_empty() {
            bail!("data.files.qe lists no language pairs");
        }
        let mut paths: Vec<&PathBuf> = Vec::new();
        for q in self.qe.values() {
            paths.extend([&q.train, &q.valid]);
            paths.extend(q.test.iter());
        }
        paths.extend(self.pretrain.values());
        paths.extend(self.augment.values());
        for p in paths {
            ensure!(p.is_file(), "data file {} does not exist", p.display());
        }
        Ok(())
    }
}
