use std::fs;
use std::path::{Path, PathBuf};

use k3m::corruption::CorruptionKind;
use k3m::data_model::{generate_synthetic_corpus, read_corpus, Corpus, GenConfig};
use k3m::model::ModelConfig;
use k3m::tasks::Task;
use k3m::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Where the corpus comes from: a corpus file, or the generator settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSource {
    pub path: Option<PathBuf>,
    pub generate: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sweep {
    pub kinds: Vec<CorruptionKind>,
    pub ratios: Vec<u32>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::ALL.to_vec(),
            ratios: vec![0, 20, 50, 80, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub corpus: CorpusSource,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    /// Defaults to the task's usual epoch count.
    pub finetune: Option<TrainConfig>,
    pub sweep: Sweep,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::ItemCls,
            seeds: vec![0],
            out_dir: None,
            corpus: CorpusSource::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: None,
            sweep: Sweep::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.seeds.is_empty() {
            return usage("seeds must not be empty".into());
        }
        if self.sweep.kinds.is_empty() || self.sweep.ratios.is_empty() {
            return usage("sweep needs at least one kind and one ratio".into());
        }
        if let Some(r) = self.sweep.ratios.iter().find(|&&r| r > 100) {
            return usage(format!("sweep ratio {r} outside 0..=100"));
        }
        if self.corpus.path.is_none() {
            self.corpus.generate.validate().map_err(config_error)?;
        }
        self.model.validate().map_err(config_error)?;
        self.pretrain.validate().map_err(config_error)?;
        self.finetune_config().validate().map_err(config_error)?;
        Ok(())
    }

    pub fn finetune_config(&self) -> TrainConfig {
        self.finetune.clone().unwrap_or_else(|| TrainConfig {
            epochs: self.task.default_epochs(),
            ..TrainConfig::default()
        })
    }

    /// `--seed` replaces the configured seed list.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        self
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn out_dir(&self, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        flag.or_else(|| self.out_dir.clone())
            .ok_or_else(|| CliError::Usage("no output directory: pass --out or set out_dir".into()))
    }

    pub fn corpus(&self, seed: u64) -> Result<Corpus, CliError> {
        Ok(match &self.corpus.path {
            Some(p) => read_corpus(p)?,
            None => generate_synthetic_corpus(&self.corpus.generate, seed)?,
        })
    }

    pub fn echo(&self) -> String {
        toml::to_string(self).unwrap_or_else(|e| format!("# config not printable: {e}\n"))
    }
}

fn config_error(e: k3m::Error) -> CliError {
    CliError::Usage(e.to_string())
}
