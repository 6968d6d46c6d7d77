use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::eval::TrialParams;
use crate::trainer::TrainConfig;

/// Single JSON document driving every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub eval: TrialParams,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            eval: TrialParams::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir is empty"));
        }
        Ok(())
    }

    /// Config with every optional field filled in.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut out = self.clone();
        out.corpus.world_seed = Some(self.corpus.world_seed());
        out.train = self.train.resolved();
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
