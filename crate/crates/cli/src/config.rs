use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use simplefold_core::confidence::PlddtTrainConfig;
use simplefold_core::model::ModelConfig;
use simplefold_core::sampler::SamplerConfig;
use simplefold_core::train::TrainConfig;

use crate::error::InputError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub embedding_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every stage; overrides `train.seed` and `plddt.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub plddt: PlddtTrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            plddt: PlddtTrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, InputError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| InputError(format!("config: {e}")))?;
        cfg.train.seed = cfg.seed;
        cfg.plddt.seed = cfg.seed;
        cfg.model.validate().map_err(|e| InputError(format!("model config: {e}")))?;
        cfg.train.validate().map_err(|e| InputError(format!("train config: {e}")))?;
        cfg.sampler.validate().map_err(|e| InputError(format!("sampler config: {e}")))?;
        cfg.plddt.sampler.validate().map_err(|e| InputError(format!("plddt sampler config: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory and data directories must exist.
    pub fn load(path: &Path) -> Result<Self, InputError> {
        let text = std::fs::read_to_string(path).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        cfg.output_dir = resolve(&cfg.output_dir);
        for dir in [&mut cfg.data.train_dir, &mut cfg.data.eval_dir, &mut cfg.data.embedding_dir]
            .into_iter()
            .flatten()
        {
            *dir = resolve(dir);
            if !dir.is_dir() {
                return Err(InputError(format!("data directory {} does not exist", dir.display())));
            }
        }
        Ok(cfg)
    }
}
