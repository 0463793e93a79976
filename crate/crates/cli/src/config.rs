use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sits_fusion::fusion::{EncoderConfig, FusionConfig};
use sits_fusion::synthgen::SynthConfig;
use sits_fusion::tasks::{TaskData, TrainConfig};

use crate::Usage;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SITSFUSE_OUT";
pub const CONFIG_FILE: &str = "config.json";

/// Everything a run depends on. `dataset` points at a dataset directory;
/// without it the dataset is generated in memory from `synth`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub encoders: EncoderConfig,
    pub out_dir: Option<PathBuf>,
    /// Overrides both the synthetic and the training seed.
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| Usage(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Pushes the global seed down and checks every part, including the
    /// (scheme, task, aux) rules.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        if let Some(seed) = self.seed {
            self.synth.seed = seed;
            self.train.seed = seed;
        }
        let check = |r: sits_fusion::Result<()>| r.map_err(|e| anyhow::Error::from(Usage(e.to_string())));
        check(self.encoders.validate())?;
        check(self.fusion.validate(self.train.task, self.encoders.modalities()))?;
        check(self.train.validate())?;
        if self.dataset.is_none() {
            check(self.synth.validate())?;
            if self.synth.channels != self.encoders.channels || self.synth.num_classes != self.encoders.num_classes {
                return Err(Usage("synth channels and classes must match the encoder config".into()).into());
            }
        }
        Ok(self)
    }

    pub fn out_root(&self) -> PathBuf {
        out_root(self.out_dir.as_deref())
    }

    pub fn load_data(&self) -> anyhow::Result<TaskData> {
        let data = match &self.dataset {
            Some(root) => TaskData::load(root)?,
            None => {
                let (m, s) = sits_fusion::synthgen::generate_in_memory(&self.synth)?;
                TaskData::new(m, s)?
            }
        };
        if data.channels() != self.encoders.channels || data.num_classes() != self.encoders.num_classes {
            return Err(Usage(format!(
                "dataset has channels {:?} and {} classes, the encoders expect {:?} and {}",
                data.channels(),
                data.num_classes(),
                self.encoders.channels,
                self.encoders.num_classes
            ))
            .into());
        }
        Ok(data)
    }

    /// Default run directory name, e.g. `late_parcel_aux`.
    pub fn run_name(&self) -> String {
        let mut name = format!("{}_{}", self.fusion.scheme, self.train.task);
        if self.fusion.aux {
            name.push_str("_aux");
        }
        if self.fusion.temporal_dropout {
            name.push_str("_tdrop");
        }
        name
    }
}

/// Explicit directory, else the environment variable, else `runs`.
pub fn out_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}
