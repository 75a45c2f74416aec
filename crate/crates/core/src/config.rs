//! Declarative run configuration shared by the command-line tools.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ExitSet, ModelConfig};
use crate::tournament::{GenerationSettings, JudgeConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Held-out prompts for generation, analysis and tournaments.
    pub instructions: Option<PathBuf>,
}

/// A single JSON document; unknown keys anywhere are rejected. Relative paths
/// resolve against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub exits: ExitSet,
    /// `train.seed` is overwritten by the top-level `seed`.
    pub train: TrainConfig,
    pub data: DataPaths,
    pub output_dir: PathBuf,
    /// Seeds parameter initialisation and the training data order.
    pub seed: u64,
    pub judge: JudgeConfig,
    pub generation: GenerationSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            exits: ExitSet::every(2, 8).expect("desk exit set"),
            train: TrainConfig::default(),
            data: DataPaths::default(),
            output_dir: PathBuf::from("out"),
            seed: 0,
            judge: JudgeConfig::default(),
            generation: GenerationSettings::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, parses and validates a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.data.train);
        resolve(base, &mut cfg.data.val);
        resolve(base, &mut cfg.data.instructions);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.exits.validate(self.model.n_blocks)?;
        self.train.validate(&self.exits)?;
        if self.generation.max_new_tokens < 1 {
            return Err(Error::Config("generation.max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Returns the configured path, failing if it is unset or missing.
    pub fn require(&self, which: &str) -> Result<&Path> {
        let p = match which {
            "train" => &self.data.train,
            "val" => &self.data.val,
            "instructions" => &self.data.instructions,
            other => return Err(Error::InvalidArgument(format!("unknown data path {other}"))),
        };
        let p = p
            .as_deref()
            .ok_or_else(|| Error::Config(format!("data.{which} is not set")))?;
        if !p.exists() {
            return Err(Error::Config(format!("data.{which} does not exist: {}", p.display())));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_unknown_keys() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.exits.depths(), &[2, 4, 6, 8]);
        assert!(matches!(
            RunConfig::from_json(r#"{"modle": {}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"train": {"learning_rte": 1.0}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn top_level_seed_wins() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "train": {"seed": 1}}"#).unwrap();
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn exit_set_checked_against_model() {
        assert!(RunConfig::from_json(r#"{"exits": [2, 4]}"#).is_err());
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"data": {"train": "t.jsonl"}}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data.train.as_deref(), Some(dir.path().join("t.jsonl").as_path()));
        assert!(matches!(cfg.require("train"), Err(Error::Config(_))));
        assert!(
            matches!(RunConfig::load(dir.path().join("missing.json")), Err(Error::Config(m)) if m.contains("missing.json"))
        );
    }
}
