use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::inference::DEFAULT_BEAM;
use crate::methods::TrainPolicy;
use crate::metrics::EvalMode;
use crate::model::ModelConfig;
use crate::params::hex;
use crate::taskgen::TaskSpec;

/// Everything that determines a run. `output_dir` is where it goes, so it
/// is neither hashed nor written back out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tasks: Vec<TaskSpec>,
    /// Directory of pre-generated `task_<t>` manifests; generated in memory
    /// when absent.
    pub data_dir: Option<PathBuf>,
    pub policy: TrainPolicy,
    pub model: ModelConfig,
    pub eval_modes: Vec<EvalMode>,
    pub seeds: Vec<u64>,
    pub beam: usize,
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            tasks: vec![],
            data_dir: None,
            policy: TrainPolicy::default(),
            model: ModelConfig::default(),
            eval_modes: vec![EvalMode::TaskLabel],
            seeds: vec![0],
            beam: DEFAULT_BEAM,
            output_dir: PathBuf::from("run"),
        }
    }
}

/// JSON with object keys sorted, for hashing.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key.
    let v: serde_json::Value = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(canonical_json(self)?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        if self.eval_modes.is_empty() {
            return Err(Error::Config("no evaluation modes configured".into()));
        }
        if self.beam == 0 {
            return Err(Error::Config("beam must be positive".into()));
        }
        self.model.validate()?;
        self.policy.validate()?;
        for (i, t) in self.tasks.iter().enumerate() {
            t.validate()?;
            if t.task_id != i + 1 {
                return Err(Error::Config(format!(
                    "task {} listed at position {}; task ids must run 1..T in order",
                    t.task_id,
                    i + 1
                )));
            }
            if t.model_vocab() != self.model.vocab_size || t.feature_dim != self.model.feature_dim {
                return Err(Error::Config(format!(
                    "task {} needs vocab {} and feature dim {}, model has {} and {}",
                    t.task_id,
                    t.model_vocab(),
                    t.feature_dim,
                    self.model.vocab_size,
                    self.model.feature_dim
                )));
            }
        }
        Ok(())
    }

    /// Evaluation modes that apply to the configured method.
    pub fn effective_modes(&self) -> Vec<EvalMode> {
        let adapters = self.policy.method.uses_adapters();
        let mut modes: Vec<EvalMode> = self
            .eval_modes
            .iter()
            .copied()
            .filter(|m| adapters || *m == EvalMode::TaskLabel)
            .collect();
        modes.sort();
        modes.dedup();
        if modes.is_empty() {
            modes.push(EvalMode::TaskLabel);
        }
        modes
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        if self.seeds.len() == 1 {
            self.output_dir.clone()
        } else {
            self.output_dir.join(format!("seed_{seed}"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_output_dir_and_key_order() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let text = r#"{"seeds":[0],"beam":4}"#;
        let c: ExperimentConfig = serde_json::from_str(text).unwrap();
        let d: ExperimentConfig = serde_json::from_str(r#"{"beam":4,"seeds":[0]}"#).unwrap();
        assert_eq!(c.hash().unwrap(), d.hash().unwrap());
        let e = ExperimentConfig {
            seeds: vec![1],
            ..a.clone()
        };
        assert_ne!(a.hash().unwrap(), e.hash().unwrap());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sedes":[0]}"#).is_err());
    }
}
