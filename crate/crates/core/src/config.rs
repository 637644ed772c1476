//! Run configuration: a TOML key tree where every field has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tasks::TaskSpec;
use crate::trainer::{HybridConfig, ModeFlags, OptimizerConfig, TrainSettings};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub steps: u64,
    pub batch_size: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        OptimizerSection {
            learning_rate: o.learning_rate,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            grad_clip: o.grad_clip.unwrap_or(0.0),
            steps: 1000,
            batch_size: 8,
        }
    }
}

impl OptimizerSection {
    pub fn adam(&self) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Training examples generated up front (batches sample from these).
    pub train_examples: usize,
    /// Examples per evaluation split.
    pub eval_examples: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_examples: 2000,
            eval_examples: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoint_every: u64,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub trainer: HybridConfig,
    pub optimizer: OptimizerSection,
    pub flags: ModeFlags,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 500,
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            trainer: HybridConfig::default(),
            optimizer: OptimizerSection::default(),
            flags: ModeFlags::default(),
            data: DataSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(field_of(&e), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The fully defaulted configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run configs always serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.trainer.validate()?;
        self.optimizer.adam().validate()?;
        if self.optimizer.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be at least 1"));
        }
        if self.model.text_vocab != self.task.text_vocab {
            return Err(Error::config(
                "model.text_vocab",
                format!("{} differs from task.text_vocab={}", self.model.text_vocab, self.task.text_vocab),
            ));
        }
        if self.model.speech_vocab != self.task.speech_vocab {
            return Err(Error::config(
                "model.speech_vocab",
                format!(
                    "{} differs from task.speech_vocab={}",
                    self.model.speech_vocab, self.task.speech_vocab
                ),
            ));
        }
        let longest_text = [self.task.text_len.1, self.task.eval_text_len.1 * self.task.long_form_factor]
            .into_iter()
            .max()
            .unwrap_or(0);
        let need = 1 + longest_text + self.task.target_len_range.1;
        if self.model.max_len < need {
            return Err(Error::config(
                "model.max_len",
                format!("{} cannot hold the longest example ({need} positions)", self.model.max_len),
            ));
        }
        if self.data.train_examples == 0 {
            return Err(Error::config("data.train_examples", "must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            model: self.model.clone(),
            hybrid: self.trainer.clone(),
            optimizer: self.optimizer.adam(),
            flags: self.flags,
            steps: self.optimizer.steps,
            batch_size: self.optimizer.batch_size,
            seed: self.seed,
        }
    }

    /// Digest of everything that influences results (the output directory
    /// is excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("run configs always serialize");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

fn field_of(e: &toml::de::Error) -> String {
    // toml reports the offending key inside the message; keep it short here
    let msg = e.message();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut c = RunConfig::default();
        c.seed = 17;
        c.trainer.n_max = 4;
        c.flags.no_prompt_protection = true;
        let text = c.to_toml();
        assert!(text.contains("n_max = 4"));
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_and_bad_fields_name_the_field() {
        match RunConfig::from_toml("[model]\nd_modle = 3\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "d_modle"),
            other => panic!("{other:?}"),
        }
        match RunConfig::from_toml("[model]\nd_model = 30\nn_heads = 4\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "model.d_model"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
