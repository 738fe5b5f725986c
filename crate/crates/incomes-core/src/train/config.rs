//! File-backed run configuration.
//!
//! One TOML file drives the whole pipeline; every field has a default
//! sized for a small single-core run, so an empty file is a valid config.
//! Unknown keys are rejected rather than silently ignored.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::world::VOCAB_SIZE;
use crate::model::ModelConfig;
use crate::tensor::optim::LrSchedule;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub calibrate: CalibrateSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// "half" extends the deeper half of the layers; "all" extends every
    /// layer.
    pub cross_layers: String,
    pub zero_gist: bool,
    pub gist_key_position: Option<u32>,
    pub train_temperature: f64,
    pub infer_temperature: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 160,
            cross_layers: "half".into(),
            zero_gist: true,
            gist_key_position: None,
            train_temperature: 1.0,
            infer_temperature: 0.45,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        let cross_layers = match self.cross_layers.as_str() {
            "half" => ModelConfig::second_half(self.n_layers),
            "all" => (0..self.n_layers).collect(),
            other => {
                return Err(Error::param(
                    "model.cross_layers",
                    format!("expected \"half\" or \"all\", got {other:?}"),
                ))
            }
        };
        let cfg = ModelConfig {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            cross_layers,
            zero_gist: self.zero_gist,
            gist_key_position: self.gist_key_position,
            train_temperature: self.train_temperature,
            infer_temperature: self.infer_temperature,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub world_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { world_seed: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub steps: usize,
    pub batch: usize,
    pub max_edits: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub seed: u64,
    pub gate_cases: usize,
    /// Minimum held-out conditioned recall to accept the base model.
    pub gate_min: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            steps: 2500,
            batch: 8,
            max_edits: 4,
            lr_max: 3e-3,
            lr_min: 3e-4,
            warmup: 100,
            seed: 11,
            gate_cases: 200,
            gate_min: 0.95,
        }
    }
}

impl PretrainSection {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            max_lr: self.lr_max,
            min_lr: self.lr_min,
            warmup_steps: self.warmup,
            total_steps: self.steps,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub examples_per_step: usize,
    pub mix_recall: f64,
    pub mix_paraphrase: f64,
    pub mix_multi_hop: f64,
    pub mix_locality: f64,
    /// "default" (sizes up to 128) or "compact" (sizes up to 32).
    pub batch_size_profile: String,
    pub golden_weight: f64,
    pub loss_on_query: bool,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 1200,
            examples_per_step: 8,
            mix_recall: 0.45,
            mix_paraphrase: 0.15,
            mix_multi_hop: 0.15,
            mix_locality: 0.25,
            batch_size_profile: "compact".into(),
            golden_weight: 0.0,
            loss_on_query: true,
            lr_max: 1e-3,
            lr_min: 1e-4,
            warmup: 50,
            seed: 12,
            checkpoint_every: 0,
        }
    }
}

impl TrainSection {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            max_lr: self.lr_max,
            min_lr: self.lr_min,
            warmup_steps: self.warmup,
            total_steps: self.steps,
        }
    }

    pub fn mix(&self) -> crate::data::cases::CaseMix {
        crate::data::cases::CaseMix {
            recall: self.mix_recall,
            paraphrase: self.mix_paraphrase,
            multi_hop: self.mix_multi_hop,
            locality: self.mix_locality,
        }
    }

    pub fn sampler(&self) -> Result<crate::train::sampler::BatchSizeSampler> {
        match self.batch_size_profile.as_str() {
            "default" => Ok(crate::train::sampler::BatchSizeSampler::default_profile()),
            "compact" => Ok(crate::train::sampler::BatchSizeSampler::compact_profile()),
            other => Err(Error::param(
                "train.batch_size_profile",
                format!("expected \"default\" or \"compact\", got {other:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub cases: usize,
    pub seed: u64,
    pub pool_sizes: Vec<usize>,
    pub chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { cases: 512, seed: 99, pool_sizes: vec![8, 16, 32, 64, 128, 256], chunk: 32 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    pub pool_sizes: Vec<usize>,
    pub instances: usize,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        CalibrateSection {
            pool_sizes: vec![10, 30, 100, 300],
            instances: 64,
            distractors: 300,
            seed: 7,
        }
    }
}

/// Loads a TOML config; missing fields take defaults, unknown keys fail.
pub fn load_config(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// The fully resolved config as TOML, for run-directory echoes.
pub fn render_config(cfg: &FileConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn an_empty_file_is_a_full_default_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "").unwrap();
        let fc = load_config(&p).unwrap();
        assert_eq!(fc.model.d_model, 64);
        let mc = fc.model.to_model_config().unwrap();
        assert_eq!(mc.cross_layers, vec![2, 3]);
        assert_eq!(fc.eval.pool_sizes, vec![8, 16, 32, 64, 128, 256]);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[model]\nn_layers = 6\ncross_layers = \"all\"\n").unwrap();
        let fc = load_config(&p).unwrap();
        let mc = fc.model.to_model_config().unwrap();
        assert_eq!(mc.cross_layers, vec![0, 1, 2, 3, 4, 5]);

        std::fs::write(&p, "[model]\nnot_a_key = 3\n").unwrap();
        assert!(load_config(&p).is_err());

        std::fs::write(&p, "[model]\ncross_layers = \"some\"\n").unwrap();
        assert!(load_config(&p).unwrap().model.to_model_config().is_err());
    }

    #[test]
    fn rendered_configs_reload_identically() {
        let fc = FileConfig::default();
        let text = render_config(&fc);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, &text).unwrap();
        let re = load_config(&p).unwrap();
        assert_eq!(render_config(&re), text);
    }
}
