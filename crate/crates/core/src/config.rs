//! Run configuration shared by every command.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderSpec;
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::io::synth::SyntheticSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// A `manifest.json` written by `write_dataset`.
    Manifest {
        path: PathBuf,
    },
    Synthetic(SyntheticSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::imbalanced_four(16, 6.0, 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_episodes: usize,
    pub seed: u64,
    pub episode: EpisodeSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_episodes: 100,
            seed: 0,
            episode: EpisodeSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// One paired on/off run per seed.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    pub train: TrainConfig,
    /// Ensemble members; member `i` trains with seed `train.seed + i`.
    pub encoders: Vec<EncoderSpec>,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::default(),
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            encoders: Vec::new(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn encoder(&self, i: usize) -> Result<&EncoderSpec> {
        self.encoders.get(i).ok_or_else(|| {
            Error::Invalid(format!(
                "encoder index {i} out of range; config lists {} encoder(s)",
                self.encoders.len()
            ))
        })
    }

    /// Training config of ensemble member `i`.
    pub fn member_train(&self, i: usize) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        let seed = t
            .seed
            .ok_or_else(|| Error::Invalid("training requires an explicit seed".into()))?;
        t.seed = Some(seed.wrapping_add(i as u64));
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::Invalid("config lists no encoders".into()));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        self.eval.episode.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.margin, 0.5);
        assert!(c.train.use_cal);
        assert_eq!(c.split.train_fraction, 0.8);
    }

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig::default();
        c.encoders.push(EncoderSpec::mlp(16, vec![32], 8, 3));
        c.train.seed = Some(4);
        c.dataset = DatasetSource::Manifest {
            path: "data/manifest.json".into(),
        };
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn member_seeds_are_offset() {
        let mut c = RunConfig::default();
        assert!(c.member_train(0).is_err());
        c.train.seed = Some(10);
        assert_eq!(c.member_train(3).unwrap().seed, Some(13));
    }

    #[test]
    fn validation() {
        let mut c = RunConfig::default();
        c.train.seed = Some(1);
        assert!(c.validate().is_err());
        c.encoders.push(EncoderSpec::mlp(16, vec![], 8, 0));
        c.validate().unwrap();
        assert!(c.encoder(1).is_err());
    }
}
