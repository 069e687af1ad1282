//! Experiment configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::codec::CodecConfig;
use crate::data::{ingest_dir, synthetic_corpus, Dataset};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::nn::Precision;
use crate::rng::derive_seed;
use crate::training::{SnrSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Procedural images generated from the global seed.
    Synthetic { count: usize },
    /// Image folders; test images default to a held-out split of `train_dir`.
    Directory {
        train_dir: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    /// Square crop side in pixels.
    pub image_size: usize,
    /// Held-out fraction when no separate test set is given.
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfigs {
    pub phase1: TrainConfig,
    pub phase2: TrainConfig,
    pub phase3: TrainConfig,
}

impl PhaseConfigs {
    pub fn get(&self, phase: u8) -> Result<&TrainConfig> {
        match phase {
            1 => Ok(&self.phase1),
            2 => Ok(&self.phase2),
            3 => Ok(&self.phase3),
            p => Err(Error::config(format!("phase must be 1, 2 or 3, got {p}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub denoiser: DenoiserConfig,
    pub channel: ChannelConfig,
    pub train: PhaseConfigs,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Small synthetic experiment sized for a single CPU core.
    pub fn desk() -> Self {
        let phase = |p: u8, iterations: usize, lr: f64| TrainConfig {
            iterations,
            batch_size: 32,
            learning_rate: lr,
            log_every: 100,
            seed: p as u64,
            ..TrainConfig::reference(p)
        };
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            precision: Precision::F32,
            data: DataConfig {
                source: DataSource::Synthetic { count: 480 },
                image_size: 32,
                val_fraction: 1.0 / 6.0,
            },
            codec: CodecConfig::desk(),
            denoiser: DenoiserConfig {
                t_max: 3,
                unet_depth: 1,
                base_channels: 32,
                ..DenoiserConfig::default()
            },
            channel: ChannelConfig::new(13.0, 0),
            train: PhaseConfigs {
                phase1: phase(1, 1500, 2e-3),
                phase2: phase(2, 2000, 1e-3),
                phase3: phase(3, 400, 5e-4),
            },
            eval: EvalConfig {
                snrs_db: vec![-3.0, 0.0, 5.0, 10.0],
                ..EvalConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.denoiser.validate()?;
        self.channel.validate()?;
        self.eval.validate()?;
        for p in 1..=3u8 {
            let t = self.train.get(p)?;
            t.validate()?;
            if t.phase != p {
                return Err(Error::config(format!("[train.phase{p}] has phase = {}", t.phase)));
            }
        }
        if matches!(self.train.phase1.snr_schedule, SnrSchedule::Set { .. }) {
            log::warn!("phase 1 uses an SNR set rather than a fixed SNR");
        }
        if self.data.image_size == 0 || !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(Error::config("image_size must be positive and val_fraction in [0, 1)"));
        }
        self.codec.check_image(self.data.image_size, self.data.image_size)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// `(train, test)` images.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let split_seed = derive_seed(self.seed, &[0xDA7A]);
        match &self.data.source {
            DataSource::Synthetic { count } => {
                synthetic_corpus(*count, self.data.image_size, derive_seed(self.seed, &[0x5E7]))?
                    .split(self.data.val_fraction, split_seed)
            }
            DataSource::Directory { train_dir, test_dir } => {
                let train = ingest_dir(train_dir, self.data.image_size)?;
                match test_dir {
                    Some(dir) => Ok((train, ingest_dir(dir, self.data.image_size)?)),
                    None => train.split(self.data.val_fraction, split_seed),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_round_trips_through_toml() -> Result<()> {
        let cfg = ExperimentConfig::desk();
        cfg.validate()?;
        let text = cfg.to_toml()?;
        let back = ExperimentConfig::from_toml(&text)?;
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml()?, text);
        Ok(())
    }

    #[test]
    fn mismatched_phase_is_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.train.phase2.phase = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_toml_is_a_config_error() {
        assert!(matches!(ExperimentConfig::from_toml("seed = ["), Err(Error::Config(_))));
    }
}
