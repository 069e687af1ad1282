//! Checkpoints: one safetensors file whose header carries a JSON description
//! (format version, phase, resolved configuration, seed lineage and the
//! fingerprint of every parameter collection).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::config::ExperimentConfig;
use crate::denoiser::LatentDenoiser;
use crate::error::{Error, Result};
use crate::eval::ModelBundle;
use crate::nn::ModelParams;

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "semcom";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Encoder,
    /// Decoder as trained in phase 1, kept after finetuning for the JSCC-T receiver.
    BaselineDecoder,
    Decoder,
    Residual,
    Similarity,
}

impl Role {
    pub fn key(self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::BaselineDecoder => "baseline_decoder",
            Role::Decoder => "decoder",
            Role::Residual => "residual",
            Role::Similarity => "similarity",
        }
    }

    fn from_key(key: &str) -> Option<Self> {
        [
            Role::Encoder,
            Role::BaselineDecoder,
            Role::Decoder,
            Role::Residual,
            Role::Similarity,
        ]
        .into_iter()
        .find(|r| r.key() == key)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub phase: u8,
    pub global_seed: u64,
    pub train_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionMeta {
    pub role: Role,
    pub frozen: bool,
    pub parameter_count: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub phase: u8,
    /// Free-form variant label, e.g. an ablation arm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub config: ExperimentConfig,
    pub seed_lineage: Vec<SeedRecord>,
    pub collections: Vec<CollectionMeta>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<Role, ModelParams>,
}

/// Collections a checkpoint of each phase must contain.
pub fn required_roles(phase: u8) -> &'static [Role] {
    match phase {
        1 => &[Role::Encoder, Role::Decoder],
        2 => &[Role::Encoder, Role::Decoder, Role::Residual, Role::Similarity],
        _ => &[
            Role::Encoder,
            Role::BaselineDecoder,
            Role::Decoder,
            Role::Residual,
            Role::Similarity,
        ],
    }
}

impl Checkpoint {
    pub fn new(
        phase: u8,
        config: ExperimentConfig,
        seed_lineage: Vec<SeedRecord>,
        params: BTreeMap<Role, ModelParams>,
    ) -> Result<Self> {
        if !(1..=3).contains(&phase) {
            return Err(Error::invalid(format!("invalid checkpoint phase {phase}")));
        }
        let collections = params
            .iter()
            .map(|(role, p)| {
                Ok(CollectionMeta {
                    role: *role,
                    frozen: p.is_frozen(),
                    parameter_count: p.parameter_count(),
                    fingerprint: p.fingerprint()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ck = Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                phase,
                variant: None,
                config,
                seed_lineage,
                collections,
            },
            params,
        };
        ck.check_roles()?;
        Ok(ck)
    }

    fn check_roles(&self) -> Result<()> {
        for role in required_roles(self.meta.phase) {
            if !self.params.contains_key(role) {
                return Err(Error::invalid(format!(
                    "phase-{} checkpoint lacks `{}` parameters",
                    self.meta.phase,
                    role.key()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (role, p) in &self.params {
            for (k, t) in p.to_tensors()? {
                tensors.push((format!("{}/{k}", role.key()), t));
            }
        }
        let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&self.meta)?)]);
        safetensors::serialize_to_file(tensors, Some(meta), path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fail = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| fail(e.to_string()))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| fail(e.to_string()))?;
        let text = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| fail("missing checkpoint description".into()))?;
        let version: serde_json::Value = serde_json::from_str(text)?;
        match version.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            other => return Err(fail(format!("unsupported format version {other:?}, expected {FORMAT_VERSION}"))),
        }
        let meta: CheckpointMeta = serde_json::from_str(text).map_err(|e| fail(e.to_string()))?;

        let mut grouped: BTreeMap<Role, BTreeMap<String, Tensor>> = BTreeMap::new();
        for (name, t) in candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)? {
            let (role, key) = name
                .split_once('/')
                .ok_or_else(|| fail(format!("unexpected tensor name `{name}`")))?;
            let role = Role::from_key(role).ok_or_else(|| fail(format!("unknown collection `{role}`")))?;
            grouped.entry(role).or_default().insert(key.to_string(), t);
        }
        let mut params = BTreeMap::new();
        for c in &meta.collections {
            let tensors = grouped
                .remove(&c.role)
                .ok_or_else(|| fail(format!("collection `{}` has no tensors", c.role.key())))?;
            let mut p = ModelParams::from_tensors(c.role.key(), tensors)?;
            if p.fingerprint()? != c.fingerprint {
                return Err(fail(format!("fingerprint mismatch for `{}`", c.role.key())));
            }
            if c.frozen {
                p.freeze();
            }
            params.insert(c.role, p);
        }
        let ck = Self { meta, params };
        ck.check_roles().map_err(|e| fail(e.to_string()))?;
        Ok(ck)
    }

    pub fn phase(&self) -> u8 {
        self.meta.phase
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.meta.config
    }

    fn take_copy(&self, role: Role) -> Result<ModelParams> {
        self.params
            .get(&role)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no `{}` parameters", role.key())))?
            .deep_copy()
    }

    pub fn fingerprint(&self, role: Role) -> Option<&str> {
        self.meta
            .collections
            .iter()
            .find(|c| c.role == role)
            .map(|c| c.fingerprint.as_str())
    }

    pub fn encoder(&self) -> Result<Encoder> {
        Encoder::from_params(&self.meta.config.codec, self.take_copy(Role::Encoder)?)
    }

    pub fn decoder(&self) -> Result<Decoder> {
        Decoder::from_params(&self.meta.config.codec, self.take_copy(Role::Decoder)?)
    }

    /// The phase-1 decoder: stored separately once the decoder is finetuned.
    pub fn baseline_decoder(&self) -> Result<Decoder> {
        let role = if self.params.contains_key(&Role::BaselineDecoder) {
            Role::BaselineDecoder
        } else {
            Role::Decoder
        };
        Decoder::from_params(&self.meta.config.codec, self.take_copy(role)?)
    }

    pub fn denoiser(&self) -> Result<LatentDenoiser> {
        LatentDenoiser::from_params(
            &self.meta.config.denoiser,
            self.meta.config.codec.head_filters,
            self.take_copy(Role::Residual)?,
            self.take_copy(Role::Similarity)?,
        )
    }

    /// Receiver and transmitter models; needs a phase-2 or phase-3 checkpoint.
    pub fn bundle(&self) -> Result<ModelBundle> {
        if self.meta.phase < 2 {
            return Err(Error::invalid("a phase-1 checkpoint has no denoiser"));
        }
        Ok(ModelBundle {
            encoder: self.encoder()?,
            baseline_decoder: self.baseline_decoder()?,
            decoder: self.decoder()?,
            denoiser: self.denoiser()?,
            signal_power: self.meta.config.channel.signal_power,
        })
    }
}
