//! Phase orchestration on top of [`crate::training`], producing checkpoints.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::checkpoint::{Checkpoint, Role, SeedRecord};
use crate::codec::build_backbone;
use crate::codec::ImageTensor;
use crate::config::ExperimentConfig;
use crate::denoiser::LatentDenoiser;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::training::{train_phase1, train_phase2, train_phase3, TrainReport};

/// Files written for one phase inside an output directory.
pub struct PhaseFiles {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub config: PathBuf,
}

pub fn phase_files(dir: &Path, phase: u8) -> PhaseFiles {
    PhaseFiles {
        checkpoint: dir.join(format!("phase{phase}.safetensors")),
        log: dir.join(format!("phase{phase}.log.jsonl")),
        config: dir.join(format!("phase{phase}.config.toml")),
    }
}

fn lineage(prev: Option<&Checkpoint>, cfg: &ExperimentConfig, phase: u8) -> Result<Vec<SeedRecord>> {
    let mut records = prev.map(|p| p.meta.seed_lineage.clone()).unwrap_or_default();
    records.push(SeedRecord {
        phase,
        global_seed: cfg.seed,
        train_seed: cfg.train.get(phase)?.seed,
    });
    Ok(records)
}

fn expect_phase(prev: &Checkpoint, phase: u8) -> Result<()> {
    if prev.phase() != phase {
        return Err(Error::invalid(format!(
            "expected a phase-{phase} checkpoint, got phase {}",
            prev.phase()
        )));
    }
    Ok(())
}

/// Trains the codec from scratch.
pub fn run_phase1(cfg: &ExperimentConfig, train: &[ImageTensor]) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let (mut encoder, mut decoder) = build_backbone(&cfg.codec, derive_seed(cfg.seed, &[1]), cfg.precision)?;
    let report = train_phase1(train, &mut encoder, &mut decoder, &cfg.channel, &cfg.train.phase1)?;
    let params = BTreeMap::from([
        (Role::Encoder, encoder.into_params()),
        (Role::Decoder, decoder.into_params()),
    ]);
    Ok((Checkpoint::new(1, cfg.clone(), lineage(None, cfg, 1)?, params)?, report))
}

/// Trains a fresh denoiser behind the frozen phase-1 encoder.
pub fn run_phase2(cfg: &ExperimentConfig, prev: &Checkpoint, train: &[ImageTensor]) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    expect_phase(prev, 1)?;
    if prev.config().codec != cfg.codec {
        return Err(Error::config("codec configuration differs from the phase-1 checkpoint"));
    }
    let mut encoder = prev.encoder()?;
    encoder.params_mut().freeze();
    let mut decoder = prev.decoder()?;
    decoder.params_mut().freeze();
    let mut denoiser = LatentDenoiser::init(
        &cfg.denoiser,
        cfg.codec.head_filters,
        derive_seed(cfg.seed, &[2]),
        cfg.precision,
    )?;
    let report = train_phase2(train, &encoder, &mut denoiser, &cfg.channel, &cfg.train.phase2)?;
    if encoder.params().fingerprint()? != prev.fingerprint(Role::Encoder).unwrap_or_default() {
        return Err(Error::FrozenModified("encoder".into()));
    }
    denoiser.freeze();
    let (residual, similarity) = denoiser.into_params();
    let params = BTreeMap::from([
        (Role::Encoder, encoder.into_params()),
        (Role::Decoder, decoder.into_params()),
        (Role::Residual, residual),
        (Role::Similarity, similarity),
    ]);
    Ok((Checkpoint::new(2, cfg.clone(), lineage(Some(prev), cfg, 2)?, params)?, report))
}

/// Finetunes a copy of the decoder on adaptively denoised latents.
pub fn run_phase3(cfg: &ExperimentConfig, prev: &Checkpoint, train: &[ImageTensor]) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    expect_phase(prev, 2)?;
    if prev.config().codec != cfg.codec || prev.config().denoiser != cfg.denoiser {
        return Err(Error::config("model configuration differs from the phase-2 checkpoint"));
    }
    let mut encoder = prev.encoder()?;
    encoder.params_mut().freeze();
    let mut denoiser = prev.denoiser()?;
    denoiser.freeze();
    let mut baseline = prev.decoder()?;
    baseline.params_mut().freeze();
    let mut decoder = prev.decoder()?;
    decoder.params_mut().unfreeze();
    let report = train_phase3(train, &encoder, &denoiser, &mut decoder, &cfg.channel, &cfg.train.phase3)?;
    let before = [
        (Role::Encoder, encoder.params().fingerprint()?),
        (Role::Residual, denoiser.residual().params().fingerprint()?),
        (Role::Similarity, denoiser.similarity().params().fingerprint()?),
    ];
    for (role, hash) in before {
        if Some(hash.as_str()) != prev.fingerprint(role) {
            return Err(Error::FrozenModified(role.key().into()));
        }
    }
    let (residual, similarity) = denoiser.into_params();
    let params = BTreeMap::from([
        (Role::Encoder, encoder.into_params()),
        (Role::BaselineDecoder, baseline.into_params()),
        (Role::Decoder, decoder.into_params()),
        (Role::Residual, residual),
        (Role::Similarity, similarity),
    ]);
    Ok((Checkpoint::new(3, cfg.clone(), lineage(Some(prev), cfg, 3)?, params)?, report))
}
