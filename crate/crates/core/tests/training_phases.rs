use std::collections::BTreeMap;

use semcom::channel::ChannelConfig;
use semcom::checkpoint::{Checkpoint, Role};
use semcom::codec::build_backbone;
use semcom::config::{DataSource, ExperimentConfig};
use semcom::data::synthetic_corpus;
use semcom::denoiser::{DenoiserConfig, LatentDenoiser};
use semcom::nn::Precision;
use semcom::rng::rng_from_seed;
use semcom::runner::{run_phase1, run_phase2, run_phase3};
use semcom::training::{sample_snr, train_phase1, train_phase2, SnrSchedule, TrainConfig};
use semcom::{Error, Result};

fn small_config(iters: [usize; 3]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.data.source = DataSource::Synthetic { count: 24 };
    cfg.denoiser = DenoiserConfig {
        base_channels: 8,
        similarity_hidden: 8,
        unet_depth: 1,
        ..cfg.denoiser
    };
    for (p, n) in iters.into_iter().enumerate() {
        let t = match p {
            0 => &mut cfg.train.phase1,
            1 => &mut cfg.train.phase2,
            _ => &mut cfg.train.phase3,
        };
        t.iterations = n;
        t.batch_size = 8;
        t.log_every = 1;
    }
    cfg
}

#[test]
fn snr_set_is_sampled_uniformly() -> Result<()> {
    let set = SnrSchedule::set(vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
    let mut rng = rng_from_seed(2024);
    let mut counts = [0usize; 6];
    let n = 1_000_000;
    for _ in 0..n {
        counts[(sample_snr(&set, &mut rng)? / 2.0) as usize] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 1.0 / 6.0).abs() < 0.01, "{counts:?}");
    }
    Ok(())
}

#[test]
fn phase1_loss_decreases_on_toy_set() -> Result<()> {
    let data = synthetic_corpus(50, 32, 5)?;
    let mut cfg = ExperimentConfig::desk();
    cfg.train.phase1.iterations = 500;
    cfg.train.phase1.batch_size = 16;
    cfg.train.phase1.log_every = 1;
    let (mut enc, mut dec) = build_backbone(&cfg.codec, 1, Precision::F32)?;
    let report = train_phase1(&data.images, &mut enc, &mut dec, &cfg.channel, &cfg.train.phase1)?;
    let mean = |r: &[semcom::training::LogRecord]| r.iter().map(|l| l.loss).sum::<f64>() / r.len() as f64;
    let first = mean(&report.log[..50]);
    let last = mean(&report.log[450..]);
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    assert!(report.log.iter().all(|l| l.snr_db == 13.0));
    Ok(())
}

#[test]
fn phase_contracts_and_frozen_hashes() -> Result<()> {
    let cfg = small_config([3, 3, 3]);
    let (train, _) = cfg.load_datasets()?;
    let (p1, log1) = run_phase1(&cfg, &train.images)?;
    assert_eq!(log1.log.len(), 3);
    assert!(p1.params.keys().all(|r| matches!(r, Role::Encoder | Role::Decoder)));

    let (p2, log2) = run_phase2(&cfg, &p1, &train.images)?;
    assert!(log2.log.iter().all(|l| [0.0, 2.0, 4.0, 6.0, 8.0, 10.0].contains(&l.snr_db)));
    assert_eq!(p2.fingerprint(Role::Encoder), p1.fingerprint(Role::Encoder));
    assert_eq!(p2.fingerprint(Role::Decoder), p1.fingerprint(Role::Decoder));

    let (p3, _) = run_phase3(&cfg, &p2, &train.images)?;
    for role in [Role::Encoder, Role::Residual, Role::Similarity] {
        assert_eq!(p3.fingerprint(role), p2.fingerprint(role), "{role:?} changed in phase 3");
    }
    assert_eq!(p3.fingerprint(Role::BaselineDecoder), p1.fingerprint(Role::Decoder));
    assert_ne!(p3.fingerprint(Role::Decoder), p1.fingerprint(Role::Decoder));

    // phases only accept their predecessor
    assert!(run_phase3(&cfg, &p1, &train.images).is_err());
    assert!(run_phase2(&cfg, &p2, &train.images).is_err());
    Ok(())
}

#[test]
fn phase2_refuses_trainable_encoder() -> Result<()> {
    let cfg = small_config([1, 1, 1]);
    let data = synthetic_corpus(8, 32, 1)?;
    let (enc, _) = build_backbone(&cfg.codec, 0, Precision::F32)?;
    let mut den = LatentDenoiser::init(&cfg.denoiser, cfg.codec.head_filters, 0, Precision::F32)?;
    let r = train_phase2(&data.images, &enc, &mut den, &ChannelConfig::new(0.0, 0), &cfg.train.phase2);
    assert!(matches!(r, Err(Error::Config(_))));
    Ok(())
}

#[test]
fn nan_loss_aborts_training() -> Result<()> {
    let cfg = small_config([1, 1, 1]);
    let data = synthetic_corpus(8, 32, 1)?;
    let (mut enc, mut dec) = build_backbone(&cfg.codec, 0, Precision::F32)?;
    let tc = TrainConfig {
        learning_rate: 1e30,
        iterations: 20,
        ..cfg.train.phase1.clone()
    };
    let r = train_phase1(&data.images, &mut enc, &mut dec, &cfg.channel, &tc);
    assert!(matches!(r, Err(Error::Diverged { phase: 1, .. }) | Err(Error::NonFinite(_)) | Err(Error::ZeroNorm(_))), "{:?}", r.err());
    Ok(())
}

#[test]
fn training_is_deterministic() -> Result<()> {
    let cfg = small_config([4, 1, 1]);
    let (train, _) = cfg.load_datasets()?;
    let (a, la) = run_phase1(&cfg, &train.images)?;
    let (b, lb) = run_phase1(&cfg, &train.images)?;
    assert_eq!(la.log, lb.log);
    assert_eq!(a.fingerprint(Role::Encoder), b.fingerprint(Role::Encoder));
    Ok(())
}

#[test]
fn checkpoint_round_trip_and_version_check() -> Result<()> {
    let cfg = small_config([1, 1, 1]);
    let (train, _) = cfg.load_datasets()?;
    let (p1, _) = run_phase1(&cfg, &train.images)?;
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("p1.safetensors");
    p1.save(&path)?;
    let back = Checkpoint::load(&path)?;
    assert_eq!(back.meta, p1.meta);
    assert_eq!(back.meta.seed_lineage.len(), 1);
    let img = &train.images[0];
    assert_eq!(back.encoder()?.encode(img)?, p1.encoder()?.encode(img)?);

    // a different format version is rejected
    let mut meta = p1.meta.clone();
    meta.format_version = 99;
    let bad = Checkpoint {
        meta,
        params: p1
            .params
            .iter()
            .map(|(r, p)| Ok((*r, p.deep_copy()?)))
            .collect::<Result<BTreeMap<_, _>>>()?,
    };
    let bad_path = dir.path().join("bad.safetensors");
    bad.save(&bad_path)?;
    assert!(matches!(Checkpoint::load(&bad_path), Err(Error::Checkpoint { .. })));
    assert!(p1.bundle().is_err());
    Ok(())
}
