//! Losses, SNR schedules and the three training phases.
//!
//! 1. Encoder and decoder are trained end-to-end through the channel.
//! 2. The encoder is frozen; residual and similarity predictors are trained on
//!    unrolled denoising trajectories.
//! 3. Encoder and denoiser are frozen; only the decoder is finetuned on the
//!    full pipeline with adaptive denoising.

pub mod losses;
mod schedule;

use std::io::Write;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::channel::{transmit_tensor, ChannelConfig};
use crate::codec::{Decoder, Encoder, ImageTensor};
use crate::denoiser::{init_ss_db, LatentDenoiser};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SimRng};

pub use losses::*;
pub use schedule::{sample_snr, PolyDecay, SnrSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: u8,
    /// Weight of the similarity-score loss in the residual objective.
    pub alpha: f64,
    pub learning_rate: f64,
    #[serde(default = "default_poly_power")]
    pub poly_power: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub snr_schedule: SnrSchedule,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_poly_power() -> f64 {
    0.9
}

fn default_log_every() -> usize {
    50
}

impl TrainConfig {
    /// Settings of the reference experiments for `phase`.
    pub fn reference(phase: u8) -> Self {
        let snr_schedule = if phase == 1 {
            SnrSchedule::fixed(13.0)
        } else {
            SnrSchedule::set(vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0])
        };
        Self {
            phase,
            alpha: 1.0,
            learning_rate: 1e-4,
            poly_power: default_poly_power(),
            iterations: 100_000,
            batch_size: 16,
            snr_schedule,
            seed: 0,
            log_every: default_log_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.phase) {
            return Err(Error::config(format!("phase must be 1, 2 or 3, got {}", self.phase)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::config("iterations and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        self.snr_schedule.validate()
    }

    fn expect_phase(&self, phase: u8) -> Result<()> {
        self.validate()?;
        if self.phase != phase {
            return Err(Error::config(format!(
                "config is for phase {}, used in phase {phase}",
                self.phase
            )));
        }
        Ok(())
    }

    pub fn lr_schedule(&self) -> PolyDecay {
        PolyDecay {
            base_lr: self.learning_rate,
            total_iters: self.iterations,
            power: self.poly_power,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub phase: u8,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latent_mse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ss_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub similarity_loss: Option<f64>,
    pub lr: f64,
    pub snr_db: f64,
}

pub fn write_log<W: Write>(mut out: W, records: &[LogRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<LogRecord>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.log.last().map(|r| r.loss)
    }
}

/// Epoch-shuffled index batches.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: SimRng,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: len,
            rng: rng_from_seed(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        if self.pos + size > self.order.len() {
            self.reshuffle();
        }
        let batch = self.order[self.pos..self.pos + size].to_vec();
        self.pos += size;
        batch
    }
}

fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn check_finite(v: f64, phase: u8, iteration: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            phase,
            iteration,
            detail: format!("{what} = {v}"),
        })
    }
}

fn image_batch(data: &[ImageTensor], idx: &[usize], dtype: candle_core::DType) -> Result<Tensor> {
    let refs: Vec<&ImageTensor> = idx.iter().map(|&i| &data[i]).collect();
    ImageTensor::batch_to_tensor(&refs, dtype)
}

/// Independent noise streams for each sample of a batch.
fn sample_streams(noise: &mut SimRng, n: usize) -> Vec<SimRng> {
    (0..n).map(|_| rng_from_seed(noise.next_u64())).collect()
}

fn require_trainable(name: &str, frozen: bool) -> Result<()> {
    if frozen {
        Err(Error::config(format!("`{name}` is frozen but must be trained in this phase")))
    } else {
        Ok(())
    }
}

fn require_frozen(name: &str, frozen: bool) -> Result<()> {
    if frozen {
        Ok(())
    } else {
        Err(Error::config(format!("`{name}` must be frozen in this phase")))
    }
}

fn should_log(cfg: &TrainConfig, it: usize) -> bool {
    it % cfg.log_every.max(1) == 0 || it + 1 == cfg.iterations
}

/// Phase 1: trains encoder and decoder end-to-end through the channel.
pub fn train_phase1(
    data: &[ImageTensor],
    encoder: &mut Encoder,
    decoder: &mut Decoder,
    ch: &ChannelConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.expect_phase(1)?;
    ch.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    require_trainable("encoder", encoder.params().is_frozen())?;
    require_trainable("decoder", decoder.params().is_frozen())?;
    let dtype = encoder.dtype();
    let mut vars = encoder.params().trainable_vars();
    vars.extend(decoder.params().trainable_vars());
    let mut opt = adam(vars, cfg.learning_rate)?;
    let lr = cfg.lr_schedule();
    let mut sampler = BatchSampler::new(data.len(), derive_seed(cfg.seed, &[1, 0]));
    let mut snr_rng = rng_from_seed(derive_seed(cfg.seed, &[1, 1]));
    let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, &[1, 2, ch.seed]));
    let mut report = TrainReport::default();

    for it in 0..cfg.iterations {
        let idx = sampler.next(cfg.batch_size);
        let x = image_batch(data, &idx, dtype)?;
        let snr = sample_snr(&cfg.snr_schedule, &mut snr_rng)?;
        let mut streams = sample_streams(&mut noise_rng, idx.len());
        let y = encoder.forward(&x)?;
        let (_, z) = transmit_tensor(&y, &vec![snr; idx.len()], ch.signal_power, &mut streams)?;
        let x_hat = decoder.forward(&z)?;
        let loss = end_to_end_tensor(&x, &x_hat)?;
        let value = scalar(&loss)?;
        check_finite(value, 1, it, "end-to-end loss")?;
        let rate = lr.at(it);
        opt.set_learning_rate(rate);
        opt.backward_step(&loss)?;
        if should_log(cfg, it) {
            log::info!("phase 1 iter {it}: loss {value:.6} lr {rate:.2e} snr {snr} dB");
            report.log.push(LogRecord {
                iteration: it,
                phase: 1,
                loss: value,
                latent_mse: None,
                ss_loss: None,
                similarity_loss: None,
                lr: rate,
                snr_db: snr,
            });
        }
    }
    Ok(report)
}

/// Encoder outputs for every image, computed once (the encoder is frozen).
pub fn encode_all(encoder: &Encoder, data: &[ImageTensor], chunk: usize) -> Result<Tensor> {
    let dtype = encoder.dtype();
    let mut parts = Vec::new();
    for start in (0..data.len()).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(data.len())).collect();
        parts.push(encoder.forward(&image_batch(data, &idx, dtype)?)?.detach());
    }
    Ok(Tensor::cat(&parts, 0)?)
}

fn select_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    let ids = Tensor::from_vec(ids, idx.len(), t.device())?;
    Ok(t.index_select(&ids, 0)?)
}

fn score_batch(snr_db: f64, n: usize, dtype: candle_core::DType) -> Result<Tensor> {
    let s1 = init_ss_db(snr_db)?.value();
    Ok(Tensor::full(s1, n, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// Phase 2: trains the residual predictor by the combined latent objective
/// and the similarity predictor by score regression, with the encoder frozen.
pub fn train_phase2(
    data: &[ImageTensor],
    encoder: &Encoder,
    denoiser: &mut LatentDenoiser,
    ch: &ChannelConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.expect_phase(2)?;
    ch.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    require_frozen("encoder", encoder.params().is_frozen())?;
    require_trainable("residual", denoiser.residual().params().is_frozen())?;
    require_trainable("similarity", denoiser.similarity().params().is_frozen())?;
    let encoder_hash = encoder.params().fingerprint()?;
    let t_max = denoiser.config().t_max;
    let dtype = denoiser.dtype();

    let latents = encode_all(encoder, data, 64)?.to_dtype(dtype)?;
    let mut opt_r = adam(denoiser.residual().params().trainable_vars(), cfg.learning_rate)?;
    let mut opt_s = adam(denoiser.similarity().params().trainable_vars(), cfg.learning_rate)?;
    let lr = cfg.lr_schedule();
    let mut sampler = BatchSampler::new(data.len(), derive_seed(cfg.seed, &[2, 0]));
    let mut snr_rng = rng_from_seed(derive_seed(cfg.seed, &[2, 1]));
    let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, &[2, 2, ch.seed]));
    let mut report = TrainReport::default();

    for it in 0..cfg.iterations {
        let idx = sampler.next(cfg.batch_size);
        let y = select_rows(&latents, &idx)?;
        let snr = sample_snr(&cfg.snr_schedule, &mut snr_rng)?;
        let mut streams = sample_streams(&mut noise_rng, idx.len());
        let (sent, z1) = transmit_tensor(&y, &vec![snr; idx.len()], ch.signal_power, &mut streams)?;
        let s1 = score_batch(snr, idx.len(), dtype)?;
        let unrolled = denoiser.unroll(&z1, &s1, t_max)?;
        let denoised = &unrolled.latents[1..];
        let predicted = &unrolled.scores[1..];

        let mse = scalar(&denoised.iter().map(|z| latent_mse_tensor(&sent, z)).sum_tensors()?)? / t_max as f64;
        let ss = scalar(&denoised.iter().map(|z| ss_loss_tensor(&sent, z)).sum_tensors()?)? / t_max as f64;
        let loss_r = residual_predictor_loss_tensor(&sent, denoised, cfg.alpha)?;
        let loss_s = similarity_predictor_loss_tensor(&sent, predicted, denoised)?;
        let (vr, vs) = (scalar(&loss_r)?, scalar(&loss_s)?);
        check_finite(vr, 2, it, "residual predictor loss")?;
        check_finite(vs, 2, it, "similarity predictor loss")?;

        let rate = lr.at(it);
        opt_r.set_learning_rate(rate);
        opt_s.set_learning_rate(rate);
        opt_r.backward_step(&loss_r)?;
        opt_s.backward_step(&loss_s)?;
        if should_log(cfg, it) {
            log::info!("phase 2 iter {it}: L_r {vr:.6} L_s {vs:.6} snr {snr} dB");
            report.log.push(LogRecord {
                iteration: it,
                phase: 2,
                loss: vr,
                latent_mse: Some(mse),
                ss_loss: Some(ss),
                similarity_loss: Some(vs),
                lr: rate,
                snr_db: snr,
            });
        }
    }
    if encoder.params().fingerprint()? != encoder_hash {
        return Err(Error::FrozenModified(encoder.params().name().to_string()));
    }
    Ok(report)
}

/// Phase 3: finetunes the decoder on adaptively denoised latents; encoder and
/// denoiser stay frozen.
pub fn train_phase3(
    data: &[ImageTensor],
    encoder: &Encoder,
    denoiser: &LatentDenoiser,
    decoder: &mut Decoder,
    ch: &ChannelConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.expect_phase(3)?;
    ch.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    require_frozen("encoder", encoder.params().is_frozen())?;
    require_frozen("residual", denoiser.residual().params().is_frozen())?;
    require_frozen("similarity", denoiser.similarity().params().is_frozen())?;
    require_trainable("decoder", decoder.params().is_frozen())?;
    let frozen_hashes = [
        encoder.params().fingerprint()?,
        denoiser.residual().params().fingerprint()?,
        denoiser.similarity().params().fingerprint()?,
    ];
    let t_max = denoiser.config().t_max;
    let dtype = decoder.dtype();

    let latents = encode_all(encoder, data, 64)?.to_dtype(denoiser.dtype())?;
    let mut opt = adam(decoder.params().trainable_vars(), cfg.learning_rate)?;
    let lr = cfg.lr_schedule();
    let mut sampler = BatchSampler::new(data.len(), derive_seed(cfg.seed, &[3, 0]));
    let mut snr_rng = rng_from_seed(derive_seed(cfg.seed, &[3, 1]));
    let mut noise_rng = rng_from_seed(derive_seed(cfg.seed, &[3, 2, ch.seed]));
    let mut report = TrainReport::default();

    for it in 0..cfg.iterations {
        let idx = sampler.next(cfg.batch_size);
        let y = select_rows(&latents, &idx)?;
        let snr = sample_snr(&cfg.snr_schedule, &mut snr_rng)?;
        let mut streams = sample_streams(&mut noise_rng, idx.len());
        let (_, z1) = transmit_tensor(&y, &vec![snr; idx.len()], ch.signal_power, &mut streams)?;
        let s1 = score_batch(snr, idx.len(), denoiser.dtype())?;
        let unrolled = denoiser.unroll(&z1, &s1, t_max)?;
        let (y_hat, _) = unrolled.select_adaptive(t_max)?;
        let x = image_batch(data, &idx, dtype)?;
        let x_hat = decoder.forward(&y_hat.detach().to_dtype(dtype)?)?;
        let loss = end_to_end_tensor(&x, &x_hat)?;
        let value = scalar(&loss)?;
        check_finite(value, 3, it, "end-to-end loss")?;
        let rate = lr.at(it);
        opt.set_learning_rate(rate);
        opt.backward_step(&loss)?;
        if should_log(cfg, it) {
            log::info!("phase 3 iter {it}: loss {value:.6} snr {snr} dB");
            report.log.push(LogRecord {
                iteration: it,
                phase: 3,
                loss: value,
                latent_mse: None,
                ss_loss: None,
                similarity_loss: None,
                lr: rate,
                snr_db: snr,
            });
        }
    }
    let after = [
        (encoder.params(), &frozen_hashes[0]),
        (denoiser.residual().params(), &frozen_hashes[1]),
        (denoiser.similarity().params(), &frozen_hashes[2]),
    ];
    for (params, before) in after {
        if &params.fingerprint()? != before {
            return Err(Error::FrozenModified(params.name().to_string()));
        }
    }
    Ok(report)
}

trait SumTensors {
    fn sum_tensors(self) -> Result<Tensor>;
}

impl<I: Iterator<Item = Result<Tensor>>> SumTensors for I {
    fn sum_tensors(self) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for t in self {
            let t = t?;
            acc = Some(match acc {
                None => t,
                Some(a) => (a + t)?,
            });
        }
        acc.ok_or_else(|| Error::invalid("empty sum"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_index_once_per_epoch() {
        let mut s = BatchSampler::new(10, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn reference_settings() {
        let p1 = TrainConfig::reference(1);
        assert_eq!(p1.snr_schedule, SnrSchedule::fixed(13.0));
        assert_eq!(p1.alpha, 1.0);
        assert_eq!(p1.learning_rate, 1e-4);
        let p2 = TrainConfig::reference(2);
        assert_eq!(p2.snr_schedule, SnrSchedule::set(vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::reference(2);
        c.alpha = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::reference(2);
        c.phase = 4;
        assert!(c.validate().is_err());
        assert!(TrainConfig::reference(2).expect_phase(3).is_err());
    }
}
