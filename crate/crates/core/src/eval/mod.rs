//! Metrics, SNR sweeps, ablations and receiver latency.
//!
//! Every comparison pairs its arms on identical channel realizations: the
//! noise for image `i` at a given SNR is drawn from a stream derived from the
//! evaluation seed, the image index and the SNR value.

pub mod metrics;
mod plot;
mod report;

use std::collections::BTreeMap;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::transmit_tensor;
use crate::codec::{Decoder, Encoder, ImageTensor};
use crate::denoiser::{init_ss_db, LatentDenoiser};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::training::encode_all;

pub use metrics::{ms_ssim, mse, psnr, psnr_from_mse, psnr_with_cap, ssim, DEFAULT_PSNR_CAP};
pub use plot::{plot_gain_bars, plot_metric_curves};
pub use report::{write_latency, write_sweep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub snrs_db: Vec<f64>,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_scales")]
    pub ms_ssim_scales: usize,
    #[serde(default = "default_cap")]
    pub psnr_cap: f64,
    #[serde(default = "default_reps")]
    pub latency_repetitions: usize,
    #[serde(default = "default_warmup")]
    pub latency_warmup: usize,
}

fn default_batch() -> usize {
    64
}

fn default_scales() -> usize {
    5
}

fn default_cap() -> f64 {
    DEFAULT_PSNR_CAP
}

fn default_reps() -> usize {
    100
}

fn default_warmup() -> usize {
    10
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            snrs_db: vec![-3.0, 0.0, 5.0, 10.0],
            seed: 0,
            batch_size: default_batch(),
            ms_ssim_scales: default_scales(),
            psnr_cap: default_cap(),
            latency_repetitions: default_reps(),
            latency_warmup: default_warmup(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snrs_db.is_empty() || self.snrs_db.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("evaluation SNR list must be nonempty and finite"));
        }
        if self.batch_size == 0 || self.latency_repetitions == 0 {
            return Err(Error::config("batch size and latency repetitions must be positive"));
        }
        Ok(())
    }
}

/// Trained models needed at the receiver and transmitter.
pub struct ModelBundle {
    pub encoder: Encoder,
    /// Decoder as trained end-to-end without a denoiser; the JSCC-T receiver.
    pub baseline_decoder: Decoder,
    /// Decoder finetuned on denoised latents.
    pub decoder: Decoder,
    pub denoiser: LatentDenoiser,
    pub signal_power: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    MsSsim,
    LatentMse,
    /// Per-image PSNR difference against the undenoised latent, paired.
    PsnrGain,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Psnr => "PSNR (dB)",
            Metric::MsSsim => "MS-SSIM",
            Metric::LatentMse => "latent MSE",
            Metric::PsnrGain => "PSNR gain (dB)",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tag: String,
    pub snr_db: f64,
    pub metric: Metric,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_steps: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn get(&self, tag: &str, metric: Metric, snr_db: f64) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.tag == tag && r.metric == metric && r.snr_db == snr_db)
    }

    pub fn mean(&self, tag: &str, metric: Metric, snr_db: f64) -> Result<f64> {
        self.get(tag, metric, snr_db)
            .map(|r| r.mean)
            .ok_or_else(|| Error::invalid(format!("no {metric:?} row for `{tag}` at {snr_db} dB")))
    }

    pub fn tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for r in &self.rows {
            if !tags.contains(&r.tag) {
                tags.push(r.tag.clone());
            }
        }
        tags
    }

    pub fn extend(&mut self, other: SweepResult) {
        self.rows.extend(other.rows);
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Seed of the channel realization for image `index` at `snr_db`.
pub fn channel_seed(seed: u64, index: usize, snr_db: f64) -> u64 {
    derive_seed(seed, &[index as u64, snr_db.to_bits()])
}

/// One received batch, shared by every arm of a comparison.
pub struct ReceivedBatch {
    pub indices: Vec<usize>,
    pub snr_db: f64,
    /// Power-normalized transmitted latents.
    pub sent: Tensor,
    /// Channel outputs `z_1`.
    pub received: Tensor,
}

/// What an arm produced for a batch.
pub struct ArmOutput {
    pub reconstruction: Tensor,
    /// Latent fed to the decoder, scored against the sent latent when present.
    pub latent: Option<Tensor>,
    pub steps: Option<Vec<usize>>,
}

#[derive(Default)]
struct Accum {
    psnr: Vec<f64>,
    ms_ssim: Vec<f64>,
    latent_mse: Vec<f64>,
    steps: Vec<f64>,
}

/// Runs `arms` over every (image batch, SNR) pair with shared channel noise.
pub fn evaluate_arms(
    images: &[ImageTensor],
    latents: &Tensor,
    cfg: &EvalConfig,
    signal_power: f64,
    arms: &[&str],
    mut run: impl FnMut(usize, &ReceivedBatch) -> Result<ArmOutput>,
) -> Result<SweepResult> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("no evaluation images".into()));
    }
    let mut acc: BTreeMap<(usize, usize), Accum> = BTreeMap::new();
    for (si, &snr) in cfg.snrs_db.iter().enumerate() {
        for start in (0..images.len()).step_by(cfg.batch_size) {
            let indices: Vec<usize> = (start..(start + cfg.batch_size).min(images.len())).collect();
            let y = latents.narrow(0, start, indices.len())?;
            let mut streams: Vec<SimRng> = indices
                .iter()
                .map(|&i| rng_from_seed(channel_seed(cfg.seed, i, snr)))
                .collect();
            let (sent, received) = transmit_tensor(&y, &vec![snr; indices.len()], signal_power, &mut streams)?;
            let batch = ReceivedBatch {
                indices,
                snr_db: snr,
                sent: sent.detach(),
                received: received.detach(),
            };
            for a in 0..arms.len() {
                let out = run(a, &batch)?;
                let entry = acc.entry((si, a)).or_default();
                let recon = ImageTensor::unbatch(&out.reconstruction)?;
                for (k, &i) in batch.indices.iter().enumerate() {
                    let p = psnr_from_mse(mse(&images[i], &recon[k])?, cfg.psnr_cap);
                    entry.psnr.push(p);
                    entry.ms_ssim.push(ms_ssim(&images[i], &recon[k], cfg.ms_ssim_scales)?);
                }
                if let Some(z) = &out.latent {
                    entry.latent_mse.extend(per_sample_mse(&batch.sent, z)?);
                }
                if let Some(steps) = &out.steps {
                    entry.steps.extend(steps.iter().map(|&s| s as f64));
                }
            }
        }
    }
    let mut result = SweepResult::default();
    for ((si, a), e) in acc {
        let snr = cfg.snrs_db[si];
        let steps = (!e.steps.is_empty()).then(|| mean_std(&e.steps).0);
        let mut push = |metric, values: &[f64]| {
            if values.is_empty() {
                return;
            }
            let (mean, std) = mean_std(values);
            result.rows.push(SweepRow {
                tag: arms[a].to_string(),
                snr_db: snr,
                metric,
                mean,
                std,
                count: values.len(),
                mean_steps: steps,
            });
        };
        push(Metric::Psnr, &e.psnr);
        push(Metric::MsSsim, &e.ms_ssim);
        push(Metric::LatentMse, &e.latent_mse);
    }
    Ok(result)
}

/// `(1/2n)·‖a_i − b_i‖²` for each sample of two `(B, ...)` batches.
pub fn per_sample_mse(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let bsz = a.dim(0)?;
    let d = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?.reshape((bsz, ()))?;
    Ok(d.sqr()?.mean(1)?.to_vec1::<f64>()?)
}

fn score_batch(value: f64, n: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::full(value, n, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Per-sample adaptive denoising of a batch from per-sample initial scores.
pub fn denoise_batch(denoiser: &LatentDenoiser, z1: &Tensor, s1: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let t_max = denoiser.config().t_max;
    let unrolled = denoiser.unroll(z1, s1, t_max)?;
    let (y_hat, decisions) = unrolled.select_adaptive(t_max)?;
    Ok((y_hat.detach(), decisions.into_iter().map(|d| d.0).collect()))
}

/// Encoder latents for the evaluation set, in the denoiser's precision.
pub fn encode_dataset(bundle: &ModelBundle, images: &[ImageTensor], batch: usize) -> Result<Tensor> {
    Ok(encode_all(&bundle.encoder, images, batch)?.to_dtype(bundle.denoiser.dtype())?)
}

pub const TAG_FULL: &str = "full";
pub const TAG_JSCC_T: &str = "jscc-t";

/// Full pipeline with adaptive denoising versus the denoiser-free JSCC-T receiver.
pub fn run_snr_sweep(bundle: &ModelBundle, images: &[ImageTensor], cfg: &EvalConfig) -> Result<SweepResult> {
    let latents = encode_dataset(bundle, images, cfg.batch_size)?;
    let dtype = bundle.decoder.dtype();
    evaluate_arms(images, &latents, cfg, bundle.signal_power, &[TAG_FULL, TAG_JSCC_T], |arm, b| {
        if arm == 0 {
            let s1 = score_batch(init_ss_db(b.snr_db)?.value(), b.indices.len(), bundle.denoiser.dtype())?;
            let (y_hat, steps) = denoise_batch(&bundle.denoiser, &b.received, &s1)?;
            Ok(ArmOutput {
                reconstruction: bundle.decoder.forward(&y_hat.to_dtype(dtype)?)?,
                latent: Some(y_hat),
                steps: Some(steps),
            })
        } else {
            Ok(ArmOutput {
                reconstruction: bundle.baseline_decoder.forward(&b.received.to_dtype(dtype)?)?,
                latent: Some(b.received.clone()),
                steps: None,
            })
        }
    })
}

/// How `s_1` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitPolicy {
    /// From the channel SNR.
    FromSnr,
    Constant(f64),
    /// Uniform on `[0, 1]`, drawn per image.
    Uniform,
}

impl InitPolicy {
    pub fn standard_set() -> Vec<InitPolicy> {
        vec![
            InitPolicy::FromSnr,
            InitPolicy::Constant(0.0),
            InitPolicy::Constant(0.5),
            InitPolicy::Constant(1.0),
            InitPolicy::Uniform,
        ]
    }

    pub fn tag(&self) -> String {
        match self {
            InitPolicy::FromSnr => "init-snr".into(),
            InitPolicy::Constant(c) => format!("init-const-{c}"),
            InitPolicy::Uniform => "init-uniform".into(),
        }
    }
}

/// Adaptive pipeline under several `s_1` policies. `rerun` only changes the
/// uniform draws; channel noise is fixed by the evaluation seed.
pub fn ablate_initial_ss(
    bundle: &ModelBundle,
    images: &[ImageTensor],
    cfg: &EvalConfig,
    policies: &[InitPolicy],
    rerun: u64,
) -> Result<SweepResult> {
    let latents = encode_dataset(bundle, images, cfg.batch_size)?;
    let tags: Vec<String> = policies.iter().map(|p| p.tag()).collect();
    let tag_refs: Vec<&str> = tags.iter().map(String::as_str).collect();
    let dtype = bundle.decoder.dtype();
    evaluate_arms(images, &latents, cfg, bundle.signal_power, &tag_refs, |arm, b| {
        let values: Vec<f64> = match policies[arm] {
            InitPolicy::FromSnr => vec![init_ss_db(b.snr_db)?.value(); b.indices.len()],
            InitPolicy::Constant(c) => vec![c; b.indices.len()],
            InitPolicy::Uniform => b
                .indices
                .iter()
                .map(|&i| {
                    let seed = derive_seed(cfg.seed, &[i as u64, b.snr_db.to_bits(), 0x1417, rerun]);
                    rng_from_seed(seed).random::<f64>()
                })
                .collect(),
        };
        let s1 = Tensor::from_vec(values, b.indices.len(), &Device::Cpu)?.to_dtype(bundle.denoiser.dtype())?;
        let (y_hat, steps) = denoise_batch(&bundle.denoiser, &b.received, &s1)?;
        Ok(ArmOutput {
            reconstruction: bundle.decoder.forward(&y_hat.to_dtype(dtype)?)?,
            latent: Some(y_hat),
            steps: Some(steps),
        })
    })
}

pub const TAG_ADAPTIVE: &str = "adaptive";

pub fn fixed_steps_tag(k: usize) -> String {
    format!("steps-{k}")
}

/// Fixed step counts `0..=T_max` and adaptive inference, all decoded by the
/// finetuned decoder, with paired PSNR gains over the undenoised latent.
pub fn ablate_steps(bundle: &ModelBundle, images: &[ImageTensor], cfg: &EvalConfig) -> Result<SweepResult> {
    let t_max = bundle.denoiser.config().t_max;
    let latents = encode_dataset(bundle, images, cfg.batch_size)?;
    let mut tags: Vec<String> = (0..=t_max).map(fixed_steps_tag).collect();
    tags.push(TAG_ADAPTIVE.into());
    let tag_refs: Vec<&str> = tags.iter().map(String::as_str).collect();
    let dtype = bundle.decoder.dtype();

    // per-image PSNR for each (snr, arm), used for paired gains
    let mut per_image: BTreeMap<(u64, usize), Vec<f64>> = BTreeMap::new();
    let mut cache: Option<(Vec<usize>, u64, crate::denoiser::Unroll)> = None;
    let mut result = evaluate_arms(images, &latents, cfg, bundle.signal_power, &tag_refs, |arm, b| {
        let key = (b.indices.clone(), b.snr_db.to_bits());
        if cache.as_ref().map(|c| (&c.0, c.1)) != Some((&key.0, key.1)) {
            let s1 = score_batch(init_ss_db(b.snr_db)?.value(), b.indices.len(), bundle.denoiser.dtype())?;
            cache = Some((key.0, key.1, bundle.denoiser.unroll(&b.received, &s1, t_max)?));
        }
        let unrolled = &cache.as_ref().expect("cache filled").2;
        let (z, steps) = if arm <= t_max {
            (unrolled.latents[arm].detach(), vec![arm; b.indices.len()])
        } else {
            let (z, d) = unrolled.select_adaptive(t_max)?;
            (z.detach(), d.into_iter().map(|d| d.0).collect())
        };
        let recon = bundle.decoder.forward(&z.to_dtype(dtype)?)?;
        let imgs = ImageTensor::unbatch(&recon)?;
        let entry = per_image.entry((b.snr_db.to_bits(), arm)).or_default();
        for (k, &i) in b.indices.iter().enumerate() {
            entry.push(psnr_from_mse(mse(&images[i], &imgs[k])?, cfg.psnr_cap));
        }
        Ok(ArmOutput {
            reconstruction: recon,
            latent: Some(z),
            steps: Some(steps),
        })
    })?;
    for &snr in &cfg.snrs_db {
        let base = &per_image[&(snr.to_bits(), 0)];
        for (arm, tag) in tags.iter().enumerate() {
            let values = &per_image[&(snr.to_bits(), arm)];
            let gains: Vec<f64> = values.iter().zip(base).map(|(v, b)| v - b).collect();
            let (mean, std) = mean_std(&gains);
            let steps = result.get(tag, Metric::Psnr, snr).and_then(|r| r.mean_steps);
            result.rows.push(SweepRow {
                tag: tag.clone(),
                snr_db: snr,
                metric: Metric::PsnrGain,
                mean,
                std,
                count: gains.len(),
                mean_steps: steps,
            });
        }
    }
    Ok(result)
}

pub const TAG_WITH_SS: &str = "with-ss-loss";
pub const TAG_WITHOUT_SS: &str = "without-ss-loss";

/// Reconstruction pair exported from the SS-loss ablation.
pub struct ExportedPair {
    pub index: usize,
    pub snr_db: f64,
    pub with_ss: ImageTensor,
    pub without_ss: ImageTensor,
}

pub struct SsLossAblation {
    pub result: SweepResult,
    pub pairs: Vec<ExportedPair>,
}

/// Two denoisers trained with and without the SS loss on the same encoder,
/// evaluated with the same decoder and paired channel noise. The first
/// `export` images at every SNR are returned for inspection.
pub fn ablate_ss_loss(
    encoder: &Encoder,
    decoder: &Decoder,
    with_ss: &LatentDenoiser,
    without_ss: &LatentDenoiser,
    signal_power: f64,
    images: &[ImageTensor],
    cfg: &EvalConfig,
    export: usize,
) -> Result<SsLossAblation> {
    let latents = encode_all(encoder, images, cfg.batch_size)?.to_dtype(with_ss.dtype())?;
    let dtype = decoder.dtype();
    let mut pairs: BTreeMap<(usize, u64), (Option<ImageTensor>, Option<ImageTensor>)> = BTreeMap::new();
    let result = evaluate_arms(images, &latents, cfg, signal_power, &[TAG_WITH_SS, TAG_WITHOUT_SS], |arm, b| {
        let den = if arm == 0 { with_ss } else { without_ss };
        let s1 = score_batch(init_ss_db(b.snr_db)?.value(), b.indices.len(), den.dtype())?;
        let (y_hat, steps) = denoise_batch(den, &b.received, &s1)?;
        let recon = decoder.forward(&y_hat.to_dtype(dtype)?)?;
        for (k, &i) in b.indices.iter().enumerate() {
            if i < export {
                let img = ImageTensor::from_tensor(&recon.get(k)?)?;
                let slot = pairs.entry((i, b.snr_db.to_bits())).or_default();
                if arm == 0 {
                    slot.0 = Some(img);
                } else {
                    slot.1 = Some(img);
                }
            }
        }
        Ok(ArmOutput {
            reconstruction: recon,
            latent: Some(y_hat),
            steps: Some(steps),
        })
    })?;
    let pairs = pairs
        .into_iter()
        .filter_map(|((index, bits), (a, b))| {
            Some(ExportedPair {
                index,
                snr_db: f64::from_bits(bits),
                with_ss: a?,
                without_ss: b?,
            })
        })
        .collect();
    Ok(SsLossAblation { result, pairs })
}

/// How many denoising steps the receiver runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    None,
    Fixed(usize),
    Adaptive(usize),
}

/// Single-transmission receiver: denoise per `mode`, then decode. Both step
/// modes evaluate the similarity predictor at every executed step.
pub fn receive(
    denoiser: &LatentDenoiser,
    decoder: &Decoder,
    z1: &Tensor,
    s1: f64,
    mode: StepMode,
) -> Result<(Tensor, usize)> {
    let (limit, adaptive) = match mode {
        StepMode::None => (0, false),
        StepMode::Fixed(k) => (k, false),
        StepMode::Adaptive(k) => (k, true),
    };
    let mut z = z1.clone();
    let mut s = score_batch(s1, z1.dim(0)?, denoiser.dtype())?;
    let mut prev = s1;
    let mut kept = 0;
    for _ in 0..limit {
        let unrolled = denoiser.unroll(&z, &s, 1)?;
        let next = unrolled.scores[1].to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0];
        if adaptive && next < prev {
            break;
        }
        kept += 1;
        prev = next;
        z = unrolled.latents[1].detach();
        s = unrolled.scores[1].detach();
    }
    Ok((decoder.forward(&z.to_dtype(decoder.dtype())?)?, kept))
}

pub const TAG_DECODE_ONLY: &str = "decode-only";
pub const TAG_FIXED_TMAX: &str = "fixed-t-max";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub arm: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub median_ms: f64,
    pub repetitions: usize,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyTable {
    pub rows: Vec<LatencyRow>,
    /// Mean adaptive receiver time minus mean decode-only time.
    pub denoiser_overhead_ms: f64,
}

impl LatencyTable {
    pub fn row(&self, arm: &str) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Per-image receiver wall-clock time (denoise + decode) for the JSCC-T,
/// adaptive and always-`T_max` receivers. Arms are interleaved within each
/// repetition and `warmup` rounds are discarded.
pub fn measure_receiver_latency(
    bundle: &ModelBundle,
    images: &[ImageTensor],
    snrs_db: &[f64],
    repetitions: usize,
    warmup: usize,
    seed: u64,
) -> Result<LatencyTable> {
    if images.is_empty() || snrs_db.is_empty() || repetitions == 0 {
        return Err(Error::invalid("latency needs images, SNRs and at least one repetition"));
    }
    let t_max = bundle.denoiser.config().t_max;
    let latents = encode_dataset(bundle, images, 64)?;
    let mut inputs = Vec::new();
    for &snr in snrs_db {
        for i in 0..images.len() {
            let y = latents.narrow(0, i, 1)?;
            let mut rng = [rng_from_seed(channel_seed(seed, i, snr))];
            let (_, z1) = transmit_tensor(&y, &[snr], bundle.signal_power, &mut rng)?;
            inputs.push((z1.detach(), init_ss_db(snr)?.value()));
        }
    }
    let arms = [
        (TAG_DECODE_ONLY, StepMode::None, &bundle.baseline_decoder),
        (TAG_ADAPTIVE, StepMode::Adaptive(t_max), &bundle.decoder),
        (TAG_FIXED_TMAX, StepMode::Fixed(t_max), &bundle.decoder),
    ];
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); arms.len()];
    let mut steps: Vec<Vec<f64>> = vec![Vec::new(); arms.len()];
    for rep in 0..warmup + repetitions {
        for (k, (z1, s1)) in inputs.iter().enumerate() {
            for j in 0..arms.len() {
                // rotate the arm order so no arm always runs first
                let a = (j + rep + k) % arms.len();
                let (_, mode, decoder) = arms[a];
                let start = Instant::now();
                let (_, kept) = receive(&bundle.denoiser, decoder, z1, *s1, mode)?;
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                if rep >= warmup {
                    times[a].push(elapsed);
                    steps[a].push(kept as f64);
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (a, (tag, _, _)) in arms.iter().enumerate() {
        let (mean, std) = mean_std(&times[a]);
        rows.push(LatencyRow {
            arm: tag.to_string(),
            mean_ms: mean,
            std_ms: std,
            median_ms: median(&mut times[a]),
            repetitions,
            mean_steps: mean_std(&steps[a]).0,
        });
    }
    let overhead = rows[1].mean_ms - rows[0].mean_ms;
    Ok(LatencyTable {
        rows,
        denoiser_overhead_ms: overhead,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_sample_convention() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(mean_std(&[4.0]).1, 0.0);
    }

    #[test]
    fn channel_seeds_pair_by_image_and_snr() {
        assert_eq!(channel_seed(1, 3, 0.0), channel_seed(1, 3, 0.0));
        assert_ne!(channel_seed(1, 3, 0.0), channel_seed(1, 4, 0.0));
        assert_ne!(channel_seed(1, 3, 0.0), channel_seed(1, 3, 5.0));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
