//! Similarity-score-conditioned iterative residual latent denoiser.
//!
//! One step maps `(z_t, s_t)` to
//! `z_{t+1} = z_t + g_r(z_t, s_t)` and `s_{t+1} = g_s(s_t, z_t, z_{t+1})`.
//! Inference starts from `s_1 = 1/sqrt(1 + 1/η)` and keeps stepping while the
//! predicted score does not decrease, for at most `T_max` steps. A step whose
//! score decreases is discarded.

mod similarity;
mod unet;

use std::fmt;
use std::io::Write;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::channel::snr_db_to_linear;
use crate::codec::Latent;
use crate::error::{Error, Result};
use crate::nn::{ModelParams, Precision};
use crate::rng::derive_seed;

pub use similarity::SimilarityPredictor;
pub use unet::ResidualPredictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SsConditioning {
    #[default]
    BroadcastConcat,
    ScaleShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub t_max: usize,
    pub unet_depth: usize,
    pub base_channels: usize,
    #[serde(default)]
    pub ss_conditioning: SsConditioning,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_similarity_hidden")]
    pub similarity_hidden: usize,
}

fn default_groups() -> usize {
    8
}

fn default_similarity_hidden() -> usize {
    32
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            t_max: 3,
            unet_depth: 2,
            base_channels: 32,
            ss_conditioning: SsConditioning::BroadcastConcat,
            groups: default_groups(),
            similarity_hidden: default_similarity_hidden(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 {
            return Err(Error::config("t_max must be at least 1"));
        }
        if self.unet_depth == 0 {
            return Err(Error::config("unet_depth must be at least 1"));
        }
        if self.base_channels == 0 || self.similarity_hidden == 0 || self.groups == 0 {
            return Err(Error::config("denoiser widths and group count must be positive"));
        }
        if self.base_channels % self.groups.min(self.base_channels) != 0 {
            return Err(Error::config(format!(
                "base_channels {} not divisible by {} groups",
                self.base_channels, self.groups
            )));
        }
        Ok(())
    }
}

/// Scalar estimate of the cosine similarity between the transmitted latent
/// and the current denoised latent, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::invalid(format!("similarity score {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for SimilarityScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}", self.0)
    }
}

/// `s_1 = 1 / sqrt(1 + η⁻¹)` for linear SNR `η`.
pub fn init_ss(eta: f64) -> Result<SimilarityScore> {
    if !(eta > 0.0) || eta.is_nan() {
        return Err(Error::invalid(format!("linear SNR must be positive, got {eta}")));
    }
    SimilarityScore::new(1.0 / (1.0 + 1.0 / eta).sqrt())
}

pub fn init_ss_db(snr_db: f64) -> Result<SimilarityScore> {
    init_ss(snr_db_to_linear(snr_db))
}

/// `aᵀb / (‖a‖‖b‖)`.
pub fn cosine_similarity_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("cosine similarity of lengths {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine similarity"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub fn cosine_similarity(a: &Latent, b: &Latent) -> Result<f64> {
    cosine_similarity_slices(a.values(), b.values())
}

/// `g_r`: predicts the residual `r_t` for a `(B, C, h, w)` batch and per-sample scores `(B,)`.
pub trait ResidualModel {
    fn residual(&self, z: &Tensor, s: &Tensor) -> Result<Tensor>;
}

/// `g_s`: predicts `s_{t+1}` of shape `(B,)` from `(s_t, z_t, z_{t+1})`.
pub trait SimilarityModel {
    fn similarity(&self, s: &Tensor, z: &Tensor, z_next: &Tensor) -> Result<Tensor>;
}

/// `z_{t+1} = z_t + g_r(z_t, s_t)`, `s_{t+1} = g_s(s_t, z_t, z_{t+1})` on batches.
///
/// Gradients flow from `z_{t+1}` into `g_r` and `z_t`; the similarity branch
/// sees detached inputs, so its loss never reaches `g_r`.
pub fn denoise_step_tensor(
    residual: &impl ResidualModel,
    similarity: &impl SimilarityModel,
    z: &Tensor,
    s: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let r = residual.residual(z, &s.detach())?;
    if r.dims() != z.dims() {
        return Err(Error::shape(format!(
            "residual shape {:?} differs from latent {:?}",
            r.dims(),
            z.dims()
        )));
    }
    let z_next = (z + r)?;
    let s_next = similarity.similarity(&s.detach(), &z.detach(), &z_next.detach())?;
    Ok((z_next, s_next))
}

fn score_tensor(s: SimilarityScore, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(vec![s.value()], 1, &Device::Cpu)?.to_dtype(dtype)?)
}

fn read_score(s: &Tensor) -> Result<SimilarityScore> {
    let v = s.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let v = *v.first().ok_or_else(|| Error::shape("empty similarity output"))?;
    if !v.is_finite() {
        return Err(Error::NonFinite("similarity predictor"));
    }
    SimilarityScore::new(v.clamp(0.0, 1.0))
}

/// Single-latent step.
pub fn denoise_step(
    residual: &impl ResidualModel,
    similarity: &impl SimilarityModel,
    z: &Latent,
    s: SimilarityScore,
    dtype: DType,
) -> Result<(Latent, SimilarityScore)> {
    let (zn, sn) = denoise_step_tensor(residual, similarity, &z.to_tensor(dtype)?, &score_tensor(s, dtype)?)?;
    Ok((Latent::from_tensor(&zn)?, read_score(&sn)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SsDecreased,
    TMaxReached,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::SsDecreased => "ss_decreased",
            StopReason::TMaxReached => "t_max_reached",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseTrace {
    /// `[s_1, ..., s_{executed + 1}]`, including the score of a discarded step.
    pub ss_sequence: Vec<SimilarityScore>,
    pub steps_executed: usize,
    pub steps_kept: usize,
    pub stop_reason: StopReason,
    /// `[z_1, ..., z_{executed + 1}]` when snapshots are recorded.
    pub latents: Option<Vec<Latent>>,
}

impl DenoiseTrace {
    /// Scores over the kept steps, `[s_1, ..., s_{kept + 1}]`.
    pub fn kept_scores(&self) -> &[SimilarityScore] {
        &self.ss_sequence[..=self.steps_kept]
    }

    pub fn is_consistent(&self, t_max: usize) -> bool {
        let kept = self.kept_scores();
        self.steps_kept <= self.steps_executed
            && self.steps_executed <= t_max
            && self.ss_sequence.len() == self.steps_executed + 1
            && kept.windows(2).all(|w| w[1] >= w[0])
    }

    pub fn record(&self, transmission_id: impl Into<String>, snr_db: f64) -> TraceRecord {
        TraceRecord {
            transmission_id: transmission_id.into(),
            snr_db,
            ss_sequence: self.ss_sequence.iter().map(|s| s.value()).collect(),
            steps_kept: self.steps_kept,
            stop_reason: self.stop_reason,
        }
    }
}

/// One line of a trace export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub transmission_id: String,
    pub snr_db: f64,
    pub ss_sequence: Vec<f64>,
    pub steps_kept: usize,
    pub stop_reason: StopReason,
}

pub fn write_trace_records<W: Write>(mut out: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Applies the stop rule to a full score sequence `[s_1, ..., s_{T_max+1}]`:
/// returns `(steps_kept, steps_executed, reason)`.
pub fn apply_stop_rule(scores: &[f64], t_max: usize) -> (usize, usize, StopReason) {
    for t in 0..t_max.min(scores.len().saturating_sub(1)) {
        if scores[t + 1] < scores[t] {
            return (t, t + 1, StopReason::SsDecreased);
        }
    }
    (t_max, t_max, StopReason::TMaxReached)
}

/// Runs the adaptive loop from an explicit initial score.
pub fn denoise_adaptive_from(
    residual: &impl ResidualModel,
    similarity: &impl SimilarityModel,
    z1: &Latent,
    s1: SimilarityScore,
    t_max: usize,
    keep_latents: bool,
    dtype: DType,
) -> Result<(Latent, DenoiseTrace)> {
    if t_max == 0 {
        return Err(Error::config("t_max must be at least 1"));
    }
    let mut z = z1.to_tensor(dtype)?;
    let mut s = score_tensor(s1, dtype)?;
    let mut scores = vec![s1];
    let mut snapshots = vec![z1.clone()];
    let mut kept_latent = z1.clone();
    let mut kept = 0;
    let mut executed = 0;
    let mut reason = StopReason::TMaxReached;
    while executed < t_max {
        let (z_next, s_next) = denoise_step_tensor(residual, similarity, &z, &s)?;
        executed += 1;
        let next_score = read_score(&s_next)?;
        let prev_score = *scores.last().expect("initial score present");
        scores.push(next_score);
        let next_latent = Latent::from_tensor(&z_next)?;
        if keep_latents {
            snapshots.push(next_latent.clone());
        }
        if next_score < prev_score {
            reason = StopReason::SsDecreased;
            break;
        }
        kept += 1;
        kept_latent = next_latent;
        z = z_next.detach();
        s = s_next.detach();
    }
    let trace = DenoiseTrace {
        ss_sequence: scores,
        steps_executed: executed,
        steps_kept: kept,
        stop_reason: reason,
        latents: keep_latents.then_some(snapshots),
    };
    Ok((kept_latent, trace))
}

/// `ŷ = g_d(z_1, SNR)` with `s_1` from the SNR.
pub fn denoise_adaptive(
    residual: &impl ResidualModel,
    similarity: &impl SimilarityModel,
    z1: &Latent,
    snr_db: f64,
    cfg: &DenoiserConfig,
    keep_latents: bool,
    dtype: DType,
) -> Result<(Latent, DenoiseTrace)> {
    denoise_adaptive_from(residual, similarity, z1, init_ss_db(snr_db)?, cfg.t_max, keep_latents, dtype)
}

/// Batched trajectory `[z_1, ..., z_{steps+1}]` and scores `[s_1, ..., s_{steps+1}]`.
pub struct Unroll {
    pub latents: Vec<Tensor>,
    pub scores: Vec<Tensor>,
}

impl Unroll {
    /// Per-sample score sequences.
    pub fn score_rows(&self) -> Result<Vec<Vec<f64>>> {
        let cols = self
            .scores
            .iter()
            .map(|s| Ok(s.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?))
            .collect::<Result<Vec<_>>>()?;
        let b = cols.first().map(|c| c.len()).unwrap_or(0);
        Ok((0..b).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
    }

    /// Latent of sample `i` after `step` steps, `(1, C, h, w)`.
    pub fn latent_at(&self, i: usize, step: usize) -> Result<Tensor> {
        Ok(self.latents[step].narrow(0, i, 1)?)
    }

    /// Per-sample adaptive selection: the latent each sample would return
    /// from [`denoise_adaptive_from`], plus `(kept, executed, reason)`.
    pub fn select_adaptive(&self, t_max: usize) -> Result<(Tensor, Vec<(usize, usize, StopReason)>)> {
        let rows = self.score_rows()?;
        let decisions: Vec<_> = rows.iter().map(|r| apply_stop_rule(r, t_max)).collect();
        let parts = decisions
            .iter()
            .enumerate()
            .map(|(i, (kept, _, _))| self.latent_at(i, *kept))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::cat(&parts, 0)?, decisions))
    }
}

/// Executes exactly `steps` steps on a batch.
pub fn unroll(
    residual: &impl ResidualModel,
    similarity: &impl SimilarityModel,
    z1: &Tensor,
    s1: &Tensor,
    steps: usize,
) -> Result<Unroll> {
    let mut latents = vec![z1.clone()];
    let mut scores = vec![s1.clone()];
    for _ in 0..steps {
        let (z, s) = denoise_step_tensor(residual, similarity, latents.last().unwrap(), scores.last().unwrap())?;
        latents.push(z);
        scores.push(s);
    }
    Ok(Unroll { latents, scores })
}

/// Residual and similarity predictors with their configuration.
pub struct LatentDenoiser {
    cfg: DenoiserConfig,
    residual: ResidualPredictor,
    similarity: SimilarityPredictor,
}

impl LatentDenoiser {
    pub fn init(cfg: &DenoiserConfig, latent_channels: usize, seed: u64, precision: Precision) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            residual: ResidualPredictor::init(cfg, latent_channels, derive_seed(seed, &[0x5]), precision)?,
            similarity: SimilarityPredictor::init(cfg, latent_channels, derive_seed(seed, &[0x6]), precision)?,
        })
    }

    pub fn from_params(
        cfg: &DenoiserConfig,
        latent_channels: usize,
        residual: ModelParams,
        similarity: ModelParams,
    ) -> Result<Self> {
        Ok(Self {
            cfg: cfg.clone(),
            residual: ResidualPredictor::from_params(cfg, latent_channels, residual)?,
            similarity: SimilarityPredictor::from_params(cfg, latent_channels, similarity)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn residual(&self) -> &ResidualPredictor {
        &self.residual
    }

    pub fn similarity(&self) -> &SimilarityPredictor {
        &self.similarity
    }

    pub fn residual_mut(&mut self) -> &mut ResidualPredictor {
        &mut self.residual
    }

    pub fn similarity_mut(&mut self) -> &mut SimilarityPredictor {
        &mut self.similarity
    }

    pub fn into_params(self) -> (ModelParams, ModelParams) {
        (self.residual.into_params(), self.similarity.into_params())
    }

    pub fn dtype(&self) -> DType {
        self.residual.dtype()
    }

    pub fn freeze(&mut self) {
        self.residual.params_mut().freeze();
        self.similarity.params_mut().freeze();
    }

    pub fn predict_residual(&self, z: &Latent, s: SimilarityScore) -> Result<Latent> {
        let dtype = self.dtype();
        let r = self.residual.residual(&z.to_tensor(dtype)?, &score_tensor(s, dtype)?)?;
        Latent::from_tensor(&r)
    }

    pub fn predict_similarity(&self, s: SimilarityScore, z: &Latent, z_next: &Latent) -> Result<SimilarityScore> {
        if z.shape() != z_next.shape() {
            return Err(Error::shape("z_t and z_{t+1} layouts differ"));
        }
        let dtype = self.dtype();
        let out = self.similarity.similarity(
            &score_tensor(s, dtype)?,
            &z.to_tensor(dtype)?,
            &z_next.to_tensor(dtype)?,
        )?;
        read_score(&out)
    }

    pub fn step(&self, z: &Latent, s: SimilarityScore) -> Result<(Latent, SimilarityScore)> {
        denoise_step(&self.residual, &self.similarity, z, s, self.dtype())
    }

    pub fn denoise(&self, z1: &Latent, snr_db: f64, keep_latents: bool) -> Result<(Latent, DenoiseTrace)> {
        denoise_adaptive(
            &self.residual,
            &self.similarity,
            z1,
            snr_db,
            &self.cfg,
            keep_latents,
            self.dtype(),
        )
    }

    pub fn denoise_from(&self, z1: &Latent, s1: SimilarityScore, keep_latents: bool) -> Result<(Latent, DenoiseTrace)> {
        denoise_adaptive_from(
            &self.residual,
            &self.similarity,
            z1,
            s1,
            self.cfg.t_max,
            keep_latents,
            self.dtype(),
        )
    }

    pub fn unroll(&self, z1: &Tensor, s1: &Tensor, steps: usize) -> Result<Unroll> {
        unroll(&self.residual, &self.similarity, z1, s1, steps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::LatentShape;
    use proptest::prelude::*;

    #[test]
    fn init_ss_reference_values() -> Result<()> {
        assert!((init_ss(1.0)?.value() - 0.707107).abs() < 1e-6);
        assert!((init_ss(10.0)?.value() - 0.953463).abs() < 1e-6);
        assert!(init_ss(1e12)?.value() > 0.999_999);
        assert!(init_ss(1e-12)?.value() < 1e-5);
        assert!(init_ss(0.0).is_err());
        assert!(init_ss(-1.0).is_err());
        Ok(())
    }

    #[test]
    fn cosine_examples() -> Result<()> {
        let a = Latent::flat(vec![1.0, 0.0])?;
        assert!((cosine_similarity(&a, &a)? - 1.0).abs() < 1e-15);
        let b = Latent::flat(vec![1.0, 1.0])?;
        assert!((cosine_similarity(&a, &b)? - 0.707107).abs() < 1e-6);
        let c = Latent::flat(vec![0.0, 1.0])?;
        assert_eq!(cosine_similarity(&a, &c)?, 0.0);
        let z = Latent::flat(vec![0.0, 0.0])?;
        assert!(matches!(cosine_similarity(&a, &z), Err(Error::ZeroNorm(_))));
        assert!(cosine_similarity_slices(&[1.0], &[1.0, 2.0]).is_err());
        Ok(())
    }

    #[test]
    fn stop_rule_examples() {
        assert_eq!(apply_stop_rule(&[0.71, 0.80, 0.83, 0.85], 3), (3, 3, StopReason::TMaxReached));
        assert_eq!(apply_stop_rule(&[0.71, 0.80, 0.78, 0.9], 3), (1, 2, StopReason::SsDecreased));
        assert_eq!(apply_stop_rule(&[0.71, 0.65, 0.9, 0.9], 3), (0, 1, StopReason::SsDecreased));
        // ties keep going
        assert_eq!(apply_stop_rule(&[0.5, 0.5, 0.5, 0.5], 3), (3, 3, StopReason::TMaxReached));
    }

    #[test]
    fn config_rejects_zero_t_max() {
        let cfg = DenoiserConfig {
            t_max: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            t_max: 3,
            unet_depth: 1,
            base_channels: 8,
            groups: 4,
            similarity_hidden: 8,
            ..Default::default()
        }
    }

    fn latent(seed: u64) -> Latent {
        let values = (0..4 * 4 * 4)
            .map(|i| (((i as u64 * 2654435761 + seed) % 1000) as f64 / 500.0) - 1.0)
            .collect();
        Latent::new(values, LatentShape::new(4, 4, 4)).unwrap()
    }

    #[test]
    fn predictors_preserve_shape_and_range() -> Result<()> {
        for cond in [SsConditioning::BroadcastConcat, SsConditioning::ScaleShift] {
            let cfg = DenoiserConfig {
                ss_conditioning: cond,
                ..small()
            };
            let d = LatentDenoiser::init(&cfg, 4, 1, Precision::F32)?;
            let z = latent(3);
            let s = init_ss(1.0)?;
            let r = d.predict_residual(&z, s)?;
            assert_eq!(r.shape(), z.shape());
            assert_eq!(r, d.predict_residual(&z, s)?);
            let sn = d.predict_similarity(s, &z, &latent(4))?;
            assert!((0.0..=1.0).contains(&sn.value()));
            assert_eq!(sn, d.predict_similarity(s, &z, &latent(4))?);
        }
        Ok(())
    }

    #[test]
    fn geometry_mismatch_is_rejected() -> Result<()> {
        let d = LatentDenoiser::init(&small(), 4, 1, Precision::F32)?;
        let odd = Latent::new(vec![0.5; 4 * 3 * 4], LatentShape::new(4, 3, 4))?;
        assert!(d.predict_residual(&odd, init_ss(1.0)?).is_err());
        let other = Latent::new(vec![0.5; 2 * 4 * 4], LatentShape::new(2, 4, 4))?;
        assert!(d.predict_residual(&other, init_ss(1.0)?).is_err());
        assert!(d.predict_similarity(init_ss(1.0)?, &latent(1), &other).is_err());
        Ok(())
    }

    #[test]
    fn adaptive_trace_is_consistent_and_matches_batched_selection() -> Result<()> {
        let d = LatentDenoiser::init(&small(), 4, 7, Precision::F64)?;
        let zs: Vec<Latent> = (0..6).map(latent).collect();
        let refs: Vec<&Latent> = zs.iter().collect();
        let batch = Latent::batch_to_tensor(&refs, DType::F64)?;
        let s1 = init_ss_db(2.0)?;
        let s = Tensor::full(s1.value(), 6, &Device::Cpu)?;
        let un = d.unroll(&batch, &s, 3)?;
        let (selected, decisions) = un.select_adaptive(3)?;
        for (i, z) in zs.iter().enumerate() {
            let (out, trace) = d.denoise_from(z, s1, true)?;
            assert!(trace.is_consistent(3));
            assert_eq!(trace.latents.as_ref().unwrap()[trace.steps_kept], out);
            assert_eq!(decisions[i], (trace.steps_kept, trace.steps_executed, trace.stop_reason));
            let sel = Latent::from_tensor(&selected.get(i)?)?;
            for (a, b) in sel.values().iter().zip(out.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        Ok(())
    }

    #[test]
    fn trace_records_serialize_one_per_line() -> Result<()> {
        let trace = DenoiseTrace {
            ss_sequence: vec![SimilarityScore::new(0.7)?, SimilarityScore::new(0.6)?],
            steps_executed: 1,
            steps_kept: 0,
            stop_reason: StopReason::SsDecreased,
            latents: None,
        };
        let mut buf = Vec::new();
        write_trace_records(&mut buf, &[trace.record("img0", 0.0), trace.record("img1", 2.0)])?;
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let back: TraceRecord = serde_json::from_str(lines[1])?;
        assert_eq!(back.transmission_id, "img1");
        assert_eq!(back.stop_reason, StopReason::SsDecreased);
        assert!(text.contains("\"ss_decreased\""));
        Ok(())
    }

    proptest! {
        #[test]
        fn init_ss_is_strictly_increasing(a in 1e-6f64..1e6, b in 1e-6f64..1e6) {
            prop_assume!((a - b).abs() > 1e-9 * a.max(b));
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (slo, shi) = (init_ss(lo).unwrap().value(), init_ss(hi).unwrap().value());
            prop_assert!(slo < shi);
            prop_assert!(slo > 0.0 && shi < 1.0);
        }

        #[test]
        fn stop_rule_kept_prefix_is_monotone(scores in prop::collection::vec(0.0f64..1.0, 4)) {
            let (kept, executed, reason) = apply_stop_rule(&scores, 3);
            prop_assert!(kept <= executed && executed <= 3);
            prop_assert!(scores[..=kept].windows(2).all(|w| w[1] >= w[0]));
            if reason == StopReason::SsDecreased {
                prop_assert!(scores[kept + 1] < scores[kept]);
                prop_assert_eq!(executed, kept + 1);
            }
        }
    }
}
