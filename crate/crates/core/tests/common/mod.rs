//! Shared fixtures: finite-difference checks, tiny models and scripted predictors.
#![allow(dead_code)]

use std::cell::Cell;

use candle_core::{DType, Device, Tensor, Var};
use semcom::channel::transmit_tensor;
use semcom::codec::{build_backbone, BackboneKind, CodecConfig, Latent};
use semcom::denoiser::{
    denoise_adaptive_from, DenoiseTrace, DenoiserConfig, LatentDenoiser, ResidualModel, SimilarityModel,
    SimilarityScore, StopReason,
};
use semcom::nn::{ModelParams, Precision};
use semcom::rng::rng_from_seed;
use semcom::training::{
    end_to_end_tensor, latent_mse_tensor, residual_predictor_loss_tensor, similarity_predictor_loss_tensor,
    ss_loss_tensor,
};
use semcom::Result;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;
pub const MAX_PARAMS: usize = 1000;
/// Below this, round-off in the central difference (about 1e-12 |L| / step) dominates.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

pub fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Result<Tensor> {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_scalar::<f64>()?)
}

fn nudge(var: &Var, idx: usize, delta: f64) -> Result<()> {
    let mut v = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
    v[idx] += delta;
    var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu)?)?;
    Ok(())
}

fn central_difference(var: &Var, idx: usize, loss: &dyn Fn() -> Result<Tensor>) -> Result<f64> {
    nudge(var, idx, FD_STEP)?;
    let up = scalar(&loss()?)?;
    nudge(var, idx, -2.0 * FD_STEP)?;
    let down = scalar(&loss()?)?;
    nudge(var, idx, FD_STEP)?;
    Ok((up - down) / (2.0 * FD_STEP))
}

/// Checks the largest-gradient entry of each variable; returns how many were checked.
pub fn check_vars(vars: &[(String, Var)], loss: &dyn Fn() -> Result<Tensor>) -> Result<usize> {
    let grads = loss()?.backward()?;
    let mut checked = 0;
    for (name, var) in vars {
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g = g.flatten_all()?.to_vec1::<f64>()?;
        let (idx, &bp) = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .expect("nonempty parameter");
        if bp.abs() < GRAD_FLOOR {
            continue;
        }
        let fd = central_difference(var, idx, loss)?;
        assert!(rel_err(fd, bp) < FD_TOL, "{name}[{idx}]: finite difference {fd} vs backprop {bp}");
        checked += 1;
    }
    Ok(checked)
}

pub fn named(params: &ModelParams) -> Vec<(String, Var)> {
    params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

pub fn tiny_codec(backbone: BackboneKind) -> CodecConfig {
    CodecConfig {
        stages: 1,
        blocks_per_stage: vec![1, 1],
        embed_dims: vec![2, 2],
        window_size: 2,
        head_filters: 2,
        patch_size: 2,
        head_dim: 2,
        backbone,
        target_ratio: None,
    }
}

pub fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig {
        t_max: 2,
        unet_depth: 1,
        base_channels: 2,
        groups: 1,
        similarity_hidden: 2,
        ..DenoiserConfig::default()
    }
}

fn codec_round_trip(backbone: BackboneKind) -> Result<()> {
    let (enc, dec) = build_backbone(&tiny_codec(backbone), 3, Precision::F64)?;
    let count = enc.params().parameter_count() + dec.params().parameter_count();
    assert!(count <= MAX_PARAMS, "{backbone:?} codec has {count} parameters");
    let x = (rand_tensor(&[1, 3, 8, 8], 11, 0.5)? + 0.5)?;
    let loss = || -> Result<Tensor> {
        let x_hat = dec.forward(&enc.forward(&x)?)?;
        Ok((&x_hat - &x)?.sqr()?.sum_all()?)
    };
    let n = check_vars(&named(enc.params()), &loss)?;
    assert!(n >= enc.params().len() / 2, "only {n} encoder tensors checked");
    Ok(())
}

pub fn check_convolutional_codec() -> Result<()> {
    codec_round_trip(BackboneKind::Convolutional)
}

pub fn check_windowed_attention_codec() -> Result<()> {
    codec_round_trip(BackboneKind::WindowedAttention)
}

/// Latent MSE and SS loss, every entry of `z`.
pub fn check_latent_losses() -> Result<()> {
    let y = rand_tensor(&[2, 2, 2, 2], 1, 1.0)?;
    let z = Var::from_tensor(&rand_tensor(&[2, 2, 2, 2], 2, 1.0)?)?;
    let losses: [(&str, &dyn Fn() -> Result<Tensor>); 2] = [
        ("latent mse", &|| latent_mse_tensor(&y, z.as_tensor())),
        ("ss loss", &|| ss_loss_tensor(&y, z.as_tensor())),
    ];
    for (name, f) in losses {
        let g = f()?.backward()?.get(z.as_tensor()).expect("gradient wrt z").flatten_all()?.to_vec1::<f64>()?;
        for (i, bp) in g.iter().enumerate() {
            let fd = central_difference(&z, i, f)?;
            assert!((fd - bp).abs() < 1e-8 || rel_err(fd, *bp) < FD_TOL, "{name}[{i}]: {fd} vs {bp}");
        }
    }
    Ok(())
}

// One step: with more, the detached score conditioning is a path that finite
// differences see but backprop deliberately does not.
fn unroll_setup() -> Result<(LatentDenoiser, Tensor, Tensor, Tensor)> {
    let den = LatentDenoiser::init(&tiny_denoiser(), 2, 5, Precision::F64)?;
    let count = den.residual().params().parameter_count() + den.similarity().params().parameter_count();
    assert!(count <= MAX_PARAMS, "denoiser has {count} parameters");
    let y = rand_tensor(&[2, 2, 2, 2], 3, 1.0)?;
    let z1 = (&y + rand_tensor(&[2, 2, 2, 2], 4, 0.7)?)?;
    let s1 = Tensor::new(&[0.7f64, 0.8], &Device::Cpu)?;
    Ok((den, y, z1, s1))
}

pub fn check_residual_objective() -> Result<()> {
    let (den, y, z1, s1) = unroll_setup()?;
    let loss = || -> Result<Tensor> {
        let u = den.unroll(&z1, &s1, 1)?;
        residual_predictor_loss_tensor(&y, &u.latents[1..], 1.0)
    };
    let n = check_vars(&named(den.residual().params()), &loss)?;
    assert!(n >= 4, "only {n} residual tensors checked");
    Ok(())
}

pub fn check_similarity_objective() -> Result<()> {
    let (den, y, z1, s1) = unroll_setup()?;
    let loss = || -> Result<Tensor> {
        let u = den.unroll(&z1, &s1, 1)?;
        similarity_predictor_loss_tensor(&y, &u.scores[1..], &u.latents[1..])
    };
    let n = check_vars(&named(den.similarity().params()), &loss)?;
    assert!(n >= 2, "only {n} similarity tensors checked");
    let grads = loss()?.backward()?;
    for (name, v) in den.residual().params().iter() {
        assert!(grads.get(v.as_tensor()).is_none(), "similarity loss reached residual parameter {name}");
    }
    Ok(())
}

pub fn check_end_to_end() -> Result<()> {
    let (enc, dec) = build_backbone(&tiny_codec(BackboneKind::Convolutional), 8, Precision::F64)?;
    let x = (rand_tensor(&[2, 3, 8, 8], 12, 0.5)? + 0.5)?;
    let loss = || -> Result<Tensor> {
        let mut rngs = vec![rng_from_seed(1), rng_from_seed(2)];
        let (_, z) = transmit_tensor(&enc.forward(&x)?, &[3.0, 3.0], 1.0, &mut rngs)?;
        end_to_end_tensor(&x, &dec.forward(&z)?)
    };
    assert!(check_vars(&named(dec.params()), &loss)? >= dec.params().len() / 2);
    assert!(check_vars(&named(enc.params()), &loss)? >= enc.params().len() / 2);
    assert_eq!(loss()?.dtype(), DType::F64);
    Ok(())
}

/// Adds one to every latent entry, so `z_k = z_1 + (k - 1)`.
pub struct UnitResidual;

impl ResidualModel for UnitResidual {
    fn residual(&self, z: &Tensor, _s: &Tensor) -> Result<Tensor> {
        Ok(z.ones_like()?)
    }
}

/// Emits `s_2, s_3, ...` from a script, ignoring its inputs.
pub struct ScriptedSimilarity {
    script: Vec<f64>,
    next: Cell<usize>,
}

impl ScriptedSimilarity {
    pub fn new(script: &[f64]) -> Self {
        Self {
            script: script.to_vec(),
            next: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.next.get()
    }
}

impl SimilarityModel for ScriptedSimilarity {
    fn similarity(&self, _s: &Tensor, z: &Tensor, _z_next: &Tensor) -> Result<Tensor> {
        let k = self.next.get();
        self.next.set(k + 1);
        let v = *self.script.get(k).expect("similarity predictor called past its script");
        Ok(Tensor::full(v, z.dims()[0], &Device::Cpu)?)
    }
}

/// Expected outcome of a scripted run.
pub struct ScriptCase {
    pub sequence: &'static [f64],
    pub index: usize,
    pub steps_kept: usize,
    pub stop_reason: StopReason,
}

pub const SCRIPT_CASES: [ScriptCase; 3] = [
    ScriptCase {
        sequence: &[0.71, 0.80, 0.83, 0.85],
        index: 3,
        steps_kept: 3,
        stop_reason: StopReason::TMaxReached,
    },
    ScriptCase {
        sequence: &[0.71, 0.80, 0.78],
        index: 1,
        steps_kept: 1,
        stop_reason: StopReason::SsDecreased,
    },
    ScriptCase {
        sequence: &[0.71, 0.65],
        index: 0,
        steps_kept: 0,
        stop_reason: StopReason::SsDecreased,
    },
];

/// Runs one scripted case with `T_max = 3` and checks the returned latent,
/// trace fields and snapshot provenance.
pub fn run_script_case(case: &ScriptCase) -> Result<DenoiseTrace> {
    let z1 = Latent::flat(vec![0.25, -0.5, 1.0, 2.0])?;
    let sim = ScriptedSimilarity::new(&case.sequence[1..]);
    let (out, trace) = denoise_adaptive_from(
        &UnitResidual,
        &sim,
        &z1,
        SimilarityScore::new(case.sequence[0])?,
        3,
        true,
        DType::F64,
    )?;
    let expected: Vec<f64> = z1.values().iter().map(|v| v + case.index as f64).collect();
    assert_eq!(out.values(), expected.as_slice(), "returned latent is not z_{}", case.index + 1);
    assert_eq!(trace.steps_kept, case.steps_kept);
    assert_eq!(trace.stop_reason, case.stop_reason);
    assert_eq!(trace.steps_executed, case.sequence.len() - 1);
    assert_eq!(sim.calls(), case.sequence.len() - 1);
    let seq: Vec<f64> = trace.ss_sequence.iter().map(|s| s.value()).collect();
    assert_eq!(seq, case.sequence);
    let snapshots = trace.latents.as_ref().expect("snapshots recorded");
    assert_eq!(&snapshots[trace.steps_kept], &out);
    assert!(trace.is_consistent(3));
    Ok(trace)
}
