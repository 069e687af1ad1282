//! Complex AWGN channel with per-transmission power normalization.
//!
//! A real latent of length `2n` is packed into `n` complex symbols
//! (`s_i = y[2i] + j·y[2i+1]`), scaled to average power `P`, and corrupted by
//! circular complex Gaussian noise of per-symbol variance `σ² = P/η`.
//! The tensor path used during training draws the noise in exactly the same
//! order, so both paths agree bit-for-bit given the same RNG.

use candle_core::{Device, Tensor, D};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{Latent, LatentShape};
use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSymbols(Vec<Complex64>);

impl ComplexSymbols {
    pub fn new(values: Vec<Complex64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.0.iter().map(|s| s.norm_sqr()).sum()
    }

    /// `(1/n) Σ |s_i|²`.
    pub fn average_power(&self) -> f64 {
        if self.0.is_empty() {
            0.0
        } else {
            self.energy() / self.0.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub snr_db: f64,
    #[serde(default = "default_power")]
    pub signal_power: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_power() -> f64 {
    1.0
}

impl ChannelConfig {
    pub fn new(snr_db: f64, seed: u64) -> Self {
        Self {
            snr_db,
            signal_power: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::config(format!("snr_db must be finite, got {}", self.snr_db)));
        }
        if !(self.signal_power > 0.0 && self.signal_power.is_finite()) {
            return Err(Error::config(format!(
                "signal power must be positive, got {}",
                self.signal_power
            )));
        }
        Ok(())
    }

    /// Linear SNR `η`.
    pub fn eta(&self) -> f64 {
        snr_db_to_linear(self.snr_db)
    }

    /// Per-symbol complex noise variance `σ² = P/η`.
    pub fn noise_variance(&self) -> f64 {
        self.signal_power / self.eta()
    }
}

pub fn snr_db_to_linear(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0)
}

pub fn linear_to_snr_db(eta: f64) -> f64 {
    10.0 * eta.log10()
}

fn pack_values(values: &[f64]) -> Result<ComplexSymbols> {
    if values.len() % 2 != 0 {
        return Err(Error::shape(format!(
            "cannot pack {} real values into complex pairs",
            values.len()
        )));
    }
    Ok(ComplexSymbols(
        values
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect(),
    ))
}

pub fn pack_complex(latent: &Latent) -> Result<ComplexSymbols> {
    pack_values(latent.values())
}

/// Packs a raw real slice; errors on odd length.
pub fn pack_complex_slice(values: &[f64]) -> Result<ComplexSymbols> {
    pack_values(values)
}

pub fn unpack_real(sym: &ComplexSymbols, shape: LatentShape) -> Result<Latent> {
    if shape.numel() != 2 * sym.len() {
        return Err(Error::shape(format!(
            "{} symbols cannot fill latent layout {:?}",
            sym.len(),
            shape.dims()
        )));
    }
    let values = sym.0.iter().flat_map(|s| [s.re, s.im]).collect();
    Latent::new(values, shape)
}

/// Scales `sym` by `sqrt(nP)/‖sym‖`.
pub fn power_normalize(sym: &ComplexSymbols, power: f64) -> Result<ComplexSymbols> {
    if !(power > 0.0) {
        return Err(Error::invalid(format!("signal power must be positive, got {power}")));
    }
    let norm = sym.energy().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm("power normalization"));
    }
    let scale = (sym.len() as f64 * power).sqrt() / norm;
    Ok(ComplexSymbols(sym.0.iter().map(|s| s * scale).collect()))
}

/// `n` i.i.d. circular complex Gaussian samples of variance `noise_var`
/// (`noise_var/2` per real component), drawn real part first.
pub fn sample_noise(n: usize, noise_var: f64, rng: &mut SimRng) -> Vec<Complex64> {
    let sd = (noise_var / 2.0).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(sd * re, sd * im)
        })
        .collect()
}

/// `z_c = y_c + n_c`.
pub fn awgn_transmit(sym: &ComplexSymbols, ch: &ChannelConfig, rng: &mut SimRng) -> Result<ComplexSymbols> {
    ch.validate()?;
    let noise = sample_noise(sym.len(), ch.noise_variance(), rng);
    Ok(ComplexSymbols(
        sym.0.iter().zip(noise).map(|(s, n)| s + n).collect(),
    ))
}

/// Result of sending one latent through the channel.
#[derive(Debug, Clone)]
pub struct Transmission {
    /// Power-normalized transmitted latent `y`.
    pub sent: Latent,
    /// Received noisy latent `z_1`.
    pub received: Latent,
}

/// pack → normalize → AWGN → unpack.
pub fn transmit_latent(latent: &Latent, ch: &ChannelConfig, rng: &mut SimRng) -> Result<Transmission> {
    let sent = power_normalize(&pack_complex(latent)?, ch.signal_power)?;
    let received = awgn_transmit(&sent, ch, rng)?;
    Ok(Transmission {
        sent: unpack_real(&sent, latent.shape())?,
        received: unpack_real(&received, latent.shape())?,
    })
}

/// Differentiable per-sample power normalization of a `(B, C, h, w)` batch.
pub fn normalize_power_tensor(y: &Tensor, power: f64) -> Result<Tensor> {
    let b = y.dim(0)?;
    let flat = y.reshape((b, ()))?;
    let n = flat.dim(1)? / 2;
    let norm = flat.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let norms = norm.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if norms.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::ZeroNorm("power normalization"));
    }
    let scaled = flat.broadcast_div(&norm)?.affine((n as f64 * power).sqrt(), 0.0)?;
    Ok(scaled.reshape(y.shape())?)
}

/// Real-valued noise for a `(B, ...)` batch, one RNG stream and SNR per sample,
/// interleaved exactly as [`unpack_real`] would lay out complex noise.
pub fn noise_tensor(
    shape: &[usize],
    snrs_db: &[f64],
    power: f64,
    rngs: &mut [SimRng],
    dtype: candle_core::DType,
) -> Result<Tensor> {
    let b = shape[0];
    if snrs_db.len() != b || rngs.len() != b {
        return Err(Error::shape(format!(
            "batch of {b} needs {b} SNRs and RNG streams, got {} and {}",
            snrs_db.len(),
            rngs.len()
        )));
    }
    let per: usize = shape[1..].iter().product();
    if per % 2 != 0 {
        return Err(Error::shape("latent length must be even"));
    }
    let mut values = Vec::with_capacity(b * per);
    for (snr, rng) in snrs_db.iter().zip(rngs.iter_mut()) {
        let var = power / snr_db_to_linear(*snr);
        values.extend(sample_noise(per / 2, var, rng).into_iter().flat_map(|c| [c.re, c.im]));
    }
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Batched channel: returns `(normalized y, received z_1)`; gradients flow
/// through the normalization into `y`.
pub fn transmit_tensor(
    y: &Tensor,
    snrs_db: &[f64],
    power: f64,
    rngs: &mut [SimRng],
) -> Result<(Tensor, Tensor)> {
    let sent = normalize_power_tensor(y, power)?;
    let noise = noise_tensor(y.dims(), snrs_db, power, rngs, y.dtype())?;
    let received = (&sent + noise)?;
    Ok((sent, received))
}
