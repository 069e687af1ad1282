//! Joint source-channel encoder and decoder.
//!
//! The encoder is a stack of `M + 1` stages: a patch-embedding stage followed
//! by `M` merging stages, each halving the spatial resolution, and a
//! convolution head whose filter count sets the bandwidth. The decoder mirrors
//! it with reverse-merging (up-sampling) stages and a sigmoid output.

mod conv;
mod swin;
mod types;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Initializer, ModelParams, Precision};

pub use types::{ImageTensor, Latent, LatentShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    WindowedAttention,
    Convolutional,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "windowed-attention" | "swin" => Ok(Self::WindowedAttention),
            "convolutional" | "conv" => Ok(Self::Convolutional),
            other => Err(Error::config(format!("unsupported backbone kind `{other}`"))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::WindowedAttention => "windowed-attention",
            Self::Convolutional => "convolutional",
        })
    }
}

/// Channel bandwidth ratio `ρ = n / k` as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandwidthRatio {
    pub num: usize,
    pub den: usize,
}

impl BandwidthRatio {
    pub const fn new(num: usize, den: usize) -> Self {
        Self { num, den }
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Number of merging stages `M`.
    pub stages: usize,
    /// Blocks per stage `[N_1, ..., N_{M+1}]`.
    pub blocks_per_stage: Vec<usize>,
    /// Channel width of each stage.
    pub embed_dims: Vec<usize>,
    /// Attention window, in patches.
    pub window_size: usize,
    /// Filters of the encoder's convolution head, `C_out`.
    pub head_filters: usize,
    pub patch_size: usize,
    pub head_dim: usize,
    pub backbone: BackboneKind,
    /// When set, `encode` checks that the image geometry realizes exactly this ratio.
    #[serde(default)]
    pub target_ratio: Option<BandwidthRatio>,
}

impl CodecConfig {
    /// Stage layout used in the reference experiments: `M = 3`, `[2, 2, 6, 2]`.
    /// Widths, window and head filters are not given there and are chosen here.
    pub fn reference() -> Self {
        Self {
            stages: 3,
            blocks_per_stage: vec![2, 2, 6, 2],
            embed_dims: vec![128, 192, 256, 320],
            window_size: 8,
            head_filters: 96,
            patch_size: 2,
            head_dim: 32,
            backbone: BackboneKind::WindowedAttention,
            target_ratio: None,
        }
    }

    /// Small convolutional codec for 32×32 images at `ρ = 1/16`.
    pub fn desk() -> Self {
        Self {
            stages: 2,
            blocks_per_stage: vec![1, 1, 1],
            embed_dims: vec![16, 32, 48],
            window_size: 4,
            head_filters: 24,
            patch_size: 2,
            head_dim: 16,
            backbone: BackboneKind::Convolutional,
            target_ratio: Some(BandwidthRatio::new(1, 16)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::config("at least one merging stage is required (M >= 1)"));
        }
        if self.blocks_per_stage.len() != self.stages + 1 {
            return Err(Error::config(format!(
                "blocks_per_stage has {} entries, expected M + 1 = {}",
                self.blocks_per_stage.len(),
                self.stages + 1
            )));
        }
        if self.embed_dims.len() != self.stages + 1 {
            return Err(Error::config(format!(
                "embed_dims has {} entries, expected M + 1 = {}",
                self.embed_dims.len(),
                self.stages + 1
            )));
        }
        if self.blocks_per_stage.iter().any(|&n| n == 0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        if self.embed_dims.iter().any(|&d| d == 0) || self.head_filters == 0 {
            return Err(Error::config("channel widths and head filters must be positive"));
        }
        if self.patch_size == 0 || self.window_size == 0 {
            return Err(Error::config("patch and window sizes must be positive"));
        }
        if self.backbone == BackboneKind::WindowedAttention {
            if self.head_dim == 0 {
                return Err(Error::config("head_dim must be positive"));
            }
            if let Some(d) = self.embed_dims.iter().find(|&&d| d % self.head_dim != 0) {
                return Err(Error::config(format!(
                    "embed dim {d} not divisible by head_dim {}",
                    self.head_dim
                )));
            }
        }
        Ok(())
    }

    /// Total spatial downsampling `D = patch · 2^M`.
    pub fn downsample_factor(&self) -> usize {
        self.patch_size << self.stages
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> Result<LatentShape> {
        let d = self.downsample_factor();
        if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
            return Err(Error::shape(format!(
                "image {height}x{width} not divisible by the total downsampling factor {d}"
            )));
        }
        let shape = LatentShape::new(self.head_filters, height / d, width / d);
        if shape.numel() % 2 != 0 {
            return Err(Error::shape(format!(
                "latent length {} is odd and cannot form complex symbols",
                shape.numel()
            )));
        }
        Ok(shape)
    }

    /// `(n, k)` for an image of the given size.
    pub fn symbols_and_source_dim(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let shape = self.latent_shape(height, width)?;
        Ok((shape.numel() / 2, height * width * 3))
    }

    /// Checks `n / k == target` exactly.
    pub fn check_ratio(&self, height: usize, width: usize, target: BandwidthRatio) -> Result<()> {
        let (n, k) = self.symbols_and_source_dim(height, width)?;
        if n * target.den != k * target.num {
            return Err(Error::config(format!(
                "{height}x{width} image with {} head filters gives rho = {n}/{k}, not {}/{}",
                self.head_filters, target.num, target.den
            )));
        }
        Ok(())
    }

    /// Head filter count realizing `target` for the given image size.
    pub fn head_filters_for(&self, height: usize, width: usize, target: BandwidthRatio) -> Result<usize> {
        let d = self.downsample_factor();
        if height % d != 0 || width % d != 0 {
            return Err(Error::shape(format!(
                "image {height}x{width} not divisible by the total downsampling factor {d}"
            )));
        }
        let k = height * width * 3;
        let positions = (height / d) * (width / d);
        // 2n = C_out · positions and n = k · num / den
        let two_n_num = 2 * k * target.num;
        if two_n_num % (target.den * positions) != 0 {
            return Err(Error::config(format!(
                "no integer head filter count gives rho = {}/{} at {height}x{width}",
                target.num, target.den
            )));
        }
        Ok(two_n_num / (target.den * positions))
    }

    /// Latent layout for an image, enforcing the target ratio when one is set.
    pub fn check_image(&self, height: usize, width: usize) -> Result<LatentShape> {
        let shape = self.latent_shape(height, width)?;
        if let Some(target) = self.target_ratio {
            self.check_ratio(height, width, target)?;
        }
        Ok(shape)
    }
}

enum EncoderNet {
    Conv(conv::ConvEncoder),
    Swin(swin::SwinEncoder),
}

enum DecoderNet {
    Conv(conv::ConvDecoder),
    Swin(swin::SwinDecoder),
}

/// JSCC encoder `f_e(·; φ)`.
pub struct Encoder {
    cfg: CodecConfig,
    net: EncoderNet,
    params: ModelParams,
}

/// JSCC decoder `f_d(·; θ)`.
pub struct Decoder {
    cfg: CodecConfig,
    net: DecoderNet,
    params: ModelParams,
}

/// Fresh encoder/decoder pair with seeded initialization.
pub fn build_backbone(cfg: &CodecConfig, seed: u64, precision: Precision) -> Result<(Encoder, Decoder)> {
    cfg.validate()?;
    let enc = Encoder::init(cfg, crate::rng::derive_seed(seed, &[0xE]), precision)?;
    let dec = Decoder::init(cfg, crate::rng::derive_seed(seed, &[0xD]), precision)?;
    log::debug!(
        "built {} codec: encoder {} params, decoder {} params",
        cfg.backbone,
        enc.params.parameter_count(),
        dec.params.parameter_count()
    );
    Ok((enc, dec))
}

impl Encoder {
    pub fn init(cfg: &CodecConfig, seed: u64, precision: Precision) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new("encoder", seed, precision);
        let net = match cfg.backbone {
            BackboneKind::Convolutional => EncoderNet::Conv(conv::ConvEncoder::new(&mut init, cfg)?),
            BackboneKind::WindowedAttention => EncoderNet::Swin(swin::SwinEncoder::new(&mut init, cfg)?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            net,
            params: init.finish(),
        })
    }

    pub fn from_params(cfg: &CodecConfig, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        let net = {
            let mut src = &params;
            match cfg.backbone {
                BackboneKind::Convolutional => EncoderNet::Conv(conv::ConvEncoder::new(&mut src, cfg)?),
                BackboneKind::WindowedAttention => EncoderNet::Swin(swin::SwinEncoder::new(&mut src, cfg)?),
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            net,
            params,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.iter().next().map(|(_, v)| v.dtype()).unwrap_or(DType::F32)
    }

    /// `(B, 3, H, W)` images in `[0, 1]` → `(B, C_out, H/D, W/D)` latents.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("encoder expects 3 input channels, got {c}")));
        }
        self.cfg.check_image(h, w)?;
        let x = ((x * 2.0)? - 1.0)?;
        match &self.net {
            EncoderNet::Conv(n) => n.forward(&x),
            EncoderNet::Swin(n) => n.forward(&x),
        }
    }

    pub fn encode(&self, image: &ImageTensor) -> Result<Latent> {
        let y = self.forward(&image.to_tensor(self.dtype())?)?;
        let latent = Latent::from_tensor(&y).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite("encoder"),
            other => other,
        })?;
        Ok(latent)
    }
}

impl Decoder {
    pub fn init(cfg: &CodecConfig, seed: u64, precision: Precision) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new("decoder", seed, precision);
        let net = match cfg.backbone {
            BackboneKind::Convolutional => DecoderNet::Conv(conv::ConvDecoder::new(&mut init, cfg)?),
            BackboneKind::WindowedAttention => DecoderNet::Swin(swin::SwinDecoder::new(&mut init, cfg)?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            net,
            params: init.finish(),
        })
    }

    pub fn from_params(cfg: &CodecConfig, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        let net = {
            let mut src = &params;
            match cfg.backbone {
                BackboneKind::Convolutional => DecoderNet::Conv(conv::ConvDecoder::new(&mut src, cfg)?),
                BackboneKind::WindowedAttention => DecoderNet::Swin(swin::SwinDecoder::new(&mut src, cfg)?),
            }
        };
        Ok(Self {
            cfg: cfg.clone(),
            net,
            params,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.iter().next().map(|(_, v)| v.dtype()).unwrap_or(DType::F32)
    }

    /// `(B, C_out, h, w)` latents → `(B, 3, h·D, w·D)` images in `[0, 1]`.
    pub fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = y.dims4()?;
        if c != self.cfg.head_filters {
            return Err(Error::shape(format!(
                "decoder expects {} latent channels, got {c}",
                self.cfg.head_filters
            )));
        }
        match &self.net {
            DecoderNet::Conv(n) => n.forward(y),
            DecoderNet::Swin(n) => n.forward(y),
        }
    }

    pub fn decode(&self, latent: &Latent) -> Result<ImageTensor> {
        let shape = latent.shape();
        if shape.channels != self.cfg.head_filters {
            return Err(Error::shape(format!(
                "latent layout {:?} incompatible with {} head filters",
                shape.dims(),
                self.cfg.head_filters
            )));
        }
        let x = self.forward(&latent.to_tensor(self.dtype())?)?;
        ImageTensor::from_tensor(&x).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite("decoder"),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        let px = (0..h * w * 3)
            .map(|i| ((i / 3) % w) as f32 / w as f32 * 0.5 + (i % 3) as f32 * 0.2)
            .collect();
        ImageTensor::new(h, w, px).unwrap()
    }

    #[test]
    fn desk_codec_gives_sixteenth_bandwidth() -> Result<()> {
        let cfg = CodecConfig::desk();
        let (enc, _) = build_backbone(&cfg, 0, Precision::F32)?;
        let y = enc.encode(&gradient_image(32, 32))?;
        assert_eq!(y.len(), 2 * 3072 / 16);
        assert!(y.values().iter().all(|v| v.is_finite()));
        Ok(())
    }

    #[test]
    fn encode_is_deterministic() -> Result<()> {
        let (enc, _) = build_backbone(&CodecConfig::desk(), 4, Precision::F32)?;
        let img = gradient_image(32, 32);
        assert_eq!(enc.encode(&img)?, enc.encode(&img)?);
        Ok(())
    }

    #[test]
    fn zero_stages_rejected() {
        let cfg = CodecConfig {
            stages: 0,
            blocks_per_stage: vec![1],
            embed_dims: vec![8],
            ..CodecConfig::desk()
        };
        assert!(matches!(build_backbone(&cfg, 0, Precision::F32), Err(Error::Config(_))));
    }

    #[test]
    fn conv_backbone_with_two_merges_downsamples_by_eight() -> Result<()> {
        let cfg = CodecConfig {
            target_ratio: None,
            ..CodecConfig::desk()
        };
        assert_eq!(cfg.stages + 1, 3);
        assert_eq!(cfg.downsample_factor(), 8);
        let (enc, dec) = build_backbone(&cfg, 0, Precision::F32)?;
        let x = gradient_image(16, 24).to_tensor(DType::F32)?;
        let y = enc.forward(&x)?;
        assert_eq!(y.dims(), &[1, 24, 2, 3]);
        assert_eq!(dec.forward(&y)?.dims(), x.dims());
        Ok(())
    }

    #[test]
    fn indivisible_image_is_a_shape_error() -> Result<()> {
        let (enc, _) = build_backbone(&CodecConfig::desk(), 0, Precision::F32)?;
        assert!(matches!(enc.encode(&gradient_image(30, 32)), Err(Error::Shape(_))));
        Ok(())
    }

    #[test]
    fn ratio_mismatch_is_reported() -> Result<()> {
        let cfg = CodecConfig::desk();
        assert!(cfg.check_ratio(32, 32, BandwidthRatio::new(1, 16)).is_ok());
        assert!(cfg.check_ratio(32, 32, BandwidthRatio::new(1, 8)).is_err());
        assert_eq!(cfg.head_filters_for(32, 32, BandwidthRatio::new(1, 8))?, 48);
        assert!(cfg.head_filters_for(32, 32, BandwidthRatio::new(1, 7)).is_err());
        Ok(())
    }

    #[test]
    fn decode_checks_latent_layout_and_clamps() -> Result<()> {
        let cfg = CodecConfig::desk();
        let (_, dec) = build_backbone(&cfg, 0, Precision::F32)?;
        let wrong = Latent::new(vec![0.0; 32], LatentShape::new(2, 4, 4))?;
        assert!(dec.decode(&wrong).is_err());
        let zeros = Latent::new(vec![0.0; 384], LatentShape::new(24, 4, 4))?;
        let img = dec.decode(&zeros)?;
        assert_eq!((img.height(), img.width()), (32, 32));
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        Ok(())
    }

    #[test]
    fn reference_layout_has_four_stages() {
        let cfg = CodecConfig::reference();
        assert_eq!(cfg.stages, 3);
        assert_eq!(cfg.blocks_per_stage, vec![2, 2, 6, 2]);
        assert_eq!(cfg.blocks_per_stage.len(), 4);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_backbone_kind_is_a_config_error() {
        assert!("transformer-xl".parse::<BackboneKind>().is_err());
        assert_eq!("conv".parse::<BackboneKind>().unwrap(), BackboneKind::Convolutional);
    }
}
