use candle_core::{DType, Tensor};

use super::{DenoiserConfig, SimilarityModel};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Conv2d, Initializer, Linear, ModelParams, ParamSource, Precision};

struct SimilarityNet {
    conv1: Conv2d,
    conv2: Conv2d,
    fc1: Linear,
    fc2: Linear,
}

impl SimilarityNet {
    fn new(src: &mut impl ParamSource, cfg: &DenoiserConfig, latent_channels: usize) -> Result<Self> {
        let hid = cfg.similarity_hidden;
        // z_t, z_{t+1}, their elementwise products and squares, and the s_t map
        let in_ch = 5 * latent_channels + 1;
        Ok(Self {
            conv1: Conv2d::same(src, "conv1", in_ch, hid, 1)?,
            conv2: Conv2d::same(src, "conv2", hid, hid, 1)?,
            fc1: Linear::new(src, "fc1", hid + 1, hid)?,
            fc2: Linear::new(src, "fc2", hid, 1)?,
        })
    }

    fn forward(&self, s: &Tensor, z: &Tensor, z_next: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = z.dims4()?;
        let s_col = s.reshape((b, 1))?;
        let s_map = s.reshape((b, 1, 1, 1))?.broadcast_as((b, 1, h, w))?;
        let feats = Tensor::cat(
            &[z, z_next, &(z * z_next)?, &z.sqr()?, &z_next.sqr()?, &s_map],
            1,
        )?;
        let hidden = self.conv2.forward(&self.conv1.forward(&feats)?.relu()?)?.relu()?;
        let pooled = hidden.mean((2, 3))?;
        let head = self
            .fc1
            .forward(&Tensor::cat(&[&pooled, &s_col], 1)?)?
            .relu()?;
        sigmoid(&self.fc2.forward(&head)?.reshape(b)?)
    }
}

/// Similarity predictor `g_s(s_t, z_t, z_{t+1}; ψ_s)`: 1×1 convolutions over
/// the joint inputs, global average pooling, and a squashed scalar head.
pub struct SimilarityPredictor {
    latent_channels: usize,
    net: SimilarityNet,
    params: ModelParams,
}

impl SimilarityPredictor {
    pub fn init(cfg: &DenoiserConfig, latent_channels: usize, seed: u64, precision: Precision) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new("similarity", seed, precision);
        let net = SimilarityNet::new(&mut init, cfg, latent_channels)?;
        Ok(Self {
            latent_channels,
            net,
            params: init.finish(),
        })
    }

    pub fn from_params(cfg: &DenoiserConfig, latent_channels: usize, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        let net = SimilarityNet::new(&mut &params, cfg, latent_channels)?;
        Ok(Self {
            latent_channels,
            net,
            params,
        })
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
}

impl SimilarityModel for SimilarityPredictor {
    fn similarity(&self, s: &Tensor, z: &Tensor, z_next: &Tensor) -> Result<Tensor> {
        if z.dims() != z_next.dims() {
            return Err(Error::shape(format!(
                "similarity predictor inputs differ in shape: {:?} vs {:?}",
                z.dims(),
                z_next.dims()
            )));
        }
        let c = z.dim(1)?;
        if c != self.latent_channels {
            return Err(Error::shape(format!(
                "similarity predictor expects {} channels, got {c}",
                self.latent_channels
            )));
        }
        self.net.forward(&s.to_dtype(z.dtype())?, z, z_next)
    }
}
