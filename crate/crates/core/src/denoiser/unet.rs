use candle_core::{DType, Tensor};

use super::{DenoiserConfig, ResidualModel, SsConditioning};
use crate::error::{Error, Result};
use crate::nn::{avg_pool, upsample_nearest, Cgr, Conv2d, Initializer, Linear, ModelParams, ParamInit, ParamSource, Precision};

/// Per-level injection of the similarity score into the decoder path.
enum Injection {
    /// A constant `s_t` feature map concatenated before the level's CGR block.
    Concat,
    /// `h ← h·(1 + γ(s_t)) + β(s_t)` after the level's CGR block.
    ScaleShift(Linear),
}

struct UpLevel {
    block: Cgr,
    injection: Injection,
}

struct UNet {
    input: Cgr,
    downs: Vec<Cgr>,
    middle: Cgr,
    // deepest first
    ups: Vec<UpLevel>,
    output: Conv2d,
}

fn width(base: usize, level: usize) -> usize {
    base << level
}

impl UNet {
    fn new(src: &mut impl ParamSource, cfg: &DenoiserConfig, latent_channels: usize) -> Result<Self> {
        let b = cfg.base_channels;
        let g = cfg.groups;
        let input = Cgr::new(src, "in", latent_channels, b, 3, g)?;
        let downs = (1..=cfg.unet_depth)
            .map(|l| Cgr::new(src, &format!("down{l}"), width(b, l - 1), width(b, l), 3, g))
            .collect::<Result<Vec<_>>>()?;
        let deepest = width(b, cfg.unet_depth);
        let middle = Cgr::new(src, "mid", deepest, deepest, 3, g)?;
        let mut ups = Vec::with_capacity(cfg.unet_depth);
        for l in (1..=cfg.unet_depth).rev() {
            let (from, skip) = (width(b, l), width(b, l - 1));
            let name = format!("up{l}");
            let up = match cfg.ss_conditioning {
                SsConditioning::BroadcastConcat => UpLevel {
                    block: Cgr::new(src, &name, from + skip + 1, skip, 3, g)?,
                    injection: Injection::Concat,
                },
                SsConditioning::ScaleShift => UpLevel {
                    block: Cgr::new(src, &name, from + skip, skip, 3, g)?,
                    injection: Injection::ScaleShift(Linear::new(src, &format!("{name}.film"), 1, 2 * skip)?),
                },
            };
            ups.push(up);
        }
        // near-zero residual at initialization: the denoiser starts close to identity
        let output = Conv2d::with_init(
            src,
            "out",
            (b, latent_channels, 1),
            ParamInit::Normal(1e-2),
            ParamInit::Constant(0.0),
        )?;
        Ok(Self {
            input,
            downs,
            middle,
            ups,
            output,
        })
    }

    fn forward(&self, z: &Tensor, s: &Tensor) -> Result<Tensor> {
        let mut skips = vec![self.input.forward(z)?];
        for down in &self.downs {
            let prev = skips.last().expect("input level present");
            skips.push(down.forward(&avg_pool(prev, 2)?)?);
        }
        let mut h = self.middle.forward(skips.last().expect("nonempty"))?;
        for (up, skip) in self.ups.iter().zip(skips.iter().rev().skip(1)) {
            let (bsz, _, sh, sw) = skip.dims4()?;
            let upsampled = upsample_nearest(&h, sh / h.dim(2)?)?;
            h = match &up.injection {
                Injection::Concat => {
                    let s_map = s.reshape((bsz, 1, 1, 1))?.broadcast_as((bsz, 1, sh, sw))?;
                    up.block.forward(&Tensor::cat(&[&upsampled, skip, &s_map], 1)?)?
                }
                Injection::ScaleShift(film) => {
                    let out = up.block.forward(&Tensor::cat(&[&upsampled, skip], 1)?)?;
                    let c = out.dim(1)?;
                    let gb = film.forward(&s.reshape((bsz, 1))?)?;
                    let gamma = gb.narrow(1, 0, c)?.reshape((bsz, c, 1, 1))?;
                    let beta = gb.narrow(1, c, c)?.reshape((bsz, c, 1, 1))?;
                    out.broadcast_mul(&(gamma + 1.0)?)?.broadcast_add(&beta)?
                }
            };
        }
        self.output.forward(&h)
    }
}

/// Residual predictor `g_r(z_t, s_t; ψ_r)`: a U-Net of CGR blocks whose
/// up-sampling path is conditioned on the similarity score.
pub struct ResidualPredictor {
    cfg: DenoiserConfig,
    latent_channels: usize,
    net: UNet,
    params: ModelParams,
}

impl ResidualPredictor {
    pub fn init(cfg: &DenoiserConfig, latent_channels: usize, seed: u64, precision: Precision) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new("residual", seed, precision);
        let net = UNet::new(&mut init, cfg, latent_channels)?;
        Ok(Self {
            cfg: cfg.clone(),
            latent_channels,
            net,
            params: init.finish(),
        })
    }

    pub fn from_params(cfg: &DenoiserConfig, latent_channels: usize, params: ModelParams) -> Result<Self> {
        cfg.validate()?;
        let net = UNet::new(&mut &params, cfg, latent_channels)?;
        Ok(Self {
            cfg: cfg.clone(),
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

    fn check_geometry(&self, z: &Tensor) -> Result<()> {
        let (_, c, h, w) = z.dims4()?;
        let m = 1usize << self.cfg.unet_depth;
        if c != self.latent_channels {
            return Err(Error::shape(format!(
                "residual predictor expects {} channels, got {c}",
                self.latent_channels
            )));
        }
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!(
                "latent grid {h}x{w} not divisible by 2^{} for the U-Net",
                self.cfg.unet_depth
            )));
        }
        Ok(())
    }
}

impl ResidualModel for ResidualPredictor {
    fn residual(&self, z: &Tensor, s: &Tensor) -> Result<Tensor> {
        self.check_geometry(z)?;
        let s = s.to_dtype(z.dtype())?;
        self.net.forward(z, &s)
    }
}
