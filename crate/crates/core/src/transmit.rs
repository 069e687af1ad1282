//! One image through the whole chain, with its denoising trace.

use serde::{Deserialize, Serialize};

use crate::channel::{transmit_latent, ChannelConfig};
use crate::codec::ImageTensor;
use crate::denoiser::DenoiseTrace;
use crate::error::Result;
use crate::eval::{psnr, ModelBundle};
use crate::rng::rng_from_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePsnr {
    pub stage: String,
    pub psnr_db: f64,
}

pub struct TransmitOutcome {
    pub reconstruction: ImageTensor,
    pub trace: DenoiseTrace,
    /// PSNR of the decoder output after each executed denoising step, plus
    /// the JSCC-T receiver on the raw channel output.
    pub stages: Vec<StagePsnr>,
    /// Bottom/right rows and columns added before encoding.
    pub padding: (usize, usize),
}

pub fn transmit_image(bundle: &ModelBundle, image: &ImageTensor, snr_db: f64, seed: u64) -> Result<TransmitOutcome> {
    let d = bundle.encoder.config().downsample_factor();
    let (padded, (h, w)) = image.reflect_pad_to_multiple(d)?;
    let padding = (padded.height() - h, padded.width() - w);
    let y = bundle.encoder.encode(&padded)?;
    let ch = ChannelConfig {
        snr_db,
        signal_power: bundle.signal_power,
        seed,
    };
    ch.validate()?;
    let sent = transmit_latent(&y, &ch, &mut rng_from_seed(seed))?;
    let (y_hat, trace) = bundle.denoiser.denoise(&sent.received, snr_db, true)?;
    let reconstruction = bundle.decoder.decode(&y_hat)?.crop(h, w)?;

    let mut stages = vec![StagePsnr {
        stage: "jscc-t".into(),
        psnr_db: psnr(image, &bundle.baseline_decoder.decode(&sent.received)?.crop(h, w)?)?,
    }];
    for (t, z) in trace.latents.iter().flatten().enumerate() {
        stages.push(StagePsnr {
            stage: format!("z{}", t + 1),
            psnr_db: psnr(image, &bundle.decoder.decode(z)?.crop(h, w)?)?,
        });
    }
    stages.push(StagePsnr {
        stage: "output".into(),
        psnr_db: psnr(image, &reconstruction)?,
    });
    Ok(TransmitOutcome {
        reconstruction,
        trace,
        stages,
        padding,
    })
}
