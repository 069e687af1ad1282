//! Training objectives, in two forms: differentiable batched tensors (means
//! over the batch) and plain `f64` evaluations on single latents/images.

use candle_core::{Tensor, D};

use crate::codec::{ImageTensor, Latent};
use crate::denoiser::{cosine_similarity, SimilarityScore};
use crate::error::{Error, Result};

fn same_dims(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Per-sample cosine similarity of two `(B, ...)` batches, shape `(B,)`.
pub fn cosine_tensor(y: &Tensor, z: &Tensor) -> Result<Tensor> {
    same_dims(y, z, "cosine similarity")?;
    let b = y.dim(0)?;
    let y = y.reshape((b, ()))?;
    let z = z.reshape((b, ()))?;
    let dot = (&y * &z)?.sum(D::Minus1)?;
    let ny = y.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nz = z.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok(dot.div(&(ny * nz)?)?)
}

/// `(1/2n)‖y − z‖²`, averaged over the batch.
pub fn latent_mse_tensor(y: &Tensor, z: &Tensor) -> Result<Tensor> {
    same_dims(y, z, "latent MSE")?;
    Ok((y - z)?.sqr()?.mean_all()?)
}

/// `1 − cos(y, z)`, averaged over the batch.
pub fn ss_loss_tensor(y: &Tensor, z: &Tensor) -> Result<Tensor> {
    Ok(cosine_tensor(y, z)?.affine(-1.0, 1.0)?.mean_all()?)
}

/// `mean_t [L_MSE(y, z_t) + α·L_SS(y, z_t)]` over the denoised latents of an unroll.
pub fn residual_predictor_loss_tensor(y: &Tensor, denoised: &[Tensor], alpha: f64) -> Result<Tensor> {
    if denoised.is_empty() {
        return Err(Error::invalid("residual predictor loss needs at least one denoised latent"));
    }
    let mut total: Option<Tensor> = None;
    for z in denoised {
        let mut term = latent_mse_tensor(y, z)?;
        if alpha != 0.0 {
            term = (term + ss_loss_tensor(y, z)?.affine(alpha, 0.0)?)?;
        }
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    let total = total.expect("nonempty");
    Ok(total.affine(1.0 / denoised.len() as f64, 0.0)?)
}

/// `(s − cos(y, z))²`, averaged over the batch; the cosine target is a constant.
pub fn similarity_loss_tensor(s_pred: &Tensor, y: &Tensor, z: &Tensor) -> Result<Tensor> {
    let target = cosine_tensor(&y.detach(), &z.detach())?;
    let s = s_pred.flatten_all()?.to_dtype(target.dtype())?;
    same_dims(&s, &target, "similarity loss")?;
    Ok((s - target)?.sqr()?.mean_all()?)
}

/// Similarity loss over the steps of an unroll: predictions `s_2..` against `z_2..`.
pub fn similarity_predictor_loss_tensor(y: &Tensor, predicted: &[Tensor], denoised: &[Tensor]) -> Result<Tensor> {
    if predicted.is_empty() || predicted.len() != denoised.len() {
        return Err(Error::invalid(format!(
            "need matching nonempty prediction/latent lists, got {} and {}",
            predicted.len(),
            denoised.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (s, z) in predicted.iter().zip(denoised) {
        let term = similarity_loss_tensor(s, y, z)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("nonempty").affine(1.0 / predicted.len() as f64, 0.0)?)
}

/// `(1/k)‖x − x̂‖²`, averaged over the batch.
pub fn end_to_end_tensor(x: &Tensor, x_hat: &Tensor) -> Result<Tensor> {
    same_dims(x, x_hat, "end-to-end MSE")?;
    Ok((x - x_hat)?.sqr()?.mean_all()?)
}

pub fn loss_latent_mse(y: &Latent, z: &Latent) -> Result<f64> {
    if y.len() != z.len() {
        return Err(Error::shape(format!("latent MSE of lengths {} and {}", y.len(), z.len())));
    }
    let sq: f64 = y.values().iter().zip(z.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / y.len() as f64)
}

pub fn loss_ss(y: &Latent, z: &Latent) -> Result<f64> {
    Ok(1.0 - cosine_similarity(y, z)?)
}

pub fn loss_residual_predictor(y: &Latent, denoised: &[Latent], alpha: f64) -> Result<f64> {
    if denoised.is_empty() {
        return Err(Error::invalid("residual predictor loss needs at least one denoised latent"));
    }
    let mut total = 0.0;
    for z in denoised {
        total += loss_latent_mse(y, z)? + alpha * loss_ss(y, z)?;
    }
    Ok(total / denoised.len() as f64)
}

pub fn loss_similarity_predictor(s_pred: SimilarityScore, y: &Latent, z: &Latent) -> Result<f64> {
    let e = s_pred.value() - cosine_similarity(y, z)?;
    Ok(e * e)
}

pub fn loss_end_to_end(x: &ImageTensor, x_hat: &ImageTensor) -> Result<f64> {
    if x.height() != x_hat.height() || x.width() != x_hat.width() {
        return Err(Error::shape(format!(
            "images {}x{} and {}x{} differ",
            x.height(),
            x.width(),
            x_hat.height(),
            x_hat.width()
        )));
    }
    let sq: f64 = x
        .pixels()
        .iter()
        .zip(x_hat.pixels())
        .map(|(a, b)| {
            let d = (*a as f64) - (*b as f64);
            d * d
        })
        .sum();
    Ok(sq / x.source_dim() as f64)
}
