use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RGB image with pixel values in `[0, 1]`, stored row-major as H×W×3.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("image must have nonzero height and width"));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::shape(format!(
                "expected {} pixel values for {height}x{width}x3, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of real source dimensions, `k = H·W·3`.
    pub fn source_dim(&self) -> usize {
        self.pixels.len()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * 3 + ch]
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.pixels, (self.height, self.width, 3), &Device::Cpu)?;
        Ok(t.permute((2, 0, 1))?.unsqueeze(0)?.to_dtype(dtype)?.contiguous()?)
    }

    /// Stacks equally sized images into a `(B, 3, H, W)` batch.
    pub fn batch_to_tensor(images: &[&ImageTensor], dtype: DType) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
        if images.iter().any(|im| im.height != first.height || im.width != first.width) {
            return Err(Error::shape("images in a batch must share dimensions"));
        }
        let parts = images
            .iter()
            .map(|im| im.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Inverse of [`ImageTensor::to_tensor`] for one `(3, H, W)` or `(1, 3, H, W)` tensor.
    /// Values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(Error::shape(format!("expected (3,H,W) image tensor, got {:?}", t.dims()))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let pixels: Vec<f32> = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image reconstruction"));
        }
        let pixels = pixels.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(h, w, pixels)
    }

    /// Splits a `(B, 3, H, W)` batch into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Self>> {
        let b = t.dim(0)?;
        (0..b).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }

    /// Reflect-pads bottom/right so both sides are multiples of `multiple`.
    /// Returns the padded image and the original `(height, width)`.
    pub fn reflect_pad_to_multiple(&self, multiple: usize) -> Result<(Self, (usize, usize))> {
        let ph = self.height.div_ceil(multiple) * multiple;
        let pw = self.width.div_ceil(multiple) * multiple;
        if (ph - self.height) >= self.height.max(2) || (pw - self.width) >= self.width.max(2) {
            return Err(Error::shape(format!(
                "image {}x{} too small to reflect-pad to a multiple of {multiple}",
                self.height, self.width
            )));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let mut pixels = Vec::with_capacity(ph * pw * 3);
        for r in 0..ph {
            for c in 0..pw {
                let (sr, sc) = (reflect(r, self.height), reflect(c, self.width));
                for ch in 0..3 {
                    pixels.push(self.pixel(sr, sc, ch));
                }
            }
        }
        Ok((Self::new(ph, pw, pixels)?, (self.height, self.width)))
    }

    /// Top-left `height`×`width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Self> {
        self.crop_at(0, 0, height, width)
    }

    pub fn crop_at(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::shape(format!(
                "crop {height}x{width}@({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(height * width * 3);
        for r in top..top + height {
            let start = (r * self.width + left) * 3;
            pixels.extend_from_slice(&self.pixels[start..start + width * 3]);
        }
        Self::new(height, width, pixels)
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Result<Self> {
        if height > self.height || width > self.width {
            return Err(Error::shape(format!(
                "center crop {height}x{width} larger than {}x{}",
                self.height, self.width
            )));
        }
        self.crop_at((self.height - height) / 2, (self.width - width) / 2, height, width)
    }
}

/// Spatial layout `(C, h, w)` of a latent, with `C·h·w = 2n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// Real latent of even length `2n` with its spatial layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    values: Vec<f64>,
    shape: LatentShape,
}

impl Latent {
    pub fn new(values: Vec<f64>, shape: LatentShape) -> Result<Self> {
        if values.len() != shape.numel() {
            return Err(Error::shape(format!(
                "latent of length {} does not fit layout {:?}",
                values.len(),
                shape.dims()
            )));
        }
        if values.len() % 2 != 0 {
            return Err(Error::shape(format!("latent length {} is odd", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent"));
        }
        Ok(Self { values, shape })
    }

    /// Flat latent laid out as `(len, 1, 1)`.
    pub fn flat(values: Vec<f64>) -> Result<Self> {
        let shape = LatentShape::new(values.len(), 1, 1);
        Self::new(values, shape)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of complex channel symbols, `n`.
    pub fn symbol_count(&self) -> usize {
        self.values.len() / 2
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `(1, C, h, w)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let (c, h, w) = self.shape.dims();
        Ok(Tensor::from_slice(&self.values, (1, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn batch_to_tensor(latents: &[&Latent], dtype: DType) -> Result<Tensor> {
        let first = latents.first().ok_or_else(|| Error::invalid("empty latent batch"))?;
        if latents.iter().any(|l| l.shape != first.shape) {
            return Err(Error::shape("latents in a batch must share a layout"));
        }
        let parts = latents
            .iter()
            .map(|l| l.to_tensor(dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// From a `(C, h, w)` or `(1, C, h, w)` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = if t.rank() == 4 && t.dim(0)? == 1 { t.squeeze(0)? } else { t.clone() };
        let (c, h, w) = t.dims3()?;
        let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Self::new(values, LatentShape::new(c, h, w))
    }

    pub fn unbatch(t: &Tensor) -> Result<Vec<Self>> {
        (0..t.dim(0)?).map(|i| Self::from_tensor(&t.get(i)?)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_pixels() {
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, f32::NAN, 1.0]).is_err());
        assert!(ImageTensor::new(1, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn image_tensor_layout_round_trips() -> Result<()> {
        let px: Vec<f32> = (0..2 * 3 * 3).map(|i| i as f32 / 20.0).collect();
        let img = ImageTensor::new(2, 3, px)?;
        let t = img.to_tensor(DType::F32)?;
        assert_eq!(t.dims(), &[1, 3, 2, 3]);
        // channel 1 of pixel (1, 2)
        let v = t.get(0)?.get(1)?.get(1)?.get(2)?.to_scalar::<f32>()?;
        assert_eq!(v, img.pixel(1, 2, 1));
        assert_eq!(ImageTensor::from_tensor(&t)?, img);
        Ok(())
    }

    #[test]
    fn reflect_pad_then_crop_restores_image() -> Result<()> {
        let px: Vec<f32> = (0..5 * 6 * 3).map(|i| (i % 17) as f32 / 16.0).collect();
        let img = ImageTensor::new(5, 6, px)?;
        let (padded, (h, w)) = img.reflect_pad_to_multiple(4)?;
        assert_eq!((padded.height(), padded.width()), (8, 8));
        // row 5 mirrors row 3
        assert_eq!(padded.pixel(5, 0, 0), img.pixel(3, 0, 0));
        assert_eq!(padded.crop(h, w)?, img);
        Ok(())
    }

    #[test]
    fn latent_requires_even_length_and_matching_layout() {
        assert!(Latent::flat(vec![1.0, 2.0, 3.0]).is_err());
        assert!(Latent::new(vec![0.0; 4], LatentShape::new(1, 2, 3)).is_err());
        assert!(Latent::new(vec![0.0; 6], LatentShape::new(1, 2, 3)).is_ok());
    }
}
