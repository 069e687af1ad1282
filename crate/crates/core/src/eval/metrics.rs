use std::sync::atomic::{AtomicBool, Ordering};

use crate::codec::ImageTensor;
use crate::error::{Error, Result};

static SCALE_WARNING: AtomicBool = AtomicBool::new(false);

pub const DEFAULT_PSNR_CAP: f64 = 100.0;

/// Conventional five-scale weights.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(x: &ImageTensor, y: &ImageTensor) -> Result<()> {
    if x.height() != y.height() || x.width() != y.width() {
        return Err(Error::shape(format!(
            "image sizes differ: {}x{} vs {}x{}",
            x.height(),
            x.width(),
            y.height(),
            y.width()
        )));
    }
    Ok(())
}

pub fn mse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    let sum: f64 = x
        .pixels()
        .iter()
        .zip(y.pixels())
        .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
        .sum();
    Ok(sum / x.source_dim() as f64)
}

/// PSNR in dB for a peak value of 1, given the mean squared error.
pub fn psnr_from_mse(mse: f64, cap: f64) -> f64 {
    if mse <= 0.0 {
        cap
    } else {
        (-10.0 * mse.log10()).min(cap)
    }
}

pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    psnr_with_cap(x, y, DEFAULT_PSNR_CAP)
}

pub fn psnr_with_cap(x: &ImageTensor, y: &ImageTensor, cap: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?, cap))
}

/// Single-channel plane.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &ImageTensor, ch: usize) -> Self {
        Self {
            h: img.height(),
            w: img.width(),
            v: img.pixels().iter().skip(ch).step_by(3).map(|&p| p as f64).collect(),
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.v[r * self.w + c]
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&other.v).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let s = self.at(2 * r, 2 * c)
                    + self.at(2 * r, 2 * c + 1)
                    + self.at(2 * r + 1, 2 * c)
                    + self.at(2 * r + 1, 2 * c + 1);
                v.push(s / 4.0);
            }
        }
        Plane { h, w, v }
    }

    /// Separable "valid" filtering with a 1-D kernel.
    fn filter(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (h, w) = (self.h - n + 1, self.w - n + 1);
        let mut tmp = vec![0.0; self.h * w];
        for r in 0..self.h {
            for c in 0..w {
                tmp[r * w + c] = (0..n).map(|i| k[i] * self.at(r, c + i)).sum();
            }
        }
        let mut v = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                v[r * w + c] = (0..n).map(|i| k[i] * tmp[(r + i) * w + c]).sum();
            }
        }
        Plane { h, w, v }
    }
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (WINDOW / 2) as f64;
    let k: Vec<f64> = (0..WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_cs(x: &Plane, y: &Plane, kernel: &[f64]) -> (f64, f64) {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mx = x.filter(kernel);
    let my = y.filter(kernel);
    let sxx = x.zip(x, |a, b| a * b).filter(kernel);
    let syy = y.zip(y, |a, b| a * b).filter(kernel);
    let sxy = x.zip(y, |a, b| a * b).filter(kernel);
    let n = mx.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.v.len() {
        let (ux, uy) = (mx.v[i], my.v[i]);
        let vx = sxx.v[i] - ux * ux;
        let vy = syy.v[i] - uy * uy;
        let cov = sxy.v[i] - ux * uy;
        let contrast = (2.0 * cov + c2) / (vx + vy + c2);
        cs += contrast;
        ssim += contrast * (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
    }
    (ssim / n, cs / n)
}

/// Mean single-scale SSIM over the three channels (Gaussian window 11, σ 1.5).
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    check_pair(x, y)?;
    if x.height() < WINDOW || x.width() < WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {WINDOW}x{WINDOW} images")));
    }
    let k = gaussian_kernel();
    let total: f64 = (0..3)
        .map(|ch| ssim_cs(&Plane::channel(x, ch), &Plane::channel(y, ch), &k).0)
        .sum();
    Ok(total / 3.0)
}

/// Number of scales usable for an image whose smaller side is `min_side`.
pub fn usable_scales(min_side: usize, requested: usize) -> usize {
    let mut scales = 0;
    let mut side = min_side;
    while scales < requested && side >= WINDOW {
        scales += 1;
        side /= 2;
    }
    scales
}

/// Multi-scale SSIM with `scales` levels; falls back to fewer scales (with
/// renormalized weights) when the image is too small for the full pyramid.
pub fn ms_ssim(x: &ImageTensor, y: &ImageTensor, scales: usize) -> Result<f64> {
    check_pair(x, y)?;
    if scales == 0 || scales > MS_SSIM_WEIGHTS.len() {
        return Err(Error::invalid(format!("MS-SSIM supports 1 to 5 scales, got {scales}")));
    }
    let m = usable_scales(x.height().min(x.width()), scales);
    if m == 0 {
        return Err(Error::shape(format!(
            "MS-SSIM needs images of at least {WINDOW}x{WINDOW}, got {}x{}",
            x.height(),
            x.width()
        )));
    }
    if m < scales && !SCALE_WARNING.swap(true, Ordering::Relaxed) {
        log::warn!(
            "{}x{} image supports only {m} of {scales} MS-SSIM scales; weights renormalized (reported once)",
            x.height(),
            x.width()
        );
    }
    let weights = &MS_SSIM_WEIGHTS[..m];
    let wsum: f64 = weights.iter().sum();
    let k = gaussian_kernel();
    let mut total = 0.0;
    for ch in 0..3 {
        let (mut px, mut py) = (Plane::channel(x, ch), Plane::channel(y, ch));
        let mut value = 1.0;
        for (j, w) in weights.iter().enumerate() {
            let (s, cs) = ssim_cs(&px, &py, &k);
            let term = if j + 1 == m { s } else { cs };
            value *= term.max(0.0).powf(w / wsum);
            if j + 1 < m {
                px = px.downsample();
                py = py.downsample();
            }
        }
        total += value;
    }
    Ok((total / 3.0).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() -> Result<()> {
        assert!((psnr_from_mse(0.01, 100.0) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0, 100.0), 0.0);
        let a = ImageTensor::filled(4, 4, 0.3)?;
        assert_eq!(psnr(&a, &a)?, DEFAULT_PSNR_CAP);
        let b = ImageTensor::filled(4, 4, 0.4)?;
        assert!((psnr(&a, &b)? - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &ImageTensor::filled(4, 5, 0.3)?).is_err());
        Ok(())
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn scale_count_for_small_images() {
        assert_eq!(usable_scales(32, 5), 2);
        assert_eq!(usable_scales(176, 5), 5);
        assert_eq!(usable_scales(10, 5), 0);
    }
}
