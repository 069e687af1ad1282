use semcom::codec::ImageTensor;
use semcom::eval::{ms_ssim, psnr, ssim};
use semcom::rng::rng_from_seed;
use semcom::Result;

use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

fn pattern(h: usize, w: usize, textured: bool) -> ImageTensor {
    let mut px = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let (rf, cf, chf) = (r as f64, c as f64, ch as f64);
                let mut v = 0.5 + 0.4 * (0.3 * rf + 0.7 * cf + chf).sin();
                if textured {
                    v += 0.15 * (1.3 * rf - 0.4 * cf * (chf + 1.0)).cos();
                }
                px.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::new(h, w, px).unwrap()
}

fn noisy(img: &ImageTensor, sd: f64, seed: u64) -> ImageTensor {
    let mut rng = rng_from_seed(seed);
    let n = Normal::new(0.0, sd).unwrap();
    let px = img
        .pixels()
        .iter()
        .map(|v| (*v as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    ImageTensor::new(img.height(), img.width(), px).unwrap()
}

// Reference values from scikit-image `structural_similarity` (gaussian
// weights, sigma 1.5, population covariance, data range 1) on the same
// patterns rounded to f32.
#[test]
fn ssim_matches_scikit_image() -> Result<()> {
    let s = ssim(&pattern(16, 16, false), &pattern(16, 16, true))?;
    assert!((s - 0.9127625572912262).abs() < 1e-6, "{s}");
    let s = ssim(&pattern(32, 24, false), &pattern(32, 24, true))?;
    assert!((s - 0.9125485649428553).abs() < 1e-6, "{s}");
    Ok(())
}

// Reference values from an independent NumPy/SciPy implementation with
// valid 2-D convolution and 2x2 mean pooling.
#[test]
fn ms_ssim_matches_numpy_reference() -> Result<()> {
    let v = ms_ssim(&pattern(32, 32, false), &pattern(32, 32, true), 5)?;
    assert!((v - 0.9536782667021565).abs() < 1e-6, "{v}");
    let v = ms_ssim(&pattern(176, 176, false), &pattern(176, 176, true), 5)?;
    assert!((v - 0.9784422535164099).abs() < 1e-6, "{v}");
    Ok(())
}

#[test]
fn ms_ssim_basic_contracts() -> Result<()> {
    let a = pattern(32, 32, false);
    let b = pattern(32, 32, true);
    assert!((ms_ssim(&a, &a, 5)? - 1.0).abs() < 1e-12);
    assert_eq!(ms_ssim(&a, &b, 5)?, ms_ssim(&b, &a, 5)?);
    assert!(ms_ssim(&ImageTensor::filled(8, 8, 0.5)?, &ImageTensor::filled(8, 8, 0.5)?, 5).is_err());
    Ok(())
}

#[test]
fn independent_noise_scores_below_identical() -> Result<()> {
    let clean = pattern(32, 32, true);
    let a = noisy(&clean, 0.1, 1);
    let b = noisy(&clean, 0.1, 2);
    let pair = ms_ssim(&a, &b, 5)?;
    assert!(pair < ms_ssim(&a, &a, 5)?);
    // regression value for these seeds
    assert!((pair - 0.9643189796448004).abs() < 1e-9, "{pair}");
    Ok(())
}

#[test]
fn psnr_decreases_as_noise_grows() -> Result<()> {
    let clean = pattern(32, 32, true);
    let mut last = f64::INFINITY;
    for (k, sd) in [0.01, 0.03, 0.1, 0.3].into_iter().enumerate() {
        let p = psnr(&clean, &noisy(&clean, sd, 7 + k as u64))?;
        assert!(p < last, "{p} !< {last}");
        last = p;
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ms_ssim_stays_in_unit_interval(sd in 0.0f64..0.6, seed in 0u64..1000) {
        let clean = pattern(24, 24, seed % 2 == 0);
        let v = ms_ssim(&clean, &noisy(&clean, sd, seed), 5).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn psnr_is_symmetric(seed in 0u64..1000) {
        let a = noisy(&pattern(8, 8, false), 0.2, seed);
        let b = noisy(&pattern(8, 8, true), 0.2, seed + 1);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}
