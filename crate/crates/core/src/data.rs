//! Image corpora: a procedural toy set and directory ingestion.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::codec::ImageTensor;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SimRng};

/// Loaded images in deterministic order.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub images: Vec<ImageTensor>,
    pub names: Vec<String>,
    /// Files that could not be decoded or were too small.
    pub skipped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Seeded shuffle split into `(train, validation)`.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config(format!("validation fraction {val_fraction} outside [0, 1)")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng_from_seed(seed));
        let n_val = ((self.len() as f64) * val_fraction).round() as usize;
        let pick = |idx: &[usize]| Dataset {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            skipped: 0,
        };
        Ok((pick(&order[n_val..]), pick(&order[..n_val])))
    }
}

fn smoothstep(x: f32) -> f32 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

fn random_color(rng: &mut SimRng) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One procedural image: a linear colour gradient, a few soft blobs and a
/// low-frequency sinusoidal texture.
pub fn synthetic_image(size: usize, rng: &mut SimRng) -> Result<ImageTensor> {
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle: f32 = rng.random_range(0.0..2.0 * PI);
    let (dx, dy) = (angle.cos(), angle.sin());
    let blobs: Vec<([f32; 3], f32, f32, f32)> = (0..rng.random_range(1..=3))
        .map(|_| {
            (
                random_color(rng),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.3),
            )
        })
        .collect();
    let freq: f32 = rng.random_range(1.0..3.0);
    let phase: f32 = rng.random_range(0.0..2.0 * PI);
    let amp: f32 = rng.random_range(0.0..0.1);

    let s = size as f32;
    let mut pixels = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let (u, v) = ((c as f32 + 0.5) / s, (r as f32 + 0.5) / s);
            let t = smoothstep(0.5 + (u - 0.5) * dx + (v - 0.5) * dy);
            let mut px = [0.0f32; 3];
            for ch in 0..3 {
                px[ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
            for (col, bu, bv, rad) in &blobs {
                let d2 = (u - bu).powi(2) + (v - bv).powi(2);
                let w = (-d2 / (2.0 * rad * rad)).exp();
                for ch in 0..3 {
                    px[ch] = px[ch] * (1.0 - w) + col[ch] * w;
                }
            }
            let tex = amp * (2.0 * PI * freq * (u + v) + phase).sin();
            pixels.extend(px.iter().map(|p| (p + tex).clamp(0.0, 1.0)));
        }
    }
    ImageTensor::new(size, size, pixels)
}

/// `count` procedural `size`×`size` images; image `i` depends only on `(seed, i)`.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || size == 0 {
        return Err(Error::Dataset("synthetic corpus needs positive count and size".into()));
    }
    let images = (0..count)
        .map(|i| synthetic_image(size, &mut rng_from_seed(derive_seed(seed, &[i as u64]))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        images,
        names: (0..count).map(|i| format!("synthetic-{i:05}")).collect(),
        skipped: 0,
    })
}

pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let rgb = image::open(path)?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, pixels)
}

/// Writes an 8-bit PNG (values rounded to the nearest level).
pub fn save_png(image: &ImageTensor, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image
        .pixels()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| Error::shape("pixel buffer does not match image size"))?;
    buf.save(path)?;
    Ok(())
}

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every raster image in `dir` (sorted by file name) and center-crops
/// it to `crop`×`crop`. Undecodable or too-small files are skipped and counted.
pub fn ingest_dir(dir: &Path, crop: usize) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let mut ds = Dataset::default();
    for path in image_files(dir)? {
        let loaded = load_image(&path).and_then(|im| im.center_crop(crop, crop));
        match loaded {
            Ok(im) => {
                ds.images.push(im);
                ds.names.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                ds.skipped += 1;
            }
        }
    }
    if ds.is_empty() {
        return Err(Error::Dataset(format!(
            "no usable images in {} ({} skipped)",
            dir.display(),
            ds.skipped
        )));
    }
    Ok(ds)
}
