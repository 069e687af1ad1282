//! Convolutional backbone: strided-conv merging, sub-pixel reverse merging.

use candle_core::Tensor;

use super::CodecConfig;
use crate::error::Result;
use crate::nn::{pixel_shuffle, sigmoid, Conv2d, ParamSource};

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new(src: &mut impl ParamSource, name: &str, ch: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::same(src, &format!("{name}.conv1"), ch, ch, 3)?,
            conv2: Conv2d::same(src, &format!("{name}.conv2"), ch, ch, 3)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&x.relu()?)?.relu()?;
        Ok((x + self.conv2.forward(&h)?)?)
    }
}

fn blocks(src: &mut impl ParamSource, prefix: &str, ch: usize, n: usize) -> Result<Vec<ResBlock>> {
    (0..n)
        .map(|j| ResBlock::new(src, &format!("{prefix}.block{j}"), ch))
        .collect()
}

fn run_blocks(blocks: &[ResBlock], mut x: Tensor) -> Result<Tensor> {
    for b in blocks {
        x = b.forward(&x)?;
    }
    Ok(x)
}

pub(super) struct ConvEncoder {
    // stage 0 is patch embedding, stages 1..=M are merging
    downs: Vec<Conv2d>,
    stages: Vec<Vec<ResBlock>>,
    head: Conv2d,
}

impl ConvEncoder {
    pub(super) fn new(src: &mut impl ParamSource, cfg: &CodecConfig) -> Result<Self> {
        let dims = &cfg.embed_dims;
        let mut downs = Vec::with_capacity(cfg.stages + 1);
        let mut stages = Vec::with_capacity(cfg.stages + 1);
        for i in 0..=cfg.stages {
            let prefix = format!("stage{i}");
            let down = if i == 0 {
                let p = cfg.patch_size;
                Conv2d::new(src, &format!("{prefix}.embed"), 3, dims[0], p, p, 0)?
            } else {
                Conv2d::new(src, &format!("{prefix}.merge"), dims[i - 1], dims[i], 2, 2, 0)?
            };
            downs.push(down);
            stages.push(blocks(src, &prefix, dims[i], cfg.blocks_per_stage[i])?);
        }
        let head = Conv2d::same(src, "head", dims[cfg.stages], cfg.head_filters, 3)?;
        Ok(Self { downs, stages, head })
    }

    pub(super) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (down, blocks) in self.downs.iter().zip(&self.stages) {
            h = run_blocks(blocks, down.forward(&h)?)?;
        }
        self.head.forward(&h.relu()?)
    }
}

pub(super) struct ConvDecoder {
    head: Conv2d,
    // ordered from the deepest stage outwards
    stages: Vec<Vec<ResBlock>>,
    ups: Vec<Conv2d>,
    unembed: Conv2d,
    patch: usize,
}

impl ConvDecoder {
    pub(super) fn new(src: &mut impl ParamSource, cfg: &CodecConfig) -> Result<Self> {
        let dims = &cfg.embed_dims;
        let m = cfg.stages;
        let head = Conv2d::same(src, "head", cfg.head_filters, dims[m], 3)?;
        let mut stages = Vec::with_capacity(m + 1);
        let mut ups = Vec::with_capacity(m);
        for i in (0..=m).rev() {
            let prefix = format!("stage{i}");
            if i < m {
                ups.push(Conv2d::same(src, &format!("stage{}.unmerge", i + 1), dims[i + 1], 4 * dims[i], 3)?);
            }
            stages.push(blocks(src, &prefix, dims[i], cfg.blocks_per_stage[i])?);
        }
        let p = cfg.patch_size;
        let unembed = Conv2d::same(src, "unembed", dims[0], 3 * p * p, 3)?;
        Ok(Self {
            head,
            stages,
            ups,
            unembed,
            patch: p,
        })
    }

    pub(super) fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let mut h = run_blocks(&self.stages[0], self.head.forward(y)?)?;
        for (up, blocks) in self.ups.iter().zip(&self.stages[1..]) {
            h = pixel_shuffle(&up.forward(&h.relu()?)?, 2)?;
            h = run_blocks(blocks, h)?;
        }
        let out = pixel_shuffle(&self.unembed.forward(&h.relu()?)?, self.patch)?;
        sigmoid(&out)
    }
}
