//! Windowed-attention backbone: patch embedding, (shifted-)window multi-head
//! self-attention blocks, patch merging and patch reverse merging.
//!
//! Tokens are carried as `(B, h·w, C)` between blocks.

use candle_core::{Device, Tensor, D};

use super::CodecConfig;
use crate::error::{Error, Result};
use crate::nn::{pixel_shuffle, sigmoid, Conv2d, LayerNorm, Linear, ParamInit, ParamSource};

fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

/// `(B, h, w, C)` → `(B·nW, ws·ws, C)`.
fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / ws, ws, w / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (h / ws) * (w / ws), ws * ws, c))?)
}

fn window_reverse(x: &Tensor, ws: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dim(D::Minus1)?;
    Ok(x.reshape((b, h / ws, w / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

/// Offsets into a `(2·table_ws − 1)²` bias table for a `ws`×`ws` window (`ws <= table_ws`).
fn relative_position_index(ws: usize, table_ws: usize) -> Vec<u32> {
    let n = ws * ws;
    let t = table_ws as isize;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = ((i / ws) as isize, (i % ws) as isize);
        for j in 0..n {
            let (rj, cj) = ((j / ws) as isize, (j % ws) as isize);
            let dr = (ri - rj + t - 1) as usize;
            let dc = (ci - cj + t - 1) as usize;
            idx.push((dr * (2 * table_ws - 1) + dc) as u32);
        }
    }
    idx
}

/// Additive mask keeping shifted windows from attending across the roll seam.
fn shift_mask(h: usize, w: usize, ws: usize, shift: usize) -> Vec<f32> {
    let region = |i: usize, len: usize| {
        if i < len - ws {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / ws, w / ws);
    let n = ws * ws;
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wr in 0..nh {
        for wc in 0..nw {
            let label = |p: usize| {
                let (r, c) = (wr * ws + p / ws, wc * ws + p % ws);
                region(r, h) * 3 + region(c, w)
            };
            for p in 0..n {
                for q in 0..n {
                    mask.push(if label(p) == label(q) { 0.0 } else { -100.0 });
                }
            }
        }
    }
    mask
}

struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    scale: f64,
}

impl WindowAttention {
    fn new(
        src: &mut impl ParamSource,
        name: &str,
        dim: usize,
        heads: usize,
        ws: usize,
        table_ws: usize,
    ) -> Result<Self> {
        let table_len = (2 * table_ws - 1) * (2 * table_ws - 1);
        let bias_table = src.fetch(
            &format!("{name}.relative_bias"),
            &[table_len, heads],
            ParamInit::Normal(0.02),
        )?;
        let index = relative_position_index(ws, table_ws);
        let bias_index = Tensor::from_vec(index, ws * ws * ws * ws, &Device::Cpu)?;
        Ok(Self {
            qkv: Linear::new(src, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(src, &format!("{name}.proj"), dim, dim)?,
            bias_table,
            bias_index,
            heads,
            scale: 1.0 / ((dim / heads) as f64).sqrt(),
        })
    }

    /// `x`: `(B·nW, N, C)`; `mask`: `(nW, N, N)`.
    fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = (qkv.get(0)?.contiguous()? * self.scale)?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut attn = q.matmul(&k.t()?.contiguous()?)?;
        let bias = self
            .bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        attn = attn.broadcast_add(&bias)?;
        if let Some(mask) = mask {
            let nw = mask.dim(0)?;
            let mask = mask.to_dtype(attn.dtype())?.reshape((1, nw, 1, n, n))?;
            attn = attn
                .reshape((bw / nw, nw, self.heads, n, n))?
                .broadcast_add(&mask)?
                .reshape((bw, self.heads, n, n))?;
        }
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((bw, n, c))?;
        self.proj.forward(&out)
    }
}

struct SwinBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    window: usize,
    shift: usize,
    resolution: (usize, usize),
    mask: Option<Tensor>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        src: &mut impl ParamSource,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        resolution: (usize, usize),
    ) -> Result<Self> {
        let (h, w) = resolution;
        let mut ws = window;
        let mut shift = if shifted { window / 2 } else { 0 };
        if h.min(w) <= window {
            ws = h.min(w);
            shift = 0;
        }
        if h % ws != 0 || w % ws != 0 {
            return Err(Error::shape(format!(
                "token grid {h}x{w} not divisible by attention window {ws}"
            )));
        }
        let mask = if shift > 0 {
            let m = shift_mask(h, w, ws, shift);
            Some(Tensor::from_vec(m, ((h / ws) * (w / ws), ws * ws, ws * ws), &Device::Cpu)?)
        } else {
            None
        };
        Ok(Self {
            norm1: LayerNorm::new(src, &format!("{name}.norm1"), dim)?,
            attn: WindowAttention::new(src, &format!("{name}.attn"), dim, heads, ws, window)?,
            norm2: LayerNorm::new(src, &format!("{name}.norm2"), dim)?,
            fc1: Linear::new(src, &format!("{name}.mlp.fc1"), dim, 2 * dim)?,
            fc2: Linear::new(src, &format!("{name}.mlp.fc2"), 2 * dim, dim)?,
            window: ws,
            shift,
            resolution,
            mask,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let (h, w) = self.resolution;
        if l != h * w {
            return Err(Error::shape(format!("block expects {} tokens, got {l}", h * w)));
        }
        let mut t = self.norm1.forward(x)?.reshape((b, h, w, c))?;
        let s = self.shift as i32;
        if self.shift > 0 {
            t = t.roll(-s, 1)?.roll(-s, 2)?;
        }
        let windows = window_partition(&t, self.window)?;
        let attended = self.attn.forward(&windows, self.mask.as_ref())?;
        let mut t = window_reverse(&attended, self.window, b, h, w)?;
        if self.shift > 0 {
            t = t.roll(s, 1)?.roll(s, 2)?;
        }
        let x = (x + t.reshape((b, l, c))?)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok((x + mlp)?)
    }
}

fn stage_blocks(
    src: &mut impl ParamSource,
    prefix: &str,
    cfg: &CodecConfig,
    dim: usize,
    count: usize,
    resolution: (usize, usize),
) -> Result<Vec<SwinBlock>> {
    let heads = (dim / cfg.head_dim).max(1);
    (0..count)
        .map(|j| {
            SwinBlock::new(
                src,
                &format!("{prefix}.block{j}"),
                dim,
                heads,
                cfg.window_size,
                j % 2 == 1,
                resolution,
            )
        })
        .collect()
}

/// Blocks are built lazily per input resolution since the shift mask and
/// window size depend on it; weights do not.
struct Stage {
    prefix: String,
    dim: usize,
    count: usize,
}

fn run_stage(
    stage: &Stage,
    params: &[(String, Tensor)],
    cfg: &CodecConfig,
    x: Tensor,
    resolution: (usize, usize),
) -> Result<Tensor> {
    let mut src = Lookup(params);
    let blocks = stage_blocks(&mut src, &stage.prefix, cfg, stage.dim, stage.count, resolution)?;
    let mut x = x;
    for b in &blocks {
        x = b.forward(&x)?;
    }
    Ok(x)
}

/// Resolution-independent parameter lookup over tensors captured at build time.
struct Lookup<'a>(&'a [(String, Tensor)]);

impl ParamSource for Lookup<'_> {
    fn fetch(&mut self, name: &str, shape: &[usize], _init: ParamInit) -> Result<Tensor> {
        let t = self
            .0
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::shape(format!("parameter `{name}` missing")))?;
        if t.dims() != shape {
            return Err(Error::shape(format!("parameter `{name}`: expected {shape:?}, found {:?}", t.dims())));
        }
        Ok(t)
    }
}

/// Records every tensor a source hands out, so stage blocks can be rebuilt
/// for any resolution from the same weights.
struct Recorder<'a, S: ParamSource> {
    inner: &'a mut S,
    seen: Vec<(String, Tensor)>,
}

impl<S: ParamSource> ParamSource for Recorder<'_, S> {
    fn fetch(&mut self, name: &str, shape: &[usize], init: ParamInit) -> Result<Tensor> {
        let t = self.inner.fetch(name, shape, init)?;
        self.seen.push((name.to_string(), t.clone()));
        Ok(t)
    }
}

fn register_stage(
    rec: &mut impl ParamSource,
    prefix: &str,
    cfg: &CodecConfig,
    dim: usize,
    count: usize,
) -> Result<Stage> {
    // Weight shapes do not depend on resolution; a window-sized grid creates them all.
    let ws = cfg.window_size;
    stage_blocks(rec, prefix, cfg, dim, count, (2 * ws, 2 * ws))?;
    Ok(Stage {
        prefix: prefix.to_string(),
        dim,
        count,
    })
}

struct PatchMerging {
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerging {
    fn new(src: &mut impl ParamSource, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(src, &format!("{name}.norm"), 4 * in_dim)?,
            reduce: Linear::new(src, &format!("{name}.reduce"), 4 * in_dim, out_dim)?,
        })
    }

    /// `(B, h·w, C)` → `(B, h/2·w/2, out)`.
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (b, _, c) = x.dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("cannot merge odd token grid {h}x{w}")));
        }
        let merged = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, (h / 2) * (w / 2), 4 * c))?;
        self.reduce.forward(&self.norm.forward(&merged)?)
    }
}

struct PatchReverseMerging {
    norm: LayerNorm,
    expand: Linear,
}

impl PatchReverseMerging {
    fn new(src: &mut impl ParamSource, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(src, &format!("{name}.norm"), in_dim)?,
            expand: Linear::new(src, &format!("{name}.expand"), in_dim, 4 * out_dim)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let up = self.expand.forward(&self.norm.forward(x)?)?;
        to_tokens(&pixel_shuffle(&to_map(&up, h, w)?, 2)?)
    }
}

pub(super) struct SwinEncoder {
    cfg: CodecConfig,
    embed: Conv2d,
    embed_norm: LayerNorm,
    merges: Vec<PatchMerging>,
    stages: Vec<Stage>,
    weights: Vec<(String, Tensor)>,
    head: Conv2d,
}

impl SwinEncoder {
    pub(super) fn new(src: &mut impl ParamSource, cfg: &CodecConfig) -> Result<Self> {
        let mut rec = Recorder {
            inner: src,
            seen: Vec::new(),
        };
        let dims = &cfg.embed_dims;
        let p = cfg.patch_size;
        let embed = Conv2d::new(&mut rec, "stage0.embed", 3, dims[0], p, p, 0)?;
        let embed_norm = LayerNorm::new(&mut rec, "stage0.embed_norm", dims[0])?;
        let mut merges = Vec::new();
        let mut stages = Vec::new();
        for i in 0..=cfg.stages {
            if i > 0 {
                merges.push(PatchMerging::new(&mut rec, &format!("stage{i}.merge"), dims[i - 1], dims[i])?);
            }
            stages.push(register_stage(&mut rec, &format!("stage{i}"), cfg, dims[i], cfg.blocks_per_stage[i])?);
        }
        let head = Conv2d::same(&mut rec, "head", dims[cfg.stages], cfg.head_filters, 3)?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            embed_norm,
            merges,
            stages,
            weights: rec.seen,
            head,
        })
    }

    pub(super) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let e = self.embed.forward(x)?;
        let (_, _, mut h, mut w) = e.dims4()?;
        let mut t = self.embed_norm.forward(&to_tokens(&e)?)?;
        t = run_stage(&self.stages[0], &self.weights, &self.cfg, t, (h, w))?;
        for (merge, stage) in self.merges.iter().zip(&self.stages[1..]) {
            t = merge.forward(&t, h, w)?;
            h /= 2;
            w /= 2;
            t = run_stage(stage, &self.weights, &self.cfg, t, (h, w))?;
        }
        self.head.forward(&to_map(&t, h, w)?)
    }
}

pub(super) struct SwinDecoder {
    cfg: CodecConfig,
    head: Conv2d,
    // deepest first
    stages: Vec<Stage>,
    unmerges: Vec<PatchReverseMerging>,
    weights: Vec<(String, Tensor)>,
    out_norm: LayerNorm,
    unembed: Linear,
}

impl SwinDecoder {
    pub(super) fn new(src: &mut impl ParamSource, cfg: &CodecConfig) -> Result<Self> {
        let mut rec = Recorder {
            inner: src,
            seen: Vec::new(),
        };
        let dims = &cfg.embed_dims;
        let m = cfg.stages;
        let p = cfg.patch_size;
        let head = Conv2d::same(&mut rec, "head", cfg.head_filters, dims[m], 3)?;
        let mut stages = Vec::new();
        let mut unmerges = Vec::new();
        for i in (0..=m).rev() {
            if i < m {
                unmerges.push(PatchReverseMerging::new(
                    &mut rec,
                    &format!("stage{}.unmerge", i + 1),
                    dims[i + 1],
                    dims[i],
                )?);
            }
            stages.push(register_stage(&mut rec, &format!("stage{i}"), cfg, dims[i], cfg.blocks_per_stage[i])?);
        }
        let out_norm = LayerNorm::new(&mut rec, "out_norm", dims[0])?;
        let unembed = Linear::new(&mut rec, "unembed", dims[0], 3 * p * p)?;
        Ok(Self {
            cfg: cfg.clone(),
            head,
            stages,
            unmerges,
            weights: rec.seen,
            out_norm,
            unembed,
        })
    }

    pub(super) fn forward(&self, y: &Tensor) -> Result<Tensor> {
        let (_, _, mut h, mut w) = y.dims4()?;
        let mut t = to_tokens(&self.head.forward(y)?)?;
        t = run_stage(&self.stages[0], &self.weights, &self.cfg, t, (h, w))?;
        for (unmerge, stage) in self.unmerges.iter().zip(&self.stages[1..]) {
            t = unmerge.forward(&t, h, w)?;
            h *= 2;
            w *= 2;
            t = run_stage(stage, &self.weights, &self.cfg, t, (h, w))?;
        }
        let out = self.unembed.forward(&self.out_norm.forward(&t)?)?;
        let img = pixel_shuffle(&to_map(&out, h, w)?, self.cfg.patch_size)?;
        sigmoid(&img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_backbone, BackboneKind};
    use crate::nn::Precision;

    fn tiny() -> CodecConfig {
        CodecConfig {
            stages: 1,
            blocks_per_stage: vec![2, 1],
            embed_dims: vec![8, 16],
            window_size: 2,
            head_filters: 4,
            patch_size: 2,
            head_dim: 8,
            backbone: BackboneKind::WindowedAttention,
            target_ratio: None,
        }
    }

    #[test]
    fn relative_index_is_symmetric_about_the_center() {
        let idx = relative_position_index(2, 2);
        // token 0 to itself → offset (0,0) → center of a 3x3 table
        assert_eq!(idx[0], 4);
        assert_eq!(idx.len(), 16);
        assert!(idx.iter().all(|&i| i < 9));
        // a smaller window indexes the center of a larger table
        assert_eq!(relative_position_index(1, 3), vec![12]);
    }

    #[test]
    fn shift_mask_blocks_cross_region_pairs() {
        let m = shift_mask(4, 4, 2, 1);
        // last window straddles the seam in both axes
        let n = 4;
        let last = &m[3 * n * n..];
        assert!(last.iter().any(|&v| v < 0.0));
        // first window lies in region 0 entirely
        assert!(m[..n * n].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swin_shapes_round_trip() -> Result<()> {
        let cfg = tiny();
        let (enc, dec) = build_backbone(&cfg, 1, Precision::F32)?;
        let x = Tensor::rand(0f32, 1., (2, 3, 8, 16), &Device::Cpu)?;
        let y = enc.forward(&x)?;
        assert_eq!(y.dims(), &[2, 4, 2, 4]);
        let xr = dec.forward(&y)?;
        assert_eq!(xr.dims(), x.dims());
        Ok(())
    }

    #[test]
    fn swin_window_must_tile_the_grid() -> Result<()> {
        let cfg = CodecConfig {
            window_size: 3,
            ..tiny()
        };
        let (enc, _) = build_backbone(&cfg, 1, Precision::F32)?;
        let x = Tensor::rand(0f32, 1., (1, 3, 16, 16), &Device::Cpu)?;
        assert!(enc.forward(&x).is_err());
        Ok(())
    }

    #[test]
    fn reference_layout_builds_with_expected_stage_count() -> Result<()> {
        let cfg = CodecConfig {
            embed_dims: vec![16, 16, 16, 16],
            head_dim: 8,
            window_size: 2,
            head_filters: 8,
            ..CodecConfig::reference()
        };
        let (enc, dec) = build_backbone(&cfg, 0, Precision::F32)?;
        let x = Tensor::rand(0f32, 1., (1, 3, 32, 32), &Device::Cpu)?;
        let y = enc.forward(&x)?;
        assert_eq!(y.dims(), &[1, 8, 2, 2]);
        assert_eq!(dec.forward(&y)?.dims(), x.dims());
        Ok(())
    }
}
