//! Parameter collections and the handful of layers the networks are built from.
//!
//! Tensors and reverse-mode differentiation come from `candle`; parameter
//! storage, seeded initialization and freezing are handled here so that
//! every network is reproducible from a single seed.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SimRng};

/// Floating-point precision used by a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// One network's parameters (encoder, decoder, residual predictor or
/// similarity predictor). Freezing applies to the whole collection.
#[derive(Debug)]
pub struct ModelParams {
    name: String,
    vars: BTreeMap<String, Var>,
    frozen: bool,
}

impl ModelParams {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            vars: BTreeMap::new(),
            frozen: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn get(&self, key: &str) -> Option<&Var> {
        self.vars.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Variables an optimizer may update. Empty for a frozen collection.
    pub fn trainable_vars(&self) -> Vec<Var> {
        if self.frozen {
            Vec::new()
        } else {
            self.vars.values().cloned().collect()
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, dtypes, shapes and raw values, in key order.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            hasher.update(format!("{:?}{:?}", var.dtype(), var.dims()).as_bytes());
            let flat = var.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        hasher.update(v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        hasher.update(v.to_le_bytes());
                    }
                }
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Snapshot of the current values, detached from the variables.
    pub fn to_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn from_tensors(name: impl Into<String>, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let vars = tensors
            .into_iter()
            .map(|(k, t)| Ok((k, Var::from_tensor(&t.copy()?)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.into(),
            vars,
            frozen: false,
        })
    }

    /// Independent copy with fresh variables; the frozen flag is preserved.
    pub fn deep_copy(&self) -> Result<Self> {
        let mut out = Self::from_tensors(self.name.clone(), self.to_tensors()?)?;
        out.frozen = self.frozen;
        Ok(out)
    }

    /// Overwrites values from `tensors`, which must cover exactly the same keys and shapes.
    pub fn load_values(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::shape(format!(
                "collection `{}` expects {} tensors, got {}",
                self.name,
                self.vars.len(),
                tensors.len()
            )));
        }
        for (k, var) in &self.vars {
            let t = tensors
                .get(k)
                .ok_or_else(|| Error::shape(format!("missing parameter `{k}` in `{}`", self.name)))?;
            if t.dims() != var.dims() {
                return Err(Error::shape(format!(
                    "parameter `{k}`: expected {:?}, got {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

/// Seeded parameter factory. Layers register their tensors under dotted names.
pub struct Initializer {
    params: ModelParams,
    rng: SimRng,
    dtype: DType,
    device: Device,
}

impl Initializer {
    pub fn new(name: &str, seed: u64, precision: Precision) -> Self {
        Self {
            params: ModelParams::new(name),
            rng: rng_from_seed(seed),
            dtype: precision.dtype(),
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn register(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.params.vars.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.params.vars.insert(name.to_string(), var);
        Ok(handle)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::invalid(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.register(name, values, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values = (0..n)
            .map(|_| std * self.rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        self.register(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape)
    }

    pub fn finish(self) -> ModelParams {
        self.params
    }
}

/// Rebuilds a network's layers over an existing collection. Looks tensors up
/// by the same names the [`Initializer`] assigned.
pub trait ParamSource {
    fn fetch(&mut self, name: &str, shape: &[usize], init: ParamInit) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy)]
pub enum ParamInit {
    Uniform(f64),
    Normal(f64),
    Constant(f64),
}

impl ParamSource for Initializer {
    fn fetch(&mut self, name: &str, shape: &[usize], init: ParamInit) -> Result<Tensor> {
        match init {
            ParamInit::Uniform(b) => self.uniform(name, shape, b),
            ParamInit::Normal(s) => self.normal(name, shape, s),
            ParamInit::Constant(c) => self.constant(name, shape, c),
        }
    }
}

impl ParamSource for &ModelParams {
    fn fetch(&mut self, name: &str, shape: &[usize], _init: ParamInit) -> Result<Tensor> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::shape(format!("parameter `{name}` missing from `{}`", self.name)))?;
        if var.dims() != shape {
            return Err(Error::shape(format!(
                "parameter `{name}`: expected {shape:?}, found {:?}",
                var.dims()
            )));
        }
        Ok(var.as_tensor().clone())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        src: &mut impl ParamSource,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let weight = src.fetch(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            ParamInit::Uniform(bound),
        )?;
        let bias = src.fetch(&format!("{name}.bias"), &[out_ch], ParamInit::Uniform(bound))?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Stride-1 "same" convolution with explicit initializers; `dims` is `(in, out, kernel)`.
    pub fn with_init(
        src: &mut impl ParamSource,
        name: &str,
        dims: (usize, usize, usize),
        weight_init: ParamInit,
        bias_init: ParamInit,
    ) -> Result<Self> {
        let (in_ch, out_ch, kernel) = dims;
        let weight = src.fetch(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], weight_init)?;
        let bias = src.fetch(&format!("{name}.bias"), &[out_ch], bias_init)?;
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
        })
    }

    /// `kernel`×`kernel` convolution preserving spatial size.
    pub fn same(src: &mut impl ParamSource, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Result<Self> {
        Self::new(src, name, in_ch, out_ch, kernel, 1, kernel / 2)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = crate::kernels::conv2d(x, &self.weight, self.stride, self.padding)?;
        let b = self.bias.reshape((1, self.out_channels(), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(src: &mut impl ParamSource, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = src.fetch(&format!("{name}.weight"), &[out_dim, in_dim], ParamInit::Uniform(bound))?;
        let bias = src.fetch(&format!("{name}.bias"), &[out_dim], ParamInit::Uniform(bound))?;
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(src: &mut impl ParamSource, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "group norm `{name}`: {channels} channels not divisible into {groups} groups"
            )));
        }
        let gamma = src.fetch(&format!("{name}.weight"), &[channels], ParamInit::Constant(1.0))?;
        let beta = src.fetch(&format!("{name}.bias"), &[channels], ParamInit::Constant(0.0))?;
        Ok(Self {
            groups,
            gamma,
            beta,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        let gamma = self.gamma.reshape((1, c, 1, 1))?;
        let beta = self.beta.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(src: &mut impl ParamSource, name: &str, dim: usize) -> Result<Self> {
        let gamma = src.fetch(&format!("{name}.weight"), &[dim], ParamInit::Constant(1.0))?;
        let beta = src.fetch(&format!("{name}.bias"), &[dim], ParamInit::Constant(0.0))?;
        Ok(Self { gamma, beta, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Conv → GroupNorm → ReLU.
#[derive(Debug, Clone)]
pub struct Cgr {
    conv: Conv2d,
    norm: GroupNorm,
}

impl Cgr {
    pub fn new(
        src: &mut impl ParamSource,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::same(src, &format!("{name}.conv"), in_ch, out_ch, kernel)?,
            norm: GroupNorm::new(src, &format!("{name}.norm"), groups.min(out_ch), out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

/// Rearranges `(B, C·r², H, W)` into `(B, C, H·r, W·r)`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::shape(format!("pixel shuffle: {c} channels not divisible by {}", r * r)));
    }
    let oc = c / (r * r);
    Ok(x.reshape((b, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, oc, h * r, w * r))?)
}

/// `r`×`r` mean pooling; `H` and `W` must be multiples of `r`.
pub fn avg_pool(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::shape(format!("mean pooling: {h}x{w} not divisible by {r}")));
    }
    Ok(x.reshape((b, c, h / r, r, w / r, r))?.mean(5)?.mean(3)?)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, r, w, r))?
        .reshape((b, c, h * r, w * r))?)
}

/// Logistic function written with differentiable primitives.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? * 0.5)? + 0.5)?)
}

/// Gradient-free copy: the result does not participate in backprop.
pub fn stop_gradient(x: &Tensor) -> Tensor {
    x.detach()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_and_upsampling_match_candle() -> Result<()> {
        let x = Tensor::arange(0f64, 2.0 * 3.0 * 4.0 * 6.0, &Device::Cpu)?.reshape((2, 3, 4, 6))?;
        let ours = avg_pool(&x, 2)?;
        let diff = (ours - x.avg_pool2d(2)?)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?;
        assert!(diff < 1e-12);
        let up = upsample_nearest(&x, 2)?;
        let diff = (up - x.upsample_nearest2d(8, 12)?)?.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?;
        assert_eq!(diff, 0.0);
        assert!(avg_pool(&x, 3).is_err());
        Ok(())
    }

    #[test]
    fn pixel_shuffle_places_subpixels() -> Result<()> {
        // channel k = (i * 2 + j) holds sub-pixel (i, j)
        let x = Tensor::arange(0f32, 4., &Device::Cpu)?.reshape((1, 4, 1, 1))?;
        let y = pixel_shuffle(&x, 2)?;
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.flatten_all()?.to_vec1::<f32>()?, vec![0., 1., 2., 3.]);
        Ok(())
    }

    #[test]
    fn initializer_is_seeded() -> Result<()> {
        let make = |seed| -> Result<String> {
            let mut init = Initializer::new("net", seed, Precision::F32);
            Conv2d::same(&mut init, "c", 3, 4, 3)?;
            init.finish().fingerprint()
        };
        assert_eq!(make(1)?, make(1)?);
        assert_ne!(make(1)?, make(2)?);
        Ok(())
    }

    #[test]
    fn frozen_collection_exposes_no_trainable_vars() -> Result<()> {
        let mut init = Initializer::new("net", 0, Precision::F32);
        Linear::new(&mut init, "fc", 2, 3)?;
        let mut p = init.finish();
        assert_eq!(p.trainable_vars().len(), 2);
        assert_eq!(p.parameter_count(), 9);
        p.freeze();
        assert!(p.trainable_vars().is_empty());
        Ok(())
    }

    #[test]
    fn rebuilding_from_params_reuses_the_same_variables() -> Result<()> {
        let mut init = Initializer::new("net", 3, Precision::F64);
        let a = Conv2d::same(&mut init, "c", 2, 2, 1)?;
        let params = init.finish();
        let b = Conv2d::same(&mut &params, "c", 2, 2, 1)?;
        let x = Tensor::ones((1, 2, 2, 2), DType::F64, &Device::Cpu)?;
        let ya = a.forward(&x)?.flatten_all()?.to_vec1::<f64>()?;
        let yb = b.forward(&x)?.flatten_all()?.to_vec1::<f64>()?;
        assert_eq!(ya, yb);
        assert!(Conv2d::same(&mut &params, "c", 2, 3, 1).is_err());
        Ok(())
    }

    #[test]
    fn group_norm_normalizes_each_group() -> Result<()> {
        let mut init = Initializer::new("gn", 0, Precision::F64);
        let gn = GroupNorm::new(&mut init, "gn", 2, 4)?;
        let x = Tensor::arange(0f64, 32., &Device::Cpu)?.reshape((1, 4, 2, 4))?;
        let y = gn.forward(&x)?.reshape((2, 16))?;
        let mean = y.mean(1)?.to_vec1::<f64>()?;
        let var = y.sqr()?.mean(1)?.to_vec1::<f64>()?;
        for g in 0..2 {
            assert!(mean[g].abs() < 1e-12);
            assert!((var[g] - 1.0).abs() < 1e-4);
        }
        Ok(())
    }
}
