//! 2-D convolution as im2col + gemm, with explicit input and weight gradients.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> candle_core::Result<Self> {
        let (&[batch, in_ch, height, width], &[out_ch, w_in, kernel, kernel_w]) = (x, w) else {
            bail!("conv2d expects 4-d input and weight, got {x:?} and {w:?}");
        };
        if w_in != in_ch || kernel != kernel_w {
            bail!("conv2d weight {w:?} does not match input {x:?}");
        }
        if height + 2 * padding < kernel || width + 2 * padding < kernel || stride == 0 {
            bail!("conv2d kernel {kernel} (stride {stride}, padding {padding}) does not fit {height}x{width}");
        }
        Ok(Self {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel) / stride + 1,
            out_w: (width + 2 * padding - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn output_len(&self) -> usize {
        self.out_ch * self.col_cols()
    }

    /// Input coordinate for output index `o` and kernel offset `k`, if inside the image.
    fn source(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        (o * self.stride + k).checked_sub(self.padding).filter(|&i| i < size)
    }

    /// Writes one image into a `(C·k·k) × n` column matrix.
    fn im2col<T: WithDType>(&self, img: &[T], cols: &mut [T]) {
        let n = self.col_cols();
        for c in 0..self.in_ch {
            let plane = &img[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = &mut cols[((c * self.kernel + ki) * self.kernel + kj) * n..][..n];
                    for oh in 0..self.out_h {
                        let dst = &mut row[oh * self.out_w..][..self.out_w];
                        let Some(ih) = self.source(oh, ki, self.height) else {
                            dst.fill(T::zero());
                            continue;
                        };
                        for (ow, d) in dst.iter_mut().enumerate() {
                            *d = match self.source(ow, kj, self.width) {
                                Some(iw) => plane[ih * self.width + iw],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: WithDType>(&self, cols: &[T], img: &mut [T]) {
        let n = self.col_cols();
        for c in 0..self.in_ch {
            let plane = &mut img[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = &cols[((c * self.kernel + ki) * self.kernel + kj) * n..][..n];
                    for oh in 0..self.out_h {
                        let Some(ih) = self.source(oh, ki, self.height) else { continue };
                        for (ow, v) in row[oh * self.out_w..][..self.out_w].iter().enumerate() {
                            if let Some(iw) = self.source(ow, kj, self.width) {
                                plane[ih * self.width + iw] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major operand: pointer, row stride, column stride.
struct Operand<T>(*const T, isize, isize);

impl<T> Operand<T> {
    fn rows(data: &[T], cols: usize) -> Self {
        Self(data.as_ptr(), cols as isize, 1)
    }

    fn transposed(data: &[T], cols: usize) -> Self {
        Self(data.as_ptr(), 1, cols as isize)
    }
}

/// `dst (m×n) = [dst +] lhs (m×k) · rhs (k×n)`, all row-major.
fn matmul<T: WithDType>(dst: &mut [T], accumulate: bool, (m, n, k): (usize, usize, usize), lhs: Operand<T>, rhs: Operand<T>) {
    assert!(dst.len() >= m * n);
    // SAFETY: operand extents are derived from the same geometry as the buffers.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            lhs.0,
            lhs.2,
            lhs.1,
            rhs.0,
            rhs.2,
            rhs.1,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => bail!("conv2d operands must be contiguous"),
    }
}

fn forward<T: WithDType>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * n];
    let mut out = vec![T::zero(); g.batch * g.output_len()];
    for b in 0..g.batch {
        g.im2col(&x[b * g.image_len()..][..g.image_len()], &mut cols);
        let dst = &mut out[b * g.output_len()..][..g.output_len()];
        matmul(dst, false, (g.out_ch, n, rows), Operand::rows(w, rows), Operand::rows(&cols, n));
    }
    out
}

fn input_grad<T: WithDType>(g: &Geometry, dy: &[T], w: &[T]) -> Vec<T> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let mut dcols = vec![T::zero(); rows * n];
    let mut dx = vec![T::zero(); g.batch * g.image_len()];
    for b in 0..g.batch {
        let dyb = &dy[b * g.output_len()..][..g.output_len()];
        matmul(&mut dcols, false, (rows, n, g.out_ch), Operand::transposed(w, rows), Operand::rows(dyb, n));
        g.col2im(&dcols, &mut dx[b * g.image_len()..][..g.image_len()]);
    }
    dx
}

fn weight_grad<T: WithDType>(g: &Geometry, x: &[T], dy: &[T]) -> Vec<T> {
    let (rows, n) = (g.col_rows(), g.col_cols());
    let mut cols = vec![T::zero(); rows * n];
    let mut dw = vec![T::zero(); g.out_ch * rows];
    for b in 0..g.batch {
        g.im2col(&x[b * g.image_len()..][..g.image_len()], &mut cols);
        let dyb = &dy[b * g.output_len()..][..g.output_len()];
        matmul(&mut dw, b > 0, (g.out_ch, rows, n), Operand::rows(dyb, n), Operand::transposed(&cols, n));
    }
    dw
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (slice(a, $l1)?, slice(b, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (slice(a, $l1)?, slice(b, $l2)?);
                CpuStorage::F64($body)
            }
            (a, b) => bail!("conv2d supports matching f32/f64 operands, got {:?} and {:?}", a.dtype(), b.dtype()),
        }
    };
}

struct Conv2dOp {
    stride: usize,
    padding: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.padding)?;
        let out = dispatch!(s1, l1, s2, l2, |x, w| forward(&g, x, w));
        Ok((out, Shape::from((g.batch, g.out_ch, g.out_h, g.out_w))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(x.dims(), w.dims(), self.stride, self.padding)?;
        let grad = grad.contiguous()?;
        let dx = grad.apply_op2_no_bwd(&w.contiguous()?, &InputGrad(g))?;
        let dw = x.contiguous()?.apply_op2_no_bwd(&grad, &WeightGrad(g))?;
        Ok((Some(dx), Some(dw)))
    }
}

struct InputGrad(Geometry);

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "gemm-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch!(s1, l1, s2, l2, |dy, w| input_grad(g, dy, w));
        Ok((out, Shape::from((g.batch, g.in_ch, g.height, g.width))))
    }
}

struct WeightGrad(Geometry);

impl CustomOp2 for WeightGrad {
    fn name(&self) -> &'static str {
        "gemm-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let out = dispatch!(s1, l1, s2, l2, |x, dy| weight_grad(g, x, dy));
        Ok((out, Shape::from((g.out_ch, g.in_ch, g.kernel, g.kernel))))
    }
}

/// Bias-free convolution of `x (B,C,H,W)` with `w (O,C,k,k)`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op2(&w.contiguous()?, Conv2dOp { stride, padding })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * scale).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_candle_convolution_and_gradients() {
        for (k, stride, pad, hw) in [(3, 1, 1, 7), (2, 2, 0, 8), (1, 1, 0, 5), (3, 2, 1, 9), (4, 4, 0, 8)] {
            let x = Var::from_tensor(&ramp(&[2, 3, hw, hw], 1.0)).unwrap();
            let w = Var::from_tensor(&ramp(&[4, 3, k, k], 0.5)).unwrap();
            let ours = conv2d(x.as_tensor(), w.as_tensor(), stride, pad).unwrap();
            let reference = x.as_tensor().conv2d(w.as_tensor(), pad, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_diff(&ours, &reference) < 1e-12);

            let probe = ramp(ours.dims(), 1.0);
            let ga = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let gb = (&reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &w] {
                let d = max_diff(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap());
                assert!(d < 1e-10, "k{k} s{stride} p{pad}: gradient differs by {d}");
            }
        }
    }

    #[test]
    fn rejects_mismatched_channels_and_dtypes() {
        let x = ramp(&[1, 3, 4, 4], 1.0);
        assert!(conv2d(&x, &ramp(&[2, 2, 3, 3], 1.0), 1, 1).is_err());
        let w32 = ramp(&[2, 3, 3, 3], 1.0).to_dtype(DType::F32).unwrap();
        assert!(conv2d(&x, &w32, 1, 1).is_err());
    }
}
