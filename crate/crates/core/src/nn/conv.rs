//! 3×3-style convolution lowered to im2col + matmul so that both passes run
//! through the backend's GEMM. Activations use a channel-major layout,
//! `(channels, batch, height, width)`, which makes the im2col product land
//! directly in that layout again.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    batch: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_height: usize,
    out_width: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

trait Scalar: Copy + Default + std::ops::AddAssign {}
impl Scalar for f32 {}
impl Scalar for f64 {}

fn im2col<T: Scalar>(g: &Geometry, x: &[T]) -> Vec<T> {
    let n = g.cols();
    let mut out = vec![T::default(); g.rows() * n];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut out[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    for oy in 0..g.out_height {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &x[((c * g.batch + b) * g.height + iy as usize) * g.width..][..g.width];
                        let d = &mut dst[(b * g.out_height + oy) * g.out_width..][..g.out_width];
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *v = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(g: &Geometry, col: &[T]) -> Vec<T> {
    let n = g.cols();
    let mut out = vec![T::default(); g.channels * g.batch * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &col[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    for oy in 0..g.out_height {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let d = &mut out[((c * g.batch + b) * g.height + iy as usize) * g.width..][..g.width];
                        let s = &src_row[(b * g.out_height + oy) * g.out_width..][..g.out_width];
                        for (ox, v) in s.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                d[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, name: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{name} expects a contiguous input"),
    }
}

struct Im2Col(Geometry);
struct Col2Im(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.rows(), g.cols()));
        match storage {
            CpuStorage::F32(v) => Ok((
                CpuStorage::F32(im2col(g, contiguous_slice(v, layout, "im2col")?)),
                shape,
            )),
            CpuStorage::F64(v) => Ok((
                CpuStorage::F64(im2col(g, contiguous_slice(v, layout, "im2col")?)),
                shape,
            )),
            other => candle_core::bail!(
                "im2col: unsupported dtype {:?}",
                candle_core::backend::BackendStorage::dtype(other)
            ),
        }
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.channels, g.batch, g.height, g.width));
        match storage {
            CpuStorage::F32(v) => Ok((
                CpuStorage::F32(col2im(g, contiguous_slice(v, layout, "col2im")?)),
                shape,
            )),
            CpuStorage::F64(v) => Ok((
                CpuStorage::F64(col2im(g, contiguous_slice(v, layout, "col2im")?)),
                shape,
            )),
            other => candle_core::bail!(
                "col2im: unsupported dtype {:?}",
                candle_core::backend::BackendStorage::dtype(other)
            ),
        }
    }
}

/// Square-kernel convolution of a channel-major `(C, B, H, W)` input with an
/// `(O, C, k, k)` kernel; returns `(O, B, H', W')`.
pub fn conv2d_cbhw(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (channels, batch, height, width) = x.dims4()?;
    let (out_ch, k_ch, k, k2) = kernel.dims4()?;
    if k != k2 || k_ch != channels {
        return Err(Error::Shape(format!(
            "kernel {:?} does not fit input with {channels} channels",
            kernel.dims()
        )));
    }
    if height + 2 * padding < k || width + 2 * padding < k || stride == 0 {
        return Err(Error::Shape(format!("input {height}x{width} too small for kernel {k}")));
    }
    let g = Geometry {
        channels,
        batch,
        height,
        width,
        kernel: k,
        stride,
        padding,
        out_height: (height + 2 * padding - k) / stride + 1,
        out_width: (width + 2 * padding - k) / stride + 1,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = kernel.reshape((out_ch, g.rows()))?.matmul(&cols)?;
    Ok(y.reshape((out_ch, batch, g.out_height, g.out_width))?)
}
