//! Fused CPU kernels for the elementwise-heavy layers. Chaining the
//! equivalent tensor ops costs one allocation and pass per op in both
//! directions; these do a single pass each way.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType};

fn slice<'a, T>(data: &'a [T], layout: &Layout, name: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{name} expects a contiguous input"),
    }
}

fn unsupported(name: &str, s: &CpuStorage) -> candle_core::Error {
    candle_core::Error::Msg(format!(
        "{name}: unsupported dtype {:?}",
        candle_core::backend::BackendStorage::dtype(s)
    ))
}

/// Per-channel view of a 2-D buffer: channels run along `axis`.
#[derive(Clone, Copy, Debug)]
struct Channels {
    rows: usize,
    cols: usize,
    axis: usize,
}

impl Channels {
    fn new(layout: &Layout, axis: usize) -> candle_core::Result<Self> {
        let (rows, cols) = layout.shape().dims2()?;
        Ok(Self { rows, cols, axis })
    }

    fn count(&self) -> usize {
        if self.axis == 0 {
            self.rows
        } else {
            self.cols
        }
    }

    fn per_channel(&self) -> usize {
        if self.axis == 0 {
            self.cols
        } else {
            self.rows
        }
    }

    #[inline]
    fn channel(&self, r: usize, c: usize) -> usize {
        if self.axis == 0 {
            r
        } else {
            c
        }
    }

    fn moments<T: WithDType>(&self, x: &[T]) -> (Vec<f64>, Vec<f64>) {
        let k = self.count();
        let n = self.per_channel() as f64;
        let mut mean = vec![0f64; k];
        for r in 0..self.rows {
            for c in 0..self.cols {
                mean[self.channel(r, c)] += x[r * self.cols + c].to_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; k];
        for r in 0..self.rows {
            for c in 0..self.cols {
                let ch = self.channel(r, c);
                let d = x[r * self.cols + c].to_f64() - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        (mean, var)
    }
}

/// Training-mode batch normalisation `gamma * (x - mean) / sqrt(var + eps) + beta`
/// with batch statistics, on a 2-D input whose channels run along `axis`.
pub(crate) struct BatchNormTrain {
    pub axis: usize,
    pub eps: f64,
}

fn bn_forward<T: WithDType>(ch: Channels, eps: f64, x: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let (mean, var) = ch.moments(x);
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = Vec::with_capacity(x.len());
    for r in 0..ch.rows {
        for c in 0..ch.cols {
            let k = ch.channel(r, c);
            let xh = (x[r * ch.cols + c].to_f64() - mean[k]) * inv[k];
            out.push(T::from_f64(gamma[k].to_f64() * xh + beta[k].to_f64()));
        }
    }
    out
}

/// Packed `[dx, dgamma, dbeta]`.
fn bn_backward<T: WithDType>(ch: Channels, eps: f64, x: &[T], gamma: &[T], dy: &[T]) -> Vec<T> {
    let (mean, var) = ch.moments(x);
    let k = ch.count();
    let n = ch.per_channel() as f64;
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut sdy = vec![0f64; k];
    let mut sdyx = vec![0f64; k];
    for r in 0..ch.rows {
        for c in 0..ch.cols {
            let i = r * ch.cols + c;
            let kk = ch.channel(r, c);
            let g = dy[i].to_f64();
            sdy[kk] += g;
            sdyx[kk] += g * (x[i].to_f64() - mean[kk]) * inv[kk];
        }
    }
    let mut out = Vec::with_capacity(x.len() + 2 * k);
    for r in 0..ch.rows {
        for c in 0..ch.cols {
            let i = r * ch.cols + c;
            let kk = ch.channel(r, c);
            let xh = (x[i].to_f64() - mean[kk]) * inv[kk];
            let dx = gamma[kk].to_f64() * inv[kk] / n * (n * dy[i].to_f64() - sdy[kk] - xh * sdyx[kk]);
            out.push(T::from_f64(dx));
        }
    }
    out.extend(sdyx.iter().map(|&v| T::from_f64(v)));
    out.extend(sdy.iter().map(|&v| T::from_f64(v)));
    out
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let ch = Channels::new(l1, self.axis)?;
        let shape = l1.shape().clone();
        let name = self.name();
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => Ok((
                CpuStorage::F32(bn_forward(
                    ch,
                    self.eps,
                    slice(x, l1, name)?,
                    slice(g, l2, name)?,
                    slice(b, l3, name)?,
                )),
                shape,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => Ok((
                CpuStorage::F64(bn_forward(
                    ch,
                    self.eps,
                    slice(x, l1, name)?,
                    slice(g, l2, name)?,
                    slice(b, l3, name)?,
                )),
                shape,
            )),
            (other, _, _) => Err(unsupported(name, other)),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (rows, cols) = x.dims2()?;
        let k = gamma.dim(0)?;
        let packed = x.apply_op3_no_bwd(
            gamma,
            &grad.contiguous()?,
            &BatchNormGrad {
                axis: self.axis,
                eps: self.eps,
            },
        )?;
        let dx = packed.narrow(0, 0, rows * cols)?.reshape((rows, cols))?;
        let dgamma = packed.narrow(0, rows * cols, k)?;
        let dbeta = packed.narrow(0, rows * cols + k, k)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

struct BatchNormGrad {
    axis: usize,
    eps: f64,
}

impl CustomOp3 for BatchNormGrad {
    fn name(&self) -> &'static str {
        "batch-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let ch = Channels::new(l1, self.axis)?;
        let shape = Shape::from(l1.shape().elem_count() + 2 * ch.count());
        let name = self.name();
        match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(d)) => Ok((
                CpuStorage::F32(bn_backward(
                    ch,
                    self.eps,
                    slice(x, l1, name)?,
                    slice(g, l2, name)?,
                    slice(d, l3, name)?,
                )),
                shape,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(d)) => Ok((
                CpuStorage::F64(bn_backward(
                    ch,
                    self.eps,
                    slice(x, l1, name)?,
                    slice(g, l2, name)?,
                    slice(d, l3, name)?,
                )),
                shape,
            )),
            (other, _, _) => Err(unsupported(name, other)),
        }
    }
}

/// Per-channel batch mean and biased variance, packed as `(2, channels)`.
pub(crate) struct ChannelMoments {
    pub axis: usize,
}

impl CustomOp1 for ChannelMoments {
    fn name(&self) -> &'static str {
        "channel-moments"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let ch = Channels::new(l, self.axis)?;
        let shape = Shape::from((2, ch.count()));
        fn pack<T: WithDType>(ch: Channels, x: &[T]) -> Vec<T> {
            let (m, v) = ch.moments(x);
            m.into_iter().chain(v).map(T::from_f64).collect()
        }
        match s {
            CpuStorage::F32(x) => Ok((CpuStorage::F32(pack(ch, slice(x, l, self.name())?)), shape)),
            CpuStorage::F64(x) => Ok((CpuStorage::F64(pack(ch, slice(x, l, self.name())?)), shape)),
            other => Err(unsupported(self.name(), other)),
        }
    }
}

/// `max(x, slope * x)` for `0 <= slope <= 1`.
pub(crate) struct LeakyRelu {
    pub slope: f64,
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T], slope: f64) -> Vec<T> {
            let s = T::from_f64(slope);
            x.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect()
        }
        let shape = l.shape().clone();
        match s {
            CpuStorage::F32(x) => Ok((CpuStorage::F32(run(slice(x, l, self.name())?, self.slope)), shape)),
            CpuStorage::F64(x) => Ok((CpuStorage::F64(run(slice(x, l, self.name())?, self.slope)), shape)),
            other => Err(unsupported(self.name(), other)),
        }
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(
            &grad.contiguous()?,
            &LeakyReluGrad { slope: self.slope },
        )?))
    }
}

struct LeakyReluGrad {
    slope: f64,
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T], g: &[T], slope: f64) -> Vec<T> {
            let s = T::from_f64(slope);
            x.iter()
                .zip(g)
                .map(|(&v, &d)| if v > T::zero() { d } else { d * s })
                .collect()
        }
        let shape = l1.shape().clone();
        let name = self.name();
        match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => Ok((
                CpuStorage::F32(run(slice(x, l1, name)?, slice(g, l2, name)?, self.slope)),
                shape,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => Ok((
                CpuStorage::F64(run(slice(x, l1, name)?, slice(g, l2, name)?, self.slope)),
                shape,
            )),
            (other, _) => Err(unsupported(name, other)),
        }
    }
}

/// Logistic function, evaluated through `exp(-|x|)` so neither branch
/// overflows.
pub(crate) struct Sigmoid;

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(x: &[T]) -> Vec<T> {
            x.iter()
                .map(|&v| {
                    let v = v.to_f64();
                    let e = (-v.abs()).exp();
                    T::from_f64(if v >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) })
                })
                .collect()
        }
        let shape = l.shape().clone();
        match s {
            CpuStorage::F32(x) => Ok((CpuStorage::F32(run(slice(x, l, self.name())?)), shape)),
            CpuStorage::F64(x) => Ok((CpuStorage::F64(run(slice(x, l, self.name())?)), shape)),
            other => Err(unsupported(self.name(), other)),
        }
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let ds = (res * (1.0 - res)?)?;
        Ok(Some((grad * ds)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn reference_bn(x: &Tensor, gamma: &Tensor, beta: &Tensor, axis: usize) -> Tensor {
        let reduce = 1 - axis;
        let shape = if axis == 0 {
            (gamma.dim(0).unwrap(), 1)
        } else {
            (1, gamma.dim(0).unwrap())
        };
        let mean = x.mean_keepdim(reduce).unwrap();
        let c = x.broadcast_sub(&mean).unwrap();
        let var = c.sqr().unwrap().mean_keepdim(reduce).unwrap();
        c.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&gamma.reshape(shape).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape(shape).unwrap())
            .unwrap()
    }

    #[test]
    fn batch_norm_matches_composed_ops() {
        let dev = Device::Cpu;
        for axis in [0, 1] {
            let x = Var::randn(0f64, 2.0, (5, 7), &dev).unwrap();
            let k = if axis == 0 { 5 } else { 7 };
            let gamma = Var::randn(1f64, 0.5, k, &dev).unwrap();
            let beta = Var::randn(0f64, 0.5, k, &dev).unwrap();
            let w = Tensor::randn(0f64, 1.0, (5, 7), &dev).unwrap();
            let fused = x
                .as_tensor()
                .apply_op3(gamma.as_tensor(), beta.as_tensor(), BatchNormTrain { axis, eps: 1e-5 })
                .unwrap();
            let composed = reference_bn(x.as_tensor(), gamma.as_tensor(), beta.as_tensor(), axis);
            let diff = (&fused - &composed)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap();
            assert!(diff < 1e-12, "forward diff {diff}");
            let g1 = fused.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = composed.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [&x, &gamma, &beta] {
                let a = g1.get(v.as_tensor()).unwrap();
                let b = g2.get(v.as_tensor()).unwrap();
                let d = (a - b)
                    .unwrap()
                    .abs()
                    .unwrap()
                    .max_all()
                    .unwrap()
                    .to_scalar::<f64>()
                    .unwrap();
                assert!(d < 1e-10, "gradient diff {d} (axis {axis})");
            }
        }
    }

    #[test]
    fn moments() {
        let x = Tensor::new(&[[1f32, 2.0], [3.0, 6.0]], &Device::Cpu).unwrap();
        let m = x
            .apply_op1_no_bwd(&ChannelMoments { axis: 1 })
            .unwrap()
            .to_vec2::<f32>()
            .unwrap();
        assert_eq!(m, vec![vec![2.0, 4.0], vec![1.0, 4.0]]);
    }

    #[test]
    fn sigmoid_is_stable_and_differentiable() {
        let x = Var::new(&[-800f64, -1.0, 0.0, 2.0, 800.0], &Device::Cpu).unwrap();
        let y = x.as_tensor().apply_op1(Sigmoid).unwrap();
        let v = y.to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(v[2], 0.5);
        assert_eq!(v[4], 1.0);
        assert!((v[1] - 1.0 / (1.0 + 1f64.exp())).abs() < 1e-15);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert!((g[2] - 0.25).abs() < 1e-15);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn leaky_relu_and_grad() {
        let x = Var::new(&[-2f64, 0.5, 3.0], &Device::Cpu).unwrap();
        let y = x.as_tensor().apply_op1(LeakyRelu { slope: 0.01 }).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![-0.02, 0.5, 3.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(
            g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap(),
            vec![0.01, 1.0, 1.0]
        );
        assert_eq!(y.dtype(), DType::F64);
    }
}
