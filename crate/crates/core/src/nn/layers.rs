use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::conv::conv2d_cbhw;
use super::fused::{BatchNormTrain, ChannelMoments, LeakyRelu, Sigmoid};
use super::params::{ParamKind, ParamStore};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) struct Init<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub dtype: DType,
    pub device: &'a Device,
}

impl<R: Rng> Init<'_, R> {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("valid std");
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        let t = Tensor::from_vec(values, shape, self.device)?.to_dtype(self.dtype)?;
        self.store.register(name, t, ParamKind::Trainable)
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64, kind: ParamKind) -> Result<Var> {
        let t = (Tensor::ones(shape, self.dtype, self.device)? * value)?;
        self.store.register(name, t, kind)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub(crate) fn new<R: Rng>(init: &mut Init<R>, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        let std = (2.0 / inputs as f64).sqrt();
        Ok(Self {
            weight: init.normal(format!("{name}.weight"), &[outputs, inputs], std)?,
            bias: init.constant(format!("{name}.bias"), &[outputs], 0.0, ParamKind::Trainable)?,
        })
    }

    pub fn in_features(&self) -> usize {
        self.weight.dims()[1]
    }

    /// `x` is `(rows, in)`; returns `(rows, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

/// Batch normalisation over one channel axis of a 2-D view.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Var,
    pub running_var: Var,
    channel_axis: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    /// `channel_axis` is 1 for `(rows, channels)` inputs and 0 for
    /// channel-major `(channels, positions)` inputs.
    pub(crate) fn new<R: Rng>(init: &mut Init<R>, name: &str, channels: usize, channel_axis: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant(format!("{name}.gamma"), &[channels], 1.0, ParamKind::Trainable)?,
            beta: init.constant(format!("{name}.beta"), &[channels], 0.0, ParamKind::Trainable)?,
            running_mean: init.constant(format!("{name}.running_mean"), &[channels], 0.0, ParamKind::Buffer)?,
            running_var: init.constant(format!("{name}.running_var"), &[channels], 1.0, ParamKind::Buffer)?,
            channel_axis,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    fn stat_shape(&self, channels: usize) -> (usize, usize) {
        if self.channel_axis == 0 {
            (channels, 1)
        } else {
            (1, channels)
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let channels = self.gamma.dims()[0];
        let shape = self.stat_shape(channels);
        let reduce = 1 - self.channel_axis;
        let gamma = self.gamma.as_tensor().reshape(shape)?;
        let beta = self.beta.as_tensor().reshape(shape)?;
        match mode {
            Mode::Train => {
                let x = x.contiguous()?;
                let n = x.dim(reduce)?;
                let stats = x.detach().apply_op1_no_bwd(&ChannelMoments {
                    axis: self.channel_axis,
                })?;
                let m = self.momentum;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (stats.get(0)? * m)?)?;
                self.running_mean.set(&rm)?;
                if n > 1 {
                    let unbiased = (stats.get(1)? * (n as f64 / (n - 1) as f64))?;
                    let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                    self.running_var.set(&rv)?;
                }
                Ok(x.apply_op3(
                    self.gamma.as_tensor(),
                    self.beta.as_tensor(),
                    BatchNormTrain {
                        axis: self.channel_axis,
                        eps: self.eps,
                    },
                )?)
            }
            Mode::Eval => {
                let mean = self.running_mean.as_tensor().reshape(shape)?;
                let std = (self.running_var.as_tensor().reshape(shape)? + self.eps)?.sqrt()?;
                let normalized = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
                Ok(normalized.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
            }
        }
    }
}

/// Bias-free square conv on channel-major activations.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub(crate) fn new<R: Rng>(
        init: &mut Init<R>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: init.normal(format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], std)?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_cbhw(x, self.weight.as_tensor(), self.stride, self.padding)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(LeakyRelu { slope })?)
}

/// Logistic function evaluated through `exp(-|x|)` so neither branch
/// overflows.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Sigmoid)?)
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}
