use candle_core::{Tensor, D};

use crate::error::Result;
use crate::nn::params::{Init, ParamStore};
use crate::rng::Rng;

/// Creates parameters under a dotted name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_> {
        Builder { store: self.store, rng: self.rng, prefix: format!("{}.{name}", self.prefix) }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = format!("{}.{name}", self.prefix);
        self.store.get_or_init(&full, shape, init, self.rng)
    }

    pub fn conv1d(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, opts: ConvOpts) -> Result<Conv1d> {
        let mut b = self.sub(name);
        let fan_in = c_in * kernel;
        let weight = b.param("weight", &[c_out, c_in, kernel], Init::Uniform { fan_in, gain: opts.gain })?;
        let bias = if opts.bias { Some(b.param("bias", &[c_out], Init::Const(0.0))?) } else { None };
        Ok(Conv1d { weight, bias, stride: opts.stride, padding: opts.padding, dilation: opts.dilation })
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, gain: f64) -> Result<Linear> {
        let mut b = self.sub(name);
        let weight = b.param("weight", &[d_out, d_in], Init::Uniform { fan_in: d_in, gain })?;
        let bias = b.param("bias", &[d_out], Init::Const(0.0))?;
        Ok(Linear { weight, bias })
    }

    pub fn channel_norm(&mut self, name: &str, channels: usize) -> Result<ChannelNorm> {
        let mut b = self.sub(name);
        Ok(ChannelNorm {
            gain: b.param("gain", &[1, channels, 1], Init::Const(1.0))?,
            bias: b.param("bias", &[1, channels, 1], Init::Const(0.0))?,
            global: false,
        })
    }

    /// Normalisation over channels and time jointly (one statistic per example).
    pub fn global_norm(&mut self, name: &str, channels: usize) -> Result<ChannelNorm> {
        let mut n = self.channel_norm(name, channels)?;
        n.global = true;
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
    pub gain: f64,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, bias: true, gain: std::f64::consts::SQRT_2 }
    }
}

impl ConvOpts {
    /// "Same" padding for an odd kernel at the given dilation.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { padding: dilation * (kernel - 1) / 2, dilation, ..Self::default() }
    }
}

/// 1-D convolution over `[batch, channels, time]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv1d(&self.weight, self.padding, self.stride, self.dilation, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1))?)?,
            None => y,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }
}

/// Affine map over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Layer normalisation for `[batch, channels, time]` tensors, either per frame
/// across channels or across the whole example.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    gain: Tensor,
    bias: Tensor,
    global: bool,
}

impl ChannelNorm {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (mean, var) = if self.global {
            let (b, _, _) = x.dims3()?;
            let flat = x.reshape((b, ()))?;
            let mean = flat.mean_keepdim(1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(1)?;
            (mean.reshape((b, 1, 1))?, var.reshape((b, 1, 1))?)
        } else {
            let mean = x.mean_keepdim(1)?;
            let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            (mean, var)
        };
        let y = x.broadcast_sub(&mean)?.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Mean and standard deviation over time: `[B, C, T] -> [B, 2C]`.
pub fn stats_pool(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(D::Minus1)?;
    let std = (var + 1e-5)?.sqrt()?;
    Ok(Tensor::cat(&[mean.squeeze(D::Minus1)?, std.squeeze(D::Minus1)?], 1)?)
}

/// Row-wise L2 normalisation of a `[B, E]` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, slope)?)
}
