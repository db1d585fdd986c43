//! Time-domain mask generator and convolutional discriminator.

use candle_core::{Device, Tensor, D};
use candle_nn::ops::sigmoid;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::layers::{leaky_relu, Builder, ChannelNorm, Conv1d, ConvOpts};
use crate::nn::Init;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Learned,
    /// Mask fixed at one; with [`EncoderInit::Unit`] the generator is the identity.
    PassThrough,
}

/// Encoder filter initialisation. The decoder always starts as the left
/// inverse of the encoder, so a fresh generator reconstructs `mask * input`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInit {
    /// Random filters with orthonormal columns.
    Orthogonal,
    /// Unit impulses; reconstruction is exact in floating point.
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub encoder_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub stacks: usize,
    pub layers_per_stack: usize,
    /// Bottleneck and hidden widths of the separator blocks.
    pub separator_channels: usize,
    pub hidden_channels: usize,
    pub dilation_growth: usize,
    pub mask: MaskMode,
    pub encoder_init: EncoderInit,
}

impl GeneratorConfig {
    /// Encoder 64, separator 64/256, 1 stack of 6 layers.
    pub fn desk() -> Self {
        Self {
            encoder_channels: 64,
            kernel: 16,
            stride: 8,
            stacks: 1,
            layers_per_stack: 6,
            separator_channels: 64,
            hidden_channels: 256,
            dilation_growth: 2,
            mask: MaskMode::Learned,
            encoder_init: EncoderInit::Orthogonal,
        }
    }

    /// Encoder 128, separator 128/1024, 1 stack of 6 layers.
    pub fn paper() -> Self {
        Self { encoder_channels: 128, separator_channels: 128, hidden_channels: 1024, ..Self::desk() }
    }

    pub fn smoke() -> Self {
        Self { encoder_channels: 32, layers_per_stack: 4, separator_channels: 32, hidden_channels: 64, ..Self::desk() }
    }

    /// Exact identity map.
    pub fn identity(kernel: usize, stride: usize) -> Self {
        Self {
            encoder_channels: 2 * kernel,
            kernel,
            stride,
            stacks: 1,
            layers_per_stack: 1,
            separator_channels: 4,
            hidden_channels: 4,
            dilation_growth: 2,
            mask: MaskMode::PassThrough,
            encoder_init: EncoderInit::Unit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.kernel % self.stride != 0 {
            return Err(invalid("generator kernel must be a positive multiple of the stride"));
        }
        if self.encoder_channels < 2 * self.kernel || self.encoder_channels % 2 != 0 {
            return Err(invalid("generator needs an even encoder width of at least twice the kernel"));
        }
        if self.stacks == 0 || self.layers_per_stack == 0 || self.separator_channels == 0 || self.hidden_channels == 0
        {
            return Err(invalid("generator separator dimensions must be positive"));
        }
        if self.dilation_growth == 0 {
            return Err(invalid("dilation growth must be >= 1"));
        }
        Ok(())
    }

    fn dilation(&self, layer: usize) -> usize {
        self.dilation_growth.pow(layer as u32)
    }

    /// Receptive field in samples.
    pub fn receptive_field(&self) -> usize {
        let per_stack: usize = (0..self.layers_per_stack).map(|l| 2 * self.dilation(l)).sum();
        (self.stacks * per_stack) * self.stride + self.kernel
    }
}

/// Sign-paired encoder `[E; -E]` (`E` is `half x kernel`) and its left
/// inverse `[P, -P] / 2` with `P = E^T`, so that
/// `decoder(relu(encoder(x))) = x` frame by frame.
fn tied_filters(cfg: &GeneratorConfig, rng: &mut Rng) -> (Vec<f32>, Vec<f32>) {
    let (k, c) = (cfg.kernel, cfg.encoder_channels);
    let half = c / 2;
    // Columns of E (length `half`), one per filter tap.
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v: Vec<f64> = match cfg.encoder_init {
            EncoderInit::Unit => (0..half).map(|i| if i == j { 1.0 } else { 0.0 }).collect(),
            EncoderInit::Orthogonal => (0..half).map(|_| StandardNormal.sample(rng)).collect(),
        };
        if cfg.encoder_init == EncoderInit::Orthogonal {
            for u in &cols {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= n);
        }
        cols.push(v);
    }
    let mut enc = vec![0f32; c * k];
    for i in 0..half {
        for j in 0..k {
            enc[i * k + j] = cols[j][i] as f32;
            enc[(half + i) * k + j] = -cols[j][i] as f32;
        }
    }
    let mut dec = vec![0f32; k * c];
    for j in 0..k {
        for i in 0..half {
            dec[j * c + i] = cols[j][i] as f32;
            dec[j * c + half + i] = -cols[j][i] as f32;
        }
    }
    (enc, dec)
}

struct SepBlock {
    inp: Conv1d,
    norm1: ChannelNorm,
    dconv: Conv1d,
    norm2: ChannelNorm,
    out: Conv1d,
}

impl SepBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&leaky_relu(&self.inp.forward(x)?, 0.1)?)?;
        let h = self.norm2.forward(&leaky_relu(&self.dconv.forward(&h)?, 0.1)?)?;
        Ok((x + self.out.forward(&h)?)?)
    }
}

/// Encoder, mask-estimating separator and overlap-add decoder.
pub struct Generator {
    cfg: GeneratorConfig,
    encoder: Tensor,
    decoder: Tensor,
    norm: ChannelNorm,
    bottleneck: Conv1d,
    blocks: Vec<SepBlock>,
    mask_out: Conv1d,
}

impl Generator {
    pub fn build(cfg: &GeneratorConfig, b: &mut Builder<'_>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, k) = (cfg.encoder_channels, cfg.kernel);
        let (enc, dec) = tied_filters(cfg, rng);
        let encoder = b.param("encoder", &[c, 1, k], Init::Values(enc))?;
        let decoder = b.param("decoder", &[k, c], Init::Values(dec))?;
        let mut s = b.sub("separator");
        let norm = s.global_norm("norm", c)?;
        let bottleneck = s.conv1d("bottleneck", c, cfg.separator_channels, 1, ConvOpts::default())?;
        let mut blocks = Vec::new();
        for st in 0..cfg.stacks {
            for l in 0..cfg.layers_per_stack {
                let mut bb = s.sub(&format!("s{st}l{l}"));
                let (bc, hc) = (cfg.separator_channels, cfg.hidden_channels);
                blocks.push(SepBlock {
                    inp: bb.conv1d("in", bc, hc, 1, ConvOpts::default())?,
                    norm1: bb.global_norm("norm1", hc)?,
                    dconv: bb.conv1d("dconv", hc, hc, 3, ConvOpts::same(3, cfg.dilation(l)))?,
                    norm2: bb.global_norm("norm2", hc)?,
                    out: bb.conv1d("out", hc, bc, 1, ConvOpts { gain: 0.5, ..ConvOpts::default() })?,
                });
            }
        }
        let mask_out = s.conv1d("mask", cfg.separator_channels, c, 1, ConvOpts { gain: 0.1, ..ConvOpts::default() })?;
        Ok(Self { cfg: cfg.clone(), encoder, decoder, norm, bottleneck, blocks, mask_out })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn min_len(&self) -> usize {
        self.cfg.receptive_field()
    }

    /// `[B, T] -> [B, T]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t) = x.dims2()?;
        if t < self.min_len() {
            return Err(Error::TooShort { len: t, min: self.min_len() });
        }
        let (k, s) = (self.cfg.kernel, self.cfg.stride);
        let r = k / s;
        // Pad so every output sample is covered by exactly k / s frames.
        let tail = (s - t % s) % s;
        let xp = x.pad_with_zeros(1, k - s, k - s + tail)?;
        let h = xp.unsqueeze(1)?.conv1d(&self.encoder, 0, s, 1, 1)?.relu()?; // [B, C, F]
        let masked = match self.cfg.mask {
            MaskMode::PassThrough => h,
            MaskMode::Learned => {
                let mut z = self.bottleneck.forward(&self.norm.forward(&h)?)?;
                for blk in &self.blocks {
                    z = blk.forward(&z)?;
                }
                let mask = sigmoid(&self.mask_out.forward(&leaky_relu(&z, 0.1)?)?)?;
                (h * mask)?
            }
        };
        let frames = masked.transpose(1, 2)?.broadcast_matmul(&self.decoder.t()?)?; // [B, F, K]
        let (bsz, nf, _) = frames.dims3()?;
        let mut acc: Option<Tensor> = None;
        for part in 0..r {
            let chunk = frames.narrow(2, part * s, s)?.pad_with_zeros(1, part, r - 1 - part)?;
            acc = Some(match acc {
                Some(a) => (a + chunk)?,
                None => chunk,
            });
        }
        let y = acc.expect("k >= s").reshape((bsz, (nf + r - 1) * s))?;
        let y = (y * (1.0 / r as f64))?;
        Ok(y.narrow(1, k - s, t)?)
    }

    /// Single waveform through the generator.
    pub fn apply(&self, x: &[f32], device: &Device) -> Result<Vec<f32>> {
        let t = Tensor::from_slice(x, (1, x.len()), device)?;
        Ok(self.forward(&t)?.squeeze(0)?.to_vec1::<f32>()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub layers: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Squash the logit through a sigmoid before the adversarial loss.
    pub sigmoid_output: bool,
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self { layers: 10, channels: 32, kernel: 3, sigmoid_output: false }
    }

    pub fn paper() -> Self {
        Self { channels: 80, ..Self::desk() }
    }

    pub fn smoke() -> Self {
        Self { layers: 4, channels: 16, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 || self.channels == 0 || self.kernel % 2 == 0 {
            return Err(invalid("discriminator needs >= 2 layers, positive width and an odd kernel"));
        }
        Ok(())
    }
}

/// Dilated 1-D CNN; the mean of the last layer over time is the logit.
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    convs: Vec<Conv1d>,
}

impl Discriminator {
    pub fn build(cfg: &DiscriminatorConfig, b: &mut Builder<'_>) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let mut convs = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let c_in = if i == 0 { 1 } else { cfg.channels };
            let last = i + 1 == cfg.layers;
            let c_out = if last { 1 } else { cfg.channels };
            // Dilation 1, 1, 2, ..., L-2, 1.
            let d = if i == 0 || last { 1 } else { i };
            let gain = if last { 1.0 } else { std::f64::consts::SQRT_2 };
            convs.push(b.conv1d(&format!("conv{i}"), c_in, c_out, k, ConvOpts { gain, ..ConvOpts::same(k, d) })?);
        }
        Ok(Self { cfg: cfg.clone(), convs })
    }

    /// `[B, T] -> [B]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.unsqueeze(1)?;
        let n = self.convs.len();
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i + 1 < n {
                h = leaky_relu(&h, 0.2)?;
            }
        }
        let logit = h.squeeze(1)?.mean(D::Minus1)?;
        Ok(if self.cfg.sigmoid_output { sigmoid(&logit)? } else { logit })
    }
}
