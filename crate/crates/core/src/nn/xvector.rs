//! Front-end, residual 1-D convolutional encoder, statistics pooling and an
//! embedding layer. Both the victim and the signature extractor are built
//! from this network with separate weights.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::frontend::{FrontEnd, FrontEndConfig};
use crate::nn::layers::{stats_pool, Builder, ChannelNorm, Conv1d, ConvOpts, Linear};
use crate::signal::Waveform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub frontend: FrontEndConfig,
    pub channels: usize,
    /// Residual blocks; block `i` uses dilation `i + 1`.
    pub blocks: usize,
    pub embedding_dim: usize,
    /// Append utterance-level front-end statistics to the pooled statistics,
    /// so that they survive the per-channel normalisation: the time-mean of
    /// every row, centred across rows, and one tenth of the overall mean.
    #[serde(default)]
    pub feature_means: bool,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv1d,
    norm: ChannelNorm,
    conv2: Conv1d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.conv2.forward(&h)?;
        Ok((x + h)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    frontend: FrontEnd,
    input: Conv1d,
    input_norm: ChannelNorm,
    blocks: Vec<ResBlock>,
    embed: Linear,
    feature_means: bool,
    min_len: usize,
}

impl Encoder {
    pub fn build(cfg: &EncoderConfig, b: &mut Builder<'_>, device: &Device) -> Result<Self> {
        let frontend = FrontEnd::build(&cfg.frontend, device)?;
        let c = cfg.channels;
        let input = b.conv1d("input", cfg.frontend.out_features(), c, 3, ConvOpts::same(3, 1))?;
        let input_norm = b.channel_norm("input_norm", c)?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let d = i + 1;
            let mut bb = b.sub(&format!("block{i}"));
            blocks.push(ResBlock {
                conv1: bb.conv1d("conv1", c, c, 3, ConvOpts::same(3, d))?,
                norm: bb.channel_norm("norm", c)?,
                conv2: bb.conv1d("conv2", c, c, 3, ConvOpts { gain: 0.5, ..ConvOpts::same(3, d) })?,
            });
        }
        let embed = b.linear("embed", 2 * c + if cfg.feature_means { cfg.frontend.out_features() + 1 } else { 0 }, cfg.embedding_dim, 1.0)?;
        Ok(Self {
            frontend,
            input,
            input_norm,
            blocks,
            embed,
            feature_means: cfg.feature_means,
            min_len: cfg.frontend.min_len(),
        })
    }

    /// `[B, T]` waveforms to `[B, E]` un-normalised embeddings.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.frontend.forward(x)?;
        let mut h = self.input_norm.forward(&self.input.forward(&f)?)?.relu()?;
        for blk in &self.blocks {
            h = blk.forward(&h)?;
        }
        let pooled = stats_pool(&h)?;
        if self.feature_means {
            let rows = f.mean(2)?;
            let level = rows.mean_keepdim(1)?;
            let centred = rows.broadcast_sub(&level)?;
            return self.embed.forward(&Tensor::cat(&[pooled, centred, (level * 0.1)?], 1)?);
        }
        self.embed.forward(&pooled)
    }

    pub fn min_len(&self) -> usize {
        self.min_len
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len < self.min_len {
            return Err(Error::TooShort { len, min: self.min_len });
        }
        Ok(())
    }
}

/// Single waveform as a `[1, T]` tensor.
pub fn waveform_tensor(x: &Waveform, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_slice(x.samples(), (1, x.len()), device)?)
}

/// Equal-length sample rows stacked into `[B, T]`.
pub fn batch_tensor(rows: &[&[f32]], device: &Device) -> Result<Tensor> {
    let t = rows.first().map(|r| r.len()).unwrap_or(0);
    if let Some(r) = rows.iter().find(|r| r.len() != t) {
        return Err(Error::LengthMismatch { left: t, right: r.len() });
    }
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), t), device)?)
}
