//! Log-mel front-end mapping `[B, T]` waveforms to `[B, F, frames]`.

use std::f64::consts::PI;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hann-windowed DFT, power, triangular mel filters and log. With
/// `level_norm` the per-example mean log energy is subtracted. With
/// `frame_stats` two rows follow the mel rows: log mean-square and log peak
/// magnitude of each rectangular frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontEndConfig {
    pub win: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub sample_rate: u32,
    #[serde(default = "default_level_norm")]
    pub level_norm: bool,
    /// Added to the mel power before the log.
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub frame_stats: bool,
}

fn default_level_norm() -> bool {
    true
}

fn default_floor() -> f64 {
    LOG_MEL_FLOOR
}

impl FrontEndConfig {
    /// Level-normalised log-mel features.
    pub fn log_mel(win: usize, hop: usize, n_fft: usize, n_mels: usize, sample_rate: u32) -> Self {
        Self { win, hop, n_fft, n_mels, sample_rate, level_norm: true, floor: LOG_MEL_FLOOR, frame_stats: false }
    }

    pub fn out_features(&self) -> usize {
        self.n_mels + if self.frame_stats { 2 } else { 0 }
    }

    /// Shortest input that produces one frame.
    pub fn min_len(&self) -> usize {
        self.win
    }
}

#[derive(Debug, Clone)]
pub struct FrontEnd {
    dft: Tensor,
    mel: Tensor,
    bins: usize,
    hop: usize,
    level_norm: bool,
    floor: f64,
    /// `[win, 1, win]` identity filters that frame the signal.
    framer: Option<Tensor>,
}

const LOG_MEL_FLOOR: f64 = 1e-6;

impl FrontEnd {
    pub fn build(cfg: &FrontEndConfig, device: &Device) -> Result<Self> {
        let FrontEndConfig { win, hop, n_fft, n_mels, sample_rate, level_norm, floor, frame_stats } = *cfg;
        if win > n_fft || hop == 0 || !(floor > 0.0) {
            return Err(Error::InvalidInput(format!("log-mel front-end: win {win} > n_fft {n_fft}, hop 0 or floor <= 0")));
        }
        let bins = n_fft / 2 + 1;
        let window = hann_periodic(win);
        let mut basis = vec![0f32; 2 * bins * win];
        for k in 0..bins {
            for n in 0..win {
                let phase = 2.0 * PI * (k * n) as f64 / n_fft as f64;
                basis[k * win + n] = (phase.cos() * window[n]) as f32;
                basis[(bins + k) * win + n] = (-phase.sin() * window[n]) as f32;
            }
        }
        let dft = Tensor::from_vec(basis, (2 * bins, 1, win), device)?;
        let mel = Tensor::from_vec(mel_filterbank(n_mels, n_fft, sample_rate), (n_mels, bins), device)?;
        let framer = if frame_stats {
            let mut eye = vec![0f32; win * win];
            for i in 0..win {
                eye[i * win + i] = 1.0;
            }
            Some(Tensor::from_vec(eye, (win, 1, win), device)?)
        } else {
            None
        };
        Ok(Self { dft, mel, bins, hop, level_norm, floor, framer })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.unsqueeze(1)?;
        let spec = x.conv1d(&self.dft, 0, self.hop, 1, 1)?;
        let re = spec.narrow(1, 0, self.bins)?;
        let im = spec.narrow(1, self.bins, self.bins)?;
        let power = (re.sqr()? + im.sqr()?)?;
        let m = self.mel.broadcast_matmul(&power)?;
        let mut logm = (m + self.floor)?.log()?;
        if self.level_norm {
            let (b, f, t) = logm.dims3()?;
            let mean = logm.reshape((b, f * t))?.mean_keepdim(1)?.reshape((b, 1, 1))?;
            logm = logm.broadcast_sub(&mean)?;
        }
        let Some(framer) = &self.framer else { return Ok(logm) };
        let frames = x.conv1d(framer, 0, self.hop, 1, 1)?;
        let energy = (frames.sqr()?.mean_keepdim(1)? + self.floor)?.log()?;
        let peak = (frames.abs()?.max_keepdim(1)?.sqr()? + self.floor)?.log()?;
        Ok(Tensor::cat(&[logm, energy, peak], 1)?)
    }
}

/// Periodic Hann window.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-style mel filters, row-major `[n_mels, n_fft / 2 + 1]`.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<f32> {
    let bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)).collect();
    let mut fb = vec![0f32; n_mels * bins];
    for m in 0..n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[m * bins + k] = w as f32;
        }
    }
    fb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filterbank_rows_are_nonempty() {
        let fb = mel_filterbank(32, 256, 16_000);
        for m in 0..32 {
            let row = &fb[m * 129..(m + 1) * 129];
            assert!(row.iter().any(|&w| w > 0.0), "mel filter {m} is empty");
        }
    }

    #[test]
    fn log_mel_matches_direct_dft() {
        let cfg = FrontEndConfig::log_mel(64, 32, 64, 8, 16_000);
        let fe = FrontEnd::build(&cfg, &Device::Cpu).unwrap();
        let x: Vec<f32> = (0..160).map(|i| ((i * 37 % 17) as f32 / 17.0) - 0.5).collect();
        let out = fe.forward(&Tensor::from_vec(x.clone(), (1, 160), &Device::Cpu).unwrap()).unwrap();
        let out = out.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        let fb = mel_filterbank(8, 64, 16_000);
        let w = hann_periodic(64);
        let frames = (160 - 64) / 32 + 1;
        assert_eq!(out[0].len(), frames);
        let mut want = vec![vec![0f64; frames]; 8];
        for t in 0..frames {
            let mut power = vec![0f64; 33];
            for (k, p) in power.iter_mut().enumerate() {
                let (mut re, mut im) = (0.0, 0.0);
                for n in 0..64 {
                    let ph = 2.0 * PI * (k * n) as f64 / 64.0;
                    re += x[t * 32 + n] as f64 * w[n] * ph.cos();
                    im -= x[t * 32 + n] as f64 * w[n] * ph.sin();
                }
                *p = re * re + im * im;
            }
            for m in 0..8 {
                let e: f64 = (0..33).map(|k| fb[m * 33 + k] as f64 * power[k]).sum();
                want[m][t] = (e + LOG_MEL_FLOOR).ln();
            }
        }
        let mean = want.iter().flatten().sum::<f64>() / (8 * frames) as f64;
        for m in 0..8 {
            for t in 0..frames {
                let w = want[m][t] - mean;
                assert!((out[m][t] as f64 - w).abs() < 1e-3, "m={m} t={t}: {} vs {w}", out[m][t]);
            }
        }
    }
}
