//! Losses of the perturbation estimator: multi-resolution STFT supervision
//! and the dual contrastive adversarial objective.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::frontend::hann_periodic;
use crate::signal::Waveform;

/// Floor applied to STFT power before the square root and the log.
const POWER_FLOOR: f64 = 1e-14;

/// One STFT resolution. The Hann window spans `win_length <= fft_size`
/// samples, centred in the FFT frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftResolution {
    pub fft_size: usize,
    pub hop: usize,
    pub win_length: usize,
}

impl StftResolution {
    pub const fn new(fft_size: usize, hop: usize) -> Self {
        Self { fft_size, hop, win_length: fft_size }
    }
}

/// (1024, 256), (2048, 512) and (512, 128).
pub fn default_resolutions() -> Vec<StftResolution> {
    vec![StftResolution::new(1024, 256), StftResolution::new(2048, 512), StftResolution::new(512, 128)]
}

/// Windowed real-DFT filters `[2 * bins, 1, fft_size]`: cosine rows then sine rows.
fn dft_kernel(r: &StftResolution, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = r.fft_size;
    let bins = n / 2 + 1;
    let w = hann_periodic(r.win_length);
    let offset = (n - r.win_length) / 2;
    let mut data = vec![0f64; 2 * bins * n];
    for k in 0..bins {
        for (j, &wj) in w.iter().enumerate() {
            let t = j + offset;
            let phase = 2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
            data[k * n + t] = wj * phase.cos();
            data[(bins + k) * n + t] = -wj * phase.sin();
        }
    }
    Ok(Tensor::from_vec(data, (2 * bins, 1, n), device)?.to_dtype(dtype)?)
}

/// Multi-resolution STFT loss with precomputed DFT filters.
///
/// Per resolution and example, with target magnitude `M` and estimate
/// magnitude `E`: spectral convergence `||M - E||_F / ||M||_F` plus the mean
/// absolute log-magnitude difference. The loss averages both over
/// resolutions and the batch.
#[derive(Debug, Clone)]
pub struct Mrstft {
    resolutions: Vec<StftResolution>,
    kernels: Vec<Tensor>,
}

impl Mrstft {
    pub fn new(resolutions: &[StftResolution], dtype: DType, device: &Device) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(invalid("MRSTFT needs at least one resolution"));
        }
        for r in resolutions {
            if r.fft_size < 2 || r.hop == 0 || r.win_length == 0 || r.win_length > r.fft_size {
                return Err(invalid(format!("invalid STFT resolution {r:?}")));
            }
        }
        let kernels = resolutions.iter().map(|r| dft_kernel(r, dtype, device)).collect::<Result<_>>()?;
        Ok(Self { resolutions: resolutions.to_vec(), kernels })
    }

    pub fn resolutions(&self) -> &[StftResolution] {
        &self.resolutions
    }

    pub fn min_len(&self) -> usize {
        self.resolutions.iter().map(|r| r.fft_size).max().unwrap_or(0)
    }

    /// STFT magnitude `[B, T] -> [B, bins, frames]`, no centring.
    pub fn magnitude(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let (_, t) = x.dims2()?;
        let r = &self.resolutions[i];
        if t < r.fft_size {
            return Err(Error::TooShort { len: t, min: r.fft_size });
        }
        let bins = r.fft_size / 2 + 1;
        let z = x.unsqueeze(1)?.conv1d(&self.kernels[i], 0, r.hop, 1, 1)?;
        let re = z.narrow(1, 0, bins)?;
        let im = z.narrow(1, bins, bins)?;
        let power = (re.sqr()? + im.sqr()?)?;
        Ok(power.maximum(POWER_FLOOR)?.sqrt()?)
    }

    /// Per-resolution `(spectral convergence, log magnitude)` terms, each `[B]`.
    pub fn terms(&self, estimate: &Tensor, target: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        if estimate.dims() != target.dims() {
            return Err(invalid(format!("MRSTFT shape mismatch {:?} vs {:?}", estimate.dims(), target.dims())));
        }
        (0..self.resolutions.len())
            .map(|i| {
                let e = self.magnitude(i, estimate)?;
                let m = self.magnitude(i, target)?;
                let (b, _, _) = m.dims3()?;
                let num = (&m - &e)?.sqr()?.reshape((b, ()))?.sum(1)?.sqrt()?;
                let den = m.sqr()?.reshape((b, ()))?.sum(1)?.sqrt()?;
                let sc = (num / den)?;
                let mag = (m.log()? - e.log()?)?.abs()?.reshape((b, ()))?.mean(1)?;
                Ok((sc, mag))
            })
            .collect()
    }

    /// Scalar loss over a batch `[B, T]`.
    pub fn loss(&self, estimate: &Tensor, target: &Tensor) -> Result<Tensor> {
        let terms = self.terms(estimate, target)?;
        let r = terms.len() as f64;
        let mut total: Option<Tensor> = None;
        for (sc, mag) in terms {
            let t = (sc + mag)?.mean(0)?;
            total = Some(match total {
                Some(acc) => (acc + t)?,
                None => t,
            });
        }
        Ok((total.expect("at least one resolution") / r)?)
    }
}

fn pair_tensor(estimate: &Waveform, target: &Waveform) -> Result<(Tensor, Tensor)> {
    if estimate.len() != target.len() {
        return Err(Error::LengthMismatch { left: estimate.len(), right: target.len() });
    }
    let to = |w: &Waveform| -> Result<Tensor> {
        let v: Vec<f64> = w.iter().map(|&s| s as f64).collect();
        Ok(Tensor::from_vec(v, (1, w.len()), &Device::Cpu)?)
    };
    Ok((to(estimate)?, to(target)?))
}

/// Multi-resolution STFT loss between two waveforms, computed in 64-bit.
pub fn mrstft_loss(estimate: &Waveform, target: &Waveform, resolutions: &[StftResolution]) -> Result<f64> {
    let m = Mrstft::new(resolutions, DType::F64, &Device::Cpu)?;
    let (e, t) = pair_tensor(estimate, target)?;
    Ok(m.loss(&e, &t)?.to_scalar::<f64>()?)
}

/// Per-resolution `(spectral convergence, log magnitude)` for two waveforms.
pub fn mrstft_terms(estimate: &Waveform, target: &Waveform, resolutions: &[StftResolution]) -> Result<Vec<(f64, f64)>> {
    let m = Mrstft::new(resolutions, DType::F64, &Device::Cpu)?;
    let (e, t) = pair_tensor(estimate, target)?;
    m.terms(&e, &t)?
        .into_iter()
        .map(|(sc, mag)| Ok((sc.squeeze(0)?.to_scalar::<f64>()?, mag.squeeze(0)?.to_scalar::<f64>()?)))
        .collect()
}

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn logsumexp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Dual contrastive adversarial objective over discriminator logits,
/// `term_real + term_fake` with
///
/// ```text
/// term_real = -mean_i log(1 + sum_j exp(fake_j - real_i))
/// term_fake = -mean_j log(1 + sum_i exp(fake_j - real_i))
/// ```
///
/// evaluated as `softplus(logsumexp(.))`. The discriminator ascends it, the
/// generator descends it.
pub fn dcl_adversarial_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(invalid("DCL needs nonempty real and fake batches"));
    }
    let t1 = real.iter().map(|&r| softplus(logsumexp(fake.iter().map(move |&f| f - r)))).sum::<f64>();
    let t2 = fake.iter().map(|&f| softplus(logsumexp(real.iter().map(move |&r| f - r)))).sum::<f64>();
    Ok(-t1 / real.len() as f64 - t2 / fake.len() as f64)
}

fn softplus_tensor(a: &Tensor) -> Result<Tensor> {
    let neg_abs = a.abs()?.neg()?;
    Ok((a.relu()? + (neg_abs.exp()? + 1.0)?.log()?)?)
}

fn logsumexp_tensor(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    Ok((x.broadcast_sub(&m)?.exp()?.sum_keepdim(dim)?.log()? + m)?.squeeze(dim)?)
}

/// Tensor form of [`dcl_adversarial_loss`] for `[N]` real and `[M]` fake logits.
pub fn dcl_adversarial_loss_tensor(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let (n, m) = (real.dims1()?, fake.dims1()?);
    if n == 0 || m == 0 {
        return Err(invalid("DCL needs nonempty real and fake batches"));
    }
    // diff[i, j] = fake_j - real_i
    let diff = fake.reshape((1, m))?.broadcast_sub(&real.reshape((n, 1))?)?;
    let t1 = softplus_tensor(&logsumexp_tensor(&diff, 1)?)?.mean(0)?;
    let t2 = softplus_tensor(&logsumexp_tensor(&diff, 0)?)?.mean(0)?;
    Ok((t1.neg()? - t2)?)
}
