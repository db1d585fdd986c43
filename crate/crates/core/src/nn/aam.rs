//! Additive angular margin (AAM) softmax head.

use candle_core::{Tensor, D};

use crate::error::{invalid, Result};
use crate::nn::layers::{l2_normalize, Builder};
use crate::nn::params::Init;

const COS_TOLERANCE: f64 = 1e-6;

/// Returns `s * cos(theta_i + m * [i == y])` with `theta_i = acos(cos_i)`.
///
/// The shifted angle saturates at pi, which keeps the target logit
/// non-increasing in `m` for every input.
pub fn aam_logit_adjust(cosine: &[f64], y: usize, m: f64, s: f64) -> Result<Vec<f64>> {
    if y >= cosine.len() {
        return Err(invalid(format!("target class {y} out of range for {} logits", cosine.len())));
    }
    if m < 0.0 || !(s > 0.0) {
        return Err(invalid(format!("margin must be >= 0 and scale > 0 (m = {m}, s = {s})")));
    }
    cosine
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            if !(c.abs() <= 1.0 + COS_TOLERANCE) {
                return Err(invalid(format!("cosine logit {c} outside [-1, 1]")));
            }
            let c = c.clamp(-1.0, 1.0);
            if i == y && m > 0.0 {
                Ok(s * (c.acos() + m).min(std::f64::consts::PI).cos())
            } else {
                Ok(s * c)
            }
        })
        .collect()
}

/// Cosine classifier over L2-normalised embeddings.
#[derive(Debug, Clone)]
pub struct AamHead {
    weight: Tensor,
    pub scale: f64,
    pub margin: f64,
}

impl AamHead {
    pub fn build(b: &mut Builder<'_>, classes: usize, dim: usize, scale: f64, margin: f64) -> Result<Self> {
        let weight = b.param("head.weight", &[classes, dim], Init::Normal { std: 1.0 })?;
        Ok(Self { weight, scale, margin })
    }

    /// `[B, E] -> [B, K]` cosines.
    pub fn cosine(&self, emb: &Tensor) -> Result<Tensor> {
        let e = l2_normalize(emb)?;
        let w = l2_normalize(&self.weight)?;
        Ok(e.matmul(&w.t()?)?)
    }

    /// Inference logits: scaled cosines, no margin.
    pub fn logits(&self, emb: &Tensor) -> Result<Tensor> {
        Ok((self.cosine(emb)? * self.scale)?)
    }

    /// Training logits with the margin applied to each row's target class.
    pub fn margin_logits(&self, emb: &Tensor, targets: &[u32]) -> Result<Tensor> {
        let cos = self.cosine(emb)?;
        let (b, k) = cos.dims2()?;
        let mut onehot = vec![0f32; b * k];
        for (i, &t) in targets.iter().enumerate() {
            onehot[i * k + t as usize] = 1.0;
        }
        let onehot = Tensor::from_vec(onehot, (b, k), cos.device())?;
        let shifted = margin_cos_tensor(&cos, self.margin)?;
        let adjusted = (&cos + onehot.mul(&(shifted - &cos)?)?)?;
        Ok((adjusted * self.scale)?)
    }

    pub fn num_classes(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Elementwise `cos(min(acos(c) + m, pi))`.
fn margin_cos_tensor(cos: &Tensor, m: f64) -> Result<Tensor> {
    if m == 0.0 {
        return Ok(cos.clone());
    }
    let c = cos.clamp(-1.0 + 1e-6, 1.0 - 1e-6)?;
    let sin = (1.0 - c.sqr()?)?.sqrt()?;
    let shifted = ((&c * m.cos())? - (sin * m.sin())?)?;
    // acos(c) + m > pi  <=>  c < cos(pi - m)
    let saturate = c.lt((std::f64::consts::PI - m).cos())?;
    let floor = Tensor::full(-1f32, c.shape(), c.device())?;
    Ok(saturate.where_cond(&floor, &shifted)?)
}

pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    // Lowest index wins ties.
    let rows = logits.to_vec2::<f32>()?;
    Ok(rows.iter().map(|r| argmax(r)).collect())
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, D::Minus1)?)
}
