//! Gradient-sign and projected-gradient attacks.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AttackTarget;
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::signal::{apply_perturbation, lp_norm, project_lp_ball, round_toward_zero, NormOrder, ThreatModel, Waveform};

/// Rounds an L∞ budget down onto the 2^-24 grid. Adding such an epsilon to a
/// 16-bit PCM sample below full scale is exact in `f32`.
pub fn snap_linf_epsilon(eps: f64) -> f64 {
    let grid = (1u64 << 24) as f64;
    ((eps * grid).floor() / grid).max(1.0 / grid)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fast gradient sign method: `x' = clip(x + eps * sign(grad), -1, 1)`.
pub fn fgsm<T: AttackTarget + ?Sized>(model: &T, x: &Waveform, y: usize, epsilon: f64) -> Result<Waveform> {
    if !(epsilon >= 0.0) {
        return Err(invalid(format!("FGSM epsilon must be >= 0, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (_, g) = model.loss_and_gradient(x.samples(), y)?;
    let e = round_toward_zero(epsilon);
    let delta: Vec<f32> = g.iter().map(|&gi| e * sign(gi)).collect();
    x.with_samples(apply_perturbation(x.samples(), &delta)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub threat: ThreatModel,
    pub steps: usize,
    pub step_size: f64,
    pub random_init: bool,
    /// Fraction of coordinates kept by the L1 ascent direction.
    pub topk_fraction: f64,
}

impl PgdConfig {
    /// Iterative FGSM: L∞ PGD started at zero.
    pub fn iter_fgsm(epsilon: f64, steps: usize, step_size: f64) -> Result<Self> {
        Ok(Self {
            threat: ThreatModel::new(NormOrder::Linf, epsilon)?,
            steps,
            step_size,
            random_init: false,
            topk_fraction: 0.01,
        })
    }
}

/// Steepest-ascent direction of the given norm's unit ball: sign for L∞,
/// normalised gradient for L2, and for L1 the sign over the top-k magnitude
/// coordinates scaled to unit L1 norm. A zero gradient gives a zero step.
fn ascent_direction(g: &[f32], p: NormOrder, topk_fraction: f64) -> Vec<f32> {
    match p {
        NormOrder::Linf => g.iter().map(|&v| sign(v)).collect(),
        NormOrder::L2 => {
            let n = lp_norm(g, NormOrder::L2);
            if n == 0.0 {
                return vec![0.0; g.len()];
            }
            g.iter().map(|&v| (v as f64 / n) as f32).collect()
        }
        NormOrder::L1 => {
            let k = ((g.len() as f64 * topk_fraction).ceil() as usize).clamp(1, g.len());
            let mut idx: Vec<usize> = (0..g.len()).filter(|&i| g[i] != 0.0).collect();
            idx.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
            idx.truncate(k);
            let mut d = vec![0.0f32; g.len()];
            let w = 1.0 / idx.len().max(1) as f32;
            for i in idx {
                d[i] = sign(g[i]) * w;
            }
            d
        }
        NormOrder::L0 => unreachable!("PGD rejects L0 before iterating"),
    }
}

fn random_start(n: usize, tm: &ThreatModel, rng: &mut Rng) -> Result<Vec<f32>> {
    let eps = tm.epsilon;
    let start: Vec<f32> = match tm.p {
        NormOrder::Linf => (0..n).map(|_| rng.random_range(-eps..eps) as f32).collect(),
        _ => {
            let dir: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let norm = match tm.p {
                NormOrder::L1 => dir.iter().map(|v| v.abs()).sum::<f64>(),
                _ => dir.iter().map(|v| v * v).sum::<f64>().sqrt(),
            };
            let r: f64 = rng.random_range(0.0..1.0);
            dir.iter().map(|v| (v / norm * eps * r) as f32).collect()
        }
    };
    project_lp_ball(&start, tm)
}

/// Projected gradient ascent on the loss, reporting every iterate of `delta`
/// (after projection) to `observe`.
pub fn pgd_observed<T: AttackTarget + ?Sized>(
    model: &T,
    x: &Waveform,
    y: usize,
    cfg: &PgdConfig,
    rng: &mut Rng,
    mut observe: impl FnMut(&[f32]),
) -> Result<Waveform> {
    if cfg.threat.p == NormOrder::L0 {
        return Err(invalid("PGD supports L1, L2 and L∞ threat models"));
    }
    if cfg.steps == 0 || !(cfg.step_size > 0.0) {
        return Err(invalid("PGD needs steps >= 1 and a positive step size"));
    }
    let mut delta = if cfg.random_init { random_start(x.len(), &cfg.threat, rng)? } else { vec![0.0f32; x.len()] };
    observe(&delta);
    for _ in 0..cfg.steps {
        let point = apply_perturbation(x.samples(), &delta)?;
        let (_, g) = model.loss_and_gradient(&point, y)?;
        let d = ascent_direction(&g, cfg.threat.p, cfg.topk_fraction);
        let stepped: Vec<f32> = delta
            .iter()
            .zip(&d)
            .map(|(&a, &b)| (a as f64 + cfg.step_size * b as f64) as f32)
            .collect();
        delta = project_lp_ball(&stepped, &cfg.threat)?;
        observe(&delta);
    }
    x.with_samples(apply_perturbation(x.samples(), &delta)?)
}

pub fn pgd<T: AttackTarget + ?Sized>(
    model: &T,
    x: &Waveform,
    y: usize,
    cfg: &PgdConfig,
    rng: &mut Rng,
) -> Result<Waveform> {
    pgd_observed(model, x, y, cfg, rng, |_| {})
}
