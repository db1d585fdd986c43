//! Carlini-Wagner attacks.
//!
//! All three variants optimise in tanh space, `x' = tanh(w)`, so amplitude
//! stays inside (-1, 1) without clipping, using Adam on `w`. The
//! misclassification term is `f = max(gap, -kappa)` with
//! `gap = Z_y - max_{i != y} Z_i`; an iterate counts as successful when
//! `gap < 0`.
//!
//! * L2 minimises `||delta||_2^2 + c f` with a binary search over `c`.
//! * L0 repeats the L2 solve on a shrinking set of free samples, removing at
//!   each round the samples whose `|grad_i * delta_i|` is smallest.
//! * L∞ minimises `c f + sum_i relu(|delta_i| - tau)`, evaluates the iterate
//!   with `delta` clamped to `[-tau, tau]`, and shrinks `tau` after every
//!   successful round.

use serde::{Deserialize, Serialize};

use super::AttackTarget;
use crate::error::{invalid, Result};
use crate::signal::{apply_perturbation, l0_count, lp_norm, perturbation_between, round_toward_zero, NormOrder, Waveform};

/// Upper end of the `c` search; reaching it means no `c` succeeded.
const C_CEILING: f64 = 1e10;
/// Keeps `atanh` finite for full-scale samples.
const TANH_LIMIT: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwL2Config {
    pub confidence: f64,
    pub initial_c: f64,
    pub binary_search_steps: usize,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for CwL2Config {
    fn default() -> Self {
        Self { confidence: 0.0, initial_c: 0.1, binary_search_steps: 5, iterations: 20, learning_rate: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwL0Config {
    pub l2: CwL2Config,
    /// Fraction of the free samples frozen after each successful round.
    pub remove_fraction: f64,
    pub max_outer: usize,
}

impl Default for CwL0Config {
    fn default() -> Self {
        Self { l2: CwL2Config { binary_search_steps: 2, ..CwL2Config::default() }, remove_fraction: 0.3, max_outer: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CwLinfConfig {
    pub confidence: f64,
    pub initial_c: f64,
    pub max_c: f64,
    pub initial_tau: f64,
    pub tau_shrink: f64,
    pub max_outer: usize,
    pub iterations: usize,
    /// Adam learning rate as a fraction of the current `tau`.
    pub step_fraction: f64,
}

impl Default for CwLinfConfig {
    fn default() -> Self {
        Self {
            confidence: 0.0,
            initial_c: 1.0,
            max_c: 100.0,
            initial_tau: 0.02,
            tau_shrink: 0.7,
            max_outer: 8,
            iterations: 10,
            step_fraction: 0.2,
        }
    }
}

/// Result of a CW attack.
#[derive(Debug, Clone, PartialEq)]
pub struct CwOutcome {
    /// Smallest-norm successful example, or the final iterate when `success` is false.
    pub adversarial: Waveform,
    pub success: bool,
    /// Minimised norm of the realised `x' - x` (a sample count for L0).
    pub norm: f64,
    /// Norms of every successful iterate seen during the search.
    pub candidate_norms: Vec<f64>,
    /// Penalty constant of the returned example.
    pub c: f64,
    /// L∞ only: the bound in force when the returned example was found.
    pub tau_final: Option<f64>,
    /// L0 only: free-sample count at the start of each outer round.
    pub support_trace: Vec<usize>,
    pub gradient_evals: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, w: &mut [f64], g: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..w.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * g[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * g[i] * g[i];
            w[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Shared tanh-space state of one attack on one input.
struct Problem<'a, T: ?Sized> {
    model: &'a T,
    x: &'a [f32],
    y: usize,
    w0: Vec<f64>,
    evals: usize,
}

struct Iterate {
    point: Vec<f32>,
    gap: f32,
    grad: Vec<f32>,
}

impl<'a, T: AttackTarget + ?Sized> Problem<'a, T> {
    fn new(model: &'a T, x: &'a Waveform, y: usize) -> Result<Self> {
        if y >= model.num_classes() {
            return Err(invalid(format!("label {y} out of range for {} classes", model.num_classes())));
        }
        let w0 = x.iter().map(|&v| (v as f64).clamp(-TANH_LIMIT, TANH_LIMIT).atanh()).collect();
        Ok(Self { model, x: x.samples(), y, w0, evals: 0 })
    }

    /// Maps `w` to a signal. Coordinates still at their starting value (or
    /// frozen by `mask`) reproduce `x` exactly so they add nothing to `delta`.
    fn point(&self, w: &[f64], mask: Option<&[bool]>) -> Vec<f32> {
        (0..w.len())
            .map(|i| {
                let free = mask.is_none_or(|m| m[i]);
                if !free || w[i] == self.w0[i] {
                    self.x[i]
                } else {
                    w[i].tanh() as f32
                }
            })
            .collect()
    }

    fn evaluate(&mut self, point: Vec<f32>) -> Result<Iterate> {
        let (gap, grad) = self.model.logit_gap_and_gradient(&point, self.y)?;
        self.evals += 1;
        Ok(Iterate { point, gap, grad })
    }

    /// L2 objective at fixed `c`; calls `seen` for every evaluated iterate.
    fn descend_l2(
        &mut self,
        c: f64,
        cfg: &CwL2Config,
        mask: Option<&[bool]>,
        mut seen: impl FnMut(&Iterate),
    ) -> Result<()> {
        let mut w = self.w0.clone();
        let mut adam = Adam::new(w.len());
        let mut grad_w = vec![0.0f64; w.len()];
        for _ in 0..cfg.iterations {
            let it = self.evaluate(self.point(&w, mask))?;
            seen(&it);
            let active = (it.gap as f64) > -cfg.confidence;
            for i in 0..w.len() {
                if mask.is_some_and(|m| !m[i]) {
                    grad_w[i] = 0.0;
                    continue;
                }
                let t = w[i].tanh();
                let d = it.point[i] as f64 - self.x[i] as f64;
                let gf = if active { c * it.grad[i] as f64 } else { 0.0 };
                grad_w[i] = (2.0 * d + gf) * (1.0 - t * t);
            }
            adam.step(&mut w, &grad_w, cfg.learning_rate);
        }
        Ok(())
    }

    /// Binary search over `c` around [`Self::descend_l2`].
    fn solve_l2(
        &mut self,
        cfg: &CwL2Config,
        mask: Option<&[bool]>,
        candidates: &mut Vec<f64>,
    ) -> Result<(Option<(f64, Vec<f32>, f64)>, Vec<f32>)> {
        let (mut lo, mut hi, mut c) = (0.0f64, C_CEILING, cfg.initial_c);
        let mut best: Option<(f64, Vec<f32>, f64)> = None;
        let mut last = self.x.to_vec();
        let x = self.x;
        for _ in 0..cfg.binary_search_steps.max(1) {
            let mut found = false;
            self.descend_l2(c, cfg, mask, |it| {
                last.clone_from(&it.point);
                if it.gap < 0.0 {
                    found = true;
                    let n = lp_norm(&perturbation_between(x, &it.point), NormOrder::L2);
                    candidates.push(n);
                    if best.as_ref().is_none_or(|b| n < b.0) {
                        best = Some((n, it.point.clone(), c));
                    }
                }
            })?;
            if found {
                hi = hi.min(c);
                c = 0.5 * (lo + hi);
            } else {
                lo = lo.max(c);
                c = if hi < C_CEILING { 0.5 * (lo + hi) } else { c * 10.0 };
            }
        }
        Ok((best, last))
    }

    fn verified(&self, point: &[f32]) -> Result<bool> {
        Ok(self.model.predict(point)? != self.y)
    }
}

fn finish(x: &Waveform, point: Vec<f32>, p: NormOrder) -> Result<(Waveform, f64)> {
    let n = lp_norm(&perturbation_between(x.samples(), &point), p);
    Ok((x.with_samples(point)?, n))
}

fn check_l2(cfg: &CwL2Config) -> Result<()> {
    if cfg.iterations == 0 || !(cfg.learning_rate > 0.0) || !(cfg.initial_c > 0.0) || !(cfg.confidence >= 0.0) {
        return Err(invalid("CW needs iterations >= 1, positive learning rate and c, and confidence >= 0"));
    }
    Ok(())
}

/// Carlini-Wagner L2.
pub fn cw_l2<T: AttackTarget + ?Sized>(model: &T, x: &Waveform, y: usize, cfg: &CwL2Config) -> Result<CwOutcome> {
    check_l2(cfg)?;
    let mut prob = Problem::new(model, x, y)?;
    let mut candidate_norms = Vec::new();
    let (best, last) = prob.solve_l2(cfg, None, &mut candidate_norms)?;
    let (point, success, c) = match best {
        Some((_, p, c)) if prob.verified(&p)? => (p, true, c),
        _ => (last, false, f64::NAN),
    };
    let (adversarial, norm) = finish(x, point, NormOrder::L2)?;
    Ok(CwOutcome {
        adversarial,
        success,
        norm,
        candidate_norms,
        c,
        tau_final: None,
        support_trace: Vec::new(),
        gradient_evals: prob.evals,
    })
}

/// Carlini-Wagner L0 by support freezing around repeated L2 solves.
pub fn cw_l0<T: AttackTarget + ?Sized>(model: &T, x: &Waveform, y: usize, cfg: &CwL0Config) -> Result<CwOutcome> {
    check_l2(&cfg.l2)?;
    if !(cfg.remove_fraction > 0.0 && cfg.remove_fraction < 1.0) || cfg.max_outer == 0 {
        return Err(invalid("CW-L0 needs remove_fraction in (0, 1) and max_outer >= 1"));
    }
    let mut prob = Problem::new(model, x, y)?;
    let mut free = vec![true; x.len()];
    let mut support_trace = Vec::new();
    let mut candidate_norms = Vec::new();
    let mut best: Option<(Vec<f32>, f64)> = None;
    let mut last = x.samples().to_vec();
    let mut l2 = cfg.l2;
    for _ in 0..cfg.max_outer {
        let n_free = free.iter().filter(|&&f| f).count();
        if n_free == 0 {
            break;
        }
        support_trace.push(n_free);
        let mut norms = Vec::new();
        let (found, fin) = prob.solve_l2(&l2, Some(&free), &mut norms)?;
        last = fin;
        let Some((_, point, c)) = found else { break };
        if !prob.verified(&point)? {
            break;
        }
        let delta = perturbation_between(x.samples(), &point);
        candidate_norms.push(l0_count(&delta, 0.0) as f64);
        let it = prob.evaluate(point.clone())?;
        best = Some((point, c));
        l2.initial_c = c;

        // Freeze samples that moved nowhere, then the least useful fraction.
        let mut order: Vec<usize> = (0..free.len()).filter(|&i| free[i]).collect();
        let score = |i: usize| (it.grad[i] as f64 * delta[i] as f64).abs();
        order.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));
        let drop = ((n_free as f64 * cfg.remove_fraction).ceil() as usize).max(1);
        for (rank, &i) in order.iter().enumerate() {
            if rank < drop || delta[i] == 0.0 {
                free[i] = false;
            }
        }
    }
    let (point, success, c) = match best {
        Some((p, c)) => (p, true, c),
        None => (last, false, f64::NAN),
    };
    let (adversarial, norm) = finish(x, point, NormOrder::L0)?;
    Ok(CwOutcome {
        adversarial,
        success,
        norm,
        candidate_norms,
        c,
        tau_final: None,
        support_trace,
        gradient_evals: prob.evals,
    })
}

/// Carlini-Wagner L∞ with an iteratively shrinking per-sample bound.
pub fn cw_linf<T: AttackTarget + ?Sized>(
    model: &T,
    x: &Waveform,
    y: usize,
    cfg: &CwLinfConfig,
) -> Result<CwOutcome> {
    if cfg.iterations == 0
        || cfg.max_outer == 0
        || !(cfg.initial_tau > 0.0)
        || !(cfg.tau_shrink > 0.0 && cfg.tau_shrink < 1.0)
        || !(cfg.initial_c > 0.0 && cfg.max_c >= cfg.initial_c)
        || !(cfg.step_fraction > 0.0)
        || !(cfg.confidence >= 0.0)
    {
        return Err(invalid("invalid CW-L∞ configuration"));
    }
    let mut prob = Problem::new(model, x, y)?;
    let xs = x.samples();
    let mut w = prob.w0.clone();
    let (mut tau, mut c) = (cfg.initial_tau, cfg.initial_c);
    let mut best: Option<(Vec<f32>, f64, f64)> = None;
    let mut candidate_norms = Vec::new();
    let mut last = xs.to_vec();
    let mut grad_w = vec![0.0f64; w.len()];
    for _ in 0..cfg.max_outer {
        let bound = round_toward_zero(tau);
        let mut adam = Adam::new(w.len());
        let mut round_best: Option<(Vec<f32>, f64)> = None;
        for _ in 0..cfg.iterations {
            let raw: Vec<f64> = w.iter().zip(xs).map(|(&wi, &xi)| wi.tanh() - xi as f64).collect();
            let clamped: Vec<f32> = raw.iter().map(|&d| (d as f32).clamp(-bound, bound)).collect();
            let it = prob.evaluate(apply_perturbation(xs, &clamped)?)?;
            if it.gap < 0.0 {
                let n = lp_norm(&perturbation_between(xs, &it.point), NormOrder::Linf);
                candidate_norms.push(n);
                if round_best.as_ref().is_none_or(|b| n < b.1) {
                    round_best = Some((it.point.clone(), n));
                }
            }
            let active = (it.gap as f64) > -cfg.confidence;
            for i in 0..w.len() {
                let t = w[i].tanh();
                let g = if raw[i].abs() > tau {
                    raw[i].signum()
                } else if active {
                    c * it.grad[i] as f64
                } else {
                    0.0
                };
                grad_w[i] = g * (1.0 - t * t);
            }
            last = it.point;
            adam.step(&mut w, &grad_w, cfg.step_fraction * tau);
        }
        match round_best {
            Some((point, n)) if prob.verified(&point)? => {
                best = Some((point, c, tau));
                tau = tau.min(n) * cfg.tau_shrink;
            }
            _ => {
                c *= 2.0;
                if c > cfg.max_c {
                    break;
                }
            }
        }
    }
    let (point, success, c, tau_final) = match best {
        Some((p, c, t)) => (p, true, c, Some(t)),
        None => (last, false, f64::NAN, None),
    };
    let (adversarial, norm) = finish(x, point, NormOrder::Linf)?;
    Ok(CwOutcome {
        adversarial,
        success,
        norm,
        candidate_norms,
        c,
        tau_final,
        support_trace: Vec::new(),
        gradient_evals: prob.evals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::testing::LinearTarget;
    use crate::rng::rng_from_seed;
    use crate::signal::SAMPLE_RATE;
    use rand::Rng as _;

    fn setup(n: usize, seed: u64) -> (LinearTarget, Waveform) {
        let mut rng = rng_from_seed(seed);
        let weights = (0..4).map(|_| (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
        let x = (0..n).map(|_| rng.random_range(-0.3f32..0.3)).collect();
        (LinearTarget { weights }, Waveform::new(x, SAMPLE_RATE).unwrap())
    }

    fn true_class(m: &LinearTarget, x: &Waveform) -> usize {
        m.predict(x.samples()).unwrap()
    }

    #[test]
    fn cw_l2_flips_and_returns_minimal_candidate() {
        for seed in 0..4 {
            let (m, x) = setup(64, seed);
            let y = true_class(&m, &x);
            let cfg = CwL2Config { iterations: 60, learning_rate: 0.01, ..Default::default() };
            let out = cw_l2(&m, &x, y, &cfg).unwrap();
            assert!(out.success, "seed {seed}");
            assert_ne!(m.predict(out.adversarial.samples()).unwrap(), y);
            let min = out.candidate_norms.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(out.norm, min);
            assert!(out.adversarial.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn cw_l0_support_strictly_shrinks() {
        let (m, x) = setup(48, 7);
        let y = true_class(&m, &x);
        let cfg = CwL0Config {
            l2: CwL2Config { iterations: 40, learning_rate: 0.02, binary_search_steps: 3, ..Default::default() },
            remove_fraction: 0.3,
            max_outer: 6,
        };
        let out = cw_l0(&m, &x, y, &cfg).unwrap();
        assert!(out.success);
        assert!(out.support_trace.windows(2).all(|w| w[1] < w[0]), "{:?}", out.support_trace);
        assert_ne!(m.predict(out.adversarial.samples()).unwrap(), y);
        let d = perturbation_between(x.samples(), out.adversarial.samples());
        assert_eq!(out.norm, l0_count(&d, 0.0) as f64);
        assert!(out.norm < 48.0);
    }

    #[test]
    fn cw_linf_respects_final_tau() {
        for seed in 0..4 {
            let (m, x) = setup(64, 20 + seed);
            let y = true_class(&m, &x);
            let cfg = CwLinfConfig { initial_tau: 0.3, iterations: 20, ..Default::default() };
            let out = cw_linf(&m, &x, y, &cfg).unwrap();
            assert!(out.success, "seed {seed}");
            let tau = out.tau_final.unwrap();
            assert!(out.norm <= tau + 1e-6);
            assert!(tau < 0.3);
            assert_ne!(m.predict(out.adversarial.samples()).unwrap(), y);
        }
    }

    #[test]
    fn hopeless_search_reports_failure() {
        // Class 0 dominates for every input.
        let m = LinearTarget { weights: vec![vec![0.0; 8], vec![0.0; 8]] };
        let x = Waveform::new(vec![0.1; 8], SAMPLE_RATE).unwrap();
        let cfg = CwL2Config { iterations: 3, binary_search_steps: 2, ..Default::default() };
        let out = cw_l2(&m, &x, 0, &cfg).unwrap();
        assert!(!out.success);
        assert!(out.candidate_norms.is_empty());
    }

    #[test]
    fn untouched_samples_are_exact() {
        let (m, x) = setup(16, 3);
        let prob = Problem::new(&m, &x, 0).unwrap();
        assert_eq!(prob.point(&prob.w0, None), x.samples());
    }
}
