//! Per-class hyperparameter sampling.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::AttackLabel;
use crate::error::{invalid, Result};
use crate::rng::Rng;

/// Inclusive real range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub lo: f64,
    pub hi: f64,
}

impl Span {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn check(&self, name: &str, positive: bool) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi || (positive && !(self.lo > 0.0)) {
            return Err(invalid(format!("empty or invalid range for {name}: [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    fn uniform(&self, rng: &mut Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    fn log_uniform(&self, rng: &mut Rng) -> f64 {
        let (a, b) = (self.lo.ln(), self.hi.ln());
        let v = if a == b { a } else { rng.random_range(a..=b) };
        v.exp().clamp(self.lo, self.hi)
    }
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntSpan {
    pub lo: usize,
    pub hi: usize,
}

impl IntSpan {
    pub const fn new(lo: usize, hi: usize) -> Self {
        Self { lo, hi }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.lo > self.hi || self.lo == 0 {
            return Err(invalid(format!("empty or invalid range for {name}: [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut Rng) -> usize {
        rng.random_range(self.lo..=self.hi)
    }
}

/// Sampling ranges for every attack class.
///
/// L∞ budgets are absolute amplitudes. L2 budgets are given as a target SNR
/// in dB and resolved against the signal energy when the attack runs; L1
/// budgets are the resolved L2 budget times `sqrt(n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackRanges {
    pub linf_epsilon: Span,
    pub snr_db: Span,
    pub steps: IntSpan,
    /// `step_size = factor * epsilon / steps`.
    pub step_factor: Span,
    pub topk_fraction: f64,
    pub cw_confidence: Span,
    pub cw_initial_c: Span,
    pub cw_iterations: IntSpan,
    pub cw_learning_rate: Span,
    pub cw_binary_search_steps: usize,
    pub cw_initial_tau: Span,
}

impl Default for AttackRanges {
    fn default() -> Self {
        Self {
            linf_epsilon: Span::new(1e-4, 1e-2),
            snr_db: Span::new(20.0, 50.0),
            steps: IntSpan::new(5, 50),
            step_factor: Span::new(1.5, 3.0),
            topk_fraction: 0.01,
            cw_confidence: Span::new(0.0, 1.0),
            cw_initial_c: Span::new(0.01, 1.0),
            cw_iterations: IntSpan::new(10, 30),
            cw_learning_rate: Span::new(2e-4, 2e-3),
            cw_binary_search_steps: 5,
            cw_initial_tau: Span::new(5e-3, 5e-2),
        }
    }
}

impl AttackRanges {
    pub fn validate(&self) -> Result<()> {
        self.linf_epsilon.check("linf_epsilon", true)?;
        self.snr_db.check("snr_db", false)?;
        self.steps.check("steps")?;
        self.step_factor.check("step_factor", true)?;
        self.cw_confidence.check("cw_confidence", false)?;
        self.cw_initial_c.check("cw_initial_c", true)?;
        self.cw_iterations.check("cw_iterations")?;
        self.cw_learning_rate.check("cw_learning_rate", true)?;
        self.cw_initial_tau.check("cw_initial_tau", true)?;
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) || self.cw_binary_search_steps == 0 {
            return Err(invalid("topk_fraction must be in (0, 1] and cw_binary_search_steps >= 1"));
        }
        if self.cw_confidence.lo < 0.0 {
            return Err(invalid("cw_confidence must be nonnegative"));
        }
        Ok(())
    }
}

/// Sampled hyperparameters of one attack, by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HyperParams(pub BTreeMap<String, f64>);

impl HyperParams {
    pub fn get(&self, key: &str) -> Result<f64> {
        self.0.get(key).copied().ok_or_else(|| invalid(format!("hyperparameter {key:?} missing")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let v = self.get(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(invalid(format!("hyperparameter {key:?} = {v} is not a count")));
        }
        Ok(v as usize)
    }

    pub fn set(&mut self, key: &str, v: f64) {
        self.0.insert(key.to_string(), v);
    }
}

/// Draws the hyperparameters of one attack of class `label`.
///
/// Keys: `epsilon` (L∞ classes), `target_snr_db` (L1/L2 PGD), `steps` and
/// `step_factor` (iterative gradient attacks), `random_init` (PGD),
/// `topk_fraction` (PGD-L1), and `confidence`, `initial_c`, `iterations`,
/// `learning_rate`, `binary_search_steps` or `initial_tau` (CW).
pub fn sample_attack_params(rng: &mut Rng, label: AttackLabel, ranges: &AttackRanges) -> Result<HyperParams> {
    ranges.validate()?;
    use AttackLabel::*;
    let mut h = HyperParams::default();
    match label {
        Benign => return Err(invalid("benign inputs have no attack hyperparameters")),
        Fgsm => h.set("epsilon", ranges.linf_epsilon.log_uniform(rng)),
        IterFgsm | PgdLinf | PgdL2 | PgdL1 => {
            if matches!(label, PgdL2 | PgdL1) {
                h.set("target_snr_db", ranges.snr_db.uniform(rng));
            } else {
                h.set("epsilon", ranges.linf_epsilon.log_uniform(rng));
            }
            h.set("steps", ranges.steps.sample(rng) as f64);
            h.set("step_factor", ranges.step_factor.uniform(rng));
            h.set("random_init", if label == IterFgsm { 0.0 } else { 1.0 });
            if label == PgdL1 {
                h.set("topk_fraction", ranges.topk_fraction);
            }
        }
        CwL0 | CwL2 | CwLinf => {
            h.set("confidence", ranges.cw_confidence.uniform(rng));
            h.set("initial_c", ranges.cw_initial_c.log_uniform(rng));
            h.set("iterations", ranges.cw_iterations.sample(rng) as f64);
            if label == CwLinf {
                h.set("initial_tau", ranges.cw_initial_tau.log_uniform(rng));
            } else {
                h.set("learning_rate", ranges.cw_learning_rate.log_uniform(rng));
                h.set("binary_search_steps", ranges.cw_binary_search_steps as f64);
            }
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn same_seed_same_map() {
        for l in AttackLabel::ATTACKS {
            let a = sample_attack_params(&mut rng_from_seed(3), l, &AttackRanges::default()).unwrap();
            let b = sample_attack_params(&mut rng_from_seed(3), l, &AttackRanges::default()).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn samples_stay_in_bounds() {
        let r = AttackRanges::default();
        let mut rng = rng_from_seed(11);
        for _ in 0..1000 {
            let h = sample_attack_params(&mut rng, AttackLabel::PgdLinf, &r).unwrap();
            let e = h.get("epsilon").unwrap();
            assert!((1e-4..=1e-2).contains(&e));
            let s = h.get_usize("steps").unwrap();
            assert!((5..=50).contains(&s));
        }
    }

    #[test]
    fn log_epsilon_is_uniform() {
        // One-sample Kolmogorov-Smirnov statistic against U(-4, -2).
        let mut rng = rng_from_seed(2024);
        let r = AttackRanges::default();
        let mut v: Vec<f64> = (0..1000)
            .map(|_| sample_attack_params(&mut rng, AttackLabel::PgdLinf, &r).unwrap().get("epsilon").unwrap().log10())
            .collect();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        let d = v
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = (x + 4.0) / 2.0;
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 0.06, "KS statistic {d}");
    }

    #[test]
    fn empty_range_is_rejected() {
        let r = AttackRanges { steps: IntSpan::new(10, 5), ..Default::default() };
        assert!(sample_attack_params(&mut rng_from_seed(0), AttackLabel::PgdL2, &r).is_err());
        let r = AttackRanges { linf_epsilon: Span::new(0.02, 0.01), ..Default::default() };
        assert!(sample_attack_params(&mut rng_from_seed(0), AttackLabel::Fgsm, &r).is_err());
    }
}
