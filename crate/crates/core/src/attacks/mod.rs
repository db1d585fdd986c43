//! Adversarial attacks on the speaker classifier and the attack database.
//!
//! Every attack maximises the classification loss of the true speaker within
//! an allowable set: FGSM and iterative FGSM (L∞), PGD with L1, L2 and L∞
//! threat models, and Carlini-Wagner under L0, L2 and L∞.

mod cw;
mod dataset;
mod gradient;
mod params;

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

pub use cw::{cw_l0, cw_l2, cw_linf, CwL0Config, CwL2Config, CwLinfConfig, CwOutcome};
pub use dataset::{
    generate_attack_dataset, load_attack_database, write_attack_database, AttackDatasetReport, AttackRecord,
    ClassReport, DatasetConfig, IndexRow, INDEX_FILE,
};
pub use gradient::{fgsm, pgd, pgd_observed, snap_linf_epsilon, PgdConfig};
pub use params::{sample_attack_params, AttackRanges, HyperParams, IntSpan, Span};

use crate::error::{invalid, Error, Result};
use crate::nn::aam::argmax;
use crate::signal::NormOrder;
use crate::victim::SpeakerClassifier;

/// Attack algorithm family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    Fgsm,
    IterFgsm,
    Pgd,
    Cw,
}

/// The nine classes: benign plus each (algorithm, threat model) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackLabel {
    Benign,
    Fgsm,
    IterFgsm,
    PgdL1,
    PgdL2,
    PgdLinf,
    CwL0,
    CwL2,
    CwLinf,
}

impl AttackLabel {
    pub const ALL: [AttackLabel; 9] = [
        AttackLabel::Benign,
        AttackLabel::Fgsm,
        AttackLabel::IterFgsm,
        AttackLabel::PgdL1,
        AttackLabel::PgdL2,
        AttackLabel::PgdLinf,
        AttackLabel::CwL0,
        AttackLabel::CwL2,
        AttackLabel::CwLinf,
    ];

    /// Every class except benign.
    pub const ATTACKS: [AttackLabel; 8] = [
        AttackLabel::Fgsm,
        AttackLabel::IterFgsm,
        AttackLabel::PgdL1,
        AttackLabel::PgdL2,
        AttackLabel::PgdLinf,
        AttackLabel::CwL0,
        AttackLabel::CwL2,
        AttackLabel::CwLinf,
    ];

    pub fn algorithm(self) -> Option<Algorithm> {
        use AttackLabel::*;
        match self {
            Benign => None,
            Fgsm => Some(Algorithm::Fgsm),
            IterFgsm => Some(Algorithm::IterFgsm),
            PgdL1 | PgdL2 | PgdLinf => Some(Algorithm::Pgd),
            CwL0 | CwL2 | CwLinf => Some(Algorithm::Cw),
        }
    }

    pub fn norm(self) -> Option<NormOrder> {
        use AttackLabel::*;
        match self {
            Benign => None,
            Fgsm | IterFgsm | PgdLinf | CwLinf => Some(NormOrder::Linf),
            PgdL1 => Some(NormOrder::L1),
            PgdL2 | CwL2 => Some(NormOrder::L2),
            CwL0 => Some(NormOrder::L0),
        }
    }

    pub fn from_parts(algorithm: Algorithm, p: NormOrder) -> Result<Self> {
        use AttackLabel::*;
        match (algorithm, p) {
            (Algorithm::Fgsm, NormOrder::Linf) => Ok(Fgsm),
            (Algorithm::IterFgsm, NormOrder::Linf) => Ok(IterFgsm),
            (Algorithm::Pgd, NormOrder::L1) => Ok(PgdL1),
            (Algorithm::Pgd, NormOrder::L2) => Ok(PgdL2),
            (Algorithm::Pgd, NormOrder::Linf) => Ok(PgdLinf),
            (Algorithm::Cw, NormOrder::L0) => Ok(CwL0),
            (Algorithm::Cw, NormOrder::L2) => Ok(CwL2),
            (Algorithm::Cw, NormOrder::Linf) => Ok(CwLinf),
            (a, p) => Err(invalid(format!("no attack class for {a:?} with L{p}"))),
        }
    }

    pub fn is_benign(self) -> bool {
        self == AttackLabel::Benign
    }

    pub fn is_cw(self) -> bool {
        self.algorithm() == Some(Algorithm::Cw)
    }

    pub fn name(self) -> &'static str {
        use AttackLabel::*;
        match self {
            Benign => "Benign",
            Fgsm => "FGSM",
            IterFgsm => "Iter-FGSM",
            PgdL1 => "PGD-L1",
            PgdL2 => "PGD-L2",
            PgdLinf => "PGD-Linf",
            CwL0 => "CW-L0",
            CwL2 => "CW-L2",
            CwLinf => "CW-Linf",
        }
    }

    /// Lower-case identifier used in file names and JSON.
    pub fn slug(self) -> &'static str {
        use AttackLabel::*;
        match self {
            Benign => "benign",
            Fgsm => "fgsm",
            IterFgsm => "iter-fgsm",
            PgdL1 => "pgd-l1",
            PgdL2 => "pgd-l2",
            PgdLinf => "pgd-linf",
            CwL0 => "cw-l0",
            CwL2 => "cw-l2",
            CwLinf => "cw-linf",
        }
    }
}

impl fmt::Display for AttackLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase().replace('∞', "inf").replace('_', "-");
        AttackLabel::ALL
            .into_iter()
            .find(|l| l.slug() == k || l.name().to_ascii_lowercase() == k)
            .ok_or_else(|| invalid(format!("unknown attack class {s:?}")))
    }
}

impl Serialize for AttackLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.slug())
    }
}

impl<'de> Deserialize<'de> for AttackLabel {
    fn deserialize<De: serde::Deserializer<'de>>(d: De) -> std::result::Result<Self, De::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// What an attack needs from the model: logits and input gradients of the
/// two objectives the algorithms optimise. Implemented by the speaker
/// classifier and by analytic test doubles.
pub trait AttackTarget: Sync {
    fn num_classes(&self) -> usize;

    fn logits(&self, x: &[f32]) -> Result<Vec<f32>>;

    /// Cross-entropy at `y` and its input gradient.
    fn loss_and_gradient(&self, x: &[f32], y: usize) -> Result<(f32, Vec<f32>)>;

    /// Logit gap `Z_y - max_{i != y} Z_i` and its input gradient. Negative
    /// means some other class strictly outscores `y`.
    fn logit_gap_and_gradient(&self, x: &[f32], y: usize) -> Result<(f32, Vec<f32>)>;

    fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

impl AttackTarget for SpeakerClassifier {
    fn num_classes(&self) -> usize {
        self.num_speakers()
    }

    fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        SpeakerClassifier::logits(self, x)
    }

    fn loss_and_gradient(&self, x: &[f32], y: usize) -> Result<(f32, Vec<f32>)> {
        let (mut l, mut g) = self.loss_and_gradient_batch(&[x], &[y])?;
        Ok((l.remove(0), g.remove(0)))
    }

    fn logit_gap_and_gradient(&self, x: &[f32], y: usize) -> Result<(f32, Vec<f32>)> {
        let k = self.num_speakers();
        if y >= k {
            return Err(invalid(format!("speaker label {y} out of range")));
        }
        let mut onehot = vec![0f32; k];
        onehot[y] = 1.0;
        let (mut v, mut g) = self.objective_and_gradient(&[x], |logits| {
            let mask = Tensor::from_vec(onehot, (1, k), logits.device())?;
            let target = logits.broadcast_mul(&mask)?.sum_keepdim(D::Minus1)?;
            let others = (logits.broadcast_sub(&(mask * 1e9)?))?.max_keepdim(D::Minus1)?;
            Ok((target - others)?.squeeze(1)?)
        })?;
        Ok((v.remove(0), g.remove(0)))
    }
}

#[cfg(test)]
pub(crate) mod testing {
    //! Linear softmax classifier with closed-form gradients.
    use super::*;

    pub struct LinearTarget {
        pub weights: Vec<Vec<f32>>,
    }

    impl LinearTarget {
        fn softmax(z: &[f32]) -> Vec<f64> {
            let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        }
    }

    impl AttackTarget for LinearTarget {
        fn num_classes(&self) -> usize {
            self.weights.len()
        }

        fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
            Ok(self.weights.iter().map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
        }

        fn loss_and_gradient(&self, x: &[f32], y: usize) -> Result<(f32, Vec<f32>)> {
            let z = self.logits(x)?;
            let p = Self::softmax(&z);
            let mut g = vec![0f32; x.len()];
            for (k, w) in self.weights.iter().enumerate() {
                let coef = p[k] - if k == y { 1.0 } else { 0.0 };
                for (gi, wi) in g.iter_mut().zip(w) {
                    *gi += (coef * *wi as f64) as f32;
                }
            }
            Ok(((-p[y].ln()) as f32, g))
        }

        fn logit_gap_and_gradient(&self, x: &[f32], y: usize) -> Result<(f32, Vec<f32>)> {
            let z = self.logits(x)?;
            let j = (0..z.len()).filter(|&i| i != y).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            let gap = z[y] - z[j];
            let g = self.weights[y].iter().zip(&self.weights[j]).map(|(a, b)| a - b).collect();
            Ok((gap, g))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip_and_decompose() {
        for l in AttackLabel::ALL {
            assert_eq!(l.slug().parse::<AttackLabel>().unwrap(), l);
            assert_eq!(l.name().parse::<AttackLabel>().unwrap(), l);
            if let (Some(a), Some(p)) = (l.algorithm(), l.norm()) {
                assert_eq!(AttackLabel::from_parts(a, p).unwrap(), l);
            }
            let j = serde_json::to_string(&l).unwrap();
            assert_eq!(serde_json::from_str::<AttackLabel>(&j).unwrap(), l);
        }
        assert!(AttackLabel::from_parts(Algorithm::Fgsm, NormOrder::L2).is_err());
        assert!("pgd-l0".parse::<AttackLabel>().is_err());
    }
}
