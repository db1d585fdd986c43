//! Waveforms, Lp norms, Lp-ball projections, SNR and energy VAD.
//!
//! Signals are stored as `f32`; every reduction accumulates in `f64`.
//! Projections compute in `f64` and round each component toward zero on the
//! way back to `f32`, so the rounded result never leaves the ball.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default sample rate of every corpus and attack database.
pub const SAMPLE_RATE: u32 = 16_000;

/// Relative slack under which a vector already counts as inside the ball.
const FEASIBLE_SLACK: f64 = 1e-10;

/// A mono audio signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Same sample rate, new samples.
    pub fn with_samples(&self, samples: Vec<f32>) -> Result<Self> {
        Self::new(samples, self.sample_rate)
    }

    pub fn scaled(&self, k: f32) -> Result<Self> {
        self.with_samples(self.samples.iter().map(|s| s * k).collect())
    }

    /// Per-sample difference `self - other`.
    pub fn sub(&self, other: &Waveform) -> Result<Waveform> {
        check_compatible(self, other)?;
        Ok(Waveform {
            samples: perturbation_between(&other.samples, &self.samples),
            sample_rate: self.sample_rate,
        })
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }
}

impl std::ops::Deref for Waveform {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.samples
    }
}

fn check_compatible(a: &Waveform, b: &Waveform) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    if a.sample_rate != b.sample_rate {
        return Err(Error::SampleRate { expected: a.sample_rate, found: b.sample_rate });
    }
    Ok(())
}

/// Norm order of a threat model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormOrder {
    L0,
    L1,
    L2,
    Linf,
}

impl NormOrder {
    pub const ALL: [NormOrder; 4] = [NormOrder::L0, NormOrder::L1, NormOrder::L2, NormOrder::Linf];

    /// Parses a numeric order; only 0, 1, 2 and +inf are supported.
    pub fn from_f64(p: f64) -> Result<Self> {
        match p {
            p if p == 0.0 => Ok(NormOrder::L0),
            p if p == 1.0 => Ok(NormOrder::L1),
            p if p == 2.0 => Ok(NormOrder::L2),
            p if p == f64::INFINITY => Ok(NormOrder::Linf),
            p => Err(Error::UnsupportedNorm(format!("p = {p} (supported: 0, 1, 2, inf)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormOrder::L0 => "0",
            NormOrder::L1 => "1",
            NormOrder::L2 => "2",
            NormOrder::Linf => "inf",
        }
    }

    /// Short suffix used in attack class names.
    pub fn suffix(self) -> &'static str {
        match self {
            NormOrder::L0 => "L0",
            NormOrder::L1 => "L1",
            NormOrder::L2 => "L2",
            NormOrder::Linf => "Linf",
        }
    }
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "0" | "l0" => Ok(NormOrder::L0),
            "1" | "l1" => Ok(NormOrder::L1),
            "2" | "l2" => Ok(NormOrder::L2),
            "inf" | "linf" | "∞" => Ok(NormOrder::Linf),
            other => Err(Error::UnsupportedNorm(format!("p = {other:?} (supported: 0, 1, 2, inf)"))),
        }
    }
}

impl Serialize for NormOrder {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for NormOrder {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Norm order and bound of the allowable perturbation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThreatModel {
    pub p: NormOrder,
    pub epsilon: f64,
}

impl ThreatModel {
    pub fn new(p: NormOrder, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(invalid(format!("epsilon must be positive and finite, got {epsilon}")));
        }
        Ok(Self { p, epsilon })
    }

    /// Whether `v` satisfies the bound up to relative slack `rel`.
    pub fn contains(&self, v: &[f32], rel: f64) -> bool {
        lp_norm(v, self.p) <= self.epsilon * (1.0 + rel)
    }
}

/// Lp norm of a sample sequence; the L0 count uses a zero tolerance.
pub fn lp_norm(v: &[f32], p: NormOrder) -> f64 {
    match p {
        NormOrder::L0 => l0_count(v, 0.0) as f64,
        NormOrder::L1 => v.iter().map(|&x| (x as f64).abs()).sum(),
        NormOrder::L2 => v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt(),
        NormOrder::Linf => v.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs())),
    }
}

/// Number of samples whose magnitude exceeds `tol`.
pub fn l0_count(v: &[f32], tol: f64) -> usize {
    v.iter().filter(|&&x| (x as f64).abs() > tol).count()
}

/// Lp norm with a numeric order, rejecting anything but 0, 1, 2 and inf.
pub fn lp_norm_numeric(v: &[f32], p: f64) -> Result<f64> {
    Ok(lp_norm(v, NormOrder::from_f64(p)?))
}

/// Next representable `f32` from `a` in the direction of `b`.
pub(crate) fn step_toward(a: f32, b: f32) -> f32 {
    if a == b {
        return a;
    }
    if a == 0.0 {
        let tiny = f32::from_bits(1);
        return if b > 0.0 { tiny } else { -tiny };
    }
    let bits = a.to_bits();
    // Moving away from zero increments the magnitude bits, toward zero decrements.
    if (b > a) == (a > 0.0) {
        f32::from_bits(bits + 1)
    } else {
        f32::from_bits(bits - 1)
    }
}

/// Rounds to `f32` with magnitude no larger than `x`.
pub(crate) fn round_toward_zero(x: f64) -> f32 {
    let f = x as f32;
    if (f as f64).abs() > x.abs() {
        step_toward(f, 0.0)
    } else {
        f
    }
}

/// Euclidean projection onto `{u : ||u||_p <= epsilon}` for p in {1, 2, inf}.
///
/// Feasible inputs are returned unchanged.
pub fn project_lp_ball(v: &[f32], tm: &ThreatModel) -> Result<Vec<f32>> {
    if tm.p == NormOrder::L0 {
        return Err(Error::UnsupportedNorm(
            "L0 has no projection; L0 budgets are enforced by support control inside the attack".into(),
        ));
    }
    if tm.contains(v, FEASIBLE_SLACK) {
        return Ok(v.to_vec());
    }
    let eps = tm.epsilon;
    Ok(match tm.p {
        NormOrder::Linf => {
            let bound = round_toward_zero(eps);
            v.iter().map(|&x| x.clamp(-bound, bound)).collect()
        }
        NormOrder::L2 => {
            let scale = eps / lp_norm(v, NormOrder::L2);
            v.iter().map(|&x| round_toward_zero(x as f64 * scale)).collect()
        }
        NormOrder::L1 => {
            let theta = l1_threshold(v, eps);
            v.iter()
                .map(|&x| {
                    let m = ((x as f64).abs() - theta).max(0.0);
                    round_toward_zero(m.copysign(x as f64))
                })
                .collect()
        }
        NormOrder::L0 => unreachable!(),
    })
}

/// Soft threshold that maps `|v|` onto the simplex of radius `eps`.
/// Sort-based, O(n log n).
fn l1_threshold(v: &[f32], eps: f64) -> f64 {
    let mut mags: Vec<f64> = v.iter().map(|&x| (x as f64).abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - eps) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    theta.max(0.0)
}

/// `Waveform` wrapper around [`project_lp_ball`].
pub fn project_waveform(v: &Waveform, tm: &ThreatModel) -> Result<Waveform> {
    v.with_samples(project_lp_ball(v.samples(), tm)?)
}

/// Signal-to-adversarial-noise ratio in dB.
pub fn snr_db(x: &[f32], delta: &[f32]) -> Result<f64> {
    if x.len() != delta.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: delta.len() });
    }
    let ex: f64 = x.iter().map(|&s| (s as f64) * (s as f64)).sum();
    let ed: f64 = delta.iter().map(|&s| (s as f64) * (s as f64)).sum();
    if ed == 0.0 {
        return Err(invalid("perturbation has zero energy; SNR undefined"));
    }
    Ok(10.0 * (ex / ed).log10())
}

/// Applies `delta` to `x` with amplitude clipping to [-1, 1].
///
/// Each output sample satisfies `|fl(x' - x)| <= |delta|`, so any Lp bound
/// met by `delta` is also met by the realised perturbation.
pub fn apply_perturbation(x: &[f32], delta: &[f32]) -> Result<Vec<f32>> {
    if x.len() != delta.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: delta.len() });
    }
    Ok(x.iter()
        .zip(delta)
        .map(|(&xi, &di)| {
            let mut out = (xi + di).clamp(-1.0, 1.0);
            while (out - xi).abs() > di.abs() {
                out = step_toward(out, xi);
            }
            out
        })
        .collect())
}

/// Realised perturbation `x' - x`, computed per sample in `f32`.
pub fn perturbation_between(x: &[f32], x_adv: &[f32]) -> Vec<f32> {
    x_adv.iter().zip(x).map(|(a, b)| a - b).collect()
}

/// Default VAD frame length in milliseconds.
pub const VAD_FRAME_MS: f64 = 25.0;
/// Default VAD threshold relative to the loudest frame, in dB.
pub const VAD_THRESHOLD_DB: f64 = -40.0;

/// Frame boundaries used by [`energy_vad`]; the trailing partial frame is kept.
pub fn vad_frames(len: usize, frame_len: usize) -> Vec<(usize, usize)> {
    (0..len).step_by(frame_len).map(|s| (s, (s + frame_len).min(len))).collect()
}

/// Indices of the frames kept by the energy VAD.
pub fn vad_keep_mask(x: &[f32], frame_len: usize, threshold_db: f64) -> Vec<bool> {
    let frames = vad_frames(x.len(), frame_len);
    let log_e: Vec<f64> = frames
        .iter()
        .map(|&(s, e)| {
            let p = x[s..e].iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / (e - s) as f64;
            10.0 * (p + 1e-20).log10()
        })
        .collect();
    let max = log_e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    log_e.iter().map(|&le| le > max + threshold_db).collect()
}

fn vad_frame_len(sample_rate: u32, frame_ms: f64) -> Result<usize> {
    if !(frame_ms > 0.0) {
        return Err(invalid("frame_ms must be positive"));
    }
    let n = (frame_ms * sample_rate as f64 / 1000.0).round() as usize;
    if n == 0 {
        return Err(invalid(format!("frame of {frame_ms} ms is shorter than one sample")));
    }
    Ok(n)
}

/// Energy-based voice activity detection.
///
/// Splits `x` into non-overlapping frames of `frame_ms` and keeps those whose
/// log mean power exceeds the loudest frame's by more than `threshold_db`
/// (a negative number). Returns the kept frames concatenated.
pub fn energy_vad(x: &Waveform, frame_ms: f64, threshold_db: f64) -> Result<Waveform> {
    let keep = energy_vad_mask(x, frame_ms, threshold_db)?;
    x.with_samples(x.iter().zip(&keep).filter(|(_, &k)| k).map(|(&s, _)| s).collect())
}

/// Per-sample keep mask of [`energy_vad`]. Applying the same mask to a
/// benign/adversarial pair keeps them aligned.
pub fn energy_vad_mask(x: &Waveform, frame_ms: f64, threshold_db: f64) -> Result<Vec<bool>> {
    if x.is_empty() {
        return Err(invalid("VAD on empty waveform"));
    }
    let frame_len = vad_frame_len(x.sample_rate(), frame_ms)?;
    let frames = vad_frames(x.len(), frame_len);
    let keep = vad_keep_mask(x, frame_len, threshold_db);
    let mut mask = vec![false; x.len()];
    for (&(s, e), &k) in frames.iter().zip(&keep) {
        if k {
            mask[s..e].iter_mut().for_each(|m| *m = true);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wf(v: &[f32]) -> Waveform {
        Waveform::new(v.to_vec(), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn norms_of_small_vectors() {
        assert_eq!(lp_norm(&[3.0, -4.0], NormOrder::L2), 5.0);
        assert_eq!(lp_norm(&[3.0, -4.0], NormOrder::Linf), 4.0);
        assert_eq!(lp_norm(&[0.5, 0.0, -0.25], NormOrder::L1), 0.75);
        assert_eq!(lp_norm(&[0.5, 0.0, -0.25], NormOrder::L0), 2.0);
        assert_eq!(l0_count(&[0.5, 1e-4, -0.25], 1e-3), 2);
    }

    #[test]
    fn unsupported_order_is_rejected() {
        let err = lp_norm_numeric(&[1.0], 3.0).unwrap_err();
        assert!(err.to_string().contains("p = 3"), "{err}");
        assert!("1.5".parse::<NormOrder>().is_err());
        assert_eq!(lp_norm_numeric(&[1.0, -2.0], f64::INFINITY).unwrap(), 2.0);
    }

    #[test]
    fn waveform_rejects_bad_values() {
        assert!(Waveform::new(vec![0.0, f32::NAN], SAMPLE_RATE).is_err());
        assert!(Waveform::new(vec![0.0, f32::INFINITY], SAMPLE_RATE).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn threat_model_needs_positive_epsilon() {
        assert!(ThreatModel::new(NormOrder::L2, 0.0).is_err());
        assert!(ThreatModel::new(NormOrder::L2, -1.0).is_err());
        assert!(ThreatModel::new(NormOrder::L2, f64::NAN).is_err());
    }

    #[test]
    fn linf_projection_clamps() {
        let tm = ThreatModel::new(NormOrder::Linf, 2.0).unwrap();
        assert_eq!(project_lp_ball(&[3.0, -5.0], &tm).unwrap(), vec![2.0, -2.0]);
    }

    #[test]
    fn feasible_input_is_returned_unchanged() {
        let tm = ThreatModel::new(NormOrder::L2, 5.0).unwrap();
        assert_eq!(project_lp_ball(&[3.0, 4.0], &tm).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn l1_projection_small_case() {
        // Threshold 0.2 gives [0.5, 0, 0]; this case is also checked against the QP oracle in tests/.
        let tm = ThreatModel::new(NormOrder::L1, 0.5).unwrap();
        let out = project_lp_ball(&[0.7, 0.1, 0.2], &tm).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-6 && out[1] == 0.0 && out[2].abs() < 1e-6, "{out:?}");
    }

    #[test]
    fn l0_projection_is_rejected() {
        let tm = ThreatModel::new(NormOrder::L0, 3.0).unwrap();
        assert!(matches!(project_lp_ball(&[1.0; 8], &tm), Err(Error::UnsupportedNorm(_))));
    }

    #[test]
    fn snr_cases() {
        let x = [0.3f32, -0.2, 0.5, 0.1];
        assert!(snr_db(&x, &x).unwrap().abs() < 1e-12);
        let d: Vec<f32> = x.iter().map(|v| v * 0.1).collect();
        assert!((snr_db(&x, &d).unwrap() - 20.0).abs() < 1e-5);
        assert!(snr_db(&x, &[0.0; 4]).is_err());
        assert!(matches!(snr_db(&x, &[0.1; 3]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn vad_keeps_all_silence() {
        let x = Waveform::zeros(16_000, SAMPLE_RATE);
        let out = energy_vad(&x, 25.0, -40.0).unwrap();
        assert_eq!(out.len(), x.len());
    }

    #[test]
    fn vad_drops_silent_half() {
        let n = 16_000;
        let mut s = vec![0.0f32; n];
        for (i, v) in s.iter_mut().enumerate().skip(n / 2) {
            *v = (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 16_000.0).sin();
        }
        let x = wf(&s);
        let out = energy_vad(&x, 25.0, -40.0).unwrap();
        assert_eq!(out.samples(), &s[n / 2..]);
    }

    #[test]
    fn vad_rejects_empty_and_zero_frames() {
        assert!(energy_vad(&Waveform::zeros(0, SAMPLE_RATE), 25.0, -40.0).is_err());
        assert!(energy_vad(&wf(&[0.1; 10]), 0.0, -40.0).is_err());
        assert!(energy_vad(&wf(&[0.1; 10]), 0.01, -40.0).is_err());
    }

    #[test]
    fn perturbation_application_respects_magnitude() {
        let x = [0.999f32, -0.5, 0.25, 0.0];
        let d = [0.01f32, -0.0001, 1e-4, -3e-5];
        let xp = apply_perturbation(&x, &d).unwrap();
        assert_eq!(xp[0], 1.0);
        for i in 0..4 {
            let r = xp[i] - x[i];
            assert!(r.abs() <= d[i].abs());
            assert!(r == 0.0 || r.signum() == d[i].signum());
        }
    }

    #[test]
    fn step_toward_moves_one_ulp() {
        assert!(step_toward(1.0, 0.0) < 1.0);
        assert!(step_toward(-1.0, 0.0) > -1.0);
        assert!(step_toward(0.0, 1.0) > 0.0);
        assert!(step_toward(0.5, 2.0) > 0.5);
        assert!(round_toward_zero(0.1f64).abs() as f64 <= 0.1);
        assert!(round_toward_zero(-0.1f64) as f64 >= -0.1);
    }

    #[test]
    fn norm_order_round_trips_through_json() {
        for p in NormOrder::ALL {
            let s = serde_json::to_string(&p).unwrap();
            assert_eq!(serde_json::from_str::<NormOrder>(&s).unwrap(), p);
        }
    }
}
