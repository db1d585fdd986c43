//! Labelled utterance corpora: a synthetic speaker generator and the on-disk
//! layout (WAV files plus a JSON-Lines manifest).
//!
//! Each synthetic speaker is a fixed bank of resonators with its own pitch
//! range, excited by a jittered pulse train mixed with noise. Utterances are
//! a sequence of voiced segments separated by short pauses.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::signal::{Waveform, SAMPLE_RATE};
use crate::wav::{quantized, read_wav, write_wav, WavEncoding};

/// An utterance with its speaker label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledUtterance {
    pub id: String,
    pub audio: Waveform,
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    pub duration_s: f64,
    pub seed: u64,
}

/// One row of `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    /// Relative to the manifest's directory.
    pub path: String,
    pub speaker_id: usize,
    pub duration: f64,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

struct Voice {
    f0: f64,
    formants: Vec<(f64, f64)>,
    noise_mix: f64,
    tilt: f64,
}

fn voice(seed: u64, speaker: usize) -> Voice {
    let mut rng = rng_from_seed(derive_seed(seed, &format!("speaker-{speaker}")));
    let bands = [(250.0, 900.0), (900.0, 2300.0), (2300.0, 3600.0), (3600.0, 5200.0)];
    Voice {
        f0: rng.random_range(85.0..260.0),
        formants: bands
            .iter()
            .map(|&(lo, hi)| (rng.random_range(lo..hi), rng.random_range(60.0..220.0)))
            .collect(),
        noise_mix: rng.random_range(0.05..0.35),
        tilt: rng.random_range(0.0..0.9),
    }
}

fn render(v: &Voice, seed: u64, len: usize) -> Vec<f32> {
    let fs = SAMPLE_RATE as f64;
    let mut rng = rng_from_seed(seed);
    let mut excitation = vec![0.0f64; len];
    let mut envelope = vec![0.0f64; len];

    // Voiced segments of 120-320 ms separated by 30-120 ms pauses.
    let mut pos = (rng.random_range(0.02..0.08) * fs) as usize;
    while pos < len {
        let seg = (rng.random_range(0.12..0.32) * fs) as usize;
        let end = (pos + seg).min(len);
        let ramp = ((end - pos) / 6).max(1);
        for (i, e) in envelope[pos..end].iter_mut().enumerate() {
            let a = (i.min(end - pos - 1 - i) as f64 / ramp as f64).min(1.0);
            *e = a * rng.random_range(0.9..1.0);
        }
        pos = end + (rng.random_range(0.03..0.12) * fs) as usize;
    }

    let vibrato_rate = rng.random_range(3.0..6.0);
    let vibrato = rng.random_range(0.01..0.05);
    let offset = rng.random_range(-0.06..0.06);
    let mut phase = 0.0f64;
    for (n, ex) in excitation.iter_mut().enumerate() {
        let t = n as f64 / fs;
        let f0 = v.f0 * (1.0 + offset + vibrato * (2.0 * std::f64::consts::PI * vibrato_rate * t).sin());
        phase += f0 / fs;
        let pulse = if phase >= 1.0 {
            phase -= 1.0;
            1.0
        } else {
            0.0
        };
        let noise: f64 = StandardNormal.sample(&mut rng);
        *ex = (1.0 - v.noise_mix) * pulse + v.noise_mix * 0.3 * noise;
    }

    // Spectral tilt, then the speaker's resonator cascade.
    let mut prev = 0.0;
    for ex in excitation.iter_mut() {
        let x = *ex;
        *ex = x + v.tilt * prev;
        prev = *ex;
    }
    let mut y = excitation;
    for &(f, bw) in &v.formants {
        let jitter = 1.0 + rng.random_range(-0.03..0.03);
        let r = (-std::f64::consts::PI * bw / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * f * jitter / fs;
        let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
        let gain = 1.0 - r;
        let (mut y1, mut y2) = (0.0, 0.0);
        for s in y.iter_mut() {
            let out = gain * *s + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = out;
            *s = out;
        }
    }
    for (s, e) in y.iter_mut().zip(&envelope) {
        *s *= e;
    }
    let peak = y.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-12);
    let level = rng.random_range(0.25..0.7);
    let floor = 1e-4;
    y.iter()
        .map(|s| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (s / peak * level + floor * n) as f32
        })
        .collect()
}

/// Synthesises the corpus in memory, quantised to the 16-bit grid.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<LabeledUtterance>> {
    if spec.num_speakers < 2 {
        return Err(invalid("synthetic corpus needs at least 2 speakers"));
    }
    if spec.utterances_per_speaker == 0 || !(spec.duration_s > 0.0) {
        return Err(invalid("synthetic corpus needs utterances of positive duration"));
    }
    let len = (spec.duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut out = Vec::with_capacity(spec.num_speakers * spec.utterances_per_speaker);
    for s in 0..spec.num_speakers {
        let v = voice(spec.seed, s);
        for u in 0..spec.utterances_per_speaker {
            let id = format!("spk{s:03}_utt{u:03}");
            let samples = render(&v, derive_seed(spec.seed, &id), len);
            let audio = quantized(&Waveform::new(samples, SAMPLE_RATE)?);
            out.push(LabeledUtterance { id, audio, speaker: s });
        }
    }
    Ok(out)
}

/// Writes `wav/<id>.wav` (16-bit PCM) and `manifest.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, utts: &[LabeledUtterance]) -> Result<PathBuf> {
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| invalid(format!("cannot create {}: {e}", wav_dir.display())))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&manifest)?;
    for u in utts {
        let rel = format!("wav/{}.wav", u.id);
        write_wav(dir.join(&rel), &u.audio, WavEncoding::Pcm16)?;
        let row = ManifestRow { path: rel, speaker_id: u.speaker, duration: u.audio.duration_s() };
        writeln!(f, "{}", serde_json::to_string(&row)?)?;
    }
    Ok(manifest)
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec, dir: &Path) -> Result<Vec<LabeledUtterance>> {
    let utts = synthesize(spec)?;
    write_corpus(dir, &utts)?;
    Ok(utts)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let f = fs::File::open(path)?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line)?);
    }
    Ok(rows)
}

/// Loads every utterance listed in `dir/manifest.jsonl`.
pub fn load_corpus(dir: &Path) -> Result<Vec<LabeledUtterance>> {
    let rows = read_manifest(&dir.join(MANIFEST_FILE))?;
    rows.into_iter()
        .map(|r| {
            let id = Path::new(&r.path)
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| invalid(format!("bad manifest path {}", r.path)))?
                .to_string();
            let audio = read_wav(dir.join(&r.path), SAMPLE_RATE)?;
            Ok(LabeledUtterance { id, audio, speaker: r.speaker_id })
        })
        .collect()
}

/// Deterministic per-speaker split: the last `ceil(n * test_fraction)`
/// utterances of each speaker (in input order) go to the test side.
pub fn split_per_speaker(
    utts: &[LabeledUtterance],
    test_fraction: f64,
) -> Result<(Vec<LabeledUtterance>, Vec<LabeledUtterance>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(invalid(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let speakers = utts.iter().map(|u| u.speaker).max().map_or(0, |m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for s in 0..speakers {
        let mine: Vec<&LabeledUtterance> = utts.iter().filter(|u| u.speaker == s).collect();
        let n_test = (mine.len() as f64 * test_fraction).ceil() as usize;
        if n_test >= mine.len() && !mine.is_empty() && test_fraction > 0.0 {
            return Err(Error::Precondition(format!("speaker {s} has too few utterances to split")));
        }
        let cut = mine.len() - n_test;
        train.extend(mine[..cut].iter().map(|u| (*u).clone()));
        test.extend(mine[cut..].iter().map(|u| (*u).clone()));
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticSpec {
        SyntheticSpec { num_speakers: 3, utterances_per_speaker: 4, duration_s: 0.25, seed: 11 }
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let a = synthesize(&tiny()).unwrap();
        let b = synthesize(&tiny()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 12);
        for u in &a {
            assert_eq!(u.audio.len(), 4000);
            assert!(u.audio.iter().all(|s| s.abs() <= 1.0));
            assert!(u.audio.energy() > 0.0);
        }
        assert_ne!(a[0].audio, a[1].audio);
    }

    #[test]
    fn one_speaker_is_rejected() {
        let spec = SyntheticSpec { num_speakers: 1, ..tiny() };
        assert!(synthesize(&spec).is_err());
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let utts = generate_synthetic_corpus(&tiny(), dir.path()).unwrap();
        let rows = read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!(rows[5].speaker_id, 1);
        assert_eq!(load_corpus(dir.path()).unwrap(), utts);
    }

    #[test]
    fn split_keeps_every_speaker_on_both_sides() {
        let utts = synthesize(&tiny()).unwrap();
        let (train, test) = split_per_speaker(&utts, 0.25).unwrap();
        assert_eq!(train.len(), 9);
        assert_eq!(test.len(), 3);
        for s in 0..3 {
            assert!(train.iter().any(|u| u.speaker == s));
            assert!(test.iter().any(|u| u.speaker == s));
        }
    }
}
