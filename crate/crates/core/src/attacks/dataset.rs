//! Success-filtered attack databases and their on-disk index.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cw::{cw_l0, cw_l2, cw_linf, CwL0Config, CwL2Config, CwLinfConfig};
use super::gradient::{fgsm, pgd, snap_linf_epsilon, PgdConfig};
use super::params::{sample_attack_params, AttackRanges, HyperParams};
use super::{AttackLabel, AttackTarget};
use crate::corpus::LabeledUtterance;
use crate::error::{invalid, Error, Result};
use crate::rng::rng_for;
use crate::signal::{lp_norm, perturbation_between, snr_db, NormOrder, ThreatModel, Waveform};
use crate::wav::{read_wav, write_wav, WavEncoding};

pub const INDEX_FILE: &str = "index.jsonl";

/// One adversarial example with its benign source.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord {
    pub record_id: String,
    pub benign_ref: String,
    pub benign: Waveform,
    pub adversarial: Waveform,
    pub label: AttackLabel,
    /// For CW classes the bound is the achieved norm (`tau_final` for L∞).
    pub threat: ThreatModel,
    pub hyperparams: HyperParams,
    pub success: bool,
    pub y: usize,
    pub y_pred: usize,
    pub snr_db: f64,
}

impl AttackRecord {
    /// `x' - x`.
    pub fn perturbation(&self) -> Waveform {
        let d = perturbation_between(self.benign.samples(), self.adversarial.samples());
        Waveform::new(d, self.adversarial.sample_rate()).expect("difference of finite signals is finite")
    }

    /// Checks reconstruction and, for p in {1, 2, inf}, the norm bound.
    pub fn check_invariants(&self) -> Result<()> {
        let d = self.perturbation();
        for ((&x, &xa), &di) in self.benign.iter().zip(self.adversarial.iter()).zip(d.iter()) {
            if ((x as f64 + di as f64) - xa as f64).abs() > 1e-7 {
                return Err(invalid(format!("{}: x + delta != x'", self.record_id)));
            }
        }
        if self.threat.p != NormOrder::L0 && !self.threat.contains(d.samples(), 1e-6) {
            return Err(invalid(format!(
                "{}: ||delta||_{} = {} exceeds {}",
                self.record_id,
                self.threat.p,
                lp_norm(d.samples(), self.threat.p),
                self.threat.epsilon
            )));
        }
        if self.success != (self.y_pred != self.y) {
            return Err(invalid(format!("{}: success flag disagrees with labels", self.record_id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: Vec<AttackLabel>,
    pub per_class_fraction: f64,
    pub ranges: AttackRanges,
    /// CW-L0 support-freezing settings; the inner L2 solve takes its
    /// sampled hyperparameters from `ranges`.
    pub cw_l0_remove_fraction: f64,
    pub cw_l0_max_outer: usize,
    pub cw_l0_binary_search_steps: usize,
    pub cw_linf_max_outer: usize,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(classes: Vec<AttackLabel>, per_class_fraction: f64, seed: u64) -> Self {
        let l0 = CwL0Config::default();
        Self {
            classes,
            per_class_fraction,
            ranges: AttackRanges::default(),
            cw_l0_remove_fraction: l0.remove_fraction,
            cw_l0_max_outer: l0.max_outer,
            cw_l0_binary_search_steps: l0.l2.binary_search_steps,
            cw_linf_max_outer: CwLinfConfig::default().max_outer,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: AttackLabel,
    pub attempted: usize,
    pub succeeded: usize,
    pub mean_snr_db: Option<f64>,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackDatasetReport {
    pub classes: Vec<ClassReport>,
    pub total_records: usize,
}

/// Adversarial example and the threat model it satisfies, before success filtering.
fn run_attack<T: AttackTarget + ?Sized>(
    model: &T,
    label: AttackLabel,
    x: &Waveform,
    y: usize,
    h: &mut HyperParams,
    cfg: &DatasetConfig,
    rng: &mut crate::rng::Rng,
) -> Result<Option<(Waveform, ThreatModel)>> {
    use AttackLabel::*;
    let iterative = |h: &mut HyperParams, p: NormOrder, eps: f64| -> Result<PgdConfig> {
        let steps = h.get_usize("steps")?;
        let step_size = h.get("step_factor")? * eps / steps as f64;
        h.set("epsilon", eps);
        h.set("step_size", step_size);
        Ok(PgdConfig {
            threat: ThreatModel::new(p, eps)?,
            steps,
            step_size,
            random_init: h.get("random_init")? != 0.0,
            topk_fraction: h.0.get("topk_fraction").copied().unwrap_or(cfg.ranges.topk_fraction),
        })
    };
    let l2_budget = |h: &HyperParams| -> Result<f64> {
        Ok(lp_norm(x.samples(), NormOrder::L2) * 10f64.powf(-h.get("target_snr_db")? / 20.0))
    };
    let cw_l2_cfg = |h: &HyperParams, bs: usize| -> Result<CwL2Config> {
        Ok(CwL2Config {
            confidence: h.get("confidence")?,
            initial_c: h.get("initial_c")?,
            binary_search_steps: bs,
            iterations: h.get_usize("iterations")?,
            learning_rate: h.get("learning_rate")?,
        })
    };
    Ok(Some(match label {
        Benign => return Err(invalid("benign is not an attack class")),
        Fgsm => {
            let eps = snap_linf_epsilon(h.get("epsilon")?);
            h.set("epsilon", eps);
            (fgsm(model, x, y, eps)?, ThreatModel::new(NormOrder::Linf, eps)?)
        }
        IterFgsm | PgdLinf => {
            let pc = iterative(h, NormOrder::Linf, snap_linf_epsilon(h.get("epsilon")?))?;
            (pgd(model, x, y, &pc, rng)?, pc.threat)
        }
        PgdL2 => {
            let pc = iterative(h, NormOrder::L2, l2_budget(h)?)?;
            (pgd(model, x, y, &pc, rng)?, pc.threat)
        }
        PgdL1 => {
            let pc = iterative(h, NormOrder::L1, l2_budget(h)? * (x.len() as f64).sqrt())?;
            (pgd(model, x, y, &pc, rng)?, pc.threat)
        }
        CwL2 => {
            let out = cw_l2(model, x, y, &cw_l2_cfg(h, h.get_usize("binary_search_steps")?)?)?;
            if !out.success || out.norm == 0.0 {
                return Ok(None);
            }
            h.set("norm", out.norm);
            (out.adversarial, ThreatModel::new(NormOrder::L2, out.norm)?)
        }
        CwL0 => {
            let l0 = CwL0Config {
                l2: cw_l2_cfg(h, cfg.cw_l0_binary_search_steps)?,
                remove_fraction: cfg.cw_l0_remove_fraction,
                max_outer: cfg.cw_l0_max_outer,
            };
            let out = cw_l0(model, x, y, &l0)?;
            if !out.success || out.norm == 0.0 {
                return Ok(None);
            }
            h.set("norm", out.norm);
            (out.adversarial, ThreatModel::new(NormOrder::L0, out.norm)?)
        }
        CwLinf => {
            let lc = CwLinfConfig {
                confidence: h.get("confidence")?,
                initial_c: h.get("initial_c")?,
                initial_tau: h.get("initial_tau")?,
                iterations: h.get_usize("iterations")?,
                max_outer: cfg.cw_linf_max_outer,
                ..CwLinfConfig::default()
            };
            let out = cw_linf(model, x, y, &lc)?;
            let Some(tau) = out.tau_final.filter(|_| out.success && out.norm > 0.0) else {
                return Ok(None);
            };
            h.set("norm", out.norm);
            h.set("tau_final", tau);
            (out.adversarial, ThreatModel::new(NormOrder::Linf, tau)?)
        }
    }))
}

fn record_id(label: AttackLabel, utt_id: &str) -> String {
    format!("{}__{}", label.slug(), utt_id)
}

/// Attacks a random `per_class_fraction` of `corpus` with every class in
/// `cfg.classes` and keeps the successful results.
///
/// Each (class, utterance) job seeds its own generator from the run seed and
/// the record id, so output does not depend on scheduling.
pub fn generate_attack_dataset<T: AttackTarget + ?Sized>(
    model: &T,
    corpus: &[LabeledUtterance],
    cfg: &DatasetConfig,
) -> Result<(Vec<AttackRecord>, AttackDatasetReport)> {
    if corpus.is_empty() {
        return Err(invalid("attack generation needs a nonempty corpus"));
    }
    if !(cfg.per_class_fraction > 0.0 && cfg.per_class_fraction <= 1.0) {
        return Err(invalid(format!("per_class_fraction must be in (0, 1], got {}", cfg.per_class_fraction)));
    }
    if cfg.classes.iter().any(|l| l.is_benign()) {
        return Err(invalid("benign is not an attack class"));
    }
    cfg.ranges.validate()?;
    let n = corpus.len();
    let take = ((n as f64 * cfg.per_class_fraction).round() as usize).clamp(1, n);
    let mut jobs = Vec::new();
    for &label in &cfg.classes {
        let mut rng = rng_for(cfg.seed, &format!("select/{}", label.slug()));
        let mut chosen = sample(&mut rng, n, take).into_vec();
        chosen.sort_unstable();
        jobs.extend(chosen.into_iter().map(|i| (label, i)));
    }
    let results: Vec<Result<Option<AttackRecord>>> = jobs
        .par_iter()
        .map(|&(label, i)| {
            let utt = &corpus[i];
            let id = record_id(label, &utt.id);
            let mut rng = rng_for(cfg.seed, &id);
            let mut h = sample_attack_params(&mut rng, label, &cfg.ranges)?;
            let Some((adv, threat)) = run_attack(model, label, &utt.audio, utt.speaker, &mut h, cfg, &mut rng)? else {
                return Ok(None);
            };
            let y_pred = model.predict(adv.samples())?;
            let delta = perturbation_between(utt.audio.samples(), adv.samples());
            if y_pred == utt.speaker || delta.iter().all(|&d| d == 0.0) {
                return Ok(None);
            }
            let record = AttackRecord {
                record_id: id,
                benign_ref: utt.id.clone(),
                benign: utt.audio.clone(),
                snr_db: snr_db(utt.audio.samples(), &delta)?,
                adversarial: adv,
                label,
                threat,
                hyperparams: h,
                success: true,
                y: utt.speaker,
                y_pred,
            };
            record.check_invariants()?;
            Ok(Some(record))
        })
        .collect();

    let mut records = Vec::new();
    let mut per_class: BTreeMap<AttackLabel, (usize, Vec<f64>)> = BTreeMap::new();
    for (r, &(label, _)) in results.into_iter().zip(&jobs) {
        let entry = per_class.entry(label).or_default();
        entry.0 += 1;
        if let Some(rec) = r? {
            entry.1.push(rec.snr_db);
            records.push(rec);
        }
    }
    let classes = cfg
        .classes
        .iter()
        .map(|&label| {
            let (attempted, snrs) = per_class.remove(&label).unwrap_or_default();
            let warning = snrs.is_empty().then(|| format!("no successful {label} attacks out of {attempted}"));
            if let Some(w) = &warning {
                log::warn!("{w}");
            }
            ClassReport {
                label,
                attempted,
                succeeded: snrs.len(),
                mean_snr_db: (!snrs.is_empty()).then(|| snrs.iter().sum::<f64>() / snrs.len() as f64),
                warning,
            }
        })
        .collect();
    let report = AttackDatasetReport { classes, total_records: records.len() };
    Ok((records, report))
}

/// One line of the attack database index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRow {
    pub record_id: String,
    pub benign_path: String,
    pub adv_path: String,
    pub label: AttackLabel,
    pub p: NormOrder,
    pub epsilon: f64,
    pub hyperparams: HyperParams,
    pub success: bool,
    pub y: usize,
    pub y_pred: usize,
    pub snr_db: f64,
}

/// Writes float32 WAVs for every adversarial example and its benign source
/// plus the JSON-Lines index. Paths in the index are relative to `dir`.
pub fn write_attack_database(dir: &Path, records: &[AttackRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("adv"))?;
    fs::create_dir_all(dir.join("benign"))?;
    let index = dir.join(INDEX_FILE);
    let mut out = BufWriter::new(fs::File::create(&index)?);
    let mut written = std::collections::BTreeSet::new();
    for r in records {
        let benign_path = format!("benign/{}.wav", r.benign_ref);
        let adv_path = format!("adv/{}.wav", r.record_id);
        if written.insert(r.benign_ref.clone()) {
            write_wav(dir.join(&benign_path), &r.benign, WavEncoding::Float32)?;
        }
        write_wav(dir.join(&adv_path), &r.adversarial, WavEncoding::Float32)?;
        let row = IndexRow {
            record_id: r.record_id.clone(),
            benign_path,
            adv_path,
            label: r.label,
            p: r.threat.p,
            epsilon: r.threat.epsilon,
            hyperparams: r.hyperparams.clone(),
            success: r.success,
            y: r.y,
            y_pred: r.y_pred,
            snr_db: r.snr_db,
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(index)
}

/// Reads a database written by [`write_attack_database`]; `delta` is
/// recomputed from the two WAVs.
pub fn load_attack_database(dir: &Path, sample_rate: u32) -> Result<Vec<AttackRecord>> {
    let file = fs::File::open(dir.join(INDEX_FILE))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: IndexRow = serde_json::from_str(&line)
            .map_err(|e| invalid(format!("{}:{}: {e}", dir.join(INDEX_FILE).display(), n + 1)))?;
        let benign_ref = Path::new(&row.benign_path)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| invalid(format!("bad benign path {:?}", row.benign_path)))?
            .to_string();
        let benign = read_wav(dir.join(&row.benign_path), sample_rate)?;
        let adversarial = read_wav(dir.join(&row.adv_path), sample_rate)?;
        if benign.len() != adversarial.len() {
            return Err(Error::LengthMismatch { left: benign.len(), right: adversarial.len() });
        }
        records.push(AttackRecord {
            record_id: row.record_id,
            benign_ref,
            benign,
            adversarial,
            label: row.label,
            threat: ThreatModel::new(row.p, row.epsilon)?,
            hyperparams: row.hyperparams,
            success: row.success,
            y: row.y,
            y_pred: row.y_pred,
            snr_db: row.snr_db,
        });
    }
    Ok(records)
}
