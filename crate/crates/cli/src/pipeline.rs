//! Stage execution with dependency checks and hash-keyed idempotence.

use std::fs;
use std::path::{Path, PathBuf};

use advsig::advest::{
    mean_estimation_error, prepare_pairs, train_cgan, write_training_log, AdvestVariant, GeneratorModel,
};
use advsig::attacks::{generate_attack_dataset, load_attack_database, write_attack_database, AttackLabel, AttackRecord};
use advsig::corpus::{generate_synthetic_corpus, load_corpus, read_manifest, split_per_speaker, MANIFEST_FILE as CORPUS_MANIFEST};
use advsig::eval::{run_task_suite, AuditEntry, SuiteConfig, SuiteModels, TaskReport};
use advsig::rng::derive_seed;
use advsig::signature::{build_training_set, train_signature_extractor, ExperimentMode, InputKind, SignatureExtractor};
use advsig::victim::{train_victim, SpeakerClassifier};
use advsig::{lp_norm, NormOrder, SAMPLE_RATE};
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::config::{CorpusConfig, ExperimentConfig, KnownScope};
use crate::error::{CliError, CliResult};
use crate::manifest::{hash_outputs, list_files, sha256_bytes, RunManifest, StageRecord, CONFIG_SNAPSHOT};
use crate::report;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenCorpus,
    TrainVictim,
    GenAttacks,
    TrainAdvest,
    TrainSignature,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenCorpus,
        Stage::TrainVictim,
        Stage::GenAttacks,
        Stage::TrainAdvest,
        Stage::TrainSignature,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::TrainVictim => "train-victim",
            Stage::GenAttacks => "gen-attacks",
            Stage::TrainAdvest => "train-advest",
            Stage::TrainSignature => "train-signature",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

pub const VICTIM_CHECKPOINT: &str = "victim/victim.safetensors";
pub const ATTACK_DIR: &str = "attacks";
pub const REPORT_DIR: &str = "report";

pub fn generator_path(variant: AdvestVariant) -> PathBuf {
    PathBuf::from(format!("advest/{}/generator.safetensors", variant.slug()))
}

pub fn extractor_path(mode: ExperimentMode, full: bool) -> PathBuf {
    PathBuf::from(format!("signature/{}/{}.safetensors", mode.slug(), if full { "full" } else { "open-set" }))
}

pub fn evaluation_path(mode: ExperimentMode) -> PathBuf {
    PathBuf::from(format!("evaluation/{}.json", mode.slug()))
}

pub fn audit_path(mode: ExperimentMode) -> PathBuf {
    PathBuf::from(format!("evaluation/{}.audit.jsonl", mode.slug()))
}

/// One run directory with its configuration.
pub struct Run {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    /// The configuration exactly as supplied.
    pub config_bytes: Vec<u8>,
    pub data_root: PathBuf,
    pub force: bool,
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn fresh_dir(path: &Path) -> CliResult<()> {
    if path.exists() {
        fs::remove_dir_all(path)?;
    }
    fs::create_dir_all(path)?;
    Ok(())
}

/// Splits records into (train, held-out) by benign source, so that no
/// benign utterance contributes to both sides.
pub fn split_records(records: &[AttackRecord], held_out_fraction: f64, seed: u64) -> (Vec<AttackRecord>, Vec<AttackRecord>) {
    records.iter().cloned().partition(|r| {
        let u = derive_seed(seed, &r.benign_ref) as f64 / u64::MAX as f64;
        u >= held_out_fraction
    })
}

impl Run {
    fn needs_generator(&self) -> bool {
        self.config.evaluation.modes.iter().any(|m| m.needs_generator())
    }

    fn deps(&self, stage: Stage) -> Vec<Stage> {
        use Stage::*;
        let gen = if self.needs_generator() { vec![TrainAdvest] } else { vec![] };
        match stage {
            GenCorpus => vec![],
            TrainVictim => vec![GenCorpus],
            GenAttacks => vec![GenCorpus, TrainVictim],
            TrainAdvest => vec![GenAttacks],
            TrainSignature => [vec![GenAttacks], gen].concat(),
            Evaluate => [vec![GenAttacks], gen, vec![TrainSignature]].concat(),
            Report => vec![Evaluate],
        }
    }

    fn artifact(&self, stage: Stage) -> String {
        let first_mode = self.config.evaluation.modes[0];
        match stage {
            Stage::GenCorpus => format!("corpus manifest {}", self.corpus_dir().join(CORPUS_MANIFEST).display()),
            Stage::TrainVictim => format!("victim checkpoint {VICTIM_CHECKPOINT}"),
            Stage::GenAttacks => format!("attack database {ATTACK_DIR}/index.jsonl"),
            Stage::TrainAdvest => format!("AdvEst generator {}", generator_path(AdvestVariant::LeaveOutCw).display()),
            Stage::TrainSignature => format!("signature extractor {}", extractor_path(first_mode, false).display()),
            Stage::Evaluate => format!("evaluation report {}", evaluation_path(first_mode).display()),
            Stage::Report => format!("report {REPORT_DIR}/report.json"),
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        match &self.config.corpus {
            CorpusConfig::Synthetic { .. } => self.dir.join("corpus"),
            CorpusConfig::WavDirectory { path } => self.data_root.join(path),
        }
    }

    fn section(&self, stage: Stage) -> serde_json::Value {
        let c = &self.config;
        match stage {
            Stage::GenCorpus => json!(c.corpus),
            Stage::TrainVictim => json!(c.victim),
            Stage::GenAttacks => json!(c.attacks),
            Stage::TrainAdvest => json!([json!(c.advest), json!(c.attacks.held_out_fraction)]),
            Stage::TrainSignature => json!([
                json!(c.signature),
                json!(c.evaluation.modes),
                json!(c.evaluation.split),
                json!(c.evaluation.known_scope),
                json!(c.attacks.held_out_fraction),
            ]),
            Stage::Evaluate => json!([json!(c.evaluation), json!(c.attacks.held_out_fraction)]),
            Stage::Report => json!([json!(c.evaluation.modes), json!(c.attacks.classes), json!(c.preset)]),
        }
    }

    fn stage_key(&self, stage: Stage, manifest: &RunManifest) -> String {
        let upstream: Vec<_> = self
            .deps(stage)
            .iter()
            .map(|d| json!({ "stage": d.name(), "outputs": manifest.stages.get(d.name()).map(|r| &r.outputs) }))
            .collect();
        let doc = json!({ "stage": stage.name(), "seed": self.config.seed, "section": self.section(stage), "upstream": upstream });
        sha256_bytes(&serde_json::to_vec(&doc).expect("json"))
    }

    fn check_deps(&self, stage: Stage, manifest: &RunManifest) -> CliResult<()> {
        for dep in self.deps(stage) {
            let ok = manifest
                .stages
                .get(dep.name())
                .is_some_and(|rec| rec.outputs.iter().all(|o| self.dir.join(&o.path).exists()));
            if !ok {
                return Err(CliError::Dependency(format!(
                    "{} needs the {}, which is missing; run {} first",
                    stage.name(),
                    self.artifact(dep),
                    dep.name()
                )));
            }
        }
        Ok(())
    }

    /// Runs one stage. Returns `false` when its outputs are current and it
    /// was skipped.
    pub fn run_stage(&self, stage: Stage) -> CliResult<bool> {
        fs::create_dir_all(&self.dir)?;
        let mut manifest = RunManifest::load(&self.dir)?
            .unwrap_or_else(|| RunManifest::new(&self.config_bytes, self.config.seed));
        self.check_deps(stage, &manifest)?;
        let key = self.stage_key(stage, &manifest);
        if !self.force && manifest.is_current(&self.dir, stage.name(), &key) {
            info!("{}: up to date", stage.name());
            return Ok(false);
        }
        info!("{}: running", stage.name());
        let outputs = match stage {
            Stage::GenCorpus => self.gen_corpus()?,
            Stage::TrainVictim => self.train_victim()?,
            Stage::GenAttacks => self.gen_attacks()?,
            Stage::TrainAdvest => self.train_advest()?,
            Stage::TrainSignature => self.train_signature()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Report => self.report()?,
        };
        fs::write(self.dir.join(CONFIG_SNAPSHOT), &self.config_bytes)?;
        let snapshot = RunManifest::new(&self.config_bytes, self.config.seed);
        manifest.config_sha256 = snapshot.config_sha256;
        manifest.seed = snapshot.seed;
        manifest.tool_version = snapshot.tool_version;
        manifest.stages.insert(stage.name().into(), StageRecord { key, outputs: hash_outputs(&self.dir, &outputs)? });
        manifest.save(&self.dir)?;
        Ok(true)
    }

    pub fn run_all(&self) -> CliResult<()> {
        for s in Stage::ALL {
            if s == Stage::TrainAdvest && !self.needs_generator() && self.config.advest.variants.is_empty() {
                continue;
            }
            self.run_stage(s)?;
        }
        Ok(())
    }

    fn gen_corpus(&self) -> CliResult<Vec<PathBuf>> {
        let dir = self.corpus_dir();
        match self.config.synthetic_spec() {
            Some(spec) => {
                fresh_dir(&dir)?;
                generate_synthetic_corpus(&spec, &dir)?;
            }
            None => {
                let manifest = dir.join(CORPUS_MANIFEST);
                if !manifest.exists() {
                    return Err(CliError::Dependency(format!("corpus manifest {} is missing", manifest.display())));
                }
                let rows = read_manifest(&manifest)?;
                let mut paths = vec![manifest];
                paths.extend(rows.iter().map(|r| dir.join(&r.path)));
                return Ok(paths);
            }
        }
        list_files(&self.dir, &dir)
    }

    fn load_attacks(&self) -> CliResult<(Vec<AttackRecord>, Vec<AttackRecord>)> {
        let records = load_attack_database(&self.dir.join(ATTACK_DIR), SAMPLE_RATE)?;
        let seed = self.config.stage_seed("split", self.config.attacks.seed);
        Ok(split_records(&records, self.config.attacks.held_out_fraction, seed))
    }

    fn train_victim(&self) -> CliResult<Vec<PathBuf>> {
        let utts = load_corpus(&self.corpus_dir())?;
        let (train, test) = split_per_speaker(&utts, self.config.victim.test_fraction)?;
        let speakers = utts.iter().map(|u| u.speaker).max().map_or(0, |m| m + 1);
        let mut tcfg = self.config.victim.training.clone();
        tcfg.seed = self.config.stage_seed("victim", tcfg.seed);
        let (model, rep) = train_victim(&train, self.config.victim_config(speakers), &tcfg)?;
        let test_accuracy = if test.is_empty() { None } else { Some(model.accuracy(&test)?) };
        info!("victim: held-out accuracy {test_accuracy:?}");
        fs::create_dir_all(self.dir.join("victim"))?;
        model.save(self.dir.join(VICTIM_CHECKPOINT))?;
        let report = json!({
            "num_speakers": speakers,
            "train_utterances": train.len(),
            "test_utterances": test.len(),
            "test_accuracy": test_accuracy,
            "epoch_loss": rep.epoch_loss,
            "epoch_accuracy": rep.epoch_accuracy,
        });
        write_json(&self.dir.join("victim/report.json"), &report)?;
        Ok(vec![VICTIM_CHECKPOINT.into(), "victim/report.json".into()])
    }

    fn gen_attacks(&self) -> CliResult<Vec<PathBuf>> {
        let victim = SpeakerClassifier::load(self.dir.join(VICTIM_CHECKPOINT))?;
        let utts = load_corpus(&self.corpus_dir())?;
        let (records, rep) = generate_attack_dataset(&victim, &utts, &self.config.dataset_config())?;
        for c in &rep.classes {
            info!("attacks: {} {}/{} succeeded", c.label, c.succeeded, c.attempted);
            if let Some(w) = &c.warning {
                log::warn!("attacks: {w}");
            }
        }
        let dir = self.dir.join(ATTACK_DIR);
        fresh_dir(&dir)?;
        write_attack_database(&dir, &records)?;
        write_json(&dir.join("report.json"), &rep)?;
        list_files(&self.dir, &dir)
    }

    fn train_advest(&self) -> CliResult<Vec<PathBuf>> {
        let (train, test) = self.load_attacks()?;
        let a = &self.config.advest;
        let mut outputs = Vec::new();
        for &variant in &a.variants {
            let dir = self.dir.join("advest").join(variant.slug());
            fresh_dir(&dir)?;
            let mut tcfg = a.training.clone();
            tcfg.seed = self.config.stage_seed(&format!("advest/{}", variant.slug()), tcfg.seed);
            let pairs = prepare_pairs(&train, variant, tcfg.vad_frame_ms, tcfg.vad_threshold_db)?;
            info!("advest {}: {} training pairs", variant.slug(), pairs.len());
            let ckpt = (tcfg.checkpoint_every > 0).then_some(dir.as_path());
            let out = train_cgan(&pairs, &a.generator, &a.discriminator, &tcfg, ckpt)?;
            out.generator.save(dir.join("generator.safetensors"))?;
            out.discriminator.save(dir.join("discriminator.safetensors"))?;
            write_training_log(&dir.join("log.jsonl"), &out.log)?;
            let held: Vec<AttackRecord> = test.iter().filter(|r| variant.includes(r.label)).cloned().collect();
            let metrics = if held.is_empty() {
                json!({ "held_out_records": 0 })
            } else {
                let init = GeneratorModel::new(&a.generator, tcfg.seed)?;
                let trivial = held.iter().map(|r| lp_norm(r.benign.samples(), NormOrder::L2)).sum::<f64>() / held.len() as f64;
                json!({
                    "held_out_records": held.len(),
                    "trained_error": mean_estimation_error(&out.generator, &held)?,
                    "init_error": mean_estimation_error(&init, &held)?,
                    "trivial_error": trivial,
                })
            };
            info!("advest {}: {metrics}", variant.slug());
            write_json(&dir.join("metrics.json"), &metrics)?;
            outputs.extend(list_files(&self.dir, &dir)?);
        }
        Ok(outputs)
    }

    fn generator(&self, variant: AdvestVariant) -> CliResult<GeneratorModel> {
        let path = self.dir.join(generator_path(variant));
        if !path.exists() {
            return Err(CliError::Dependency(format!("AdvEst generator {} is missing; run train-advest", path.display())));
        }
        Ok(GeneratorModel::load(path)?)
    }

    /// Generators used by a mode: (Task 1, open-set tasks).
    fn generators(&self, mode: ExperimentMode) -> CliResult<(Option<GeneratorModel>, Option<GeneratorModel>)> {
        if !mode.needs_generator() {
            return Ok((None, None));
        }
        let open = self.generator(AdvestVariant::LeaveOutCw)?;
        let full = match self.config.evaluation.known_scope {
            KnownScope::AllAttacks => Some(self.generator(AdvestVariant::AllAttacks)?),
            KnownScope::KnownGroup => None,
        };
        Ok((full, Some(open)))
    }

    fn train_one(
        &self,
        records: &[AttackRecord],
        mode: ExperimentMode,
        g: Option<&GeneratorModel>,
        name: &str,
    ) -> CliResult<Vec<PathBuf>> {
        let benign = mode.train_input() == InputKind::Adversarial && self.config.signature.benign_in_adversarial_modes;
        let inputs = build_training_set(records, mode, g, benign)?;
        let mut cfg = self.config.signature.model.clone();
        cfg.training.seed = self.config.stage_seed(&format!("signature/{}/{name}", mode.slug()), cfg.training.seed);
        let (model, rep) = train_signature_extractor(&inputs, &cfg)?;
        info!("signature {} {name}: {} inputs, final train accuracy {:?}", mode.slug(), inputs.len(), rep.epoch_accuracy.last());
        let ckpt = extractor_path(mode, name == "full");
        let rep_path = ckpt.with_extension("report.json");
        model.save(self.dir.join(&ckpt))?;
        write_json(&self.dir.join(&rep_path), &json!({ "classes": model.classes(), "inputs": inputs.len(), "report": rep }))?;
        Ok(vec![ckpt, rep_path])
    }

    fn train_signature(&self) -> CliResult<Vec<PathBuf>> {
        let (train, _) = self.load_attacks()?;
        let split = &self.config.evaluation.split;
        fresh_dir(&self.dir.join("signature"))?;
        let mut outputs = Vec::new();
        for &mode in &self.config.evaluation.modes {
            fs::create_dir_all(self.dir.join("signature").join(mode.slug()))?;
            let (g_full, g_open) = self.generators(mode)?;
            let known: Vec<AttackRecord> = train.iter().filter(|r| split.known.contains(&r.label)).cloned().collect();
            outputs.extend(self.train_one(&known, mode, g_open.as_ref(), "open-set")?);
            if self.config.evaluation.known_scope == KnownScope::AllAttacks {
                outputs.extend(self.train_one(&train, mode, g_full.as_ref(), "full")?);
            }
        }
        Ok(outputs)
    }

    fn extractor(&self, mode: ExperimentMode, full: bool) -> CliResult<SignatureExtractor> {
        let path = self.dir.join(extractor_path(mode, full));
        if !path.exists() {
            return Err(CliError::Dependency(format!("signature extractor {} is missing; run train-signature", path.display())));
        }
        Ok(SignatureExtractor::load(path)?)
    }

    /// Evaluates one mode against the stored artifacts.
    pub fn evaluate_mode(&self, mode: ExperimentMode) -> CliResult<(TaskReport, Vec<AuditEntry>)> {
        let (train, test) = self.load_attacks()?;
        let (g_full, g_open) = self.generators(mode)?;
        let open = self.extractor(mode, false)?;
        let full = match self.config.evaluation.known_scope {
            KnownScope::AllAttacks => Some(self.extractor(mode, true)?),
            KnownScope::KnownGroup => None,
        };
        let models = SuiteModels {
            known: full.as_ref().unwrap_or(&open),
            open_set: &open,
            generator: g_full.as_ref().or(g_open.as_ref()),
            generator_open_set: g_open.as_ref(),
        };
        let e = &self.config.evaluation;
        let cfg = SuiteConfig {
            split: e.split.clone(),
            verification: e.verification.clone(),
            seed: self.config.stage_seed("evaluation", e.seed),
        };
        Ok(run_task_suite(mode, &models, &train, &test, &cfg)?)
    }

    fn evaluate(&self) -> CliResult<Vec<PathBuf>> {
        fresh_dir(&self.dir.join("evaluation"))?;
        let mut outputs = Vec::new();
        for &mode in &self.config.evaluation.modes {
            let (rep, audit) = self.evaluate_mode(mode)?;
            write_json(&self.dir.join(evaluation_path(mode)), &rep)?;
            let mut lines = Vec::new();
            for a in &audit {
                lines.extend(serde_json::to_vec(a)?);
                lines.push(b'\n');
            }
            fs::write(self.dir.join(audit_path(mode)), lines)?;
            outputs.push(evaluation_path(mode));
            outputs.push(audit_path(mode));
        }
        Ok(outputs)
    }

    fn report(&self) -> CliResult<Vec<PathBuf>> {
        let mut reports = Vec::new();
        for &mode in &self.config.evaluation.modes {
            let path = self.dir.join(evaluation_path(mode));
            let bytes = fs::read(&path)
                .map_err(|_| CliError::Dependency(format!("evaluation of mode {} is incomplete: {} is missing", mode.slug(), path.display())))?;
            reports.push(serde_json::from_slice::<TaskReport>(&bytes)?);
        }
        let mut order = vec![AttackLabel::Benign];
        order.extend(self.config.attacks.classes.iter().copied());
        let combined = report::combine(&self.config, reports, &order)?;
        let dir = self.dir.join(REPORT_DIR);
        fresh_dir(&dir)?;
        write_json(&dir.join("report.json"), &combined)?;
        fs::write(dir.join("tables.txt"), report::render_tables(&combined))?;
        let mut outputs = vec![PathBuf::from(format!("{REPORT_DIR}/report.json")), PathBuf::from(format!("{REPORT_DIR}/tables.txt"))];
        for m in &combined.modes {
            let name = format!("{REPORT_DIR}/confusion_{}.svg", m.mode.slug());
            fs::write(self.dir.join(&name), report::heatmap_svg(&m.known_classification, m.mode.name()))?;
            outputs.push(name.into());
        }
        Ok(outputs)
    }
}
