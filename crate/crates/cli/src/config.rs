//! Experiment configuration and the three scale presets.

use std::path::PathBuf;

use advsig::advest::{AdvestVariant, CganTrainConfig, DiscriminatorConfig, GeneratorConfig};
use advsig::attacks::{AttackLabel, AttackRanges, DatasetConfig, IntSpan, Span};
use advsig::corpus::SyntheticSpec;
use advsig::eval::{AttackGroupSplit, VerificationConfig};
use advsig::nn::xvector::EncoderConfig;
use advsig::rng::derive_seed;
use advsig::signature::{ExperimentMode, SignatureConfig};
use advsig::victim::{VictimConfig, VictimTrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Smoke,
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Smoke => "smoke",
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source", deny_unknown_fields)]
pub enum CorpusConfig {
    Synthetic { num_speakers: usize, utterances_per_speaker: usize, duration_s: f64 },
    /// A directory holding `manifest.jsonl` and its WAVs; relative paths
    /// resolve against the data root.
    WavDirectory { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimModel {
    pub encoder: EncoderConfig,
    pub scale: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimStage {
    pub model: VictimModel,
    pub training: VictimTrainConfig,
    /// Per-speaker fraction of utterances held out to measure accuracy.
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackStage {
    pub classes: Vec<AttackLabel>,
    pub per_class_fraction: f64,
    pub ranges: AttackRanges,
    pub cw_l0_remove_fraction: f64,
    pub cw_l0_max_outer: usize,
    pub cw_l0_binary_search_steps: usize,
    pub cw_linf_max_outer: usize,
    /// Fraction of benign sources whose attacks are held out from AdvEst
    /// and signature training.
    pub held_out_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvestStage {
    pub variants: Vec<AdvestVariant>,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub training: CganTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureStage {
    pub model: SignatureConfig,
    /// Add benign waveforms as a class when training on adversarial examples.
    pub benign_in_adversarial_modes: bool,
}

/// Classes scored by known-attack classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KnownScope {
    /// The known group only; one extractor per mode serves every task.
    KnownGroup,
    /// Every attack class, with a second extractor and the all-attacks
    /// generator.
    AllAttacks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationStage {
    pub modes: Vec<ExperimentMode>,
    pub split: AttackGroupSplit,
    pub verification: VerificationConfig,
    pub known_scope: KnownScope,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    /// Root seed. Every stage draws from a named sub-seed of it; the `seed`
    /// fields inside stage sections only salt that sub-seed.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub victim: VictimStage,
    pub attacks: AttackStage,
    pub advest: AdvestStage,
    pub signature: SignatureStage,
    pub evaluation: EvaluationStage,
}

fn check(ok: bool, msg: impl Into<String>) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg.into()))
    }
}

impl ExperimentConfig {
    pub fn parse(bytes: &[u8]) -> CliResult<Self> {
        let cfg: Self = serde_json::from_slice(bytes).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty-printed JSON with a trailing newline.
    pub fn canonical_json(&self) -> Vec<u8> {
        let mut s = serde_json::to_vec_pretty(self).expect("config serialises");
        s.push(b'\n');
        s
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Smoke => smoke(),
            Preset::Desk => desk(),
            Preset::Paper => paper(),
        }
    }

    /// Sub-seed for a stage, salted by the stage section's own `seed`.
    pub fn stage_seed(&self, stage: &str, salt: u64) -> u64 {
        derive_seed(self.seed, &format!("{stage}/{salt}"))
    }

    pub fn validate(&self) -> CliResult<()> {
        let cfg_err = |e: advsig::Error| CliError::Config(e.to_string());
        match &self.corpus {
            CorpusConfig::Synthetic { num_speakers, utterances_per_speaker, duration_s } => {
                check(*num_speakers >= 2, "corpus.num_speakers must be >= 2")?;
                check(*utterances_per_speaker >= 2, "corpus.utterances_per_speaker must be >= 2")?;
                check(*duration_s > 0.0, "corpus.duration_s must be positive")?;
            }
            CorpusConfig::WavDirectory { path } => check(!path.as_os_str().is_empty(), "corpus.path is empty")?,
        }
        check((0.0..1.0).contains(&self.victim.test_fraction), "victim.test_fraction must be in [0, 1)")?;
        check(self.victim.training.epochs > 0 && self.victim.training.batch_size > 0, "victim epochs and batch_size must be >= 1")?;
        let a = &self.attacks;
        check(!a.classes.is_empty(), "attacks.classes is empty")?;
        check(!a.classes.iter().any(|l| l.is_benign()), "benign is not an attack class")?;
        let mut sorted = a.classes.clone();
        sorted.sort();
        sorted.dedup();
        check(sorted.len() == a.classes.len(), "attacks.classes repeats a class")?;
        check(a.per_class_fraction > 0.0 && a.per_class_fraction <= 1.0, "attacks.per_class_fraction must be in (0, 1]")?;
        check(a.held_out_fraction > 0.0 && a.held_out_fraction < 1.0, "attacks.held_out_fraction must be in (0, 1)")?;
        a.ranges.validate().map_err(cfg_err)?;
        self.advest.training.validate().map_err(cfg_err)?;
        self.advest.generator.validate().map_err(cfg_err)?;
        self.advest.discriminator.validate().map_err(cfg_err)?;
        let e = &self.evaluation;
        check(!e.modes.is_empty(), "evaluation.modes is empty")?;
        e.split.validate().map_err(cfg_err)?;
        check(e.split.unknown.iter().all(|l| l.is_cw()), "the unknown group must be CW classes (the open-set generator leaves out CW)")?;
        check(e.split.known.iter().all(|l| a.classes.contains(l)), "every known class must be an attack class")?;
        check(e.split.unknown.iter().all(|l| a.classes.contains(l)), "every unknown class must be an attack class")?;
        check(e.split.known.len() >= 2, "the known group needs >= 2 classes")?;
        let estimates = e.modes.iter().any(|m| m.needs_generator());
        if estimates {
            check(
                self.advest.variants.contains(&AdvestVariant::LeaveOutCw),
                "modes using estimated perturbations need the leave-out-cw generator",
            )?;
            if e.known_scope == KnownScope::AllAttacks {
                check(
                    self.advest.variants.contains(&AdvestVariant::AllAttacks),
                    "known_scope all-attacks with estimated perturbations needs the all-attacks generator",
                )?;
            }
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match self.corpus {
            CorpusConfig::Synthetic { num_speakers, utterances_per_speaker, duration_s } => Some(SyntheticSpec {
                num_speakers,
                utterances_per_speaker,
                duration_s,
                seed: derive_seed(self.seed, "corpus"),
            }),
            CorpusConfig::WavDirectory { .. } => None,
        }
    }

    pub fn victim_config(&self, num_speakers: usize) -> VictimConfig {
        let m = &self.victim.model;
        VictimConfig { encoder: m.encoder.clone(), num_speakers, scale: m.scale, margin: m.margin }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let a = &self.attacks;
        DatasetConfig {
            classes: a.classes.clone(),
            per_class_fraction: a.per_class_fraction,
            ranges: a.ranges.clone(),
            cw_l0_remove_fraction: a.cw_l0_remove_fraction,
            cw_l0_max_outer: a.cw_l0_max_outer,
            cw_l0_binary_search_steps: a.cw_l0_binary_search_steps,
            cw_linf_max_outer: a.cw_linf_max_outer,
            seed: self.stage_seed("attacks", a.seed),
        }
    }
}

fn attack_stage(classes: Vec<AttackLabel>, per_class_fraction: f64) -> AttackStage {
    let d = DatasetConfig::new(classes, per_class_fraction, 0);
    AttackStage {
        classes: d.classes,
        per_class_fraction: d.per_class_fraction,
        ranges: d.ranges,
        cw_l0_remove_fraction: d.cw_l0_remove_fraction,
        cw_l0_max_outer: d.cw_l0_max_outer,
        cw_l0_binary_search_steps: d.cw_l0_binary_search_steps,
        cw_linf_max_outer: d.cw_linf_max_outer,
        held_out_fraction: 0.25,
        seed: 0,
    }
}

fn victim_stage(num_speakers: usize) -> VictimStage {
    let v = VictimConfig::small(num_speakers);
    VictimStage {
        model: VictimModel { encoder: v.encoder, scale: v.scale, margin: v.margin },
        training: VictimTrainConfig::default(),
        test_fraction: 0.2,
    }
}

/// Wider budgets than the defaults so that single-step attacks succeed
/// often enough on small corpora.
fn toy_ranges() -> AttackRanges {
    AttackRanges {
        linf_epsilon: Span::new(1e-3, 3e-2),
        snr_db: Span::new(15.0, 40.0),
        steps: IntSpan::new(5, 10),
        ..AttackRanges::default()
    }
}

fn smoke() -> ExperimentConfig {
    use AttackLabel::*;
    let mut attacks = attack_stage(vec![Fgsm, PgdL2, CwL2], 0.5);
    attacks.ranges = toy_ranges();
    attacks.ranges.cw_iterations = IntSpan::new(10, 15);
    attacks.ranges.cw_binary_search_steps = 3;
    let mut victim = victim_stage(6);
    victim.training.epochs = 30;
    let mut signature = SignatureConfig::small();
    signature.training.epochs = 15;
    ExperimentConfig {
        preset: Preset::Smoke,
        seed: 0,
        corpus: CorpusConfig::Synthetic { num_speakers: 6, utterances_per_speaker: 12, duration_s: 1.0 },
        victim,
        attacks,
        advest: AdvestStage {
            variants: vec![AdvestVariant::LeaveOutCw],
            generator: GeneratorConfig::smoke(),
            discriminator: DiscriminatorConfig::smoke(),
            training: CganTrainConfig {
                steps: 200,
                adversarial_warmup_steps: 180,
                batch_size: 4,
                segment_len: 4096,
                lr_final: 1e-5,
                ..CganTrainConfig::default()
            },
        },
        signature: SignatureStage { model: signature, benign_in_adversarial_modes: true },
        evaluation: EvaluationStage {
            modes: ExperimentMode::ALL.to_vec(),
            split: AttackGroupSplit::new([Fgsm, PgdL2], [CwL2]).expect("disjoint"),
            verification: VerificationConfig { targets_per_class: 100, ..VerificationConfig::default() },
            known_scope: KnownScope::KnownGroup,
            seed: 0,
        },
    }
}

fn desk() -> ExperimentConfig {
    use AttackLabel::*;
    let mut attacks = attack_stage(vec![Fgsm, IterFgsm, PgdL2, PgdLinf, CwL2], 0.4);
    attacks.ranges = toy_ranges();
    ExperimentConfig {
        preset: Preset::Desk,
        seed: 0,
        corpus: CorpusConfig::Synthetic { num_speakers: 10, utterances_per_speaker: 20, duration_s: 1.0 },
        victim: victim_stage(10),
        attacks,
        advest: AdvestStage {
            variants: vec![AdvestVariant::LeaveOutCw],
            generator: GeneratorConfig::smoke(),
            discriminator: DiscriminatorConfig::smoke(),
            training: CganTrainConfig {
                steps: 400,
                adversarial_warmup_steps: 360,
                batch_size: 4,
                segment_len: 4096,
                lr_final: 1e-5,
                ..CganTrainConfig::default()
            },
        },
        signature: SignatureStage { model: SignatureConfig::small(), benign_in_adversarial_modes: true },
        evaluation: EvaluationStage {
            modes: ExperimentMode::ALL.to_vec(),
            split: AttackGroupSplit::new([Fgsm, IterFgsm, PgdL2, PgdLinf], [CwL2]).expect("disjoint"),
            verification: VerificationConfig::default(),
            known_scope: KnownScope::KnownGroup,
            seed: 0,
        },
    }
}

/// Documented full-scale settings; expects a prepared WAV corpus.
fn paper() -> ExperimentConfig {
    let mut victim = victim_stage(0);
    victim.test_fraction = 0.05;
    ExperimentConfig {
        preset: Preset::Paper,
        seed: 0,
        corpus: CorpusConfig::WavDirectory { path: PathBuf::from("voxceleb2") },
        victim,
        attacks: attack_stage(AttackLabel::ALL.iter().copied().filter(|l| !l.is_benign()).collect(), 0.2),
        advest: AdvestStage {
            variants: AdvestVariant::ALL.to_vec(),
            generator: GeneratorConfig::paper(),
            discriminator: DiscriminatorConfig::paper(),
            training: CganTrainConfig { steps: 100_000, ..CganTrainConfig::default() },
        },
        signature: SignatureStage { model: SignatureConfig::paper(), benign_in_adversarial_modes: true },
        evaluation: EvaluationStage {
            modes: ExperimentMode::ALL.to_vec(),
            split: AttackGroupSplit::default(),
            verification: VerificationConfig::default(),
            known_scope: KnownScope::AllAttacks,
            seed: 0,
        },
    }
}
