//! Attack signatures: an x-vector style network trained to classify the
//! attack class from the adversarial example, the perturbation, or the
//! estimated perturbation.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advest::{estimate_perturbation, GeneratorModel};
use crate::attacks::{AttackLabel, AttackRecord};
use crate::corpus::LabeledUtterance;
use crate::error::{invalid, Error, Result};
use crate::nn::frontend::FrontEndConfig;
use crate::nn::layers::l2_normalize;
use crate::nn::xvector::{batch_tensor, EncoderConfig};
use crate::nn::{CheckpointMeta, ParamStore};
use crate::signal::{Waveform, SAMPLE_RATE};
use crate::victim::{train_victim, SpeakerClassifier, TrainReport, VictimConfig, VictimTrainConfig};

pub const CHECKPOINT_KIND: &str = "signature-extractor";

/// What a signature input is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// `x'`.
    Adversarial,
    /// `delta = x' - x`.
    Perturbation,
    /// `delta_hat = x' - G(x')`.
    EstimatedPerturbation,
    /// A benign waveform `x`, passed as is.
    Benign,
}

impl InputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::Adversarial => "adversarial",
            InputKind::Perturbation => "perturbation",
            InputKind::EstimatedPerturbation => "estimated-perturbation",
            InputKind::Benign => "benign",
        }
    }
}

/// The four train/test input pairings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    /// Train and test on `x'`.
    Baseline,
    /// Train and test on `delta`.
    Oracle,
    /// Train and test on `delta_hat`.
    Estimated,
    /// Train on `delta`, test on `delta_hat`.
    Proposed,
}

impl ExperimentMode {
    pub const ALL: [ExperimentMode; 4] =
        [ExperimentMode::Baseline, ExperimentMode::Oracle, ExperimentMode::Estimated, ExperimentMode::Proposed];

    pub fn train_input(self) -> InputKind {
        match self {
            ExperimentMode::Baseline => InputKind::Adversarial,
            ExperimentMode::Oracle | ExperimentMode::Proposed => InputKind::Perturbation,
            ExperimentMode::Estimated => InputKind::EstimatedPerturbation,
        }
    }

    pub fn test_input(self) -> InputKind {
        match self {
            ExperimentMode::Baseline => InputKind::Adversarial,
            ExperimentMode::Oracle => InputKind::Perturbation,
            ExperimentMode::Estimated | ExperimentMode::Proposed => InputKind::EstimatedPerturbation,
        }
    }

    pub fn needs_generator(self) -> bool {
        self.train_input() == InputKind::EstimatedPerturbation || self.test_input() == InputKind::EstimatedPerturbation
    }

    pub fn name(self) -> &'static str {
        match self {
            ExperimentMode::Baseline => "Baseline",
            ExperimentMode::Oracle => "Oracle",
            ExperimentMode::Estimated => "Estimated",
            ExperimentMode::Proposed => "Proposed",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            ExperimentMode::Baseline => "baseline",
            ExperimentMode::Oracle => "oracle",
            ExperimentMode::Estimated => "estimated",
            ExperimentMode::Proposed => "proposed",
        }
    }
}

/// One signature input with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInput {
    pub record_id: String,
    pub label: AttackLabel,
    pub kind: InputKind,
    pub audio: Waveform,
}

/// Inputs of one kind for every record, in record order, followed by the
/// distinct benign sources (in order of first appearance) when
/// `include_benign` is set. Benign inputs are the raw benign waveforms in
/// every mode.
pub fn build_inputs(
    records: &[AttackRecord],
    kind: InputKind,
    g: Option<&GeneratorModel>,
    include_benign: bool,
) -> Result<Vec<LabeledInput>> {
    if kind == InputKind::Benign {
        return Err(invalid("benign is not a per-record input kind"));
    }
    let g = match (kind, g) {
        (InputKind::EstimatedPerturbation, None) => {
            return Err(Error::Precondition("estimated-perturbation inputs need a trained generator".into()))
        }
        (_, g) => g,
    };
    let mut out: Vec<LabeledInput> = records
        .par_iter()
        .map(|r| {
            let audio = match kind {
                InputKind::Adversarial => r.adversarial.clone(),
                InputKind::Perturbation => r.perturbation(),
                InputKind::EstimatedPerturbation => estimate_perturbation(g.expect("checked above"), &r.adversarial)?,
                InputKind::Benign => unreachable!(),
            };
            Ok(LabeledInput { record_id: r.record_id.clone(), label: r.label, kind, audio })
        })
        .collect::<Result<_>>()?;
    if include_benign {
        let mut seen = BTreeSet::new();
        for r in records {
            if seen.insert(r.benign_ref.as_str()) {
                out.push(LabeledInput {
                    record_id: r.benign_ref.clone(),
                    label: AttackLabel::Benign,
                    kind: InputKind::Benign,
                    audio: r.benign.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Training inputs for `mode`.
pub fn build_training_set(
    records: &[AttackRecord],
    mode: ExperimentMode,
    g: Option<&GeneratorModel>,
    include_benign: bool,
) -> Result<Vec<LabeledInput>> {
    build_inputs(records, mode.train_input(), g, include_benign)
}

/// Evaluation inputs for `mode`.
pub fn build_evaluation_set(
    records: &[AttackRecord],
    mode: ExperimentMode,
    g: Option<&GeneratorModel>,
    include_benign: bool,
) -> Result<Vec<LabeledInput>> {
    build_inputs(records, mode.test_input(), g, include_benign)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureConfig {
    pub encoder: EncoderConfig,
    pub scale: f64,
    pub margin: f64,
    pub training: VictimTrainConfig,
}

impl SignatureConfig {
    /// Desk-scale extractor. The front-end keeps the absolute level, which
    /// carries the perturbation budget.
    pub fn small() -> Self {
        Self {
            encoder: EncoderConfig {
                frontend: level_preserving(256, 128, 40),
                channels: 48,
                blocks: 2,
                embedding_dim: 64,
                feature_means: true,
            },
            scale: 16.0,
            margin: 0.3,
            training: VictimTrainConfig {
                epochs: 30,
                batch_size: 8,
                lr: 3e-3,
                crop_len: 4000,
                margin_warmup: 0.3,
                class_balanced: true,
                seed: 0,
            },
        }
    }

    /// 256-dimensional embeddings.
    pub fn paper() -> Self {
        let mut c = Self::small();
        c.encoder = EncoderConfig {
            frontend: level_preserving(400, 160, 64),
            channels: 256,
            blocks: 6,
            embedding_dim: 256,
            feature_means: true,
        };
        c.training.epochs = 40;
        c
    }
}

fn level_preserving(win: usize, hop: usize, n_mels: usize) -> FrontEndConfig {
    FrontEndConfig { level_norm: false, floor: 1e-12, frame_stats: true, ..FrontEndConfig::log_mel(win, hop, win.next_power_of_two(), n_mels, SAMPLE_RATE) }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredConfig {
    config: SignatureConfig,
    classes: Vec<AttackLabel>,
}

/// Trained signature extractor with its ordered class set.
#[derive(Debug, Clone)]
pub struct SignatureExtractor {
    config: SignatureConfig,
    classes: Vec<AttackLabel>,
    net: SpeakerClassifier,
}

fn victim_config(cfg: &SignatureConfig, classes: usize) -> VictimConfig {
    VictimConfig { encoder: cfg.encoder.clone(), num_speakers: classes, scale: cfg.scale, margin: cfg.margin }
}

/// Trains encoder, statistics pooling and an additive-angular-margin head
/// on the labelled inputs. The class set is the sorted set of labels present.
pub fn train_signature_extractor(
    inputs: &[LabeledInput],
    cfg: &SignatureConfig,
) -> Result<(SignatureExtractor, TrainReport)> {
    let classes: Vec<AttackLabel> = inputs.iter().map(|i| i.label).collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::Precondition(format!("signature training needs >= 2 classes, found {}", classes.len())));
    }
    for &c in &classes {
        let n = inputs.iter().filter(|i| i.label == c).count();
        if n < 2 {
            return Err(Error::Precondition(format!("class {c} has {n} examples; need at least 2")));
        }
    }
    let corpus: Vec<LabeledUtterance> = inputs
        .iter()
        .map(|i| LabeledUtterance {
            id: i.record_id.clone(),
            audio: i.audio.clone(),
            speaker: classes.binary_search(&i.label).expect("label is in the class set"),
        })
        .collect();
    let (net, report) = train_victim(&corpus, victim_config(cfg, classes.len()), &cfg.training)?;
    Ok((SignatureExtractor { config: cfg.clone(), classes, net }, report))
}

impl SignatureExtractor {
    pub fn classes(&self) -> &[AttackLabel] {
        &self.classes
    }

    pub fn config(&self) -> &SignatureConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.encoder.embedding_dim
    }

    pub fn min_len(&self) -> usize {
        self.net.min_len()
    }

    pub fn params(&self) -> &ParamStore {
        self.net.params()
    }

    /// Unit-norm pooled embedding.
    pub fn extract_signature(&self, input: &Waveform) -> Result<Vec<f32>> {
        let x = batch_tensor(&[input.samples()], &Device::Cpu)?;
        Ok(l2_normalize(&self.net.embeddings_tensor(&x)?)?.squeeze(0)?.to_vec1()?)
    }

    /// Class decided by the classification head.
    pub fn classify(&self, input: &Waveform) -> Result<AttackLabel> {
        Ok(self.classes[self.net.predict(input)?.speaker])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let stored = StoredConfig { config: self.config.clone(), classes: self.classes.clone() };
        self.net.params().save(path, &CheckpointMeta::new(CHECKPOINT_KIND, &stored)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (store, meta) = ParamStore::load(path, CHECKPOINT_KIND)?;
        let stored: StoredConfig = serde_json::from_value(meta.config)?;
        let net = SpeakerClassifier::from_store(victim_config(&stored.config, stored.classes.len()), store)?;
        Ok(Self { config: stored.config, classes: stored.classes, net })
    }
}

/// Row key of an embedding dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingKey {
    pub record_id: String,
    pub label: AttackLabel,
    pub input_kind: InputKind,
}

/// Embedding with its key.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyedEmbedding {
    pub key: EmbeddingKey,
    pub vector: Vec<f32>,
}

/// Signatures of every input, in input order.
pub fn extract_all(model: &SignatureExtractor, inputs: &[LabeledInput]) -> Result<Vec<KeyedEmbedding>> {
    inputs
        .par_iter()
        .map(|i| {
            Ok(KeyedEmbedding {
                key: EmbeddingKey { record_id: i.record_id.clone(), label: i.label, input_kind: i.kind },
                vector: model.extract_signature(&i.audio)?,
            })
        })
        .collect()
}

fn dump_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("safetensors"), stem.with_extension("jsonl"))
}

/// Writes `<stem>.safetensors` (one `[N, E]` f32 matrix named `embeddings`)
/// and `<stem>.jsonl` (one key per row).
pub fn write_embeddings(stem: &Path, rows: &[KeyedEmbedding]) -> Result<()> {
    let dim = rows.first().map(|r| r.vector.len()).ok_or_else(|| invalid("no embeddings to write"))?;
    if rows.iter().any(|r| r.vector.len() != dim) {
        return Err(invalid("embeddings have differing dimensions"));
    }
    if let Some(parent) = stem.parent() {
        fs::create_dir_all(parent)?;
    }
    let (mat_path, key_path) = dump_paths(stem);
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.vector.iter().copied()).collect();
    let m = Tensor::from_vec(flat, (rows.len(), dim), &Device::Cpu)?;
    m.save_safetensors("embeddings", &mat_path)?;
    let mut f = std::io::BufWriter::new(fs::File::create(key_path)?);
    for r in rows {
        serde_json::to_writer(&mut f, &r.key)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_embeddings(stem: &Path) -> Result<Vec<KeyedEmbedding>> {
    let (mat_path, key_path) = dump_paths(stem);
    let mut tensors = candle_core::safetensors::load(&mat_path, &Device::Cpu)?;
    let m = tensors
        .remove("embeddings")
        .ok_or_else(|| Error::Checkpoint(format!("{} has no embeddings tensor", mat_path.display())))?;
    let mat: Vec<Vec<f32>> = m.to_vec2()?;
    let keys: Vec<EmbeddingKey> = BufReader::new(fs::File::open(key_path)?)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<_>>()?;
    if keys.len() != mat.len() {
        return Err(Error::LengthMismatch { left: keys.len(), right: mat.len() });
    }
    Ok(keys.into_iter().zip(mat).map(|(key, vector)| KeyedEmbedding { key, vector }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::HyperParams;
    use crate::signal::{NormOrder, ThreatModel};

    fn record(id: &str, benign_ref: &str, label: AttackLabel, scale: f32) -> AttackRecord {
        let benign: Vec<f32> = (0..2000).map(|i| (i as f32 * 0.01).sin() * 0.3).collect();
        let adversarial: Vec<f32> = benign.iter().enumerate().map(|(i, &b)| b + scale * ((i % 7) as f32 - 3.0) * 1e-3).collect();
        AttackRecord {
            record_id: id.into(),
            benign_ref: benign_ref.into(),
            benign: Waveform::new(benign, SAMPLE_RATE).unwrap(),
            adversarial: Waveform::new(adversarial, SAMPLE_RATE).unwrap(),
            label,
            threat: ThreatModel::new(NormOrder::Linf, 0.01).unwrap(),
            hyperparams: HyperParams::default(),
            success: true,
            y: 0,
            y_pred: 1,
            snr_db: 30.0,
        }
    }

    fn records() -> Vec<AttackRecord> {
        vec![
            record("fgsm__a", "a", AttackLabel::Fgsm, 1.0),
            record("fgsm__b", "b", AttackLabel::Fgsm, 1.0),
            record("pgd-l2__a", "a", AttackLabel::PgdL2, 0.5),
            record("pgd-l2__b", "b", AttackLabel::PgdL2, 0.5),
        ]
    }

    #[test]
    fn oracle_inputs_are_perturbations() {
        let recs = records();
        let set = build_training_set(&recs, ExperimentMode::Oracle, None, false).unwrap();
        assert_eq!(set.len(), 4);
        for (i, r) in set.iter().zip(&recs) {
            assert_eq!(i.audio, r.perturbation());
            assert_eq!(i.kind, InputKind::Perturbation);
        }
    }

    #[test]
    fn baseline_inputs_are_adversarial_examples() {
        let recs = records();
        let set = build_evaluation_set(&recs, ExperimentMode::Baseline, None, true).unwrap();
        for (i, r) in set.iter().zip(&recs) {
            assert_eq!(i.audio.samples(), r.adversarial.samples());
        }
        let benign: Vec<&str> = set.iter().filter(|i| i.label.is_benign()).map(|i| i.record_id.as_str()).collect();
        assert_eq!(benign, ["a", "b"]);
    }

    #[test]
    fn estimated_modes_need_a_generator() {
        let recs = records();
        assert!(build_training_set(&recs, ExperimentMode::Proposed, None, false).is_ok());
        assert!(matches!(
            build_evaluation_set(&recs, ExperimentMode::Proposed, None, false),
            Err(Error::Precondition(_))
        ));
        assert!(build_training_set(&recs, ExperimentMode::Estimated, None, false).is_err());
    }

    #[test]
    fn mode_table() {
        use ExperimentMode::*;
        use InputKind::*;
        let rows: Vec<_> = ExperimentMode::ALL.iter().map(|m| (m.train_input(), m.test_input())).collect();
        assert_eq!(
            rows,
            [
                (Adversarial, Adversarial),
                (Perturbation, Perturbation),
                (EstimatedPerturbation, EstimatedPerturbation),
                (Perturbation, EstimatedPerturbation)
            ]
        );
        assert!(!Oracle.needs_generator() && !Baseline.needs_generator());
    }

    #[test]
    fn single_class_is_rejected() {
        let recs: Vec<_> = records().into_iter().filter(|r| r.label == AttackLabel::Fgsm).collect();
        let set = build_training_set(&recs, ExperimentMode::Oracle, None, false).unwrap();
        assert!(matches!(train_signature_extractor(&set, &SignatureConfig::small()), Err(Error::Precondition(_))));
    }

    #[test]
    fn embedding_dump_round_trips() {
        let rows = vec![
            KeyedEmbedding {
                key: EmbeddingKey { record_id: "r1".into(), label: AttackLabel::CwL2, input_kind: InputKind::Perturbation },
                vector: vec![0.6, 0.8],
            },
            KeyedEmbedding {
                key: EmbeddingKey { record_id: "b".into(), label: AttackLabel::Benign, input_kind: InputKind::Benign },
                vector: vec![1.0, 0.0],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("emb/oracle");
        write_embeddings(&stem, &rows).unwrap();
        assert_eq!(read_embeddings(&stem).unwrap(), rows);
    }
}
