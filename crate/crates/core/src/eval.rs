//! The three attack-signature tasks and their metrics: known-attack
//! classification, attack verification and unknown-attack detection.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::advest::GeneratorModel;
use crate::attacks::{AttackLabel, AttackRecord};
use crate::error::{invalid, Error, Result};
use crate::rng::{rng_for, Rng};
use crate::signature::{
    build_inputs, extract_all, ExperimentMode, InputKind, KeyedEmbedding, LabeledInput, SignatureExtractor,
};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One scored comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub score: f64,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrialSet {
    pub task: String,
    pub trials: Vec<Trial>,
}

impl TrialSet {
    pub fn new(task: impl Into<String>, trials: Vec<Trial>) -> Self {
        Self { task: task.into(), trials }
    }

    pub fn targets(&self) -> usize {
        self.trials.iter().filter(|t| t.is_target).count()
    }

    pub fn nontargets(&self) -> usize {
        self.trials.len() - self.targets()
    }
}

/// Equal error rate: scores at or above a threshold are accepted, tied
/// scores move the operating point together, and the crossing of FAR and
/// FRR is interpolated linearly between adjacent operating points.
pub fn compute_eer(trials: &TrialSet) -> Result<f64> {
    let (nt, nn) = (trials.targets(), trials.nontargets());
    if nt == 0 || nn == 0 {
        return Err(invalid(format!("EER needs targets and non-targets, got {nt} and {nn}")));
    }
    if trials.trials.iter().any(|t| !t.score.is_finite()) {
        return Err(invalid("EER needs finite scores"));
    }
    let mut sorted = trials.trials.clone();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (nt, nn) = (nt as f64, nn as f64);
    let (mut far, mut frr) = (0.0, 1.0);
    let (mut acc_t, mut acc_n) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].is_target {
                acc_t += 1;
            } else {
                acc_n += 1;
            }
            i += 1;
        }
        let (f1, r1) = (acc_n as f64 / nn, 1.0 - acc_t as f64 / nt);
        if r1 <= f1 {
            let denom = (f1 - far) - (r1 - frr);
            let alpha = if denom > 0.0 { (frr - far) / denom } else { 0.0 };
            return Ok(far + alpha * (f1 - far));
        }
        far = f1;
        frr = r1;
    }
    unreachable!("the last operating point has FRR = 0 <= FAR = 1")
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationConfig {
    /// Same-class trials requested per class.
    pub targets_per_class: usize,
    /// Non-target trials per target trial.
    pub nontarget_ratio: usize,
    /// Cap on the trials drawn from any one (class, class) pair.
    pub max_per_pair: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self { targets_per_class: 300, nontarget_ratio: 3, max_per_pair: 10_000 }
    }
}

/// A verification trial with the indices of the two embeddings compared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairTrial {
    pub left: usize,
    pub right: usize,
    pub trial: Trial,
}

/// Unordered pair `k` of `0..n` in lexicographic order.
fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

fn draw(rng: &mut Rng, available: usize, want: usize) -> Vec<usize> {
    if want >= available {
        (0..available).collect()
    } else {
        let mut v = sample(rng, available, want).into_vec();
        v.sort_unstable();
        v
    }
}

/// Samples cosine-scored verification trials.
///
/// Each class with at least two embeddings contributes
/// `min(targets_per_class, max_per_pair, C(n, 2))` distinct same-class
/// pairs and `nontarget_ratio` times as many cross-class pairs, spread
/// evenly over the other classes. Pairs are distinct, and each unordered
/// class pair is capped at `max_per_pair`. Classes
/// with fewer than two embeddings contribute only as cross-class partners.
pub fn make_verification_trials(
    embeddings: &[KeyedEmbedding],
    rng: &mut Rng,
    cfg: &VerificationConfig,
) -> Result<(Vec<PairTrial>, Vec<String>)> {
    let mut by_class: BTreeMap<AttackLabel, Vec<usize>> = BTreeMap::new();
    for (i, e) in embeddings.iter().enumerate() {
        by_class.entry(e.key.label).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Precondition(format!("verification needs >= 2 classes, found {}", by_class.len())));
    }
    let classes: Vec<AttackLabel> = by_class.keys().copied().collect();
    let score = |l: usize, r: usize, is_target: bool| PairTrial {
        left: l,
        right: r,
        trial: Trial { score: cosine(&embeddings[l].vector, &embeddings[r].vector), is_target },
    };
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    let mut demand: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (ci, c) in classes.iter().enumerate() {
        let members = &by_class[c];
        let n = members.len();
        if n < 2 {
            warnings.push(format!("class {c} has {n} embedding(s); it contributes no target trials"));
            continue;
        }
        let picked = draw(rng, n * (n - 1) / 2, cfg.targets_per_class.min(cfg.max_per_pair));
        for &k in &picked {
            let (a, b) = unrank_pair(k, n);
            out.push(score(members[a], members[b], true));
        }
        let others = classes.len() - 1;
        let total = picked.len() * cfg.nontarget_ratio;
        for (j, oi) in (0..classes.len()).filter(|&o| o != ci).enumerate() {
            let share = total / others + usize::from(j < total % others);
            *demand.entry((ci.min(oi), ci.max(oi))).or_default() += share;
        }
    }
    for ((ai, bi), want) in demand {
        let (a, b) = (&by_class[&classes[ai]], &by_class[&classes[bi]]);
        for k in draw(rng, a.len() * b.len(), want.min(cfg.max_per_pair)) {
            out.push(score(a[k / b.len()], b[k % b.len()], false));
        }
    }
    Ok((out, warnings))
}

/// Accuracy and confusion counts (rows are true classes, columns predicted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: Vec<AttackLabel>,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn from_predictions(classes: &[AttackLabel], pairs: &[(AttackLabel, AttackLabel)]) -> Result<Self> {
        let index = |l: &AttackLabel| {
            classes.iter().position(|c| c == l).ok_or_else(|| invalid(format!("label {l} is outside the class set")))
        };
        let mut counts = vec![vec![0usize; classes.len()]; classes.len()];
        for (t, p) in pairs {
            counts[index(t)?][index(p)?] += 1;
        }
        Ok(Self { classes: classes.to_vec(), counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: usize = (0..self.classes.len()).map(|i| self.counts[i][i]).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// Row-normalised percentages; empty rows stay zero.
    pub fn row_percent(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter().map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 }).collect()
            })
            .collect()
    }
}

/// Task 1: predict every input with the extractor's classification head.
pub fn classify_known(extractor: &SignatureExtractor, inputs: &[LabeledInput]) -> Result<Confusion> {
    if inputs.is_empty() {
        return Err(invalid("no inputs to classify"));
    }
    let classes = extractor.classes();
    if let Some(i) = inputs.iter().find(|i| !classes.contains(&i.label)) {
        return Err(invalid(format!("label {} of {} is outside the extractor's class set", i.label, i.record_id)));
    }
    let pairs = inputs.iter().map(|i| Ok((i.label, extractor.classify(&i.audio)?))).collect::<Result<Vec<_>>>()?;
    Confusion::from_predictions(classes, &pairs)
}

/// Known and unknown attack groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackGroupSplit {
    pub known: BTreeSet<AttackLabel>,
    pub unknown: BTreeSet<AttackLabel>,
}

impl Default for AttackGroupSplit {
    fn default() -> Self {
        use AttackLabel::*;
        Self { known: [Fgsm, IterFgsm, PgdL1, PgdL2, PgdLinf].into(), unknown: [CwL0, CwL2, CwLinf].into() }
    }
}

impl AttackGroupSplit {
    pub fn new(known: impl IntoIterator<Item = AttackLabel>, unknown: impl IntoIterator<Item = AttackLabel>) -> Result<Self> {
        let s = Self { known: known.into_iter().collect(), unknown: unknown.into_iter().collect() };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.known.intersection(&self.unknown).next() {
            return Err(invalid(format!("{l} is both known and unknown")));
        }
        if self.unknown.contains(&AttackLabel::Benign) {
            return Err(invalid("benign cannot be an unknown attack"));
        }
        Ok(())
    }

    fn is_known(&self, l: AttackLabel, with_benign: bool) -> bool {
        self.known.contains(&l) || (with_benign && l.is_benign())
    }

    fn in_scope(&self, l: AttackLabel, with_benign: bool) -> bool {
        if l.is_benign() {
            with_benign
        } else {
            self.known.contains(&l) || self.unknown.contains(&l)
        }
    }
}

fn centroid(vectors: &[&[f32]]) -> Vec<f32> {
    let dim = vectors[0].len();
    let mut c = vec![0f64; dim];
    for v in vectors {
        for (a, &b) in c.iter_mut().zip(v.iter()) {
            *a += b as f64;
        }
    }
    let n = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
    c.iter().map(|x| (x / n) as f32).collect()
}

/// Task 3 trials: each in-scope evaluation embedding is scored by its
/// maximum cosine similarity to the re-normalised centroids of the known
/// classes computed on `enrollment`, and is a target when its class is
/// known. Without benign, benign embeddings are dropped from both sides.
pub fn unknown_detection_scores(
    enrollment: &[KeyedEmbedding],
    evaluation: &[KeyedEmbedding],
    split: &AttackGroupSplit,
    with_benign: bool,
) -> Result<(TrialSet, Vec<usize>)> {
    split.validate()?;
    let mut groups: BTreeMap<AttackLabel, Vec<&[f32]>> = BTreeMap::new();
    for e in enrollment.iter().filter(|e| split.is_known(e.key.label, with_benign)) {
        groups.entry(e.key.label).or_default().push(&e.vector);
    }
    let used: Vec<(usize, &KeyedEmbedding)> =
        evaluation.iter().enumerate().filter(|(_, e)| split.in_scope(e.key.label, with_benign)).collect();
    for (_, e) in &used {
        if split.is_known(e.key.label, with_benign) && !groups.contains_key(&e.key.label) {
            return Err(Error::Precondition(format!("known class {} has no enrollment embeddings", e.key.label)));
        }
    }
    if groups.is_empty() {
        return Err(Error::Precondition("no known-class enrollment embeddings".into()));
    }
    let centroids: Vec<Vec<f32>> = groups.values().map(|v| centroid(v)).collect();
    let trials = used
        .iter()
        .map(|(_, e)| Trial {
            score: centroids.iter().map(|c| cosine(&e.vector, c)).fold(f64::NEG_INFINITY, f64::max),
            is_target: split.is_known(e.key.label, with_benign),
        })
        .collect();
    let tag = if with_benign { "detection/with-benign" } else { "detection/without-benign" };
    Ok((TrialSet::new(tag, trials), used.iter().map(|(i, _)| *i).collect()))
}

/// EER of one trial group with its trial counts. `eer` is absent when the
/// group has no targets or no non-targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EerEntry {
    pub eer: Option<f64>,
    pub targets: usize,
    pub nontargets: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl EerEntry {
    pub fn from_trials(t: &TrialSet) -> Self {
        let (targets, nontargets) = (t.targets(), t.nontargets());
        match compute_eer(t) {
            Ok(e) => Self { eer: Some(e), targets, nontargets, note: None },
            Err(err) => Self { eer: None, targets, nontargets, note: Some(err.to_string()) },
        }
    }

    fn unavailable(note: String) -> Self {
        Self { eer: None, targets: 0, nontargets: 0, note: Some(note) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownReport {
    pub classes: Vec<AttackLabel>,
    pub accuracy: f64,
    pub evaluated: usize,
    pub confusion: Vec<Vec<usize>>,
    pub confusion_percent: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub known: EerEntry,
    pub unknown: EerEntry,
    pub known_unknown: EerEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub with_benign: EerEntry,
    pub without_benign: EerEntry,
}

/// All tasks for one experiment mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub schema_version: u32,
    pub mode: ExperimentMode,
    pub train_input: InputKind,
    pub test_input: InputKind,
    pub known_classification: KnownReport,
    pub verification: VerificationReport,
    pub detection: DetectionReport,
    pub warnings: Vec<String>,
}

/// Which input fed which trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub mode: ExperimentMode,
    pub task: String,
    pub record_id: String,
    pub label: AttackLabel,
    pub input_kind: InputKind,
}

/// Trained models the suite evaluates.
pub struct SuiteModels<'a> {
    /// Classifies known attacks (Task 1).
    pub known: &'a SignatureExtractor,
    /// Trained without the unknown group (Tasks 2 and 3).
    pub open_set: &'a SignatureExtractor,
    /// Generator trained on all attacks; needed when the mode tests on estimates.
    pub generator: Option<&'a GeneratorModel>,
    /// Generator trained without the unknown group.
    pub generator_open_set: Option<&'a GeneratorModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub split: AttackGroupSplit,
    pub verification: VerificationConfig,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { split: AttackGroupSplit::default(), verification: VerificationConfig::default(), seed: 0 }
    }
}

fn audit(mode: ExperimentMode, task: &str, inputs: impl IntoIterator<Item = (String, AttackLabel, InputKind)>) -> Vec<AuditEntry> {
    inputs
        .into_iter()
        .map(|(record_id, label, input_kind)| AuditEntry { mode, task: task.to_string(), record_id, label, input_kind })
        .collect()
}

fn verification_entry(
    embeddings: &[KeyedEmbedding],
    keep: impl Fn(AttackLabel) -> bool,
    cfg: &VerificationConfig,
    rng: &mut Rng,
    tag: &str,
    warnings: &mut Vec<String>,
) -> (EerEntry, Vec<usize>) {
    let idx: Vec<usize> = (0..embeddings.len()).filter(|&i| keep(embeddings[i].key.label)).collect();
    let subset: Vec<KeyedEmbedding> = idx.iter().map(|&i| embeddings[i].clone()).collect();
    match make_verification_trials(&subset, rng, cfg) {
        Ok((pairs, w)) => {
            warnings.extend(w.into_iter().map(|w| format!("{tag}: {w}")));
            let mut used: Vec<usize> = pairs.iter().flat_map(|p| [idx[p.left], idx[p.right]]).collect();
            used.sort_unstable();
            used.dedup();
            let set = TrialSet::new(tag, pairs.iter().map(|p| p.trial).collect());
            (EerEntry::from_trials(&set), used)
        }
        Err(e) => (EerEntry::unavailable(e.to_string()), Vec::new()),
    }
}

/// Runs the three tasks for `mode`.
///
/// Task 1 classifies the test inputs with `models.known`, benign sources
/// included when the extractor has a benign class. Tasks 2 and 3 use
/// `models.open_set` embeddings; Task 3 enrolls the known-class centroids
/// from the training records' inputs of the mode's training kind. Benign
/// inputs take part in Task 3 "with benign" only.
pub fn run_task_suite(
    mode: ExperimentMode,
    models: &SuiteModels<'_>,
    train: &[AttackRecord],
    test: &[AttackRecord],
    cfg: &SuiteConfig,
) -> Result<(TaskReport, Vec<AuditEntry>)> {
    cfg.split.validate()?;
    if test.is_empty() || train.is_empty() {
        return Err(Error::Precondition("the task suite needs nonempty train and test records".into()));
    }
    fn missing(what: &str) -> Error {
        Error::Precondition(format!("mode needs the {what} generator"))
    }
    let estimated = |k: InputKind| k == InputKind::EstimatedPerturbation;
    if estimated(mode.test_input()) && models.generator.is_none() {
        return Err(missing("all-attacks"));
    }
    if mode.needs_generator() && models.generator_open_set.is_none() {
        return Err(missing("leave-out"));
    }
    let mut warnings = Vec::new();
    let mut log = Vec::new();

    // Task 1.
    let known_records: Vec<AttackRecord> =
        test.iter().filter(|r| models.known.classes().contains(&r.label)).cloned().collect();
    if known_records.len() < test.len() {
        warnings.push(format!(
            "known classification: {} test records fall outside the extractor's classes",
            test.len() - known_records.len()
        ));
    }
    let t1_benign = models.known.classes().contains(&AttackLabel::Benign);
    let t1_inputs = build_inputs(&known_records, mode.test_input(), models.generator, t1_benign)?;
    let confusion = classify_known(models.known, &t1_inputs)?;
    log.extend(audit(mode, "known-classification", t1_inputs.iter().map(|i| (i.record_id.clone(), i.label, i.kind))));
    let known_classification = KnownReport {
        classes: confusion.classes.clone(),
        accuracy: confusion.accuracy(),
        evaluated: confusion.total(),
        confusion_percent: confusion.row_percent(),
        confusion: confusion.counts,
    };

    // Task 2.
    let g_open = models.generator_open_set;
    let test_inputs = build_inputs(test, mode.test_input(), g_open, true)?;
    let test_emb = extract_all(models.open_set, &test_inputs)?;
    let mut rng = rng_for(cfg.seed, &format!("verification/{}", mode.slug()));
    let split = &cfg.split;
    let mut groups = Vec::new();
    for (tag, keep) in [
        ("verification/known", Box::new(|l: AttackLabel| split.known.contains(&l)) as Box<dyn Fn(AttackLabel) -> bool>),
        ("verification/unknown", Box::new(|l: AttackLabel| split.unknown.contains(&l))),
        ("verification/known+unknown", Box::new(|l: AttackLabel| split.known.contains(&l) || split.unknown.contains(&l))),
    ] {
        let (entry, used) = verification_entry(&test_emb, keep, &cfg.verification, &mut rng, tag, &mut warnings);
        log.extend(audit(mode, tag, used.iter().map(|&i| (test_emb[i].key.record_id.clone(), test_emb[i].key.label, test_emb[i].key.input_kind))));
        groups.push(entry);
    }
    let known_unknown = groups.pop().expect("three groups");
    let unknown = groups.pop().expect("three groups");
    let known = groups.pop().expect("three groups");

    // Task 3.
    let enroll_inputs = build_inputs(train, mode.train_input(), g_open, true)?;
    let enroll = extract_all(models.open_set, &enroll_inputs)?;
    let mut detection = Vec::new();
    for with_benign in [true, false] {
        let entry = match unknown_detection_scores(&enroll, &test_emb, split, with_benign) {
            Ok((trials, used)) => {
                log.extend(audit(mode, &trials.task, used.iter().map(|&i| (test_emb[i].key.record_id.clone(), test_emb[i].key.label, test_emb[i].key.input_kind))));
                EerEntry::from_trials(&trials)
            }
            Err(e) => EerEntry::unavailable(e.to_string()),
        };
        detection.push(entry);
    }
    let without_benign = detection.pop().expect("two settings");
    let with_benign = detection.pop().expect("two settings");

    Ok((
        TaskReport {
            schema_version: REPORT_SCHEMA_VERSION,
            mode,
            train_input: mode.train_input(),
            test_input: mode.test_input(),
            known_classification,
            verification: VerificationReport { known, unknown, known_unknown },
            detection: DetectionReport { with_benign, without_benign },
            warnings,
        },
        log,
    ))
}
