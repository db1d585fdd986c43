//! The speaker-identification network under attack.
//!
//! Log-mel front-end, residual encoder with statistics pooling and an AAM
//! softmax head. The margin only enters the training loss; inference logits
//! are scaled cosines. Every operation after training is a pure read of the
//! parameters and gradients flow to the waveform only.

use std::path::Path;

use candle_core::{Device, Tensor, Var, D};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use crate::corpus::LabeledUtterance;
use crate::error::{invalid, Error, Result};
use crate::nn::aam::{argmax, AamHead};
use crate::nn::frontend::FrontEndConfig;
use crate::nn::layers::Builder;
use crate::nn::xvector::{batch_tensor, Encoder, EncoderConfig};
use crate::nn::{adam, CheckpointMeta, ParamStore};
use crate::rng::{derive_seed, rng_from_seed};
use crate::signal::{Waveform, SAMPLE_RATE};

pub const CHECKPOINT_KIND: &str = "victim";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimConfig {
    pub encoder: EncoderConfig,
    pub num_speakers: usize,
    /// AAM-softmax scale `s`.
    pub scale: f64,
    /// AAM-softmax margin `m`.
    pub margin: f64,
}

impl VictimConfig {
    /// Small network (~120k parameters) for synthetic desk-scale corpora.
    pub fn small(num_speakers: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                frontend: FrontEndConfig::log_mel(256, 128, 256, 32, SAMPLE_RATE),
                channels: 64,
                blocks: 3,
                embedding_dim: 64,
                feature_means: false,
            },
            num_speakers,
            scale: 16.0,
            margin: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Random crop length in samples.
    pub crop_len: usize,
    /// Fraction of training over which the margin ramps linearly from 0.
    pub margin_warmup: f64,
    /// Oversample every class to the size of the largest in each epoch.
    #[serde(default)]
    pub class_balanced: bool,
    pub seed: u64,
}

impl Default for VictimTrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 8, lr: 3e-3, crop_len: 4000, margin_warmup: 0.3, class_balanced: false, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub speaker: usize,
    pub posteriors: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct SpeakerClassifier {
    config: VictimConfig,
    store: ParamStore,
    encoder: Encoder,
    head: AamHead,
}

fn assemble(cfg: &VictimConfig, store: &mut ParamStore, seed: u64) -> Result<(Encoder, AamHead)> {
    let mut rng = rng_from_seed(seed);
    let device = store.device().clone();
    let mut b = Builder::new(store, &mut rng, "victim");
    let encoder = Encoder::build(&cfg.encoder, &mut b, &device)?;
    let head = AamHead::build(&mut b, cfg.num_speakers, cfg.encoder.embedding_dim, cfg.scale, cfg.margin)?;
    Ok((encoder, head))
}

impl SpeakerClassifier {
    /// Freshly initialised (untrained) classifier.
    pub fn new(config: VictimConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        assemble(&config, &mut store, seed)?;
        Self::from_store(config, store)
    }

    pub(crate) fn from_store(config: VictimConfig, store: ParamStore) -> Result<Self> {
        if config.num_speakers < 2 {
            return Err(invalid("a speaker classifier needs at least 2 speakers"));
        }
        let mut frozen = store.frozen();
        let (encoder, head) = assemble(&config, &mut frozen, 0)?;
        Ok(Self { config, store, encoder, head })
    }

    pub fn config(&self) -> &VictimConfig {
        &self.config
    }

    pub fn num_speakers(&self) -> usize {
        self.config.num_speakers
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn min_len(&self) -> usize {
        self.encoder.min_len()
    }

    /// Un-normalised embeddings for a `[B, T]` batch.
    pub fn embeddings_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.check_len(x.dim(1)?)?;
        self.encoder.forward(x)
    }

    /// Inference logits `s * cos` for a `[B, T]` batch.
    pub fn logits_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.check_len(x.dim(1)?)?;
        self.head.logits(&self.encoder.forward(x)?)
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        let t = batch_tensor(&[x], self.device())?;
        Ok(self.logits_tensor(&t)?.squeeze(0)?.to_vec1()?)
    }

    pub fn predict(&self, x: &Waveform) -> Result<Prediction> {
        Ok(self.predict_batch(&[x.samples()])?.remove(0))
    }

    /// Batched prediction over equal-length inputs.
    pub fn predict_batch(&self, rows: &[&[f32]]) -> Result<Vec<Prediction>> {
        let logits = self.logits_tensor(&batch_tensor(rows, self.device())?)?;
        let post = candle_nn::ops::softmax(&logits, D::Minus1)?.to_vec2::<f32>()?;
        let logits = logits.to_vec2::<f32>()?;
        Ok(logits
            .iter()
            .zip(post)
            .map(|(l, posteriors)| Prediction { speaker: argmax(l), posteriors })
            .collect())
    }

    /// Evaluates a per-example objective of the inference logits and its
    /// gradient with respect to each input row.
    ///
    /// `objective` maps `[B, K]` logits to `[B]` values. Examples do not
    /// interact inside the network, so the gradient of the batch sum splits
    /// into per-example input gradients.
    pub fn objective_and_gradient<F>(&self, rows: &[&[f32]], objective: F) -> Result<(Vec<f32>, Vec<Vec<f32>>)>
    where
        F: FnOnce(&Tensor) -> Result<Tensor>,
    {
        let x = Var::from_tensor(&batch_tensor(rows, self.device())?)?;
        let logits = self.logits_tensor(x.as_tensor())?;
        let values = objective(&logits)?;
        let grads = values.sum_all()?.backward()?;
        let g = grads
            .get(x.as_tensor())
            .cloned()
            .unwrap_or(x.as_tensor().zeros_like()?);
        Ok((values.to_vec1()?, g.to_vec2()?))
    }

    /// Per-example cross-entropy of the inference logits and its input gradients.
    pub fn loss_and_gradient_batch(&self, rows: &[&[f32]], ys: &[usize]) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        self.check_labels(ys)?;
        let targets = Tensor::from_vec(ys.iter().map(|&y| y as u32).collect::<Vec<_>>(), (ys.len(), 1), self.device())?;
        self.objective_and_gradient(rows, |logits| {
            let lsm = candle_nn::ops::log_softmax(logits, D::Minus1)?;
            Ok(lsm.gather(&targets, 1)?.squeeze(1)?.neg()?)
        })
    }

    /// Cross-entropy at `y` and its gradient with respect to `x`.
    pub fn loss_and_input_gradient(&self, x: &Waveform, y: usize) -> Result<(f32, Waveform)> {
        let (l, mut g) = self.loss_and_gradient_batch(&[x.samples()], &[y])?;
        Ok((l[0], x.with_samples(g.remove(0))?))
    }

    pub fn loss(&self, x: &[f32], y: usize) -> Result<f32> {
        self.check_labels(&[y])?;
        let logits = self.logits(x)?;
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + logits.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln();
        Ok((lse - logits[y] as f64) as f32)
    }

    fn check_labels(&self, ys: &[usize]) -> Result<()> {
        match ys.iter().find(|&&y| y >= self.config.num_speakers) {
            Some(y) => Err(invalid(format!("speaker label {y} out of range (num_speakers = {})", self.config.num_speakers))),
            None => Ok(()),
        }
    }

    /// Closed-set accuracy over labelled utterances.
    pub fn accuracy(&self, utts: &[LabeledUtterance]) -> Result<f64> {
        if utts.is_empty() {
            return Err(invalid("accuracy over an empty set"));
        }
        let mut correct = 0usize;
        for u in utts {
            if self.predict(&u.audio)?.speaker == u.speaker {
                correct += 1;
            }
        }
        Ok(correct as f64 / utts.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.save(path, &CheckpointMeta::new(CHECKPOINT_KIND, &self.config)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (store, meta) = ParamStore::load(path, CHECKPOINT_KIND)?;
        let config: VictimConfig = serde_json::from_value(meta.config)?;
        Self::from_store(config, store)
    }

    /// Same parameters with the classification head zeroed, so every
    /// posterior is uniform.
    pub fn with_zeroed_head(&self) -> Result<Self> {
        let store = self.store.deep_clone()?;
        let head = store.get("victim.head.weight").ok_or_else(|| Error::Checkpoint("missing head".into()))?;
        head.set(&head.zeros_like()?)?;
        Self::from_store(self.config.clone(), store)
    }
}

/// Shuffled example indices for one epoch; balanced epochs cycle through a
/// shuffled copy of each class until it reaches the largest class size.
fn epoch_order(corpus: &[LabeledUtterance], classes: usize, balanced: bool, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = if balanced {
        let mut by_class = vec![Vec::new(); classes];
        corpus.iter().enumerate().for_each(|(i, u)| by_class[u.speaker].push(i));
        let max = by_class.iter().map(Vec::len).max().unwrap_or(0);
        by_class
            .iter_mut()
            .flat_map(|members| {
                members.shuffle(rng);
                members.iter().copied().cycle().take(max).collect::<Vec<_>>()
            })
            .collect()
    } else {
        (0..corpus.len()).collect()
    };
    order.shuffle(rng);
    order
}

fn check_corpus(corpus: &[LabeledUtterance], num_speakers: usize) -> Result<()> {
    if num_speakers < 2 {
        return Err(Error::Precondition(format!("need at least 2 speakers, config has {num_speakers}")));
    }
    let mut counts = vec![0usize; num_speakers];
    for u in corpus {
        if u.speaker >= num_speakers {
            return Err(Error::Precondition(format!("utterance {} has label {} >= {num_speakers}", u.id, u.speaker)));
        }
        counts[u.speaker] += 1;
    }
    if let Some((s, c)) = counts.iter().enumerate().find(|(_, &c)| c < 2) {
        return Err(Error::Precondition(format!("speaker {s} has {c} utterances; need at least 2")));
    }
    Ok(())
}

fn crop(x: &[f32], len: usize, rng: &mut impl rand::Rng) -> Vec<f32> {
    if x.len() <= len {
        let mut v = x.to_vec();
        v.resize(len, 0.0);
        return v;
    }
    let start = rng.random_range(0..=x.len() - len);
    x[start..start + len].to_vec()
}

/// Trains a classifier on `corpus`; reproducible for a fixed seed.
pub fn train_victim(
    corpus: &[LabeledUtterance],
    config: VictimConfig,
    train: &VictimTrainConfig,
) -> Result<(SpeakerClassifier, TrainReport)> {
    check_corpus(corpus, config.num_speakers)?;
    let mut store = ParamStore::new();
    let (encoder, mut head) = assemble(&config, &mut store, derive_seed(train.seed, "init"))?;
    let mut opt = adam(store.vars(), train.lr, 0.9, 0.999)?;
    let mut rng = rng_from_seed(derive_seed(train.seed, "batches"));
    let device = store.device().clone();
    let mut report = TrainReport { epoch_loss: vec![], epoch_accuracy: vec![] };
    let crop_len = train.crop_len.max(encoder.min_len());
    let epoch_len = if train.class_balanced {
        let mut counts = vec![0usize; config.num_speakers];
        corpus.iter().for_each(|u| counts[u.speaker] += 1);
        counts.iter().max().copied().unwrap_or(0) * config.num_speakers
    } else {
        corpus.len()
    };
    let total_steps = train.epochs * epoch_len.div_ceil(train.batch_size);
    let mut step = 0usize;
    for epoch in 0..train.epochs {
        let order = epoch_order(corpus, config.num_speakers, train.class_balanced, &mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(train.batch_size) {
            // Cosine decay to 10% of the base rate.
            let frac = step as f64 / total_steps.max(1) as f64;
            opt.set_learning_rate(train.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())));
            head.margin = config.margin * (frac / train.margin_warmup.max(1e-9)).min(1.0);
            let crops: Vec<Vec<f32>> = chunk.iter().map(|&i| crop(corpus[i].audio.samples(), crop_len, &mut rng)).collect();
            let rows: Vec<&[f32]> = crops.iter().map(Vec::as_slice).collect();
            let targets: Vec<u32> = chunk.iter().map(|&i| corpus[i].speaker as u32).collect();
            let x = batch_tensor(&rows, &device)?;
            let emb = encoder.forward(&x)?;
            let logits = head.margin_logits(&emb, &targets)?;
            let t = Tensor::from_vec(targets.clone(), targets.len(), &device)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &t)?;
            let lv = loss.to_scalar::<f32>()?;
            if !lv.is_finite() {
                return Err(Error::Diverged { step, detail: format!("victim loss {lv}") });
            }
            opt.backward_step(&loss)?;
            let plain = head.logits(&emb)?.to_vec2::<f32>()?;
            correct += plain.iter().zip(&targets).filter(|(l, &y)| argmax(l) == y as usize).count();
            seen += chunk.len();
            loss_sum += lv as f64 * chunk.len() as f64;
            step += 1;
        }
        report.epoch_loss.push(loss_sum / seen as f64);
        report.epoch_accuracy.push(correct as f64 / seen as f64);
        log::info!("victim epoch {epoch}: loss {:.4} acc {:.3}", loss_sum / seen as f64, correct as f64 / seen as f64);
    }
    drop((encoder, head));
    Ok((SpeakerClassifier::from_store(config, store)?, report))
}
