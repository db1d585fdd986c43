//! Adversarial perturbation estimation.
//!
//! A conditional GAN learns to map adversarial audio back to its benign
//! source; the perturbation estimate is the residual `x' - G(x')`. The
//! generator is trained on the dual contrastive adversarial loss plus a
//! weighted multi-resolution STFT supervision loss, two generator updates per
//! discriminator update.

mod generator;
mod loss;

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use generator::{
    Discriminator, DiscriminatorConfig, EncoderInit, Generator, GeneratorConfig, MaskMode,
};
pub use loss::{
    dcl_adversarial_loss, dcl_adversarial_loss_tensor, default_resolutions, mrstft_loss, mrstft_terms, Mrstft,
    StftResolution,
};

use crate::attacks::{AttackLabel, AttackRecord};
use crate::error::{invalid, Error, Result};
use crate::nn::layers::Builder;
use crate::nn::{adam, set_lr, CheckpointMeta, ParamStore};
use crate::rng::{derive_seed, rng_for, rng_from_seed};
use crate::signal::{energy_vad_mask, lp_norm, NormOrder, Waveform, VAD_FRAME_MS, VAD_THRESHOLD_DB};

pub const GENERATOR_KIND: &str = "advest-generator";
pub const DISCRIMINATOR_KIND: &str = "advest-discriminator";

/// Which attack classes a generator is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvestVariant {
    AllAttacks,
    /// Excludes the CW classes; used when CW serves as the unknown group.
    LeaveOutCw,
}

impl AdvestVariant {
    pub const ALL: [AdvestVariant; 2] = [AdvestVariant::AllAttacks, AdvestVariant::LeaveOutCw];

    pub fn includes(self, label: AttackLabel) -> bool {
        !label.is_benign() && (self == AdvestVariant::AllAttacks || !label.is_cw())
    }

    pub fn slug(self) -> &'static str {
        match self {
            AdvestVariant::AllAttacks => "all-attacks",
            AdvestVariant::LeaveOutCw => "leave-out-cw",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CganTrainConfig {
    pub lambda_sup: f64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    /// Both rates decay linearly to this value at the last step.
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub g_updates_per_d_update: usize,
    /// Leading generator steps that descend `lambda_sup * L_sup` alone, with
    /// the discriminator frozen.
    #[serde(default)]
    pub adversarial_warmup_steps: usize,
    /// Generator updates, warm-up included.
    pub steps: usize,
    pub batch_size: usize,
    pub segment_len: usize,
    pub resolutions: Vec<StftResolution>,
    pub vad_frame_ms: f64,
    pub vad_threshold_db: f64,
    /// Write checkpoints every this many steps when a directory is given; 0 = never.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for CganTrainConfig {
    fn default() -> Self {
        Self {
            lambda_sup: 0.001,
            lr_generator: 2e-4,
            lr_discriminator: 1e-4,
            lr_final: 1e-8,
            beta1: 0.5,
            beta2: 0.999,
            g_updates_per_d_update: 2,
            adversarial_warmup_steps: 0,
            steps: 2000,
            batch_size: 8,
            segment_len: 16384,
            resolutions: default_resolutions(),
            vad_frame_ms: VAD_FRAME_MS,
            vad_threshold_db: VAD_THRESHOLD_DB,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl CganTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr_generator, self.lr_discriminator, self.lr_final];
        if rates.iter().any(|r| !(*r > 0.0)) {
            return Err(invalid("CGAN learning rates must be positive"));
        }
        if self.g_updates_per_d_update == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(invalid("g_updates_per_d_update, steps and batch_size must be >= 1"));
        }
        if !(self.lambda_sup >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("lambda_sup must be >= 0 and betas in [0, 1)"));
        }
        if self.resolutions.is_empty() {
            return Err(invalid("at least one STFT resolution is required"));
        }
        Ok(())
    }

    /// Learning rates at generator step `step`.
    pub fn rates_at(&self, step: usize) -> (f64, f64) {
        let frac = if self.steps > 1 { step as f64 / (self.steps - 1) as f64 } else { 1.0 };
        let lerp = |a: f64| a + (self.lr_final - a) * frac;
        (lerp(self.lr_generator), lerp(self.lr_discriminator))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CganLogRow {
    pub step: usize,
    #[serde(rename = "L_adv")]
    pub l_adv: f64,
    #[serde(rename = "L_sup")]
    pub l_sup: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

pub fn write_training_log(path: &Path, rows: &[CganLogRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Benign/adversarial pair with silence removed from both by the benign VAD mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub adversarial: Vec<f32>,
    pub benign: Vec<f32>,
}

/// Pairs from every record whose class the variant includes.
pub fn prepare_pairs(
    records: &[AttackRecord],
    variant: AdvestVariant,
    frame_ms: f64,
    threshold_db: f64,
) -> Result<Vec<TrainingPair>> {
    records
        .iter()
        .filter(|r| variant.includes(r.label))
        .map(|r| {
            let keep = energy_vad_mask(&r.benign, frame_ms, threshold_db)?;
            let pick = |w: &Waveform| w.iter().zip(&keep).filter(|(_, &k)| k).map(|(&s, _)| s).collect();
            Ok(TrainingPair { adversarial: pick(&r.adversarial), benign: pick(&r.benign) })
        })
        .collect()
}

/// A generator with frozen parameters.
pub struct GeneratorModel {
    store: ParamStore,
    net: Generator,
}

impl GeneratorModel {
    /// Freshly initialised generator.
    pub fn new(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        build_generator(&mut store, cfg, seed)?;
        Self::from_store(store, cfg)
    }

    fn from_store(store: ParamStore, cfg: &GeneratorConfig) -> Result<Self> {
        let mut frozen = store.frozen();
        let net = build_generator(&mut frozen, cfg, 0)?;
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &GeneratorConfig {
        self.net.config()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn min_len(&self) -> usize {
        self.net.min_len()
    }

    pub fn reconstruct(&self, x_adv: &[f32]) -> Result<Vec<f32>> {
        self.net.apply(x_adv, self.store.device())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.save(path, &CheckpointMeta::new(GENERATOR_KIND, self.config())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (store, meta) = ParamStore::load(path, GENERATOR_KIND)?;
        let cfg: GeneratorConfig = serde_json::from_value(meta.config)?;
        Self::from_store(store, &cfg)
    }
}

pub struct DiscriminatorModel {
    store: ParamStore,
    config: DiscriminatorConfig,
}

impl DiscriminatorModel {
    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.store.save(path, &CheckpointMeta::new(DISCRIMINATOR_KIND, &self.config)?)
    }

    /// Logits for a batch of equal-length rows.
    pub fn logits(&self, rows: &[&[f32]]) -> Result<Vec<f32>> {
        let mut frozen = self.store.frozen();
        let mut rng = rng_from_seed(0);
        let d = Discriminator::build(&self.config, &mut Builder::new(&mut frozen, &mut rng, "d"))?;
        let x = crate::nn::xvector::batch_tensor(rows, frozen.device())?;
        Ok(d.forward(&x)?.to_vec1::<f32>()?)
    }
}

fn build_generator(store: &mut ParamStore, cfg: &GeneratorConfig, seed: u64) -> Result<Generator> {
    let mut rng = rng_for(seed, "advest/generator");
    let mut filters = rng_for(seed, "advest/encoder");
    Generator::build(cfg, &mut Builder::new(store, &mut rng, "g"), &mut filters)
}

/// `x' - G(x')`.
pub fn estimate_perturbation(g: &GeneratorModel, x_adv: &Waveform) -> Result<Waveform> {
    let xhat = g.reconstruct(x_adv.samples())?;
    x_adv.with_samples(x_adv.iter().zip(&xhat).map(|(a, b)| a - b).collect())
}

/// Mean `||delta_hat - delta||_2` over records.
pub fn mean_estimation_error(g: &GeneratorModel, records: &[AttackRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(invalid("no records to evaluate"));
    }
    let mut total = 0.0;
    for r in records {
        let est = estimate_perturbation(g, &r.adversarial)?;
        let diff: Vec<f32> = est.iter().zip(r.perturbation().iter()).map(|(a, b)| a - b).collect();
        total += lp_norm(&diff, NormOrder::L2);
    }
    Ok(total / records.len() as f64)
}

/// Generator objective `L_adv + lambda * L_sup`, combined in 64-bit.
pub struct CganObjective {
    pub total: Tensor,
    pub adv: Tensor,
    pub sup: Tensor,
}

pub fn generator_objective(
    g: &Generator,
    d: &Discriminator,
    mrstft: &Mrstft,
    x_adv: &Tensor,
    x: &Tensor,
    lambda_sup: f64,
) -> Result<CganObjective> {
    let xhat = g.forward(x_adv)?;
    let adv = dcl_adversarial_loss_tensor(&d.forward(x)?, &d.forward(&xhat)?)?;
    let sup = mrstft.loss(&xhat, x)?;
    let total = (adv.to_dtype(DType::F64)? + (sup.to_dtype(DType::F64)? * lambda_sup)?)?;
    Ok(CganObjective { total, adv, sup })
}

/// What the discriminator ascends, with the generator output held fixed.
pub fn discriminator_objective(g: &Generator, d: &Discriminator, x_adv: &Tensor, x: &Tensor) -> Result<Tensor> {
    let xhat = g.forward(x_adv)?.detach();
    dcl_adversarial_loss_tensor(&d.forward(x)?, &d.forward(&xhat)?)
}

struct Batcher<'a> {
    pairs: &'a [TrainingPair],
    segment: usize,
    rng: crate::rng::Rng,
}

impl Batcher<'_> {
    fn next(&mut self, n: usize, device: &Device) -> Result<(Tensor, Tensor)> {
        let mut adv = Vec::with_capacity(n * self.segment);
        let mut ben = Vec::with_capacity(n * self.segment);
        for _ in 0..n {
            let p = &self.pairs[self.rng.random_range(0..self.pairs.len())];
            let len = p.benign.len();
            let (start, take) = if len > self.segment {
                (self.rng.random_range(0..=len - self.segment), self.segment)
            } else {
                (0, len)
            };
            adv.extend_from_slice(&p.adversarial[start..start + take]);
            ben.extend_from_slice(&p.benign[start..start + take]);
            adv.resize(adv.len() + self.segment - take, 0.0);
            ben.resize(ben.len() + self.segment - take, 0.0);
        }
        Ok((
            Tensor::from_vec(adv, (n, self.segment), device)?,
            Tensor::from_vec(ben, (n, self.segment), device)?,
        ))
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub struct CganOutcome {
    pub generator: GeneratorModel,
    pub discriminator: DiscriminatorModel,
    pub log: Vec<CganLogRow>,
}

fn save_pair(store: &ParamStore, gcfg: &GeneratorConfig, dcfg: &DiscriminatorConfig, dir: &Path, tag: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let g = GeneratorModel::from_store(store.subset("g.")?, gcfg)?;
    g.save(dir.join(format!("generator_{tag}.safetensors")))?;
    let d = DiscriminatorModel { store: store.subset("d.")?, config: dcfg.clone() };
    d.save(dir.join(format!("discriminator_{tag}.safetensors")))
}

/// Alternating training: `g_updates_per_d_update` generator steps descending
/// `L_adv + lambda_sup * L_sup`, then one discriminator step ascending `L_adv`.
///
/// Periodic checkpoints and, on a non-finite loss, a diagnostic snapshot go
/// to `checkpoint_dir` when given.
pub fn train_cgan(
    pairs: &[TrainingPair],
    gcfg: &GeneratorConfig,
    dcfg: &DiscriminatorConfig,
    cfg: &CganTrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<CganOutcome> {
    cfg.validate()?;
    gcfg.validate()?;
    dcfg.validate()?;
    if pairs.is_empty() {
        return Err(invalid("CGAN training needs at least one pair"));
    }
    if pairs.iter().any(|p| p.benign.len() != p.adversarial.len() || p.benign.is_empty()) {
        return Err(invalid("training pairs must be nonempty and aligned"));
    }
    let device = Device::Cpu;
    let mrstft = Mrstft::new(&cfg.resolutions, DType::F32, &device)?;
    let min = gcfg.receptive_field().max(mrstft.min_len());
    if cfg.segment_len < min {
        return Err(Error::TooShort { len: cfg.segment_len, min });
    }

    let mut store = ParamStore::new();
    let g = build_generator(&mut store, gcfg, cfg.seed)?;
    let mut drng = rng_for(cfg.seed, "advest/discriminator");
    let d = Discriminator::build(dcfg, &mut Builder::new(&mut store, &mut drng, "d"))?;
    let (lr_g0, lr_d0) = cfg.rates_at(0);
    let mut opt_g = adam(store.vars_with_prefix("g."), lr_g0, cfg.beta1, cfg.beta2)?;
    let mut opt_d = adam(store.vars_with_prefix("d."), lr_d0, cfg.beta1, cfg.beta2)?;
    let mut batches = Batcher { pairs, segment: cfg.segment_len, rng: rng_from_seed(derive_seed(cfg.seed, "advest/batches")) };

    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (lr_g, lr_d) = cfg.rates_at(step);
        set_lr(&mut opt_g, lr_g);
        set_lr(&mut opt_d, lr_d);
        let (xa, x) = batches.next(cfg.batch_size, &device)?;
        let obj = generator_objective(&g, &d, &mrstft, &xa, &x, cfg.lambda_sup)?;
        let (l_adv, l_sup) = (scalar(&obj.adv)?, scalar(&obj.sup)?);
        if !(l_adv.is_finite() && l_sup.is_finite()) {
            if let Some(dir) = checkpoint_dir {
                save_pair(&store, gcfg, dcfg, dir, "diverged")?;
            }
            return Err(Error::Diverged { step, detail: format!("L_adv = {l_adv}, L_sup = {l_sup}") });
        }
        let warm = step < cfg.adversarial_warmup_steps;
        if warm {
            opt_g.backward_step(&(obj.sup.to_dtype(DType::F64)? * cfg.lambda_sup)?)?;
        } else {
            opt_g.backward_step(&obj.total)?;
        }
        if !warm && (step + 1 - cfg.adversarial_warmup_steps) % cfg.g_updates_per_d_update == 0 {
            let ld = discriminator_objective(&g, &d, &xa, &x)?;
            if !scalar(&ld)?.is_finite() {
                return Err(Error::Diverged { step, detail: "discriminator objective is not finite".into() });
            }
            opt_d.backward_step(&ld.neg()?)?;
        }
        log.push(CganLogRow { step, l_adv, l_sup, lr_g, lr_d });
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                save_pair(&store, gcfg, dcfg, dir, &format!("{:06}", step + 1))?;
            }
        }
    }

    Ok(CganOutcome {
        generator: GeneratorModel::from_store(store.subset("g.")?, gcfg)?,
        discriminator: DiscriminatorModel { store: store.subset("d.")?, config: dcfg.clone() },
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn tiny_cfg() -> (GeneratorConfig, DiscriminatorConfig, CganTrainConfig) {
        let g = GeneratorConfig {
            encoder_channels: 16,
            kernel: 8,
            stride: 4,
            layers_per_stack: 2,
            separator_channels: 8,
            hidden_channels: 16,
            ..GeneratorConfig::smoke()
        };
        let d = DiscriminatorConfig { layers: 3, channels: 8, ..DiscriminatorConfig::smoke() };
        let t = CganTrainConfig {
            steps: 6,
            batch_size: 2,
            segment_len: 512,
            resolutions: vec![StftResolution::new(256, 64), StftResolution::new(128, 32)],
            ..CganTrainConfig::default()
        };
        (g, d, t)
    }

    fn pairs(n: usize) -> Vec<TrainingPair> {
        let mut rng = rng_from_seed(4);
        (0..n)
            .map(|_| {
                let benign: Vec<f32> = (0..900).map(|i| ((i as f32) * 0.05).sin() * rng.random_range(0.2f32..0.5)).collect();
                let adversarial = benign.iter().map(|&b| b + rng.random_range(-0.01f32..0.01)).collect();
                TrainingPair { adversarial, benign }
            })
            .collect()
    }

    fn nets(store: &mut ParamStore) -> (Generator, Discriminator, Mrstft) {
        let (gc, dc, tc) = tiny_cfg();
        let g = build_generator(store, &gc, 0).unwrap();
        let mut rng = rng_from_seed(1);
        let d = Discriminator::build(&dc, &mut Builder::new(store, &mut rng, "d")).unwrap();
        (g, d, Mrstft::new(&tc.resolutions, DType::F32, &Device::Cpu).unwrap())
    }

    fn batch() -> (Tensor, Tensor) {
        let p = pairs(2);
        let xa: Vec<f32> = p.iter().flat_map(|q| q.adversarial[..512].to_vec()).collect();
        let x: Vec<f32> = p.iter().flat_map(|q| q.benign[..512].to_vec()).collect();
        (Tensor::from_vec(xa, (2, 512), &Device::Cpu).unwrap(), Tensor::from_vec(x, (2, 512), &Device::Cpu).unwrap())
    }

    #[test]
    fn objective_composes_with_lambda() {
        let mut store = ParamStore::new();
        let (g, d, m) = nets(&mut store);
        let (xa, x) = batch();
        let o = generator_objective(&g, &d, &m, &xa, &x, 0.001).unwrap();
        let (a, s, t) = (scalar(&o.adv).unwrap(), scalar(&o.sup).unwrap(), scalar(&o.total).unwrap());
        assert!((t - (a + 0.001 * s)).abs() < 1e-9);
    }

    #[test]
    fn zero_lambda_leaves_pure_adversarial_gradient() {
        let mut store = ParamStore::new();
        let (g, d, m) = nets(&mut store);
        let (xa, x) = batch();
        let o = generator_objective(&g, &d, &m, &xa, &x, 0.0).unwrap();
        let full = o.total.backward().unwrap();
        let adv = o.adv.backward().unwrap();
        for v in store.vars_with_prefix("g.") {
            let a = full.get(v.as_tensor()).unwrap().to_dtype(DType::F32).unwrap();
            let b = adv.get(v.as_tensor()).unwrap();
            let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert_eq!(diff, 0.0);
        }
    }

    #[test]
    fn discriminator_step_does_not_decrease_objective() {
        let mut store = ParamStore::new();
        let (g, d, _) = nets(&mut store);
        let (xa, x) = batch();
        let before = scalar(&discriminator_objective(&g, &d, &xa, &x).unwrap()).unwrap();
        let mut opt = candle_nn::SGD::new(store.vars_with_prefix("d."), 1e-4).unwrap();
        opt.backward_step(&discriminator_objective(&g, &d, &xa, &x).unwrap().neg().unwrap()).unwrap();
        let after = scalar(&discriminator_objective(&g, &d, &xa, &x).unwrap()).unwrap();
        assert!(after >= before, "{after} < {before}");
    }

    #[test]
    fn training_is_reproducible_and_logged() {
        let (gc, dc, tc) = tiny_cfg();
        let p = pairs(4);
        let a = train_cgan(&p, &gc, &dc, &tc, None).unwrap();
        let b = train_cgan(&p, &gc, &dc, &tc, None).unwrap();
        assert_eq!(a.generator.params().checksum().unwrap(), b.generator.params().checksum().unwrap());
        assert_eq!(a.discriminator.params().checksum().unwrap(), b.discriminator.params().checksum().unwrap());
        assert_eq!(a.log.len(), 6);
        assert_eq!(a.log, b.log);
        assert!((a.log[0].lr_g - 2e-4).abs() < 1e-15 && (a.log[5].lr_g - 1e-8).abs() < 1e-15);
        assert!((a.log[5].lr_d - 1e-8).abs() < 1e-15);
    }

    #[test]
    fn checkpoints_round_trip() {
        let (gc, dc, mut tc) = tiny_cfg();
        tc.steps = 2;
        tc.checkpoint_every = 1;
        let dir = tempfile::tempdir().unwrap();
        let out = train_cgan(&pairs(2), &gc, &dc, &tc, Some(dir.path())).unwrap();
        assert!(dir.path().join("generator_000002.safetensors").exists());
        let path = dir.path().join("g.safetensors");
        out.generator.save(&path).unwrap();
        let back = GeneratorModel::load(&path).unwrap();
        let x = Waveform::new(pairs(1)[0].adversarial.clone(), crate::signal::SAMPLE_RATE).unwrap();
        assert_eq!(estimate_perturbation(&back, &x).unwrap(), estimate_perturbation(&out.generator, &x).unwrap());
    }

    #[test]
    fn identity_generator_estimates_zero() {
        let g = GeneratorModel::new(&GeneratorConfig::identity(16, 8), 0).unwrap();
        let x = Waveform::new(pairs(1)[0].adversarial.clone(), crate::signal::SAMPLE_RATE).unwrap();
        let e = estimate_perturbation(&g, &x).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
        assert_eq!(e, estimate_perturbation(&g, &x).unwrap());
    }

    #[test]
    fn variants_filter_classes() {
        assert!(AdvestVariant::AllAttacks.includes(AttackLabel::CwL2));
        assert!(!AdvestVariant::LeaveOutCw.includes(AttackLabel::CwL0));
        assert!(AdvestVariant::LeaveOutCw.includes(AttackLabel::PgdL1));
        assert!(!AdvestVariant::AllAttacks.includes(AttackLabel::Benign));
    }

    #[test]
    fn too_short_segments_are_rejected() {
        let (gc, dc, mut tc) = tiny_cfg();
        tc.segment_len = 100;
        assert!(matches!(train_cgan(&pairs(1), &gc, &dc, &tc, None), Err(Error::TooShort { .. })));
    }
}
