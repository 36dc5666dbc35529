//! Training loops: plain GAN, parallel weak/normal twins, noise-augmented
//! GAN, one-class Deep SVDD and the metric-learning embedding.
//!
//! Every random draw comes from a stream keyed by `(seed, label, index)`, so
//! a run is a pure function of its config and data.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::{DataError, IdxImages, ImageBatch, NoiseKind, NoiseSpec};
use crate::models::{
    Discriminator, DiscriminatorConfig, EncoderConfig, Generator, GeneratorConfig, MetricCnn, MetricConfig,
    ModelError, Mode, ModelWeights, SvddEncoder,
};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, TensorError, Var};

/// Epochs of near-constant samples before a mode-collapse warning.
pub const COLLAPSE_EPOCHS: usize = 10;
pub const COLLAPSE_VARIANCE: f64 = 1e-4;
/// Center coordinates closer to zero than this are pushed out to it.
pub const SVDD_CENTER_EPS: f32 = 0.1;

const EMBED_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("numeric failure at step {step} in {context}: {source}")]
    Numeric { step: usize, context: &'static str, source: TensorError },
    #[error(transparent)]
    Model(ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("epoch hook failed: {0}")]
    Hook(String),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(source) => TrainError::Numeric { step: 0, context: "setup", source },
            other => TrainError::Model(other),
        }
    }
}

/// Attaches the step number to tensor failures.
fn at_step<T>(step: usize, context: &'static str, r: Result<T, ModelError>) -> Result<T> {
    r.map_err(|e| match e {
        ModelError::Tensor(source) => TrainError::Numeric { step, context, source },
        other => TrainError::Model(other),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Anogan,
    Vtgan,
    Noisegan,
    Svdd,
    Metric,
}

impl Regime {
    pub const ALL: [Regime; 5] = [Regime::Anogan, Regime::Vtgan, Regime::Noisegan, Regime::Svdd, Regime::Metric];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Anogan => "anogan",
            Regime::Vtgan => "vtgan",
            Regime::Noisegan => "noisegan",
            Regime::Svdd => "svdd",
            Regime::Metric => "metric",
        }
    }

    pub fn is_gan(self) -> bool {
        matches!(self, Regime::Anogan | Regime::Vtgan | Regime::Noisegan)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown regime '{s}' (expected anogan, vtgan, noisegan, svdd or metric)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl TwinConfig {
    pub fn weak(side: usize) -> Self {
        TwinConfig { generator: GeneratorConfig::weak(side), discriminator: DiscriminatorConfig::weak(side) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanSection {
    pub adam: AdamConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Weak twin; only read by the vtgan regime, which runs as a plain GAN without it.
    pub weak: Option<TwinConfig>,
    /// Corruption of the real batch; only read by the noisegan regime.
    pub noise: Option<NoiseKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvddSection {
    pub adam: AdamConfig,
    pub encoder: EncoderConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSection {
    pub adam: AdamConfig,
    pub model: MetricConfig,
    pub steps_per_epoch: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub side: usize,
    /// Checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub gan: GanSection,
    pub svdd: SvddSection,
    pub metric: MetricSection,
}

impl TrainConfig {
    pub fn new(regime: Regime, side: usize) -> Self {
        TrainConfig {
            regime,
            epochs: 25,
            batch_size: 64,
            seed: 0,
            side,
            checkpoint_every: 0,
            gan: GanSection {
                adam: AdamConfig::default(),
                generator: GeneratorConfig::normal(side),
                discriminator: DiscriminatorConfig::normal(side),
                weak: (regime == Regime::Vtgan).then(|| TwinConfig::weak(side)),
                noise: (regime == Regime::Noisegan).then_some(NoiseKind::Gaussian { sigma: 0.3 }),
            },
            svdd: SvddSection {
                adam: AdamConfig { lr: 1e-4, beta1: 0.9, weight_decay: 1e-6, ..AdamConfig::default() },
                encoder: EncoderConfig::svdd(side),
            },
            metric: MetricSection {
                adam: AdamConfig { lr: 1e-3, beta1: 0.9, ..AdamConfig::default() },
                model: MetricConfig::shallow(side),
                steps_per_epoch: 100,
                temperature: 0.1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        self.validate_loop()?;
        match self.regime {
            Regime::Anogan | Regime::Vtgan | Regime::Noisegan => {
                self.gan.generator.validate()?;
                self.gan.discriminator.validate()?;
                check_side("generator", self.gan.generator.output_side, self.side)?;
                check_side("discriminator", self.gan.discriminator.input_side, self.side)?;
                if self.regime == Regime::Vtgan {
                    let w = self
                        .gan
                        .weak
                        .as_ref()
                        .ok_or_else(|| TrainError::Config("vtgan needs a weak twin config".into()))?;
                    w.generator.validate()?;
                    w.discriminator.validate()?;
                    check_side("weak generator", w.generator.output_side, self.side)?;
                    check_side("weak discriminator", w.discriminator.input_side, self.side)?;
                }
                if self.regime == Regime::Noisegan {
                    let kind = self
                        .gan
                        .noise
                        .ok_or_else(|| TrainError::Config("noisegan needs a noise spec".into()))?;
                    NoiseSpec { kind, seed: 0 }.validate()?;
                }
            }
            Regime::Svdd => {
                self.svdd.encoder.validate()?;
                check_side("encoder", self.svdd.encoder.input_side, self.side)?;
            }
            Regime::Metric => {
                self.metric.model.validate()?;
                check_side("metric cnn", self.metric.model.input_side, self.side)?;
                if self.metric.steps_per_epoch == 0 || !(self.metric.temperature > 0.0) {
                    return Err(TrainError::Config("metric steps_per_epoch and temperature must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Checks shared by every loop; zero epochs is allowed here and yields
    /// the initial weights.
    fn validate_loop(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2 for batchnorm".into()));
        }
        Ok(())
    }

    fn expect(&self, regimes: &[Regime]) -> Result<()> {
        if !regimes.contains(&self.regime) {
            return Err(TrainError::Config(format!("this loop cannot run regime {}", self.regime)));
        }
        self.validate_loop()
    }
}

fn check_side(what: &str, got: usize, side: usize) -> Result<()> {
    if got != side {
        return Err(TrainError::Config(format!("{what} side {got} differs from image side {side}")));
    }
    Ok(())
}

/// Effective batch and step count for `n` training images.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> (usize, usize) {
    let b = batch_size.min(n);
    if b == 0 {
        return (0, 0);
    }
    (b, n / b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Batches shown to the normal discriminator in this step.
    pub d_batches: usize,
    pub losses: Vec<(String, f64)>,
}

impl StepRecord {
    pub fn loss(&self, name: &str) -> Option<f64> {
        self.losses.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub steps: Vec<StepRecord>,
    pub steps_per_epoch: usize,
    pub warnings: Vec<String>,
    pub wall_seconds: f64,
}

impl TrainingRun {
    /// `step,name,value` rows.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,name,value\n");
        for r in &self.steps {
            for (name, v) in &r.losses {
                out.push_str(&format!("{},{},{}\n", r.step, name, v));
            }
        }
        out
    }

    fn warn(&mut self, msg: String) {
        log::warn!("{msg}");
        self.warnings.push(msg);
    }
}

/// State handed to the per-epoch hook of the GAN loops.
pub struct EpochView<'a> {
    /// Number of completed epochs.
    pub epoch: usize,
    pub generator: &'a Generator,
    pub discriminator: &'a Discriminator,
    pub weak: Option<(&'a Generator, &'a Discriminator)>,
    pub run: &'a TrainingRun,
}

pub type EpochHook<'h> = dyn FnMut(&EpochView<'_>) -> Result<()> + 'h;

/// A trained generator/discriminator pair, plus the weak twin for vtgan.
#[derive(Debug, Clone)]
pub struct GanModels {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub weak: Option<(Generator, Discriminator)>,
}

struct Twin {
    g: Generator,
    d: Discriminator,
    g_opt: Adam<f32>,
    d_opt: Adam<f32>,
    z_label: &'static str,
    low_variance_epochs: usize,
    last_fake: Option<Tensor>,
}

impl Twin {
    fn new(g: Generator, d: Discriminator, adam: AdamConfig, z_label: &'static str) -> Self {
        let g_opt = Adam::new(adam, &g.weights.param_sizes());
        let d_opt = Adam::new(adam, &d.weights.param_sizes());
        Twin { g, d, g_opt, d_opt, z_label, low_variance_epochs: 0, last_fake: None }
    }
}

struct StepLosses {
    d: f64,
    g: f64,
    d_batches: usize,
    fake: Tensor,
}

fn labels(n: usize, value: f32) -> Tensor {
    Tensor::full(&[n, 1], value)
}

/// One discriminator update on `real -> 1` and each of `fakes -> 0`, then one
/// non-saturating generator update through the updated discriminator.
fn gan_step(twin: &mut Twin, real: &Tensor, z: Tensor, extra: Option<&Tensor>) -> Result<StepLosses, ModelError> {
    let mut tg = Tape::new();
    let bg = twin.g.weights.bind(&mut tg, true)?;
    let zv = tg.constant(z)?;
    let out = twin.g.forward(&mut tg, &bg, zv, Mode::Train)?;
    let fake = tg.value(out.image).clone();

    let mut td = Tape::new();
    let bd = twin.d.weights.bind(&mut td, true)?;
    let mut batches: Vec<(&Tensor, f32)> = vec![(real, 1.0), (&fake, 0.0)];
    if let Some(x) = extra {
        batches.push((x, 0.0));
    }
    let mut total: Option<Var> = None;
    for &(x, target) in &batches {
        let xv = td.constant(x.clone())?;
        let p = twin.d.forward(&mut td, &bd, xv)?.prob;
        let term = td.bce(p, &labels(x.shape()[0], target))?;
        total = Some(match total {
            None => term,
            Some(t) => td.add(t, term)?,
        });
    }
    let d_loss = total.expect("at least two batches");
    let d_value = td.value(d_loss).data()[0] as f64;
    td.backward(d_loss)?;
    twin.d.weights.apply_adam(&mut twin.d_opt, &td, &bd)?;

    let mut t2 = Tape::new();
    let bd2 = twin.d.weights.bind(&mut t2, false)?;
    let fv = t2.param(fake.clone())?;
    let p = twin.d.forward(&mut t2, &bd2, fv)?.prob;
    let g_loss = t2.bce(p, &labels(fake.shape()[0], 1.0))?;
    let g_value = t2.value(g_loss).data()[0] as f64;
    t2.backward(g_loss)?;
    let seed = t2.grad(fv).expect("fake is trainable");
    tg.backward_with(out.image, seed)?;
    twin.g.weights.apply_adam(&mut twin.g_opt, &tg, &bg)?;
    twin.g.weights.update_running(&out.stats)?;

    Ok(StepLosses { d: d_value, g: g_value, d_batches: batches.len(), fake })
}

/// Mean over pixels of the across-batch variance.
pub fn batch_pixel_variance(images: &Tensor) -> f64 {
    let (n, w) = images.rows();
    let mut total = 0.0;
    for j in 0..w {
        let mean: f64 = (0..n).map(|i| images.row(i)[j] as f64).sum::<f64>() / n as f64;
        total += (0..n).map(|i| (images.row(i)[j] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    }
    total / w as f64
}

fn check_collapse(twin: &mut Twin, name: &str, epoch: usize, run: &mut TrainingRun) {
    let Some(fake) = &twin.last_fake else { return };
    let var = batch_pixel_variance(fake);
    if var < COLLAPSE_VARIANCE {
        twin.low_variance_epochs += 1;
        if twin.low_variance_epochs == COLLAPSE_EPOCHS {
            run.warn(format!(
                "possible mode collapse in {name}: sample pixel variance below {COLLAPSE_VARIANCE} for \
                 {COLLAPSE_EPOCHS} epochs (epoch {epoch}, variance {var:.3e})"
            ));
        }
    } else {
        twin.low_variance_epochs = 0;
    }
}

/// The third discriminator batch of the noisegan regime at `step`.
pub fn corrupted_batch(real: &Tensor, kind: NoiseKind, seed: u64, step: usize) -> Result<Tensor> {
    let spec = NoiseSpec { kind, seed: rng::derive_seed(seed, "corrupt", step as u64) };
    Ok(spec.apply(&ImageBatch { images: real.clone() })?.images)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "order", epoch as u64));
    order
}

fn build_models(cfg: &TrainConfig) -> Result<(Twin, Option<Twin>)> {
    let seed = cfg.seed;
    let normal = Twin::new(
        Generator::build_named(cfg.gan.generator.clone(), rng::derive_seed(seed, "generator", 0), "g")?,
        Discriminator::build_named(cfg.gan.discriminator.clone(), rng::derive_seed(seed, "discriminator", 0), "d")?,
        cfg.gan.adam,
        "z",
    );
    let weak = match (&cfg.regime, &cfg.gan.weak) {
        (Regime::Vtgan, Some(w)) => Some(Twin::new(
            Generator::build_named(w.generator.clone(), rng::derive_seed(seed, "weak_generator", 0), "wg")?,
            Discriminator::build_named(w.discriminator.clone(), rng::derive_seed(seed, "weak_discriminator", 0), "wd")?,
            cfg.gan.adam,
            "weak_z",
        )),
        _ => None,
    };
    if let Some(w) = &weak {
        let normal_names: Vec<&str> = normal.g.weights.names().chain(normal.d.weights.names()).collect();
        if w.g.weights.names().chain(w.d.weights.names()).any(|n| normal_names.contains(&n)) {
            return Err(TrainError::Config("weak and normal twins share parameter names".into()));
        }
    }
    Ok((normal, weak))
}

fn noise_for(twin: &Twin, n: usize, seed: u64, step: usize) -> Tensor {
    Tensor::randn(&[n, twin.g.config.noise_dim], 1.0, &mut rng::stream(seed, twin.z_label, step as u64))
}

fn gan_loop(train: &ImageBatch, cfg: &TrainConfig, hook: &mut EpochHook<'_>) -> Result<(TrainingRun, GanModels)> {
    if cfg.gan.generator.output_side != train.side() || cfg.gan.discriminator.input_side != train.side() {
        return Err(TrainError::Config(format!("model side differs from image side {}", train.side())));
    }
    let started = Instant::now();
    let (mut normal, mut weak) = build_models(cfg)?;
    let (b, spe) = steps_per_epoch(train.len(), cfg.batch_size);
    if b < 2 {
        return Err(TrainError::Config(format!("need at least 2 training images, got {}", train.len())));
    }
    let mut run = TrainingRun { steps_per_epoch: spe, ..TrainingRun::default() };
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        for s in 0..spe {
            let step = epoch * spe + s;
            let real = train.images.select_rows(&order[s * b..(s + 1) * b]);
            let mut losses = Vec::new();
            let mut extra = None;
            if let Some(w) = weak.as_mut() {
                let z = noise_for(w, b, cfg.seed, step);
                let l = at_step(step, "weak twin", gan_step(w, &real, z, None))?;
                losses.push(("weak_d_loss".to_string(), l.d));
                losses.push(("weak_g_loss".to_string(), l.g));
                extra = Some(l.fake.clone());
                w.last_fake = Some(l.fake);
            }
            if cfg.regime == Regime::Noisegan {
                let kind = cfg.gan.noise.ok_or_else(|| TrainError::Config("noisegan needs a noise spec".into()))?;
                extra = Some(corrupted_batch(&real, kind, cfg.seed, step)?);
            }
            let z = noise_for(&normal, b, cfg.seed, step);
            let l = at_step(step, "normal twin", gan_step(&mut normal, &real, z, extra.as_ref()))?;
            losses.insert(0, ("d_loss".to_string(), l.d));
            losses.insert(1, ("g_loss".to_string(), l.g));
            normal.last_fake = Some(l.fake);
            if let Some((name, _)) = losses.iter().find(|(_, v)| !v.is_finite()) {
                return Err(TrainError::Numeric {
                    step,
                    context: "loss",
                    source: TensorError::NonFinite { op: if name.starts_with("weak") { "weak twin loss" } else { "loss" } },
                });
            }
            run.steps.push(StepRecord { step, epoch, d_batches: l.d_batches, losses });
        }
        check_collapse(&mut normal, "generator", epoch + 1, &mut run);
        if let Some(w) = weak.as_mut() {
            check_collapse(w, "weak generator", epoch + 1, &mut run);
        }
        run.wall_seconds = started.elapsed().as_secs_f64();
        hook(&EpochView {
            epoch: epoch + 1,
            generator: &normal.g,
            discriminator: &normal.d,
            weak: weak.as_ref().map(|w| (&w.g, &w.d)),
            run: &run,
        })?;
    }
    run.wall_seconds = started.elapsed().as_secs_f64();
    let models = GanModels { generator: normal.g, discriminator: normal.d, weak: weak.map(|w| (w.g, w.d)) };
    Ok((run, models))
}

/// Plain DCGAN on the known class: D sees real and generated batches.
pub fn train_gan(train: &ImageBatch, cfg: &TrainConfig, hook: &mut EpochHook<'_>) -> Result<(TrainingRun, GanModels)> {
    cfg.expect(&[Regime::Anogan])?;
    gan_loop(train, cfg, hook)
}

/// Weak and normal twins trained side by side on the same real batches; the
/// weak twin's samples are an extra fake batch for the normal discriminator.
/// Without a weak config this is exactly [`train_gan`].
pub fn train_vtgan(train: &ImageBatch, cfg: &TrainConfig, hook: &mut EpochHook<'_>) -> Result<(TrainingRun, GanModels)> {
    cfg.expect(&[Regime::Vtgan])?;
    gan_loop(train, cfg, hook)
}

/// Like [`train_vtgan`] with a corrupted copy of the real batch as the
/// extra fake batch.
pub fn train_noisegan(train: &ImageBatch, cfg: &TrainConfig, hook: &mut EpochHook<'_>) -> Result<(TrainingRun, GanModels)> {
    cfg.expect(&[Regime::Noisegan])?;
    if cfg.gan.noise.is_none() {
        return Err(TrainError::Config("noisegan needs a noise spec".into()));
    }
    gan_loop(train, cfg, hook)
}

/// Embeddings of every image, computed in fixed-size chunks.
pub fn embed_all(encoder: &SvddEncoder, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(EMBED_CHUNK) {
        let idx: Vec<usize> = (start..(start + EMBED_CHUNK).min(n)).collect();
        parts.push(encoder.embed(&images.select_rows(&idx))?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat_rows(&refs).map_err(ModelError::from)?)
}

/// Mean embedding with near-zero coordinates pushed to `±SVDD_CENTER_EPS`.
pub fn svdd_center(encoder: &SvddEncoder, images: &Tensor) -> Result<Vec<f32>> {
    let e = embed_all(encoder, images)?;
    let (n, d) = e.rows();
    let mut c = vec![0.0f64; d];
    for i in 0..n {
        for (acc, &v) in c.iter_mut().zip(e.row(i)) {
            *acc += v as f64;
        }
    }
    Ok(c.into_iter()
        .map(|v| {
            let v = (v / n as f64) as f32;
            if v.abs() < SVDD_CENTER_EPS {
                if v < 0.0 { -SVDD_CENTER_EPS } else { SVDD_CENTER_EPS }
            } else {
                v
            }
        })
        .collect())
}

/// Mean squared distance of the embeddings to `center`.
pub fn svdd_objective(encoder: &SvddEncoder, images: &Tensor, center: &[f32]) -> Result<f64> {
    let e = embed_all(encoder, images)?;
    let (n, _) = e.rows();
    let total: f64 = (0..n)
        .map(|i| e.row(i).iter().zip(center).map(|(&a, &c)| ((a - c) as f64).powi(2)).sum::<f64>())
        .sum();
    Ok(total / n as f64)
}

#[derive(Debug, Clone)]
pub struct SvddModel {
    pub encoder: SvddEncoder,
    pub center: Vec<f32>,
}

impl SvddModel {
    /// Center stored alongside the encoder weights for checkpointing.
    pub fn to_weights(&self) -> ModelWeights {
        let mut w = self.encoder.weights.clone();
        w.insert("center", Tensor::new(vec![self.center.len()], self.center.clone()).expect("nonempty center"));
        w
    }

    pub fn from_weights(config: EncoderConfig, mut weights: ModelWeights) -> Result<Self, ModelError> {
        let center = weights.get("center")?.data().to_vec();
        let mut rest = ModelWeights::new(weights.fingerprint);
        for (name, t) in weights.iter() {
            if name != "center" {
                rest.insert(name, t.clone());
            }
        }
        weights = rest;
        if center.len() != config.embed_dim {
            return Err(ModelError::Integrity(format!(
                "center has {} coordinates, encoder embeds to {}",
                center.len(),
                config.embed_dim
            )));
        }
        Ok(SvddModel { encoder: SvddEncoder::from_weights(config, weights)?, center })
    }
}

/// One-class Deep SVDD: the center is fixed from the initial encoder, then the
/// mean squared distance to it is minimized.
pub fn train_deep_svdd(train: &ImageBatch, cfg: &TrainConfig) -> Result<(TrainingRun, SvddModel)> {
    cfg.expect(&[Regime::Svdd])?;
    let started = Instant::now();
    let mut encoder = SvddEncoder::build(cfg.svdd.encoder.clone(), rng::derive_seed(cfg.seed, "encoder", 0))?;
    let center = svdd_center(&encoder, &train.images)?;
    let center_t = Tensor::new(vec![1, center.len()], center.clone()).expect("nonempty center");
    let mut opt = Adam::new(cfg.svdd.adam, &encoder.weights.param_sizes());
    let (b, spe) = steps_per_epoch(train.len(), cfg.batch_size);
    if b < 2 {
        return Err(TrainError::Config(format!("need at least 2 training images, got {}", train.len())));
    }
    let mut run = TrainingRun { steps_per_epoch: spe, ..TrainingRun::default() };
    for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        for s in 0..spe {
            let step = epoch * spe + s;
            let batch = train.images.select_rows(&order[s * b..(s + 1) * b]);
            let objective = at_step(step, "svdd", (|| {
                let mut tape = Tape::new();
                let bound = encoder.weights.bind(&mut tape, true)?;
                let x = tape.constant(batch)?;
                let e = encoder.forward(&mut tape, &bound, x)?;
                let c = tape.constant(Tensor::from_fn(&[b, center.len()], |i| center_t.data()[i % center.len()]))?;
                let diff = tape.sub(e, c)?;
                let sq = tape.square(diff)?;
                let per = tape.sum_rows(sq)?;
                let loss = tape.mean(per)?;
                let value = tape.value(loss).data()[0] as f64;
                tape.backward(loss)?;
                encoder.weights.apply_adam(&mut opt, &tape, &bound)?;
                Ok(value)
            })())?;
            if !objective.is_finite() {
                return Err(TrainError::Numeric { step, context: "svdd", source: TensorError::NonFinite { op: "objective" } });
            }
            run.steps.push(StepRecord { step, epoch, d_batches: 0, losses: vec![("svdd_objective".into(), objective)] });
        }
    }
    run.wall_seconds = started.elapsed().as_secs_f64();
    Ok((run, SvddModel { encoder, center }))
}

/// Softmax cross-entropy of the scaled anchor x positive cosine-similarity
/// matrix against diagonal targets.
pub fn metric_loss(
    tape: &mut Tape,
    model: &MetricCnn,
    bound: &crate::models::Bound,
    anchors: &Tensor,
    positives: &Tensor,
    temperature: f64,
) -> Result<Var, ModelError> {
    let k = anchors.shape()[0];
    let a = tape.constant(anchors.clone())?;
    let p = tape.constant(positives.clone())?;
    let ea = model.forward(tape, bound, a)?;
    let ep = model.forward(tape, bound, p)?;
    let ept = tape.transpose(ep)?;
    let sim = tape.matmul(ea, ept)?;
    let logits = tape.scale(sim, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..k).collect();
    Ok(tape.softmax_cross_entropy(logits, &targets)?)
}

/// Same loss from precomputed unit embeddings, for evaluation without a tape.
pub fn metric_loss_from_embeddings(anchors: &Tensor, positives: &Tensor, temperature: f64) -> f64 {
    let (k, _) = anchors.rows();
    let mut total = 0.0;
    for i in 0..k {
        let logits: Vec<f64> = (0..k)
            .map(|j| anchors.row(i).iter().zip(positives.row(j)).map(|(&a, &b)| (a * b) as f64).sum::<f64>() / temperature)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[i];
    }
    total / k as f64
}

/// Training images grouped by class, classes in ascending order.
pub fn class_pools(labels: &[u8]) -> Vec<(u8, Vec<usize>)> {
    let mut pools: Vec<(u8, Vec<usize>)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match pools.iter_mut().find(|(c, _)| *c == l) {
            Some((_, v)) => v.push(i),
            None => pools.push((l, vec![i])),
        }
    }
    pools.sort_by_key(|(c, _)| *c);
    pools
}

/// One anchor and one distinct positive per class for `step`.
pub fn sample_metric_pairs(pools: &[(u8, Vec<usize>)], seed: u64, step: usize) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::stream(seed, "metric_pairs", step as u64);
    let mut anchors = Vec::with_capacity(pools.len());
    let mut positives = Vec::with_capacity(pools.len());
    for (_, idx) in pools {
        let pick = index::sample(&mut r, idx.len(), 2);
        anchors.push(idx[pick.index(0)]);
        positives.push(idx[pick.index(1)]);
    }
    (anchors, positives)
}

/// Embedding CNN trained so that same-class pairs are the most similar.
pub fn train_metric_embedding(images: &IdxImages, labels: &[u8], cfg: &TrainConfig) -> Result<(TrainingRun, MetricCnn)> {
    cfg.expect(&[Regime::Metric])?;
    if images.count != labels.len() {
        return Err(TrainError::Config(format!("{} images but {} labels", images.count, labels.len())));
    }
    let pools = class_pools(labels);
    if let Some((c, _)) = pools.iter().find(|(_, v)| v.len() < 2) {
        return Err(TrainError::Config(format!("class {c} has fewer than 2 images")));
    }
    if pools.len() < 2 {
        return Err(TrainError::Config("metric learning needs at least 2 classes".into()));
    }
    let started = Instant::now();
    let side = cfg.metric.model.input_side;
    let mut model = MetricCnn::build(cfg.metric.model.clone(), rng::derive_seed(cfg.seed, "metric_cnn", 0))?;
    let mut opt = Adam::new(cfg.metric.adam, &model.weights.param_sizes());
    let spe = cfg.metric.steps_per_epoch;
    let mut run = TrainingRun { steps_per_epoch: spe, ..TrainingRun::default() };
    for epoch in 0..cfg.epochs {
        for s in 0..spe {
            let step = epoch * spe + s;
            let (a, p) = sample_metric_pairs(&pools, cfg.seed, step);
            let anchors = ImageBatch::from_idx(images, &a, side)?.images;
            let positives = ImageBatch::from_idx(images, &p, side)?.images;
            let loss = at_step(step, "metric", (|| {
                let mut tape = Tape::new();
                let bound = model.weights.bind(&mut tape, true)?;
                let loss = metric_loss(&mut tape, &model, &bound, &anchors, &positives, cfg.metric.temperature)?;
                let value = tape.value(loss).data()[0] as f64;
                tape.backward(loss)?;
                model.weights.apply_adam(&mut opt, &tape, &bound)?;
                Ok(value)
            })())?;
            run.steps.push(StepRecord { step, epoch, d_batches: 0, losses: vec![("metric_loss".into(), loss)] });
        }
    }
    run.wall_seconds = started.elapsed().as_secs_f64();
    Ok((run, model))
}
