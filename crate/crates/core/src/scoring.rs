//! Test-time scoring: latent search with the variation score for GANs and
//! squared distance to the center for Deep SVDD.

use serde::{Deserialize, Serialize};

use crate::models::{Bound, Discriminator, Generator, ModelError, Mode};
use crate::rng;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, TensorError, Var};
use crate::training::{embed_all, SvddModel};

/// Rows (images x restarts) optimized together in one batch.
pub const SEARCH_CHUNK_ROWS: usize = 128;

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("invalid scoring config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("every restart of image {image} produced non-finite losses")]
    AllRestartsFailed { image: usize },
}

impl From<TensorError> for ScoreError {
    fn from(e: TensorError) -> Self {
        ScoreError::Model(e.into())
    }
}

pub type Result<T, E = ScoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentSearchConfig {
    pub steps: usize,
    pub lr: f64,
    pub restarts: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for LatentSearchConfig {
    fn default() -> Self {
        LatentSearchConfig { steps: 100, lr: 0.05, restarts: 3, lambda: 0.2, seed: 0 }
    }
}

impl LatentSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 || self.restarts < 1 {
            return Err(ScoreError::Config("steps and restarts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ScoreError::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if !(self.lr > 0.0) {
            return Err(ScoreError::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    /// Variation score `(1 - lambda) * l_r + lambda * l_d`.
    pub v: f64,
    /// Pixel residual at `z`.
    pub l_r: f64,
    /// Discriminator feature residual at `z`.
    pub l_d: f64,
    pub lambda: f64,
    /// Best latent found.
    pub z: Vec<f32>,
    /// Generator output at `z`.
    pub reconstruction: Vec<f32>,
    /// Loss at every evaluation of each surviving restart.
    pub traces: Vec<Vec<f64>>,
    pub restarts_used: usize,
}

impl ScoreResult {
    /// Same components reweighted with another lambda.
    pub fn reweighted(&self, lambda: f64) -> ScoreResult {
        ScoreResult { v: variation_score(self.l_r, self.l_d, lambda), lambda, ..self.clone() }
    }
}

pub fn variation_score(l_r: f64, l_d: f64, lambda: f64) -> f64 {
    (1.0 - lambda) * l_r + lambda * l_d
}

/// Running minimum of a loss trace.
pub fn best_so_far(trace: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    trace
        .iter()
        .map(|&v| {
            best = best.min(v);
            best
        })
        .collect()
}

fn per_image_l1(a: &Tensor, b: &Tensor, what: &'static str) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension {
            op: what,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        }
        .into());
    }
    let (n, _) = a.rows();
    Ok((0..n)
        .map(|i| a.row(i).iter().zip(b.row(i)).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum())
        .collect())
}

/// Per-image sum of absolute pixel differences.
pub fn residual_loss(x: &Tensor, gx: &Tensor) -> Result<Vec<f64>> {
    per_image_l1(x, gx, "residual_loss")
}

/// Discriminator activations at the feature tap.
pub fn discriminator_features(d: &Discriminator, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = d.weights.bind(&mut tape, false)?;
    let xv = tape.constant(x.clone())?;
    let out = d.forward(&mut tape, &bound, xv)?;
    Ok(tape.value(out.features).clone())
}

/// Per-image sum of absolute differences of discriminator features.
pub fn discriminator_feature_loss(x: &Tensor, gx: &Tensor, d: &Discriminator) -> Result<Vec<f64>> {
    if x.shape() != gx.shape() {
        return per_image_l1(x, gx, "discriminator_feature_loss");
    }
    per_image_l1(&discriminator_features(d, x)?, &discriminator_features(d, gx)?, "discriminator_feature_loss")
}

/// Standard-normal starting point for `(image, restart)`.
pub fn initial_latent(seed: u64, image: u64, restart: usize, noise_dim: usize) -> Vec<f32> {
    let mut r = rng::stream(rng::derive_seed(seed, "latent_image", image), "latent_restart", restart as u64);
    Tensor::<f32>::randn(&[noise_dim], 1.0, &mut r).into_data()
}

struct RowState {
    trace: Vec<f64>,
    best: f64,
    z: Vec<f32>,
    l_r: f64,
    l_d: f64,
    recon: Vec<f32>,
}

struct Evaluation {
    loss: Var,
    per_row: Vec<f32>,
    l_r: Vec<f32>,
    l_d: Vec<f32>,
    recon: Tensor,
}

struct Frozen<'a> {
    g: &'a Generator,
    d: &'a Discriminator,
}

fn evaluate(
    tape: &mut Tape,
    models: &Frozen<'_>,
    bg: &Bound,
    bd: &Bound,
    z: Var,
    x: Var,
    fx: Var,
    lambda: f64,
) -> Result<Evaluation, ModelError> {
    let gx = models.g.forward(tape, bg, z, Mode::Eval)?.image;
    let diff = tape.sub(gx, x)?;
    let ad = tape.abs(diff)?;
    let l_r = tape.sum_rows(ad)?;
    let fgx = models.d.forward(tape, bd, gx)?.features;
    let fd = tape.sub(fgx, fx)?;
    let afd = tape.abs(fd)?;
    let l_d = tape.sum_rows(afd)?;
    let wr = tape.scale(l_r, 1.0 - lambda)?;
    let wd = tape.scale(l_d, lambda)?;
    let per = tape.add(wr, wd)?;
    let loss = tape.sum(per)?;
    Ok(Evaluation {
        loss,
        per_row: tape.value(per).data().to_vec(),
        l_r: tape.value(l_r).data().to_vec(),
        l_d: tape.value(l_d).data().to_vec(),
        recon: tape.value(gx).clone(),
    })
}

/// Adam on a block of latent rows. Every row's loss depends only on its own
/// latent, so the joint update equals independent per-row searches.
fn search_rows(models: &Frozen<'_>, x_rows: &Tensor, z0: Tensor, cfg: &LatentSearchConfig) -> Result<Vec<RowState>, ModelError> {
    let rows = x_rows.shape()[0];
    let fx_value = discriminator_features(models.d, x_rows).map_err(|e| match e {
        ScoreError::Model(m) => m,
        other => ModelError::Config(other.to_string()),
    })?;
    let mut z = z0;
    let mut opt = Adam::<f32>::new(AdamConfig { lr: cfg.lr, beta1: 0.9, ..AdamConfig::default() }, &[z.numel()]);
    let mut states: Vec<RowState> = (0..rows)
        .map(|_| RowState { trace: Vec::new(), best: f64::INFINITY, z: Vec::new(), l_r: 0.0, l_d: 0.0, recon: Vec::new() })
        .collect();
    for t in 0..=cfg.steps {
        let mut tape = Tape::new();
        let bg = models.g.weights.bind(&mut tape, false)?;
        let bd = models.d.weights.bind(&mut tape, false)?;
        let zv = tape.param(z.clone())?;
        let xv = tape.constant(x_rows.clone())?;
        let fx = tape.constant(fx_value.clone())?;
        let ev = evaluate(&mut tape, models, &bg, &bd, zv, xv, fx, cfg.lambda)?;
        for (i, s) in states.iter_mut().enumerate() {
            let loss = ev.per_row[i] as f64;
            s.trace.push(loss);
            if loss < s.best {
                s.best = loss;
                s.z = z.row(i).to_vec();
                s.l_r = ev.l_r[i] as f64;
                s.l_d = ev.l_d[i] as f64;
                s.recon = ev.recon.row(i).to_vec();
            }
        }
        if t == cfg.steps {
            break;
        }
        tape.backward(ev.loss)?;
        let grad = tape.grad(zv).expect("latent is trainable");
        opt.step(&mut [z.data_mut()], &[grad.data()])?;
        if !z.is_finite() {
            return Err(TensorError::NonFinite { op: "latent update" }.into());
        }
    }
    Ok(states)
}

fn assemble(image: usize, states: Vec<Option<RowState>>, lambda: f64) -> Result<ScoreResult> {
    let survivors: Vec<RowState> = states.into_iter().flatten().collect();
    let restarts_used = survivors.len();
    let traces = survivors.iter().map(|s| s.trace.clone()).collect();
    let best = survivors
        .into_iter()
        .min_by(|a, b| a.best.total_cmp(&b.best))
        .ok_or(ScoreError::AllRestartsFailed { image })?;
    Ok(ScoreResult {
        v: variation_score(best.l_r, best.l_d, lambda),
        l_r: best.l_r,
        l_d: best.l_d,
        lambda,
        z: best.z,
        reconstruction: best.recon,
        traces,
        restarts_used,
    })
}

/// Scores a contiguous block of images given their starting latents
/// (`images x restarts` rows, restart-minor).
fn score_block(
    models: &Frozen<'_>,
    x: &Tensor,
    first_image: usize,
    z0: Tensor,
    cfg: &LatentSearchConfig,
) -> Result<Vec<ScoreResult>> {
    let n = x.shape()[0];
    let r = cfg.restarts;
    let rows: Vec<usize> = (0..n * r).map(|i| i / r).collect();
    let x_rows = x.select_rows(&rows);
    let states: Vec<Option<RowState>> = match search_rows(models, &x_rows, z0.clone(), cfg) {
        Ok(states) => states.into_iter().map(Some).collect(),
        Err(ModelError::Tensor(TensorError::NonFinite { .. })) => {
            // Isolate the failing restarts and keep the rest.
            (0..n * r)
                .map(|i| match search_rows(models, &x_rows.select_rows(&[i]), z0.select_rows(&[i]), cfg) {
                    Ok(mut s) => Ok(s.pop()),
                    Err(ModelError::Tensor(TensorError::NonFinite { op })) => {
                        log::warn!("image {} restart {}: non-finite {op}, restart discarded", first_image + i / r, i % r);
                        Ok(None)
                    }
                    Err(e) => Err(e),
                })
                .collect::<Result<_, _>>()?
        }
        Err(e) => return Err(e.into()),
    };
    let mut it = states.into_iter();
    (0..n)
        .map(|i| assemble(first_image + i, it.by_ref().take(r).collect(), cfg.lambda))
        .collect()
}

fn check_models(g: &Generator, d: &Discriminator, x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != g.config.output_side || s[3] != g.config.output_side {
        return Err(ScoreError::Config(format!(
            "images {s:?} do not match generator side {}",
            g.config.output_side
        )));
    }
    if d.config.input_side != g.config.output_side {
        return Err(ScoreError::Config("generator and discriminator sides differ".into()));
    }
    Ok(())
}

/// Latent search from explicit starting points, `[N * restarts, noise_dim]`
/// with the restarts of each image adjacent.
pub fn latent_search_from(
    x: &Tensor,
    g: &Generator,
    d: &Discriminator,
    z0: &Tensor,
    cfg: &LatentSearchConfig,
) -> Result<Vec<ScoreResult>> {
    cfg.validate()?;
    check_models(g, d, x)?;
    let n = x.shape()[0];
    if z0.shape() != [n * cfg.restarts, g.config.noise_dim] {
        return Err(ScoreError::Config(format!(
            "initial latents {:?}, expected [{}, {}]",
            z0.shape(),
            n * cfg.restarts,
            g.config.noise_dim
        )));
    }
    score_block(&Frozen { g, d }, x, 0, z0.clone(), cfg)
}

/// Images per search block; fixed so results do not depend on parallelism.
pub fn images_per_chunk(restarts: usize) -> usize {
    (SEARCH_CHUNK_ROWS / restarts.max(1)).max(1)
}

/// Scores each image by the best restart of a seeded latent search. `ids`
/// key the starting latents so a subset scores as it would in the full set.
/// Work is split over `jobs` threads in fixed blocks.
pub fn latent_search(
    x: &Tensor,
    ids: &[u64],
    g: &Generator,
    d: &Discriminator,
    cfg: &LatentSearchConfig,
    jobs: usize,
) -> Result<Vec<ScoreResult>> {
    cfg.validate()?;
    check_models(g, d, x)?;
    let n = x.shape()[0];
    if ids.len() != n {
        return Err(ScoreError::Config(format!("{} ids for {n} images", ids.len())));
    }
    let per = images_per_chunk(cfg.restarts);
    let blocks: Vec<(usize, usize)> = (0..n).step_by(per).map(|s| (s, (s + per).min(n))).collect();
    let models = Frozen { g, d };
    let run_block = |&(start, end): &(usize, usize)| -> Result<Vec<ScoreResult>> {
        let idx: Vec<usize> = (start..end).collect();
        let nd = g.config.noise_dim;
        let mut z = Vec::with_capacity((end - start) * cfg.restarts * nd);
        for &i in &idx {
            for r in 0..cfg.restarts {
                z.extend(initial_latent(cfg.seed, ids[i], r, nd));
            }
        }
        let z0 = Tensor::new(vec![(end - start) * cfg.restarts, nd], z).expect("latent shape");
        score_block(&models, &x.select_rows(&idx), start, z0, cfg)
    };
    let jobs = jobs.max(1).min(blocks.len().max(1));
    let results: Vec<Result<Vec<ScoreResult>>> = if jobs == 1 {
        blocks.iter().map(run_block).collect()
    } else {
        let mut slots: Vec<Option<Result<Vec<ScoreResult>>>> = (0..blocks.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..jobs)
                .map(|j| {
                    let blocks = &blocks;
                    let run_block = &run_block;
                    scope.spawn(move || {
                        (j..blocks.len()).step_by(jobs).map(|b| (b, run_block(&blocks[b]))).collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (b, r) in h.join().expect("scoring thread panicked") {
                    slots[b] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every block scored")).collect()
    };
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Squared Euclidean distance of each embedding to the center.
pub fn svdd_score(model: &SvddModel, x: &Tensor) -> Result<Vec<f64>> {
    let e = embed_all(&model.encoder, x).map_err(|e| ScoreError::Config(e.to_string()))?;
    svdd_distances(&e, &model.center)
}

pub fn svdd_distances(embeddings: &Tensor, center: &[f32]) -> Result<Vec<f64>> {
    let (n, d) = embeddings.rows();
    if d != center.len() {
        return Err(ScoreError::Config(format!("center has {} coordinates, embeddings {d}", center.len())));
    }
    Ok((0..n)
        .map(|i| embeddings.row(i).iter().zip(center).map(|(&a, &c)| (a as f64 - c as f64).powi(2)).sum())
        .collect())
}
