//! The `train`, `score`, `eval` and `similarity` commands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vtgan_core::data::{build_pair_experiment, Dataset, ImageBatch, PairExperiment};
use vtgan_core::eval::{compute_auc, emit_results_table, neighbor_confusion, render_grid_pgm, AucResult, NeighborConfusion, TableEntry};
use vtgan_core::forest::{iforest_fit, iforest_score, pca_fit, IsolationForestModel, PcaModel};
use vtgan_core::models::{Discriminator, Generator, MetricCnn, ModelWeights};
use vtgan_core::rng;
use vtgan_core::scoring::{latent_search, svdd_score};
use vtgan_core::training::{
    train_deep_svdd, train_gan, train_metric_embedding, train_noisegan, train_vtgan, EpochView, GanModels, Regime,
    SvddModel, TrainConfig, TrainError, TrainingRun,
};
use vtgan_core::Tensor;

use crate::artifacts::{
    meta_path, read_meta, read_scores, scores_to_csv, ArtifactDir, ScoreMeta, ScoreRow, LOSSES_FILE, RUN_FILE, SCORES_FILE,
};
use crate::error::{CliError, Result};
use crate::spec::{ExperimentSpec, ModelKind, Profile, SimilaritySpec};

pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const DISCRIMINATOR_CKPT: &str = "discriminator.ckpt";
pub const WEAK_GENERATOR_CKPT: &str = "weak_generator.ckpt";
pub const WEAK_DISCRIMINATOR_CKPT: &str = "weak_discriminator.ckpt";
pub const ENCODER_CKPT: &str = "encoder.ckpt";
pub const FOREST_FILE: &str = "forest.json";
pub const PAIRS_GRID: &str = "pairs.pgm";
/// Generated images per epoch sample grid.
pub const SAMPLE_COUNT: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub spec_hash: String,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub warnings: Vec<String>,
    pub wall_seconds: f64,
}

pub fn load_pair(spec: &ExperimentSpec) -> Result<PairExperiment> {
    let ds = Dataset::load(&spec.data_dir, spec.dataset)?;
    Ok(build_pair_experiment(&ds, spec.known, spec.unknown, &spec.pair)?)
}

fn train_config(spec: &ExperimentSpec) -> Result<&TrainConfig> {
    spec.train.as_ref().ok_or_else(|| CliError::Usage(format!("model {} has no train section", spec.model)))
}

/// Fixed latents for the per-epoch sample grids.
pub fn sample_latents(seed: u64, noise_dim: usize) -> Tensor {
    Tensor::randn(&[SAMPLE_COUNT, noise_dim], 1.0, &mut rng::stream(seed, "sample_z", 0))
}

fn sample_grid(g: &Generator, seed: u64) -> Result<Vec<u8>> {
    let images = g.generate(&sample_latents(seed, g.config.noise_dim))?;
    Ok(render_grid_pgm(&ImageBatch { images }, 4)?)
}

fn save(dir: &ArtifactDir, name: &str, w: &ModelWeights) -> Result<()> {
    Ok(w.save(&dir.file(name))?)
}

/// Trains the spec's model and writes checkpoints, loss log and sample grids.
pub fn cmd_train(spec: &ExperimentSpec, force: bool, jobs: usize) -> Result<RunSummary> {
    spec.validate()?;
    let pair = load_pair(spec)?;
    let outputs: &[&str] = match spec.model {
        ModelKind::Iforest => &[FOREST_FILE],
        ModelKind::Svdd => &[ENCODER_CKPT, LOSSES_FILE, RUN_FILE],
        _ => &[GENERATOR_CKPT, DISCRIMINATOR_CKPT, LOSSES_FILE, RUN_FILE],
    };
    let dir = ArtifactDir::prepare(&spec.artifact_dir(), outputs, force)?;
    let hash = spec.hash();
    dir.write_spec(&spec.to_json(), &hash, force)?;
    log::info!("training {} on {} images into {}", spec.model, pair.train.len(), dir.path.display());

    let run = match spec.model {
        ModelKind::Iforest => return train_forest(spec, &pair, &dir, hash, jobs),
        ModelKind::Svdd => {
            let (run, model) = train_deep_svdd(&pair.train, train_config(spec)?)?;
            save(&dir, ENCODER_CKPT, &model.to_weights())?;
            run
        }
        _ => {
            let cfg = train_config(spec)?;
            let (run, models) = train_gan_artifacts(&pair.train, cfg, &dir)?;
            save(&dir, GENERATOR_CKPT, &models.generator.weights)?;
            save(&dir, DISCRIMINATOR_CKPT, &models.discriminator.weights)?;
            if let Some((wg, wd)) = &models.weak {
                save(&dir, WEAK_GENERATOR_CKPT, &wg.weights)?;
                save(&dir, WEAK_DISCRIMINATOR_CKPT, &wd.weights)?;
            }
            run
        }
    };
    for w in &run.warnings {
        log::warn!("{w}");
    }
    dir.write(LOSSES_FILE, run.loss_csv())?;
    let summary = RunSummary {
        spec_hash: hash,
        steps: run.steps.len(),
        steps_per_epoch: run.steps_per_epoch,
        warnings: run.warnings.clone(),
        wall_seconds: run.wall_seconds,
    };
    dir.write(RUN_FILE, serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(summary)
}

fn train_gan_artifacts(train: &ImageBatch, cfg: &TrainConfig, dir: &ArtifactDir) -> Result<(TrainingRun, GanModels)> {
    let seed = cfg.seed;
    let every = cfg.checkpoint_every;
    let mut hook = |v: &EpochView<'_>| -> Result<(), TrainError> {
        let write = |name: String, bytes: Vec<u8>| {
            std::fs::write(dir.file(&name), bytes).map_err(|e| TrainError::Hook(format!("{name}: {e}")))
        };
        let grid = |g: &Generator| sample_grid(g, seed).map_err(|e| TrainError::Hook(e.to_string()));
        write(format!("samples_epoch_{:03}.pgm", v.epoch), grid(v.generator)?)?;
        if let Some((wg, _)) = v.weak {
            write(format!("weak_samples_epoch_{:03}.pgm", v.epoch), grid(wg)?)?;
        }
        if every > 0 && v.epoch % every == 0 {
            write(format!("generator_epoch_{:03}.ckpt", v.epoch), v.generator.weights.to_bytes())?;
            write(format!("discriminator_epoch_{:03}.ckpt", v.epoch), v.discriminator.weights.to_bytes())?;
        }
        log::info!("epoch {} done, {:.0}s", v.epoch, v.run.wall_seconds);
        Ok(())
    };
    Ok(match cfg.regime {
        Regime::Anogan => train_gan(train, cfg, &mut hook)?,
        Regime::Vtgan => train_vtgan(train, cfg, &mut hook)?,
        Regime::Noisegan => train_noisegan(train, cfg, &mut hook)?,
        other => return Err(CliError::Usage(format!("{other} is not a GAN regime"))),
    })
}

pub fn flatten(images: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = images.rows();
    (0..n).map(|i| images.row(i).iter().map(|&v| v as f64).collect()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestArtifact {
    pub pca: PcaModel,
    pub forest: IsolationForestModel,
}

fn train_forest(spec: &ExperimentSpec, pair: &PairExperiment, dir: &ArtifactDir, hash: String, jobs: usize) -> Result<RunSummary> {
    let f = spec.forest.ok_or_else(|| CliError::Usage("iforest needs a forest section".into()))?;
    let started = std::time::Instant::now();
    let train = flatten(&pair.train.images);
    let mut components = f.components;
    if spec.profile == Profile::Desk && train.len() < 512 && components > 256 {
        log::info!("desk profile with {} training images: capping PCA at 256 components", train.len());
        components = 256;
    }
    let pca = pca_fit(&train, components)?;
    if pca.k() < components {
        log::info!("PCA kept {} of {} requested components", pca.k(), components);
    }
    let projected = train.iter().map(|x| pca.project(x)).collect::<Result<Vec<_>, _>>()?;
    let forest = iforest_fit(&projected, f.trees, f.psi, spec.seed, jobs.max(1))?;
    let json = serde_json::to_vec(&ForestArtifact { pca, forest }).expect("forest serializes");
    dir.write(FOREST_FILE, json)?;
    Ok(RunSummary { spec_hash: hash, steps: 0, steps_per_epoch: 0, warnings: vec![], wall_seconds: started.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreOptions {
    pub limit: Option<usize>,
    /// Reweights V from the stored components; the search itself is unchanged.
    pub lambda: Option<f64>,
    pub jobs: usize,
    pub force: bool,
}

fn load_ckpt(dir: &Path, name: &str, fingerprint: u64) -> Result<ModelWeights> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(CliError::Data(format!("{} missing; run `vtgan train` first", p.display())));
    }
    Ok(ModelWeights::load(&p, Some(fingerprint))?)
}

fn check_spec_hash(dir: &Path, spec: &ExperimentSpec) -> Result<String> {
    let hash = spec.hash();
    let p = dir.join(crate::artifacts::SPEC_HASH_FILE);
    let stored = std::fs::read_to_string(&p).map_err(|_| CliError::Data(format!("{} missing; run `vtgan train` first", p.display())))?;
    if stored.trim() != hash {
        return Err(CliError::Integrity(format!("{} was trained from a different spec", dir.display())));
    }
    Ok(hash)
}

/// Scores the pair's test set (first `limit` images) with the trained model.
pub fn cmd_score(spec: &ExperimentSpec, opts: &ScoreOptions) -> Result<Vec<ScoreRow>> {
    spec.validate()?;
    if let Some(l) = opts.lambda {
        if !(0.0..=1.0).contains(&l) {
            return Err(CliError::Usage(format!("lambda {l} outside [0, 1]")));
        }
    }
    let dir_path = spec.artifact_dir();
    let hash = check_spec_hash(&dir_path, spec)?;
    let dir = ArtifactDir::prepare(&dir_path, &[SCORES_FILE], opts.force)?;
    let pair = load_pair(spec)?;
    let n = opts.limit.map_or(pair.test_labels.len(), |l| l.min(pair.test_labels.len()));
    let keep: Vec<usize> = (0..n).collect();
    let x = pair.test.images.select_rows(&keep);
    let ids: Vec<u64> = pair.test_indices[..n].iter().map(|&i| i as u64).collect();
    log::info!("scoring {n} test images with {}", spec.model);

    let mut lambda = None;
    let rows: Vec<ScoreRow> = match spec.model {
        ModelKind::Iforest => {
            let p = dir.file(FOREST_FILE);
            let text = std::fs::read(&p).map_err(|_| CliError::Data(format!("{} missing; run `vtgan train` first", p.display())))?;
            let art: ForestArtifact = serde_json::from_slice(&text).map_err(|e| CliError::Integrity(format!("{}: {e}", p.display())))?;
            flatten(&x)
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let s = iforest_score(&art.forest, &art.pca.project(img)?)?;
                    Ok(distance_row(&pair, i, s))
                })
                .collect::<Result<_>>()?
        }
        ModelKind::Svdd => {
            let cfg = &train_config(spec)?.svdd.encoder;
            let w = load_ckpt(&dir.path, ENCODER_CKPT, cfg.fingerprint())?;
            let model = SvddModel::from_weights(cfg.clone(), w)?;
            svdd_score(&model, &x)?.into_iter().enumerate().map(|(i, s)| distance_row(&pair, i, s)).collect()
        }
        _ => {
            let gan = &train_config(spec)?.gan;
            let g = Generator::from_weights(gan.generator.clone(), load_ckpt(&dir.path, GENERATOR_CKPT, gan.generator.fingerprint())?)?;
            let d = Discriminator::from_weights(
                gan.discriminator.clone(),
                load_ckpt(&dir.path, DISCRIMINATOR_CKPT, gan.discriminator.fingerprint())?,
            )?;
            let search = spec.search.ok_or_else(|| CliError::Usage("GAN models need a search section".into()))?;
            let mut results = latent_search(&x, &ids, &g, &d, &search, opts.jobs.max(1))?;
            if let Some(l) = opts.lambda {
                results = results.iter().map(|r| r.reweighted(l)).collect();
            }
            lambda = Some(opts.lambda.unwrap_or(search.lambda));
            let shown: Vec<usize> = (0..n.min(8)).collect();
            if !shown.is_empty() {
                let side = spec.pair.side;
                let mut tiles = Vec::with_capacity(shown.len() * 2 * side * side);
                for &i in &shown {
                    tiles.extend_from_slice(x.row(i));
                    tiles.extend_from_slice(&results[i].reconstruction);
                }
                let batch = ImageBatch { images: Tensor::new(vec![shown.len() * 2, 1, side, side], tiles)? };
                dir.write(PAIRS_GRID, render_grid_pgm(&batch, 2)?)?;
            }
            results
                .iter()
                .enumerate()
                .map(|(i, r)| ScoreRow {
                    index: pair.test_indices[i],
                    label: pair.test_labels[i],
                    v: r.v,
                    l_r: Some(r.l_r),
                    l_d: Some(r.l_d),
                    restarts: Some(r.restarts_used),
                })
                .collect()
        }
    };
    let scores = dir.write(SCORES_FILE, scores_to_csv(&rows)?)?;
    let meta = ScoreMeta {
        spec_hash: hash,
        dataset: spec.dataset,
        known: spec.known,
        unknown: spec.unknown,
        model: spec.model,
        seed: spec.seed,
        profile: spec.profile,
        side: spec.pair.side,
        lambda,
        count: rows.len(),
    };
    let meta_file = meta_path(&scores);
    std::fs::write(&meta_file, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(CliError::io(&meta_file))?;
    Ok(rows)
}

fn distance_row(pair: &PairExperiment, i: usize, score: f64) -> ScoreRow {
    ScoreRow { index: pair.test_indices[i], label: pair.test_labels[i], v: score, l_r: None, l_d: None, restarts: None }
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub aucs: Vec<(ScoreMeta, AucResult)>,
    pub table: String,
}

/// AUC per score file and the combined results table.
pub fn cmd_eval(files: &[PathBuf], grids: Option<&Path>) -> Result<EvalSummary> {
    if files.is_empty() {
        return Err(CliError::Usage("eval needs at least one scores file".into()));
    }
    let mut aucs = Vec::new();
    let mut entries = Vec::new();
    for f in files {
        let meta = read_meta(f)?;
        let rows = read_scores(f)?;
        if let Some((first, _)) = aucs.first() {
            let first: &ScoreMeta = first;
            if (first.dataset, first.profile, first.side) != (meta.dataset, meta.profile, meta.side) {
                return Err(CliError::Usage(format!(
                    "{} is a {} {:?} side-{} run, unlike the first file",
                    f.display(),
                    meta.dataset,
                    meta.profile,
                    meta.side
                )));
            }
        }
        let stored = f.with_file_name(crate::artifacts::SPEC_HASH_FILE);
        if let Ok(h) = std::fs::read_to_string(&stored) {
            if h.trim() != meta.spec_hash {
                return Err(CliError::Integrity(format!("{} was scored under a different spec than {}", f.display(), stored.display())));
            }
        }
        if rows.len() != meta.count {
            return Err(CliError::Data(format!("{}: {} rows, metadata says {}", f.display(), rows.len(), meta.count)));
        }
        let scores: Vec<f64> = rows.iter().map(|r| r.v).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
        let auc = compute_auc(&scores, &labels, &f.display().to_string())
            .map_err(|e| CliError::Eval(format!("{}: {e}", f.display())))?;
        entries.push(TableEntry {
            known: meta.dataset.class_name(meta.known),
            unknown: meta.dataset.class_name(meta.unknown),
            model: meta.model.column().to_string(),
            auc: auc.auc,
        });
        if let Some(g) = grids {
            let src = f.with_file_name(PAIRS_GRID);
            if src.exists() {
                std::fs::create_dir_all(g).map_err(CliError::io(g))?;
                let name = format!("{}_{}v{}_{}_s{}.pgm", meta.dataset, meta.known, meta.unknown, meta.model, meta.seed);
                std::fs::copy(&src, g.join(&name)).map_err(CliError::io(g.join(&name)))?;
            }
        }
        aucs.push((meta, auc));
    }
    let table = emit_results_table(&entries)?;
    Ok(EvalSummary { aucs, table })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub spec_hash: String,
    pub confusion: NeighborConfusion,
    /// Most confused unordered class pairs with their symmetric mass.
    pub suggested: Vec<(u8, u8, u64)>,
    pub final_loss: f64,
}

/// Trains the metric embedding and reports the most confused class pairs.
pub fn cmd_similarity(spec: &SimilaritySpec, force: bool) -> Result<SimilaritySummary> {
    spec.train.validate()?;
    if spec.train.regime != Regime::Metric {
        return Err(CliError::Usage("similarity needs a metric train section".into()));
    }
    let ds = Dataset::load(&spec.data_dir, spec.dataset)?;
    let dir = ArtifactDir::prepare(&spec.artifact_dir(), &["confusion.csv", "pairs.json", "metric.ckpt"], force)?;
    let hash = spec.hash();
    dir.write_spec(&spec.to_json(), &hash, force)?;
    let (run, model) = train_metric_embedding(&ds.train_images, &ds.train_labels, &spec.train)?;
    model.weights.save(&dir.file("metric.ckpt"))?;
    dir.write(LOSSES_FILE, run.loss_csv())?;
    let confusion = confusion_on_test(&model, &ds, spec)?;
    let suggested = confusion.suggested_pairs(3);
    dir.write("confusion.csv", confusion.to_csv())?;
    let tail = run.steps.len().saturating_sub(50);
    let recent: Vec<f64> = run.steps[tail..].iter().filter_map(|s| s.loss("metric_loss")).collect();
    let final_loss = recent.iter().sum::<f64>() / recent.len().max(1) as f64;
    let summary = SimilaritySummary { spec_hash: hash, confusion, suggested, final_loss };
    dir.write("pairs.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(summary)
}

fn confusion_on_test(model: &MetricCnn, ds: &Dataset, spec: &SimilaritySpec) -> Result<NeighborConfusion> {
    let side = spec.train.metric.model.input_side;
    let all: Vec<usize> = (0..ds.test_images.count).collect();
    let mut embeddings = Vec::with_capacity(all.len());
    for chunk in all.chunks(500) {
        let batch = ImageBatch::from_idx(&ds.test_images, chunk, side)?;
        let e = model.embed(&batch.images)?;
        embeddings.extend((0..chunk.len()).map(|i| e.row(i).to_vec()));
    }
    Ok(neighbor_confusion(
        &embeddings,
        &ds.test_labels,
        10,
        spec.samples_per_class,
        spec.pool_per_class,
        spec.k_neighbors,
        spec.seed,
    )?)
}
