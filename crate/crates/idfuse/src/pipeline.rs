//! End-to-end workflows behind the CLI: fixture pretraining, training with
//! periodic checkpoints, ablation grids, evaluation and inference.

use std::path::{Path, PathBuf};

use idfuse_core::config::{AblationFlags, DatasetSource, ExperimentConfig};
use idfuse_core::data::{
    build_pairs, procedural_for_profile, resize_for_encoder, ContourSpec, FaceRecord, ImageTensor, PairedSample,
};
use idfuse_core::generator::{AverageCode, Generator, PretrainOptions};
use idfuse_core::identity::Embedder;
use idfuse_core::metrics::MetricsRow;
use idfuse_core::params::{derive_seed, ParamStore};
use idfuse_core::pretrain::{pretrain_identity_backbone, train_embedder, ClassifierOptions, LabelledSet};
use idfuse_core::resample::Filter;
use idfuse_core::trainer::{RefinementTrace, StepOutcome, TrainSchedule, Trainer};
use idfuse_core::Tensor;

use crate::checkpoint::{Checkpoint, Entry, TensorData, EMBEDDER, GENERATOR, NOISE};
use crate::config_file::serialize_config;
use crate::dataset::load_dataset;
use crate::error::{Error, Result};
use crate::imageio::{grid_row, save_png};
use crate::logs::LossLog;
use crate::report::write_metrics;

/// Seed of procedural renders; fixed so every experiment sees one dataset.
pub const DATASET_SEED: u64 = 0;
/// Seed of the pretrained generator and recognition networks, which play
/// the role of external pretrained assets shared by all experiments.
pub const FIXTURE_SEED: u64 = 0;
const FIXTURE_VERSION: u32 = 1;
const BACKBONE: &str = "backbone";

/// Faces of the configured dataset at generator resolution.
pub fn load_records(cfg: &ExperimentConfig) -> Result<Vec<FaceRecord>> {
    let res = cfg.scale.generator_resolution;
    match &cfg.dataset {
        DatasetSource::Procedural {
            identities,
            per_identity,
        } => Ok(procedural_for_profile(
            &cfg.scale,
            *identities,
            *per_identity,
            DATASET_SEED,
        )),
        DatasetSource::Path(p) => {
            let mut records = load_dataset(Path::new(p))?.records;
            for r in &mut records {
                if r.image.height() != res {
                    r.image = r.image.resized(res, res, Filter::Bicubic);
                }
            }
            Ok(records)
        }
    }
}

/// Every tenth record (the 10th, 20th, ...) is held out for evaluation.
/// Sets under ten records are used for both.
pub fn split_records(records: &[FaceRecord]) -> (Vec<FaceRecord>, Vec<FaceRecord>) {
    if records.len() < 10 {
        return (records.to_vec(), records.to_vec());
    }
    let (test, train): (Vec<_>, Vec<_>) = records.iter().cloned().enumerate().partition(|(i, _)| i % 10 == 9);
    (
        train.into_iter().map(|x| x.1).collect(),
        test.into_iter().map(|x| x.1).collect(),
    )
}

pub fn contour_spec(cfg: &ExperimentConfig) -> ContourSpec {
    ContourSpec {
        modality: cfg.modality,
        lr_size: cfg.scale.lr_contour_resolution,
        mask_classes: cfg.mask_classes,
    }
}

/// Training pairs, truncated to `max_train_pairs` when set.
pub fn training_pairs(cfg: &ExperimentConfig, train: &[FaceRecord]) -> Result<Vec<PairedSample>> {
    let mut pairs = build_pairs(train, contour_spec(cfg), cfg.per_contour, cfg.seed)?;
    if cfg.max_train_pairs > 0 {
        pairs.truncate(cfg.max_train_pairs);
    }
    Ok(pairs)
}

pub fn evaluation_pairs(cfg: &ExperimentConfig, test: &[FaceRecord]) -> Result<Vec<PairedSample>> {
    Ok(build_pairs(
        test,
        contour_spec(cfg),
        cfg.per_contour,
        derive_seed(cfg.seed, "evaluation"),
    )?)
}

/// The frozen generator and recognition networks encoders are trained against.
#[derive(Clone, Debug)]
pub struct Fixture {
    pub generator: Generator<f32>,
    pub embedder: Embedder<f32>,
    pub backbone: ParamStore<f32>,
}

fn fixture_key(cfg: &ExperimentConfig, train: &[FaceRecord]) -> String {
    let dataset = match &cfg.dataset {
        DatasetSource::Procedural {
            identities,
            per_identity,
        } => format!("procedural:{identities}x{per_identity}"),
        DatasetSource::Path(p) => p.clone(),
    };
    let key = format!(
        "v{FIXTURE_VERSION}|{}|{dataset}|{}|{}|{}|{}|{}",
        cfg.scale.name,
        train.len(),
        cfg.generator_pretrain_steps,
        cfg.embedder_pretrain_steps,
        cfg.identity_pretrain_steps,
        cfg.average_code_samples
    );
    format!("fixture-{:016x}.idf", derive_seed(FIXTURE_SEED, &key))
}

fn images_at(records: &[FaceRecord], res: usize) -> Result<Tensor<f32>> {
    let items: Vec<Tensor<f32>> = records
        .iter()
        .map(|r| resize_for_encoder(&r.image, None, res).to_tensor())
        .collect();
    Ok(Tensor::stack_batch(&items)?)
}

/// Pretrain the generator, embedder and identity backbone on `train`.
pub fn pretrain_fixture(cfg: &ExperimentConfig, train: &[FaceRecord]) -> Result<Fixture> {
    let p = &cfg.scale;
    let mut generator = Generator::<f32>::new(p, derive_seed(FIXTURE_SEED, "generator"))?;
    let faces = images_at(train, p.generator_resolution)?;
    log::info!("pretraining generator for {} steps", cfg.generator_pretrain_steps);
    let opts = PretrainOptions {
        steps: cfg.generator_pretrain_steps,
        seed: FIXTURE_SEED,
        ..PretrainOptions::default()
    };
    let losses = generator.pretrain(&faces, &opts)?;
    if let (Some(a), Some(b)) = (losses.first(), losses.last()) {
        log::info!("generator reconstruction loss {a:.5} -> {b:.5}");
    }
    generator.freeze();
    let avg = generator.average_code(cfg.average_code_samples, FIXTURE_SEED)?;
    generator.set_average_code(avg)?;

    let small = images_at(train, p.contour_input_resolution)?;
    let labels: Vec<u32> = train.iter().map(|r| r.label).collect();
    let set = LabelledSet {
        images: &small,
        labels: &labels,
    };
    let mut embedder = Embedder::<f32>::new(p, derive_seed(FIXTURE_SEED, "embedder"));
    log::info!("training embedder for {} steps", cfg.embedder_pretrain_steps);
    let copts = ClassifierOptions {
        steps: cfg.embedder_pretrain_steps,
        seed: FIXTURE_SEED,
        ..ClassifierOptions::default()
    };
    train_embedder(&mut embedder, &set, &copts)?;
    log::info!(
        "pretraining identity backbone for {} steps",
        cfg.identity_pretrain_steps
    );
    let copts = ClassifierOptions {
        steps: cfg.identity_pretrain_steps,
        ..copts
    };
    let (backbone, _) = pretrain_identity_backbone(p, &set, &copts)?;
    Ok(Fixture {
        generator,
        embedder,
        backbone,
    })
}

impl Fixture {
    fn to_checkpoint(&self, cfg: &ExperimentConfig) -> Result<Checkpoint> {
        let mut entries = Vec::new();
        let mut push = |prefix: &str, store: &ParamStore<f32>| {
            for (name, t) in store.iter() {
                entries.push(Entry {
                    name: format!("{prefix}/{name}"),
                    shape: t.shape().to_vec(),
                    data: TensorData::F32(t.data().to_vec()),
                });
            }
        };
        push(GENERATOR, self.generator.params());
        push(NOISE, self.generator.noise_buffers());
        push(EMBEDDER, self.embedder.params());
        push(BACKBONE, &self.backbone);
        let avg = self
            .generator
            .average()
            .ok_or(idfuse_core::Error::Empty("average code"))?;
        entries.push(Entry {
            name: "average_code".into(),
            shape: vec![avg.w_bar.len()],
            data: TensorData::F64(avg.w_bar.clone()),
        });
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("average_code.samples".into(), avg.samples.to_string());
        Ok(Checkpoint {
            config: cfg.clone(),
            step: 0,
            meta,
            entries,
        })
    }

    fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let p = &ck.config.scale;
        let mut generator = Generator::<f32>::new(p, 0)?;
        generator.set_parameters(&ck.store(GENERATOR)?, &ck.store(NOISE)?)?;
        generator.freeze();
        let w_bar = match ck.entry("average_code").map(|e| &e.data) {
            Some(TensorData::F64(v)) => v.clone(),
            _ => return Err(Error::format("<fixture>", "missing average code")),
        };
        let samples = ck
            .meta
            .get("average_code.samples")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format("<fixture>", "missing average code sample count"))?;
        generator.set_average_code(AverageCode { w_bar, samples })?;
        let mut embedder = Embedder::<f32>::new(p, 0);
        embedder.params_mut().set_all(&ck.store(EMBEDDER)?)?;
        Ok(Fixture {
            generator,
            embedder,
            backbone: ck.store(BACKBONE)?,
        })
    }
}

/// Pretrained fixture for `cfg`, read from `cache_dir` when a matching file
/// exists and written there otherwise.
pub fn prepare_fixture(cfg: &ExperimentConfig, train: &[FaceRecord], cache_dir: Option<&Path>) -> Result<Fixture> {
    let cached = cache_dir.map(|d| d.join(fixture_key(cfg, train)));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        log::info!("loading pretrained fixture from {}", path.display());
        return Fixture::from_checkpoint(&Checkpoint::load(path)?);
    }
    let fixture = pretrain_fixture(cfg, train)?;
    if let Some(path) = cached {
        fixture.to_checkpoint(cfg)?.save(&path)?;
    }
    Ok(fixture)
}

pub fn build_trainer(cfg: &ExperimentConfig, fixture: &Fixture) -> Result<Trainer> {
    let backbone = cfg.ablation.load_pretrained_id.then_some(&fixture.backbone);
    Ok(Trainer::new(
        cfg.clone(),
        fixture.generator.clone(),
        fixture.embedder.clone(),
        backbone,
    )?)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    pub cache_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting fresh.
    pub resume: Option<PathBuf>,
    /// Stop early after this step; the config (and so every checkpoint's
    /// snapshot) stays unchanged.
    pub stop_after: Option<u64>,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub trainer: Trainer,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_step{step:06}.idf")
}

/// Train both encoders, writing the loss log, periodic checkpoints and a
/// final checkpoint into `opts.out_dir`. `observe` sees every step.
pub fn train(
    cfg: &ExperimentConfig,
    opts: &TrainOptions,
    mut observe: impl FnMut(&Trainer, &StepOutcome),
) -> Result<TrainSummary> {
    let out = &opts.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_path = out.join("config.txt");
    std::fs::write(&config_path, serialize_config(cfg)).map_err(|e| Error::io(&config_path, e))?;
    let records = load_records(cfg)?;
    let (train_set, _) = split_records(&records);
    let pairs = training_pairs(cfg, &train_set)?;
    let fixture = prepare_fixture(cfg, &train_set, opts.cache_dir.as_deref())?;
    let mut trainer = build_trainer(cfg, &fixture)?;
    let loss_log = out.join("losses.csv");
    let mut log = match &opts.resume {
        Some(path) => {
            Checkpoint::load(path)?.restore_into(&mut trainer)?;
            log::info!("resuming from step {}", trainer.step);
            LossLog::append(&loss_log)?
        }
        None => LossLog::create(&loss_log)?,
    };
    let schedule = TrainSchedule::new(&pairs, cfg)?;
    let until = opts
        .stop_after
        .map_or(cfg.train_steps as u64, |s| s.min(cfg.train_steps as u64));
    log::info!(
        "training {} ({} pairs, {} steps)",
        cfg.ablation.label(),
        pairs.len(),
        until
    );
    let mut checkpoints = Vec::new();
    while trainer.step < until {
        let batch = schedule.batch(trainer.step)?;
        let outcome = trainer.train_step(&batch)?;
        let step = outcome.step;
        if outcome.warning {
            log::warn!(
                "step {step}: total loss {:.4} exceeds 10x its running median",
                outcome.report.total
            );
        }
        if cfg.log_every > 0 && step % cfg.log_every as u64 == 0 {
            log.write(step, &outcome.report)?;
            log::debug!("step {step}: total {:.5}", outcome.report.total);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every as u64 == 0 {
            let path = out.join(checkpoint_name(step));
            Checkpoint::capture(&trainer)?.save(&path)?;
            checkpoints.push(path);
        }
        observe(&trainer, &outcome);
    }
    let final_checkpoint = out.join("final.idf");
    Checkpoint::capture(&trainer)?.save(&final_checkpoint)?;
    Ok(TrainSummary {
        trainer,
        checkpoints,
        final_checkpoint,
        loss_log,
    })
}

/// Metrics of a trained model on the held-out split of its dataset.
pub fn evaluate(trainer: &Trainer, tag: &str) -> Result<MetricsRow> {
    let cfg = &trainer.config;
    let records = load_records(cfg)?;
    let (_, test) = split_records(&records);
    let pairs = evaluation_pairs(cfg, &test)?;
    let r = cfg.scale.contour_input_resolution;
    let reference: Vec<ImageTensor> = test.iter().map(|rec| resize_for_encoder(&rec.image, None, r)).collect();
    Ok(trainer.evaluate(&pairs, &reference, tag)?)
}

/// Directory name of an ablation cell, e.g. `TTF`.
pub fn cell_name(flags: AblationFlags) -> String {
    [flags.use_ifblock, flags.use_input_latent, flags.load_pretrained_id]
        .iter()
        .map(|&b| if b { 'T' } else { 'F' })
        .collect()
}

/// Train and evaluate every grid cell in order with the shared seed and
/// dataset; writes `metrics.csv` and `metrics.txt` into `opts.out_dir`.
pub fn ablate(cfg: &ExperimentConfig, grid: &[AblationFlags], opts: &TrainOptions) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &flags in grid {
        let cell = ExperimentConfig {
            ablation: flags,
            ..cfg.clone()
        };
        let cell_opts = TrainOptions {
            out_dir: opts.out_dir.join(cell_name(flags)),
            resume: None,
            ..opts.clone()
        };
        let summary = train(&cell, &cell_opts, |_, _| {})?;
        let row = evaluate(&summary.trainer, flags.label())?;
        log::info!(
            "{}: lpips {:.4} idsim {:.4} fid {:.4}",
            row.tag,
            row.lpips,
            row.idsim,
            row.fid
        );
        rows.push(row);
    }
    write_metrics(&rows, &opts.out_dir.join("metrics.csv"))?;
    Ok(rows)
}

/// Evaluate a checkpoint and write the CSV plus text table.
pub fn eval_checkpoint(checkpoint: &Path, out_csv: &Path) -> Result<MetricsRow> {
    let trainer = Checkpoint::load(checkpoint)?.into_trainer()?;
    let row = evaluate(&trainer, trainer.config.ablation.label())?;
    write_metrics(std::slice::from_ref(&row), out_csv)?;
    Ok(row)
}

/// Image grid: contour | identity | one tile per refinement iteration.
pub fn trace_grid(contour: &ImageTensor, identity: &ImageTensor, trace: &RefinementTrace, side: usize) -> ImageTensor {
    let mut tiles = vec![contour, identity];
    tiles.extend(trace.steps.iter().map(|s| &s.output));
    grid_row(&tiles, side)
}

/// Refine one pair and save the grid to `out`.
pub fn infer(
    trainer: &Trainer,
    contour: &idfuse_core::data::ContourCondition,
    identity: &ImageTensor,
    out: &Path,
) -> Result<RefinementTrace> {
    let trace = trainer.refine(contour, identity, trainer.config.refinement_steps, None)?;
    let side = trainer.config.scale.generator_resolution.min(256);
    save_png(out, &trace_grid(&contour.image, identity, &trace, side))?;
    Ok(trace)
}
