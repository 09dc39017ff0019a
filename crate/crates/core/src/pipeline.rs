//! The four-stage robust training pipeline.
//!
//! Stage 1 pre-trains all view networks jointly on the corrupted data with
//! a large batch. Stage 2 resumes with a small batch and a cyclical
//! learning rate, recording each instance's per-view loss after every
//! epoch. Stage 3 averages those losses and partitions every (instance,
//! view) pair into clean or conflicting via a two-component mixture. Stage
//! 4 re-initializes the networks and retrains with conflicting pairs
//! down-weighted by their clean posterior.
//!
//! Everything is deterministic given the run seed: data generation, splits,
//! corruption, parameter init, and batch shuffling all draw from seeds
//! derived from it by fixed tags.

use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

use crate::config::{DataSource, RunConfig};
use crate::data::io::{load_csv, LabelSource};
use crate::data::{
    generate_synthetic, inject_misalignment, inject_noise, split, CorruptionSpec, Matrix,
    MultiViewDataset,
};
use crate::error::{Error, Result};
use crate::fusion::{
    fuse, test_weights, train_weights, FusionWeights, ViewOpinion, WeightTransform,
};
use crate::fuzzy::{training_credibility, Membership, OneHot};
use crate::gmm::{divide_trace, DivisionConfig, DivisionResult, LossTrace};
use crate::grad::{ensemble_backward, FusionSettings, FusionWeighting};
use crate::loss::{sample_bce, warmup_gamma};
use crate::manifest::{write_atomic, FinalEval, RunManifest, StageRecord};
use crate::metrics::{accuracy, sig9};
use crate::net::{optimizer_step, MlpModel, MlpSpec, OptimizerKind, OptimizerState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Cyclical learning-rate schedule: linear decay from `eta_max` to
/// `eta_min` within each cycle of `cycle_length` epochs, restarting at the
/// cycle boundary, for `cycle_count` cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub cycle_length: usize,
    pub cycle_count: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            eta_max: 3e-3,
            eta_min: 3e-4,
            cycle_length: 10,
            cycle_count: 10,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_max > self.eta_min && self.eta_min > 0.0) {
            return Err(Error::invalid("need eta_max > eta_min > 0"));
        }
        if self.cycle_length < 2 {
            return Err(Error::invalid("cycle_length must be >= 2"));
        }
        if self.cycle_count == 0 {
            return Err(Error::invalid("cycle_count must be >= 1"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.cycle_length * self.cycle_count
    }
}

/// Learning rate at a 1-based epoch index.
pub fn lr_at_epoch(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    debug_assert!(epoch >= 1);
    let s = ((epoch - 1) % cfg.cycle_length) as f64 / (cfg.cycle_length - 1) as f64;
    s * cfg.eta_min + (1.0 - s) * cfg.eta_max
}

/// SplitMix-style mixing of a base seed with a purpose tag. Every random
/// stream in a run is derived this way from the single run seed.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_DATA: u64 = 1;
const TAG_SPLIT: u64 = 2;
const TAG_MISALIGN_TRAIN: u64 = 3;
const TAG_MISALIGN_TEST: u64 = 4;
const TAG_NOISE_TEST: u64 = 5;
const TAG_INIT_BASE: u64 = 100;
const TAG_STAGE4_INIT_BASE: u64 = 200;
const TAG_STAGE1_SHUFFLE: u64 = 300;
const TAG_STAGE2_SHUFFLE: u64 = 301;
const TAG_STAGE4_SHUFFLE: u64 = 302;
const TAG_CONTROL_SHUFFLE: u64 = 303;

/// Fusion rule used when the ensemble makes decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Conflict-only weights (the rule used while training).
    TrainTime,
    /// Uncertainty-and-conflict weights (the rule used at test time).
    TestTime,
    /// Uniform averaging (the control arm).
    Average,
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::TrainTime => "train_time",
            FusionMode::TestTime => "test_time",
            FusionMode::Average => "average",
        }
    }
}

/// One decision of the ensemble.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub class: usize,
    pub uncertainty: f64,
    pub membership: Membership,
}

/// The per-view models together with the fusion rule they decide with.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedEnsemble {
    pub models: Vec<MlpModel>,
    pub fusion_mode: FusionMode,
    pub transform: WeightTransform,
}

pub const ENSEMBLE_CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EnsembleCheckpoint {
    format_version: u32,
    fusion_mode: FusionMode,
    transform: WeightTransform,
    models: Vec<MlpModel>,
}

/// Evaluation of an ensemble over a dataset.
#[derive(Debug, Clone)]
pub struct EnsembleEval {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub uncertainties: Vec<f64>,
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl TrainedEnsemble {
    /// Decide one instance from its per-view feature rows.
    pub fn predict(&self, rows: &[&[f64]]) -> Result<Prediction> {
        if rows.len() != self.models.len() {
            return Err(Error::shape(format!(
                "{} rows for {} view models",
                rows.len(),
                self.models.len()
            )));
        }
        let memberships: Vec<Membership> = self
            .models
            .iter()
            .zip(rows)
            .map(|(model, row)| model.forward(row).map(|(_, m)| m))
            .collect::<Result<_>>()?;
        let opinions = ViewOpinion::from_memberships(&memberships)?;
        let weights = match self.fusion_mode {
            FusionMode::TestTime => test_weights(&opinions, self.transform)?,
            FusionMode::TrainTime => train_weights(&opinions, self.transform)?,
            FusionMode::Average => FusionWeights::uniform(opinions.len()),
        };
        let fused = fuse(&opinions, &weights)?;
        Ok(Prediction {
            class: argmax_lowest(fused.membership.values()),
            uncertainty: fused.uncertainty,
            membership: fused.membership,
        })
    }

    pub fn evaluate(&self, ds: &MultiViewDataset) -> Result<EnsembleEval> {
        let n = ds.instance_count();
        let mut predictions = Vec::with_capacity(n);
        let mut uncertainties = Vec::with_capacity(n);
        for i in 0..n {
            let rows: Vec<&[f64]> = ds.views.iter().map(|m| m.row(i)).collect();
            let p = self.predict(&rows)?;
            predictions.push(p.class);
            uncertainties.push(p.uncertainty);
        }
        Ok(EnsembleEval {
            accuracy: accuracy(&predictions, &ds.labels)?,
            predictions,
            uncertainties,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let blob = EnsembleCheckpoint {
            format_version: ENSEMBLE_CHECKPOINT_VERSION,
            fusion_mode: self.fusion_mode,
            transform: self.transform,
            models: self.models.clone(),
        };
        let json = serde_json::to_string_pretty(&blob)
            .map_err(|e| Error::config(format!("ensemble encode: {e}")))?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let blob: EnsembleCheckpoint = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("ensemble decode {}: {e}", path.display())))?;
        Ok(TrainedEnsemble {
            models: blob.models,
            fusion_mode: blob.fusion_mode,
            transform: blob.transform,
        })
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub lr: f64,
}

pub fn epoch_log_to_csv(records: &[EpochRecord]) -> String {
    let mut text = String::from("epoch,train_loss,test_acc,lr\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch,
            sig9(r.train_loss),
            sig9(r.test_accuracy),
            sig9(r.lr)
        ));
    }
    text
}

/// Initialize one model per view with seeds derived from the run seed.
pub fn init_ensemble(cfg: &RunConfig, ds: &MultiViewDataset, tag_base: u64) -> Result<Vec<MlpModel>> {
    ds.views
        .iter()
        .enumerate()
        .map(|(v, m)| {
            let spec = MlpSpec {
                input_dim: m.cols(),
                hidden_dims: cfg.model.hidden_dims.clone(),
                class_count: ds.class_count,
                activation: cfg.model.activation,
                norm_order: cfg.model.norm_order,
            };
            MlpModel::init(spec, derive_seed(cfg.seed, tag_base + v as u64))
        })
        .collect()
}

struct StageSettings<'a> {
    batch_size: usize,
    /// `(lr, gamma)` per 1-based epoch.
    plans: Vec<(f64, f64)>,
    /// Importance weights per view, aligned with the train instance order.
    importance: Option<&'a [Vec<f64>]>,
    fusion: FusionSettings,
    optimizer: OptimizerKind,
    eval_mode: FusionMode,
    transform: WeightTransform,
    shuffle_seed: u64,
    record_trace: bool,
}

fn one_hot_labels(ds: &MultiViewDataset) -> Result<Vec<OneHot>> {
    ds.labels
        .iter()
        .map(|&l| OneHot::new(l, ds.class_count))
        .collect()
}

/// Per-instance, per-view class-summed cross-entropy of the current models
/// against the training credibility; this is the quantity the loss trace
/// records.
fn per_view_sample_losses(models: &[MlpModel], ds: &MultiViewDataset) -> Result<Vec<f64>> {
    let n = ds.instance_count();
    let v_count = models.len();
    let mut out = Vec::with_capacity(n * v_count);
    for i in 0..n {
        let label = OneHot::new(ds.labels[i], ds.class_count)?;
        for (v, model) in models.iter().enumerate() {
            let (_, membership) = model.forward(ds.views[v].row(i))?;
            let r = training_credibility(&membership, &label)?;
            out.push(sample_bce(&r, &label)?);
        }
    }
    Ok(out)
}

fn run_stage(
    models: &mut [MlpModel],
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    settings: &StageSettings,
) -> Result<(Vec<EpochRecord>, Option<LossTrace>)> {
    let n = train.instance_count();
    let v_count = models.len();
    let labels = one_hot_labels(train)?;
    let mut trace = settings
        .record_trace
        .then(|| LossTrace::new(n, v_count));
    let mut records = Vec::with_capacity(settings.plans.len());
    if settings.plans.is_empty() {
        return Ok((records, trace));
    }

    let mut optimizers: Vec<OptimizerState> = models
        .iter()
        .map(|m| OptimizerState::new(settings.optimizer, settings.plans[0].0, m))
        .collect::<Result<_>>()?;

    let eval_ensemble = |models: &[MlpModel]| TrainedEnsemble {
        models: models.to_vec(),
        fusion_mode: settings.eval_mode,
        transform: settings.transform,
    };

    for (epoch_idx, &(lr, gamma)) in settings.plans.iter().enumerate() {
        let epoch = epoch_idx + 1;
        for opt in &mut optimizers {
            opt.set_learning_rate(lr);
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(settings.shuffle_seed, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch_idx in order.chunks(settings.batch_size) {
            let batch_views: Vec<Matrix> = train
                .views
                .iter()
                .map(|m| m.select_rows(batch_idx))
                .collect();
            let batch_labels: Vec<OneHot> = batch_idx.iter().map(|&i| labels[i]).collect();
            let batch_importance: Option<Vec<Vec<f64>>> = settings.importance.map(|imp| {
                imp.iter()
                    .map(|view_d| batch_idx.iter().map(|&i| view_d[i]).collect())
                    .collect()
            });
            let (batch_loss, grads) = ensemble_backward(
                models,
                &batch_views,
                &batch_labels,
                gamma,
                batch_importance.as_deref(),
                &settings.fusion,
            )
            .map_err(|e| match e {
                Error::Numeric { context } => {
                    Error::numeric(format!("epoch {epoch}: {context}"))
                }
                other => other,
            })?;
            loss_sum += batch_loss * batch_idx.len() as f64;
            for (model, (grad, opt)) in models
                .iter_mut()
                .zip(grads.iter().zip(optimizers.iter_mut()))
            {
                optimizer_step(model, grad, opt)?;
            }
        }

        if let Some(trace) = &mut trace {
            trace.push_epoch(&per_view_sample_losses(models, train)?)?;
        }
        let test_accuracy = eval_ensemble(models).evaluate(test)?.accuracy;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            test_accuracy,
            lr,
        });
    }
    Ok((records, trace))
}

fn conflict_fusion_settings(cfg: &RunConfig) -> FusionSettings {
    FusionSettings {
        transform: cfg.fusion.transform,
        detach_weights: cfg.fusion.detach_weights,
        weighting: FusionWeighting::Conflict,
    }
}

/// Stage 1: joint pre-training on the corrupted data with a large batch,
/// fixed learning rate, and the fused branch ramping in over the warm-up.
pub fn stage1_pretrain(
    models: &mut [MlpModel],
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    cfg: &RunConfig,
) -> Result<Vec<EpochRecord>> {
    let lr = cfg.stage1.learning_rate.unwrap_or(cfg.schedule.eta_max);
    let plans: Vec<(f64, f64)> = (1..=cfg.stage1.epochs)
        .map(|t| (lr, warmup_gamma(t, cfg.stage1.warmup_epochs)))
        .collect();
    let settings = StageSettings {
        batch_size: cfg.stage1.batch_size,
        plans,
        importance: None,
        fusion: conflict_fusion_settings(cfg),
        optimizer: cfg.optimizer.kind,
        eval_mode: FusionMode::TestTime,
        transform: cfg.fusion.transform,
        shuffle_seed: derive_seed(cfg.seed, TAG_STAGE1_SHUFFLE),
        record_trace: false,
    };
    let (records, _) = run_stage(models, train, test, &settings)?;
    Ok(records)
}

/// Stage 2: cyclical training with the small batch, recording per-view
/// losses after every epoch. The warm-up coefficient keeps counting from
/// the stage-1 epochs; optimizer moments restart at the stage boundary.
pub fn stage2_cyclical(
    models: &mut [MlpModel],
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    cfg: &RunConfig,
) -> Result<(LossTrace, Vec<EpochRecord>)> {
    stage2_cyclical_with_epochs(models, train, test, cfg, cfg.schedule.total_epochs())
}

/// [`stage2_cyclical`] with an explicit epoch count. Because the schedule
/// depends only on the position within a cycle, a shorter run is exactly a
/// prefix of a longer one.
pub fn stage2_cyclical_with_epochs(
    models: &mut [MlpModel],
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    cfg: &RunConfig,
    epochs: usize,
) -> Result<(LossTrace, Vec<EpochRecord>)> {
    cfg.schedule.validate()?;
    if epochs == 0 {
        return Err(Error::invalid("stage 2 needs at least one epoch"));
    }
    let plans: Vec<(f64, f64)> = (1..=epochs)
        .map(|t| {
            (
                lr_at_epoch(t, &cfg.schedule),
                warmup_gamma(cfg.stage1.epochs + t, cfg.stage1.warmup_epochs),
            )
        })
        .collect();
    let settings = StageSettings {
        batch_size: cfg.stage2.batch_size,
        plans,
        importance: None,
        fusion: conflict_fusion_settings(cfg),
        optimizer: cfg.optimizer.kind,
        eval_mode: FusionMode::TestTime,
        transform: cfg.fusion.transform,
        shuffle_seed: derive_seed(cfg.seed, TAG_STAGE2_SHUFFLE),
        record_trace: true,
    };
    let (records, trace) = run_stage(models, train, test, &settings)?;
    Ok((trace.expect("trace recording enabled"), records))
}

/// Stage 3: average the trace and partition clean from conflicting pairs.
pub fn stage3_divide(trace: &LossTrace, cfg: &RunConfig) -> Result<DivisionResult> {
    divide_trace(
        trace,
        &DivisionConfig {
            beta: cfg.stage3.beta,
            pooled: cfg.stage3.pooled_gmm,
            max_iters: cfg.stage3.gmm_max_iters,
            tol: cfg.stage3.gmm_tol,
        },
    )
}

/// Stage 4: re-initialize from stage-4 seeds and retrain with importance
/// weights from the division. The warm-up restarts from epoch 1.
pub fn stage4_robust(
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    cfg: &RunConfig,
    division: &DivisionResult,
) -> Result<(Vec<MlpModel>, Vec<EpochRecord>)> {
    if division.instances() != train.instance_count()
        || division.views() != train.view_count()
    {
        return Err(Error::shape(
            "division does not cover the training dataset",
        ));
    }
    let mut models = init_ensemble(cfg, train, TAG_STAGE4_INIT_BASE)?;
    let importance = division.importance_by_view();
    let lr = cfg.stage4.learning_rate.unwrap_or(cfg.schedule.eta_max);
    let plans: Vec<(f64, f64)> = (1..=cfg.stage4.epochs)
        .map(|t| (lr, warmup_gamma(t, cfg.stage4.warmup_epochs)))
        .collect();
    let settings = StageSettings {
        batch_size: cfg.stage4.batch_size,
        plans,
        importance: Some(&importance),
        fusion: conflict_fusion_settings(cfg),
        optimizer: cfg.optimizer.kind,
        eval_mode: FusionMode::TestTime,
        transform: cfg.fusion.transform,
        shuffle_seed: derive_seed(cfg.seed, TAG_STAGE4_SHUFFLE),
        record_trace: false,
    };
    let (records, _) = run_stage(&mut models, train, test, &settings)?;
    Ok((models, records))
}

/// Build the train/test datasets a config describes: generate or load,
/// split 8:2 (by default), then corrupt — misalignment on both splits with
/// independent seeds, Gaussian noise on the test split only.
pub fn build_datasets(cfg: &RunConfig) -> Result<(MultiViewDataset, MultiViewDataset)> {
    cfg.validate().map_err(|e| match e {
        Error::Config(m) => Error::Config(m),
        other => other,
    })?;
    let base = match cfg.data.source {
        DataSource::Synthetic => generate_synthetic(
            cfg.data.views,
            cfg.data.classes,
            cfg.data.instances,
            &cfg.data.view_dims,
            cfg.data.separation,
            derive_seed(cfg.seed, TAG_DATA),
        )?,
        DataSource::Csv => {
            let labels = match (&cfg.data.csv.label_file, &cfg.data.csv.label_column) {
                (Some(path), None) => LabelSource::File(path.clone()),
                (None, Some(column)) => LabelSource::Column(column.clone()),
                _ => return Err(Error::config("ambiguous label source")),
            };
            load_csv(&cfg.data.csv.view_paths, &labels)?
        }
    };
    let (train, test) = split(&base, cfg.data.split_ratio, derive_seed(cfg.seed, TAG_SPLIT))?;

    let c = &cfg.data.corruption;
    let mut train = train;
    let mut test = test;
    if c.misalign_rate > 0.0 {
        train = inject_misalignment(
            &train,
            &CorruptionSpec {
                misalign_rate: c.misalign_rate,
                views_per_instance: c.views_per_instance,
                noise_rate: 0.0,
                noise_std: c.noise_std,
                noise_mean: c.noise_mean,
                seed: derive_seed(cfg.seed, TAG_MISALIGN_TRAIN),
            },
        )?;
        test = inject_misalignment(
            &test,
            &CorruptionSpec {
                misalign_rate: c.misalign_rate,
                views_per_instance: c.views_per_instance,
                noise_rate: 0.0,
                noise_std: c.noise_std,
                noise_mean: c.noise_mean,
                seed: derive_seed(cfg.seed, TAG_MISALIGN_TEST),
            },
        )?;
    }
    if c.noise_rate > 0.0 {
        test = inject_noise(
            &test,
            &CorruptionSpec {
                misalign_rate: 0.0,
                views_per_instance: c.views_per_instance,
                noise_rate: c.noise_rate,
                noise_std: c.noise_std,
                noise_mean: c.noise_mean,
                seed: derive_seed(cfg.seed, TAG_NOISE_TEST),
            },
        )?;
    }
    Ok((train, test))
}

fn stage_record(
    name: &str,
    epochs: usize,
    started: Instant,
    artifacts: Vec<String>,
    records: &[EpochRecord],
) -> StageRecord {
    StageRecord {
        name: name.to_string(),
        epochs,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        artifacts,
        final_train_loss: records.last().map(|r| r.train_loss),
        final_test_accuracy: records.last().map(|r| r.test_accuracy),
        clean_fraction: None,
        trace_shape: None,
    }
}

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";

fn start_manifest(
    cfg: &RunConfig,
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    run_dir: &Path,
) -> Result<RunManifest> {
    std::fs::create_dir_all(run_dir)?;
    write_atomic(
        &run_dir.join(EFFECTIVE_CONFIG_FILE),
        cfg.to_toml_string()?.as_bytes(),
    )?;
    let fingerprint = format!("train={};test={}", train.fingerprint(), test.fingerprint());
    let manifest = RunManifest::new(cfg.clone(), fingerprint);
    manifest.save(run_dir)?;
    Ok(manifest)
}

/// Run the full four-stage pipeline, writing logs, checkpoints, the
/// division table, and the manifest into `run_dir`. A stage failure leaves
/// a manifest flagged incomplete with the error recorded.
pub fn run_pipeline(
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    cfg: &RunConfig,
    run_dir: &Path,
) -> Result<RunManifest> {
    let mut manifest = start_manifest(cfg, train, test, run_dir)?;
    match run_pipeline_stages(train, test, cfg, run_dir, &mut manifest) {
        Ok(()) => {
            manifest.complete = true;
            manifest.save(run_dir)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.complete = false;
            manifest.error = Some(e.to_string());
            let _ = manifest.save(run_dir);
            Err(e)
        }
    }
}

fn run_pipeline_stages(
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    cfg: &RunConfig,
    run_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let transform = cfg.fusion.transform;

    // Stage 1.
    let started = Instant::now();
    let mut models = init_ensemble(cfg, train, TAG_INIT_BASE)?;
    let records = stage1_pretrain(&mut models, train, test, cfg)?;
    write_atomic(
        &run_dir.join("stage1_log.csv"),
        epoch_log_to_csv(&records).as_bytes(),
    )?;
    TrainedEnsemble {
        models: models.clone(),
        fusion_mode: FusionMode::TestTime,
        transform,
    }
    .save(&run_dir.join("stage1_model.json"))?;
    manifest.push_stage(
        run_dir,
        stage_record(
            "stage1_pretrain",
            cfg.stage1.epochs,
            started,
            vec!["stage1_log.csv".into(), "stage1_model.json".into()],
            &records,
        ),
    )?;

    // Stage 2.
    let started = Instant::now();
    let (trace, records) = stage2_cyclical(&mut models, train, test, cfg)?;
    write_atomic(
        &run_dir.join("stage2_log.csv"),
        epoch_log_to_csv(&records).as_bytes(),
    )?;
    TrainedEnsemble {
        models: models.clone(),
        fusion_mode: FusionMode::TestTime,
        transform,
    }
    .save(&run_dir.join("stage2_model.json"))?;
    let mut record = stage_record(
        "stage2_cyclical",
        cfg.schedule.total_epochs(),
        started,
        vec!["stage2_log.csv".into(), "stage2_model.json".into()],
        &records,
    );
    record.trace_shape = Some([trace.instances(), trace.views(), trace.epochs()]);
    manifest.push_stage(run_dir, record)?;

    // Stage 3.
    let started = Instant::now();
    let division = stage3_divide(&trace, cfg)?;
    write_atomic(&run_dir.join("division.csv"), division.to_csv().as_bytes())?;
    let mut record = stage_record(
        "stage3_division",
        0,
        started,
        vec!["division.csv".into()],
        &[],
    );
    record.clean_fraction = Some(division.clean_fraction());
    manifest.push_stage(run_dir, record)?;

    // Stage 4.
    let started = Instant::now();
    let (final_models, records) = stage4_robust(train, test, cfg, &division)?;
    write_atomic(
        &run_dir.join("stage4_log.csv"),
        epoch_log_to_csv(&records).as_bytes(),
    )?;
    let final_ensemble = TrainedEnsemble {
        models: final_models,
        fusion_mode: FusionMode::TestTime,
        transform,
    };
    final_ensemble.save(&run_dir.join("stage4_model.json"))?;
    manifest.push_stage(
        run_dir,
        stage_record(
            "stage4_robust",
            cfg.stage4.epochs,
            started,
            vec!["stage4_log.csv".into(), "stage4_model.json".into()],
            &records,
        ),
    )?;

    let eval = final_ensemble.evaluate(test)?;
    manifest.final_eval = Some(FinalEval {
        test_accuracy: eval.accuracy,
        fusion: FusionMode::TestTime.as_str().into(),
        checkpoint: "stage4_model.json".into(),
    });
    Ok(())
}

/// The single-stage control arm: the same epoch budget as the full
/// pipeline, plain multi-task training with uniform (average) fusion in
/// both the fused branch and at evaluation time.
pub fn run_control(
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    cfg: &RunConfig,
    run_dir: &Path,
) -> Result<RunManifest> {
    let mut manifest = start_manifest(cfg, train, test, run_dir)?;
    match run_control_stage(train, test, cfg, run_dir, &mut manifest) {
        Ok(()) => {
            manifest.complete = true;
            manifest.save(run_dir)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.complete = false;
            manifest.error = Some(e.to_string());
            let _ = manifest.save(run_dir);
            Err(e)
        }
    }
}

fn run_control_stage(
    train: &MultiViewDataset,
    test: &MultiViewDataset,
    cfg: &RunConfig,
    run_dir: &Path,
    manifest: &mut RunManifest,
) -> Result<()> {
    let started = Instant::now();
    let total_epochs = cfg.stage1.epochs + cfg.schedule.total_epochs() + cfg.stage4.epochs;
    let lr = cfg.stage1.learning_rate.unwrap_or(cfg.schedule.eta_max);
    let plans: Vec<(f64, f64)> = (1..=total_epochs)
        .map(|t| (lr, warmup_gamma(t, cfg.stage1.warmup_epochs)))
        .collect();
    let mut models = init_ensemble(cfg, train, TAG_INIT_BASE)?;
    let settings = StageSettings {
        batch_size: cfg.stage2.batch_size,
        plans,
        importance: None,
        fusion: FusionSettings {
            transform: cfg.fusion.transform,
            detach_weights: cfg.fusion.detach_weights,
            weighting: FusionWeighting::Uniform,
        },
        optimizer: cfg.optimizer.kind,
        eval_mode: FusionMode::Average,
        transform: cfg.fusion.transform,
        shuffle_seed: derive_seed(cfg.seed, TAG_CONTROL_SHUFFLE),
        record_trace: false,
    };
    let (records, _) = run_stage(&mut models, train, test, &settings)?;
    write_atomic(
        &run_dir.join("control_log.csv"),
        epoch_log_to_csv(&records).as_bytes(),
    )?;
    let ensemble = TrainedEnsemble {
        models,
        fusion_mode: FusionMode::Average,
        transform: cfg.fusion.transform,
    };
    ensemble.save(&run_dir.join("control_model.json"))?;
    manifest.push_stage(
        run_dir,
        stage_record(
            "control_single_stage",
            total_epochs,
            started,
            vec!["control_log.csv".into(), "control_model.json".into()],
            &records,
        ),
    )?;
    let eval = ensemble.evaluate(test)?;
    manifest.final_eval = Some(FinalEval {
        test_accuracy: eval.accuracy,
        fusion: FusionMode::Average.as_str().into(),
        checkpoint: "control_model.json".into(),
    });
    Ok(())
}

/// Re-evaluate a finished run: rebuild the datasets from the effective
/// config (deterministic), load the final checkpoint, and score it.
pub fn evaluate_run(run_dir: &Path) -> Result<crate::metrics::EvalReport> {
    let manifest = RunManifest::load(run_dir)?;
    manifest.validate_artifacts(run_dir)?;
    let final_eval = manifest
        .final_eval
        .as_ref()
        .ok_or_else(|| Error::invalid("run has no final evaluation; incomplete run?"))?;
    let checkpoint = run_dir.join(&final_eval.checkpoint);
    if !checkpoint.exists() {
        return Err(Error::invalid(format!(
            "missing checkpoint {}",
            checkpoint.display()
        )));
    }
    let ensemble = TrainedEnsemble::load(&checkpoint)?;
    let cfg = &manifest.config;
    let (train, test) = build_datasets(cfg)?;

    let eval = ensemble.evaluate(&test)?;
    let conflicting: Vec<bool> = match &test.conflicts {
        Some(c) => (0..test.instance_count())
            .map(|i| c.is_instance_conflicting(i))
            .collect(),
        None => vec![false; test.instance_count()],
    };
    let (fpr, fpr_reason) = match crate::metrics::fpr95(&eval.uncertainties, &conflicting) {
        Ok(v) => (Some(v), None),
        Err(Error::UndefinedMetric(m)) => (None, Some(m)),
        Err(e) => return Err(e),
    };
    let group_mean = |want: bool| -> Option<f64> {
        let values: Vec<f64> = eval
            .uncertainties
            .iter()
            .zip(&conflicting)
            .filter(|&(_, &c)| c == want)
            .map(|(&u, _)| u)
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let histogram =
        crate::metrics::uncertainty_density(&eval.uncertainties, &conflicting, cfg.eval.density_bins)?;

    let division_path = run_dir.join("division.csv");
    let division = if division_path.exists() {
        let text = std::fs::read_to_string(&division_path)?;
        let result = DivisionResult::from_csv(&text)?;
        match &train.conflicts {
            Some(truth) => Some(crate::metrics::division_rates(&result, truth)?),
            None => None,
        }
    } else {
        None
    };

    Ok(crate::metrics::EvalReport {
        test_accuracy: eval.accuracy,
        fpr95: fpr,
        fpr95_unavailable_reason: fpr_reason,
        mean_uncertainty_clean: group_mean(false),
        mean_uncertainty_conflicting: group_mean(true),
        division,
        uncertainty_histogram: histogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule(cycle_length: usize, cycle_count: usize) -> ScheduleConfig {
        ScheduleConfig {
            eta_max: 0.01,
            eta_min: 0.001,
            cycle_length,
            cycle_count,
        }
    }

    #[test]
    fn schedule_endpoints_and_wraparound() {
        let cfg = schedule(10, 3);
        assert_eq!(lr_at_epoch(1, &cfg), cfg.eta_max);
        assert_eq!(lr_at_epoch(10, &cfg), cfg.eta_min);
        assert_eq!(lr_at_epoch(11, &cfg), cfg.eta_max);
    }

    #[test]
    fn schedule_is_periodic_and_decays_within_cycles() {
        let cfg = schedule(10, 3);
        for t in 1..=30 {
            assert_eq!(lr_at_epoch(t, &cfg), lr_at_epoch(t + 10, &cfg));
        }
        for t in 1..10 {
            assert!(lr_at_epoch(t + 1, &cfg) < lr_at_epoch(t, &cfg));
        }
    }

    #[test]
    fn schedule_with_two_epoch_cycles() {
        let cfg = schedule(2, 1);
        assert_eq!(lr_at_epoch(1, &cfg), cfg.eta_max);
        assert_eq!(lr_at_epoch(2, &cfg), cfg.eta_min);
    }

    #[test]
    fn schedule_validation() {
        assert!(schedule(1, 1).validate().is_err());
        assert!(ScheduleConfig {
            eta_max: 0.001,
            eta_min: 0.01,
            cycle_length: 10,
            cycle_count: 1,
        }
        .validate()
        .is_err());
        schedule(2, 1).validate().unwrap();
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(42, 1), derive_seed(42, 1));
        assert_ne!(derive_seed(42, 1), derive_seed(42, 2));
        assert_ne!(derive_seed(42, 1), derive_seed(43, 1));
    }

    #[test]
    fn argmax_takes_lowest_tied_index() {
        assert_eq!(argmax_lowest(&[0.2, 0.5, 0.5, 0.1]), 1);
        assert_eq!(argmax_lowest(&[0.7]), 0);
    }
}
