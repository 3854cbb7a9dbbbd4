//! Training and evaluation orchestration. Each epoch runs a distillation
//! pass over every training pair, then a segmentation-head pass over the
//! same pairs with the feature extractor frozen (guarded by content
//! hashes). All randomness derives from (seed, epoch, image index), so the
//! two phases see identical pairs and reruns are bit-reproducible.

use crate::config::RunConfig;
use crate::data::{self, DatasetIndex, Label, Normalization, Split, Synthesizer, TextureSource};
use crate::distill::{self, StepCtx};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::DmddModel;
use crate::nn::{derive_seed, rng_from};
use crate::seg_head;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub phase: &'static str,
    pub l_ngm: f64,
    pub l_aim: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub distill_loss: f64,
    pub seg_loss: f64,
}

pub enum TrainEvent<'a> {
    Step(&'a StepLog),
    EpochEnd {
        summary: EpochSummary,
        model: &'a DmddModel,
    },
}

pub struct TrainResult {
    pub model: DmddModel,
    pub epochs: Vec<EpochSummary>,
}

fn pair_seed_for(seed: u64, epoch: usize, idx: usize) -> u64 {
    derive_seed(seed, &format!("pair.e{epoch}.i{idx}"))
}

/// Full training loop over the train split on disk.
pub fn train_model<F>(cfg: &RunConfig, on_event: F) -> Result<TrainResult>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    cfg.validate()?;
    let index = data::load_dataset(Path::new(&cfg.dataset_root), &cfg.category, Split::Train)?;
    train_model_on(cfg, &index, on_event)
}

/// Training loop over an already-scanned index.
pub fn train_model_on<F>(cfg: &RunConfig, index: &DatasetIndex, mut on_event: F) -> Result<TrainResult>
where
    F: FnMut(TrainEvent<'_>) -> Result<()>,
{
    cfg.validate()?;
    let mut model = DmddModel::new(cfg)?;
    let teacher_hash = model.teacher_hash();
    let textures = TextureSource::from_config(&cfg.synthesis, index)?;
    let synth = Synthesizer {
        cfg: &cfg.synthesis,
        textures: &textures,
        norm: Normalization::default(),
        input_size: cfg.input_size,
    };
    // Raw normal images are cached once; pairs are regenerated per phase
    // from derived seeds, so both phases see the same synthetic data.
    let mut raws: Vec<(PathBuf, Tensor)> = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        raws.push((
            e.image_path.clone(),
            data::load_image_raw(&e.image_path, cfg.input_size)?,
        ));
    }
    if raws.is_empty() {
        return Err(Error::CorruptDataset("training split has no images".into()));
    }

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..raws.len()).collect();
        order.shuffle(&mut rng_from(cfg.seed, &format!("order.e{epoch}")));

        let mut distill_sum = 0.0;
        let mut pending = 0usize;
        for (step, &idx) in order.iter().enumerate() {
            let seed = pair_seed_for(cfg.seed, epoch, idx);
            let pair = data::make_training_pair(&raws[idx].1, Some(&raws[idx].0), &synth, seed)?;
            let report = distill::accumulate_pair(&mut model, &pair, StepCtx { epoch, step, seed })?;
            pending += 1;
            if pending == cfg.batch_size || step + 1 == order.len() {
                model.student.scale_grads(1.0 / pending as f64);
                model.student.adam_step(cfg.lr, 0.9, 0.999, 1e-8);
                model.student.zero_grads();
                pending = 0;
            }
            distill_sum += report.total;
            on_event(TrainEvent::Step(&StepLog {
                epoch,
                step,
                phase: "distill",
                l_ngm: report.l_ngm,
                l_aim: report.l_aim,
                loss: report.total,
            }))?;
        }

        // Head phase: features must stay frozen while the head moves.
        let student_hash = model.student_hash();
        let mut seg_sum = 0.0;
        pending = 0;
        for (step, &idx) in order.iter().enumerate() {
            let seed = pair_seed_for(cfg.seed, epoch, idx);
            let pair = data::make_training_pair(&raws[idx].1, Some(&raws[idx].0), &synth, seed)?;
            let report = seg_head::accumulate_seg_pair(&mut model, &pair)?;
            if !report.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step, seed });
            }
            pending += 1;
            if pending == cfg.batch_size || step + 1 == order.len() {
                model.head.scale_grads(1.0 / pending as f64);
                model.head.adam_step(cfg.lr, 0.9, 0.999, 1e-8);
                model.head.zero_grads();
                pending = 0;
            }
            seg_sum += report.loss;
            on_event(TrainEvent::Step(&StepLog {
                epoch,
                step,
                phase: "seg",
                l_ngm: 0.0,
                l_aim: 0.0,
                loss: report.loss,
            }))?;
        }
        if model.student_hash() != student_hash || model.teacher_hash() != teacher_hash {
            return Err(Error::Internal(
                "feature extractor changed during the head phase".into(),
            ));
        }

        let n = order.len() as f64;
        let summary = EpochSummary {
            epoch,
            distill_loss: distill_sum / n,
            seg_loss: seg_sum / n,
        };
        epochs.push(summary);
        on_event(TrainEvent::EpochEnd {
            summary,
            model: &model,
        })?;
    }

    if model.teacher_hash() != teacher_hash {
        return Err(Error::Internal("teacher changed during training".into()));
    }
    Ok(TrainResult { model, epochs })
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub paths: Vec<PathBuf>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub maps: Vec<Tensor>,
}

/// Run inference over the test split and compute the metric report.
pub fn evaluate_model(model: &DmddModel, cfg: &RunConfig) -> Result<EvalOutcome> {
    let index = data::load_dataset(Path::new(&cfg.dataset_root), &cfg.category, Split::Test)?;
    evaluate_model_on(model, cfg, &index)
}

pub fn evaluate_model_on(
    model: &DmddModel,
    cfg: &RunConfig,
    index: &DatasetIndex,
) -> Result<EvalOutcome> {
    let norm = Normalization::default();
    let n = index.entries.len();
    let mut paths = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut maps = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for e in &index.entries {
        let img = data::load_image(&e.image_path, cfg.input_size, &norm)?;
        let (map, score) = model.infer(&img)?;
        let mask = match &e.mask_path {
            Some(mp) => data::load_mask(mp, cfg.input_size)?,
            None => crate::tensor::zeros(&[cfg.input_size, cfg.input_size]),
        };
        paths.push(e.image_path.clone());
        scores.push(score);
        labels.push(match e.label {
            Label::Normal => 0,
            Label::Anomalous => 1,
        });
        maps.push(map);
        masks.push(mask);
    }
    let report = metrics::evaluate(&scores, &labels, &maps, &masks, cfg.fpr_limit)?;
    Ok(EvalOutcome {
        report,
        paths,
        scores,
        labels,
        maps,
    })
}
