//! Dual-modeling distillation losses and the per-pair training step.
//!
//! NGM pulls the student's normality features on both images of a pair
//! toward the teacher's features of the normal image. AIM pushes the
//! per-pixel teacher-abnormality cosine-distance map toward the
//! downsampled ground-truth mask: distance 1 (orthogonal) on anomalous
//! pixels, 0 elsewhere. The normal image participates in AIM with an
//! all-zero mask; its term and the anomalous term are averaged.

use crate::autodiff::{Tape, Var};
use crate::backbone::FeaturePyramid;
use crate::error::{Error, Result};
use crate::model::DmddModel;
use crate::tensor::{dims2, from_vec, slice_of, zeros, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct StepCtx {
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DistillLossReport {
    pub l_ngm: f64,
    pub l_aim: f64,
    pub total: f64,
    pub per_stage_ngm: [f64; 4],
    pub per_stage_aim: [f64; 4],
}

/// Per-pixel cosine distance between two same-shape feature maps on the
/// tape. Values lie in [0, 2]: 0 for parallel, 1 for orthogonal (or a zero
/// vector), 2 for anti-parallel.
pub fn cosine_distance_map(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::ShapeMismatch(format!(
            "cosine distance inputs {:?} vs {:?}",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    Ok(tape.cosine_distance(a, b))
}

/// Normality loss: stage mean of the spatial means of D^n + D^a, where both
/// distance maps target the teacher features of the normal image.
pub fn ngm_loss(
    tape: &mut Tape,
    teacher_normal: &FeaturePyramid,
    student_norm_of_normal: &FeaturePyramid,
    student_norm_of_anomalous: &FeaturePyramid,
) -> Result<(Var, [f64; 4])> {
    let mut per_stage = [0.0; 4];
    let mut acc: Option<Var> = None;
    for i in 0..4 {
        let dn = cosine_distance_map(tape, teacher_normal.stages[i], student_norm_of_normal.stages[i])?;
        let da = cosine_distance_map(tape, teacher_normal.stages[i], student_norm_of_anomalous.stages[i])?;
        let mn = tape.mean_all(dn);
        let ma = tape.mean_all(da);
        let term = tape.add(mn, ma);
        per_stage[i] = tape.scalar_value(term);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let loss = tape.scale(acc.expect("4 stages"), 0.25);
    Ok((loss, per_stage))
}

/// Block-average a binary image-resolution mask down to a stage size.
/// The stage size must divide the mask evenly (true for power-of-two
/// stage strides).
pub fn downsample_mask(mask: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (h, w) = dims2(mask);
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::InvalidArgument(format!(
            "mask {h}x{w} not divisible by target {th}x{tw}"
        )));
    }
    let (by, bx) = (h / th, w / tw);
    let xs = slice_of(mask);
    let mut out = vec![0.0; th * tw];
    for oy in 0..th {
        for ox in 0..tw {
            let mut acc = 0.0;
            for yy in 0..by {
                for xx in 0..bx {
                    acc += xs[(oy * by + yy) * w + ox * bx + xx];
                }
            }
            out[oy * tw + ox] = acc / (by * bx) as f64;
        }
    }
    Ok(from_vec(&[th, tw], out))
}

/// Abnormality loss for one image: stage mean of the spatial mean L1
/// between the teacher-abnormality distance map and the downsampled mask.
pub fn aim_loss(
    tape: &mut Tape,
    teacher: &FeaturePyramid,
    student_abn: &FeaturePyramid,
    gt_mask: &Tensor,
) -> Result<(Var, [f64; 4])> {
    let mut per_stage = [0.0; 4];
    let mut acc: Option<Var> = None;
    for i in 0..4 {
        let m = cosine_distance_map(tape, teacher.stages[i], student_abn.stages[i])?;
        let (th, tw) = dims2(tape.value(m));
        let gt = downsample_mask(gt_mask, th, tw)?;
        let diff = tape.sub_const(m, gt);
        let l1 = tape.abs(diff);
        let term = tape.mean_all(l1);
        per_stage[i] = tape.scalar_value(term);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    let loss = tape.scale(acc.expect("4 stages"), 0.25);
    Ok((loss, per_stage))
}

/// Build the full distillation loss for one pair on the given tape.
/// Returns the loss root and the report.
pub fn pair_loss(
    tape: &mut Tape,
    model: &DmddModel,
    pair: &crate::data::TrainingPair,
) -> Result<(Var, DistillLossReport)> {
    let img_n = tape.leaf(pair.normal.clone());
    let img_a = tape.leaf(pair.anomalous.clone());
    let t_n = model.teacher_forward(tape, img_n);
    let t_a = model.teacher_forward(tape, img_a);
    let (s_norm_n, s_abn_n) = model.student_forward(tape, img_n);
    let (s_norm_a, s_abn_a) = model.student_forward(tape, img_a);

    let (ngm, per_stage_ngm) = ngm_loss(tape, &t_n, &s_norm_n, &s_norm_a)?;

    let zero_mask = zeros(pair.gt_mask.shape());
    let (aim_n, aim_stage_n) = aim_loss(tape, &t_n, &s_abn_n, &zero_mask)?;
    let (aim_a, aim_stage_a) = aim_loss(tape, &t_a, &s_abn_a, &pair.gt_mask)?;
    let aim_sum = tape.add(aim_n, aim_a);
    let aim = tape.scale(aim_sum, 0.5);

    let wn = tape.scale(ngm, model.loss_weight_ngm);
    let wa = tape.scale(aim, model.loss_weight_aim);
    let total = tape.add(wn, wa);

    let mut per_stage_aim = [0.0; 4];
    for i in 0..4 {
        per_stage_aim[i] = 0.5 * (aim_stage_n[i] + aim_stage_a[i]);
    }
    let report = DistillLossReport {
        l_ngm: tape.scalar_value(ngm),
        l_aim: tape.scalar_value(aim),
        total: tape.scalar_value(total),
        per_stage_ngm,
        per_stage_aim,
    };
    Ok((total, report))
}

/// One optimizer step on one pair: forward, backward, Adam update of the
/// student store. A non-finite loss aborts with the step context so the
/// offending seed is reproducible.
pub fn train_step(
    model: &mut DmddModel,
    pair: &crate::data::TrainingPair,
    lr: f64,
    ctx: StepCtx,
) -> Result<DistillLossReport> {
    let mut tape = Tape::new();
    let (total, report) = pair_loss(&mut tape, model, pair)?;
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: ctx.epoch,
            step: ctx.step,
            seed: ctx.seed,
        });
    }
    let grads = tape.backward(total);
    model.student.zero_grads();
    tape.scatter_grads(&grads, &mut model.student);
    model.student.adam_step(lr, 0.9, 0.999, 1e-8);
    Ok(report)
}

/// Accumulate gradients for one pair without stepping, for batched
/// optimization. Returns the report; caller steps after a full batch.
pub fn accumulate_pair(
    model: &mut DmddModel,
    pair: &crate::data::TrainingPair,
    ctx: StepCtx,
) -> Result<DistillLossReport> {
    let mut tape = Tape::new();
    let (total, report) = pair_loss(&mut tape, model, pair)?;
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: ctx.epoch,
            step: ctx.step,
            seed: ctx.seed,
        });
    }
    let grads = tape.backward(total);
    tape.scatter_grads(&grads, &mut model.student);
    Ok(report)
}
