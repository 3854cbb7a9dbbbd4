//! Multi-perception segmentation head: turns the eight per-stage distance
//! maps into one fused anomaly map and an image score.
//!
//! Pipeline: per-stage cosine-distance maps -> directional pyramid
//! accumulation -> bilinear upsampling to input resolution -> channel
//! attention -> spatial attention -> per-pixel softmax-weighted channel
//! average -> 1x1 compression with the weighted average as residual ->
//! sigmoid. At the declared initialization the whole head collapses to a
//! plain channel mean + sigmoid, which is also exactly what the MM-off
//! ablation computes.

use crate::autodiff::{Tape, Var};
use crate::backbone::FeaturePyramid;
use crate::distill::cosine_distance_map;
use crate::error::{Error, Result};
use crate::model::DmddModel;
use crate::nn::{self, ParamId, ParamStore};
use crate::tensor::{dims2, zeros, Tensor};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Init bound for the attention output layers. Near enough to zero that
/// gates start at 1/2 within float dust, but every weight still passes a
/// nonzero gradient on the first step.
pub const ATTENTION_INIT_BOUND: f64 = 1e-9;

/// Compression weight making the head equal a plain channel mean at init:
/// the two half-open sigmoid gates scale the stack by 1/4, the softmax
/// residual contributes mean/4, and 0.375 * sum(stack/4) supplies the
/// remaining 3/4 of the mean.
pub const COMPRESSION_INIT: f64 = 0.375;

pub const MAP_CHANNELS: usize = 8;

pub struct HeadParams {
    pub ca_w1: ParamId,
    pub ca_b1: ParamId,
    pub ca_w2: ParamId,
    pub ca_b2: ParamId,
    pub sa_w: ParamId,
    pub sa_b: ParamId,
    /// Global attention parameter, 8 x H x W at input resolution.
    pub g: ParamId,
    pub comp_w: ParamId,
    pub comp_b: ParamId,
}

pub fn build_head(store: &mut ParamStore, prefix: &str, input_size: usize, seed: u64) -> HeadParams {
    let mut rng = ChaCha20Rng::seed_from_u64(nn::derive_seed(seed, prefix));
    let c = MAP_CHANNELS;
    let squeeze = c / 4;
    HeadParams {
        ca_w1: store.add(
            format!("{prefix}.ca.w1"),
            nn::kaiming_linear(&mut rng, squeeze, c),
        ),
        ca_b1: store.add(format!("{prefix}.ca.b1"), nn::constant(&[squeeze], 0.0)),
        ca_w2: store.add(
            format!("{prefix}.ca.w2"),
            nn::tiny_uniform(&mut rng, &[c, squeeze], ATTENTION_INIT_BOUND),
        ),
        ca_b2: store.add(format!("{prefix}.ca.b2"), nn::constant(&[c], 0.0)),
        sa_w: store.add(
            format!("{prefix}.sa.weight"),
            nn::tiny_uniform(&mut rng, &[1, 2, 7, 7], ATTENTION_INIT_BOUND),
        ),
        sa_b: store.add(format!("{prefix}.sa.bias"), nn::constant(&[1], 0.0)),
        g: store.add(
            format!("{prefix}.g"),
            nn::constant(&[c, input_size, input_size], 0.0),
        ),
        comp_w: store.add(
            format!("{prefix}.comp.weight"),
            nn::constant(&[1, c, 1, 1], COMPRESSION_INIT),
        ),
        comp_b: store.add(format!("{prefix}.comp.bias"), nn::constant(&[1], 0.0)),
    }
}

/// The eight per-stage distance maps, channel order [NGM1..4, AIM1..4].
pub fn compute_stage_maps(
    tape: &mut Tape,
    teacher: &FeaturePyramid,
    student_norm: &FeaturePyramid,
    student_abn: &FeaturePyramid,
) -> Result<[Var; 8]> {
    let mut maps = Vec::with_capacity(8);
    for i in 0..4 {
        maps.push(cosine_distance_map(tape, teacher.stages[i], student_norm.stages[i])?);
    }
    for i in 0..4 {
        maps.push(cosine_distance_map(tape, teacher.stages[i], student_abn.stages[i])?);
    }
    Ok(maps.try_into().expect("8 maps"))
}

/// Directional accumulation and upsampling to the input resolution.
/// NGM maps fuse top-down, AIM maps bottom-up; with PU disabled each map
/// is upsampled on its own.
pub fn pyramid_upsample(tape: &mut Tape, maps: &[Var; 8], out_size: usize, pu: bool) -> Var {
    let as3 = |tape: &mut Tape, m: Var| -> Var {
        let (h, w) = dims2(tape.value(m));
        tape.reshape(m, &[1, h, w])
    };
    let mut ngm: Vec<Var> = maps[0..4].iter().map(|&m| as3(tape, m)).collect();
    let mut aim: Vec<Var> = maps[4..8].iter().map(|&m| as3(tape, m)).collect();
    if pu {
        for i in (0..3).rev() {
            let shape = tape.value(ngm[i]).shape().to_vec();
            let up = tape.bilinear(ngm[i + 1], shape[1], shape[2]);
            ngm[i] = tape.add(ngm[i], up);
        }
        for i in 1..4 {
            let shape = tape.value(aim[i]).shape().to_vec();
            let down = tape.bilinear(aim[i - 1], shape[1], shape[2]);
            aim[i] = tape.add(aim[i], down);
        }
    }
    let mut channels = Vec::with_capacity(8);
    for m in ngm.into_iter().chain(aim) {
        channels.push(tape.bilinear(m, out_size, out_size));
    }
    tape.concat_ch(&channels)
}

/// Fuse the 8-channel stack into an anomaly map in (0,1). MM off is the
/// plain channel mean through a sigmoid.
pub fn fuse(
    tape: &mut Tape,
    store: &ParamStore,
    hp: &HeadParams,
    stack: Var,
    mm: bool,
    trainable: bool,
) -> Var {
    let pre = if mm {
        let ca_w1 = tape.param(store, hp.ca_w1, trainable);
        let ca_b1 = tape.param(store, hp.ca_b1, trainable);
        let ca_w2 = tape.param(store, hp.ca_w2, trainable);
        let ca_b2 = tape.param(store, hp.ca_b2, trainable);
        let gap = tape.global_avg(stack);
        let h1 = tape.linear(gap, ca_w1, ca_b1);
        let h1 = tape.leaky_relu(h1, 0.1);
        let h2 = tape.linear(h1, ca_w2, ca_b2);
        let gate_c = tape.sigmoid(h2);
        let x1 = tape.scale_channels(stack, gate_c);

        let sa_w = tape.param(store, hp.sa_w, trainable);
        let sa_b = tape.param(store, hp.sa_b, trainable);
        let mx = tape.channel_max(x1);
        let mn = tape.channel_mean(x1);
        let pooled = tape.concat_ch(&[mx, mn]);
        let sconv = tape.conv2d(pooled, sa_w, Some(sa_b), 1, 3);
        let gate_s = tape.sigmoid(sconv);
        let x2 = tape.mul_spatial(x1, gate_s);

        let g = tape.param(store, hp.g, trainable);
        let weights = tape.softmax_ch(g);
        let weighted = tape.mul(x2, weights);
        let residual = tape.sum_ch(weighted);

        let comp_w = tape.param(store, hp.comp_w, trainable);
        let comp_b = tape.param(store, hp.comp_b, trainable);
        let comp = tape.conv2d(x2, comp_w, Some(comp_b), 1, 0);
        tape.add(comp, residual)
    } else {
        tape.channel_mean(stack)
    };
    let m = tape.sigmoid(pre);
    let shape = tape.value(m).shape().to_vec();
    tape.reshape(m, &[shape[1], shape[2]])
}

/// Mean of the k hottest pixels. The map is already post-sigmoid; the
/// optional extra sigmoid squashes the score a second time for setups
/// that calibrate on doubly-squashed values.
pub fn anomaly_score(tape: &mut Tape, m: Var, k: usize, extra_sigmoid: bool) -> Result<Var> {
    let n = tape.value(m).len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "score top-k {k} out of range for {n} pixels"
        )));
    }
    let s = tape.topk_mean(m, k);
    Ok(if extra_sigmoid { tape.sigmoid(s) } else { s })
}

/// Eq-style segmentation loss: pixel BCE against the mask plus scalar BCE
/// of the score against the image label max(gt).
pub fn seg_loss(tape: &mut Tape, m: Var, s: Var, gt: &Tensor) -> Result<Var> {
    if tape.value(m).shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "fused map {:?} vs mask {:?}",
            tape.value(m).shape(),
            gt.shape()
        )));
    }
    let label = gt.iter().copied().fold(0.0f64, f64::max);
    let pixel = tape.bce_map_mean(m, gt.clone());
    let scalar = tape.bce_scalar(s, label);
    Ok(tape.add(pixel, scalar))
}

#[derive(Clone, Copy, Debug)]
pub struct SegReport {
    pub loss: f64,
    pub loss_normal: f64,
    pub loss_anomalous: f64,
}

/// Head loss for one pair given precomputed (frozen) map stacks: the
/// normal image trains against an all-zero mask, the anomalous one against
/// its ground truth; the two are averaged.
pub fn seg_pair_loss(
    tape: &mut Tape,
    store: &ParamStore,
    hp: &HeadParams,
    stack_normal: Tensor,
    stack_anomalous: Tensor,
    gt_mask: &Tensor,
    score_k: usize,
    extra_sigmoid: bool,
    mm: bool,
) -> Result<(Var, SegReport)> {
    let zero = zeros(gt_mask.shape());
    let sn = tape.leaf(stack_normal);
    let sa = tape.leaf(stack_anomalous);
    let m_n = fuse(tape, store, hp, sn, mm, true);
    let m_a = fuse(tape, store, hp, sa, mm, true);
    let score_n = anomaly_score(tape, m_n, score_k, extra_sigmoid)?;
    let score_a = anomaly_score(tape, m_a, score_k, extra_sigmoid)?;
    let l_n = seg_loss(tape, m_n, score_n, &zero)?;
    let l_a = seg_loss(tape, m_a, score_a, gt_mask)?;
    let sum = tape.add(l_n, l_a);
    let total = tape.scale(sum, 0.5);
    let report = SegReport {
        loss: tape.scalar_value(total),
        loss_normal: tape.scalar_value(l_n),
        loss_anomalous: tape.scalar_value(l_a),
    };
    Ok((total, report))
}

/// Accumulate head gradients for one pair without stepping, for batched
/// optimization. Feature extraction runs frozen.
pub fn accumulate_seg_pair(
    model: &mut DmddModel,
    pair: &crate::data::TrainingPair,
) -> Result<SegReport> {
    let stack_n = model.stage_map_stack(&pair.normal)?;
    let stack_a = model.stage_map_stack(&pair.anomalous)?;
    let mut tape = Tape::new();
    let (total, report) = seg_pair_loss(
        &mut tape,
        &model.head,
        &model.head_params,
        stack_n,
        stack_a,
        &pair.gt_mask,
        model.score_top_k,
        model.score_extra_sigmoid,
        model.flags.mm,
    )?;
    let grads = tape.backward(total);
    tape.scatter_grads(&grads, &mut model.head);
    Ok(report)
}

/// One head optimizer step on one pair. Feature extraction runs frozen;
/// only head parameters move.
pub fn train_seg_step(
    model: &mut DmddModel,
    pair: &crate::data::TrainingPair,
    lr: f64,
) -> Result<SegReport> {
    let stack_n = model.stage_map_stack(&pair.normal)?;
    let stack_a = model.stage_map_stack(&pair.anomalous)?;
    let mut tape = Tape::new();
    let (total, report) = seg_pair_loss(
        &mut tape,
        &model.head,
        &model.head_params,
        stack_n,
        stack_a,
        &pair.gt_mask,
        model.score_top_k,
        model.score_extra_sigmoid,
        model.flags.mm,
    )?;
    let grads = tape.backward(total);
    model.head.zero_grads();
    tape.scatter_grads(&grads, &mut model.head);
    model.head.adam_step(lr, 0.9, 0.999, 1e-8);
    Ok(report)
}
