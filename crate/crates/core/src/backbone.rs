//! Trunk feature extraction for teacher and student, plus the per-stage
//! decouple layers that split student features into normality and
//! abnormality halves.
//!
//! A trunk is 4 stages of {3x3 conv, per-channel norm, leaky ReLU, 2x2 avg
//! pool}; stage 1 additionally strides its conv so stage outputs sit at
//! input/4, /8, /16, /32. The teacher is a frozen copy reconstructed from
//! a fixed seed (toy) or a converted weight bundle (pretrained widths); the
//! student trunk starts as an exact copy of the teacher.

use crate::autodiff::{Tape, Var};
use crate::config::BackboneKind;
use crate::nn::{self, ParamId, ParamStore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Fixed master seed for toy teacher weights: the toy "pretrained" model is
/// a deterministic function of its spec alone, independent of the run seed.
pub const TOY_TEACHER_SEED: u64 = 0x7eac_4e12_0000_0001;

pub const NORM_EPS: f64 = 1e-5;
pub const RELU_SLOPE: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub stage_channels: [usize; 4],
    pub input_size: usize,
}

impl BackboneSpec {
    pub fn new(kind: BackboneKind, input_size: usize) -> Self {
        let stage_channels = match kind {
            BackboneKind::Toy => [8, 16, 32, 64],
            BackboneKind::PretrainedWideresnet50 => [256, 512, 1024, 2048],
        };
        BackboneSpec {
            kind,
            stage_channels,
            input_size,
        }
    }

    /// (channels, height, width) per stage at input/4, /8, /16, /32.
    pub fn stage_shapes(&self) -> [(usize, usize, usize); 4] {
        let mut out = [(0, 0, 0); 4];
        for (i, shape) in out.iter_mut().enumerate() {
            let s = self.input_size >> (i + 2);
            *shape = (self.stage_channels[i], s, s);
        }
        out
    }
}

pub struct StageParams {
    pub conv: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct TrunkParams {
    pub stages: [StageParams; 4],
}

/// Fresh trunk with seeded Kaiming convs and identity norm affine. Conv
/// layers carry no bias; the norm shift covers it.
pub fn build_trunk_seeded(
    store: &mut ParamStore,
    prefix: &str,
    spec: &BackboneSpec,
    seed: u64,
) -> TrunkParams {
    let mut rng = ChaCha20Rng::seed_from_u64(nn::derive_seed(seed, prefix));
    let mut stages = Vec::with_capacity(4);
    let mut cin = 3;
    for (i, &cout) in spec.stage_channels.iter().enumerate() {
        let conv = store.add(
            format!("{prefix}.stage{}.conv", i + 1),
            nn::kaiming_conv(&mut rng, cout, cin, 3, 3),
        );
        let gamma = store.add(
            format!("{prefix}.stage{}.gamma", i + 1),
            nn::constant(&[cout], 1.0),
        );
        let beta = store.add(
            format!("{prefix}.stage{}.beta", i + 1),
            nn::constant(&[cout], 0.0),
        );
        stages.push(StageParams { conv, gamma, beta });
        cin = cout;
    }
    TrunkParams {
        stages: stages.try_into().ok().expect("4 stages"),
    }
}

/// Trunk whose values are copied from an existing one (student <- teacher).
pub fn build_trunk_copied(
    store: &mut ParamStore,
    prefix: &str,
    src_store: &ParamStore,
    src: &TrunkParams,
) -> TrunkParams {
    let mut stages = Vec::with_capacity(4);
    for (i, s) in src.stages.iter().enumerate() {
        let conv = store.add(
            format!("{prefix}.stage{}.conv", i + 1),
            src_store.value(s.conv).clone(),
        );
        let gamma = store.add(
            format!("{prefix}.stage{}.gamma", i + 1),
            src_store.value(s.gamma).clone(),
        );
        let beta = store.add(
            format!("{prefix}.stage{}.beta", i + 1),
            src_store.value(s.beta).clone(),
        );
        stages.push(StageParams { conv, gamma, beta });
    }
    TrunkParams {
        stages: stages.try_into().ok().expect("4 stages"),
    }
}

/// One trunk stage: conv (strided on stage 1), norm, leaky ReLU, 2x2 pool.
pub fn trunk_stage(
    tape: &mut Tape,
    store: &ParamStore,
    sp: &StageParams,
    x: Var,
    stage_index: usize,
    trainable: bool,
) -> Var {
    let stride = if stage_index == 0 { 2 } else { 1 };
    let w = tape.param(store, sp.conv, trainable);
    let g = tape.param(store, sp.gamma, trainable);
    let b = tape.param(store, sp.beta, trainable);
    let y = tape.conv2d(x, w, None, stride, 1);
    let y = tape.channel_norm(y, g, b, NORM_EPS);
    let y = tape.leaky_relu(y, RELU_SLOPE);
    tape.avg_pool2(y)
}

/// Run the 4 trunk stages, returning every stage output.
pub fn trunk_forward(
    tape: &mut Tape,
    store: &ParamStore,
    trunk: &TrunkParams,
    image: Var,
    trainable: bool,
) -> [Var; 4] {
    let mut outs = Vec::with_capacity(4);
    let mut x = image;
    for (i, sp) in trunk.stages.iter().enumerate() {
        x = trunk_stage(tape, store, sp, x, i, trainable);
        outs.push(x);
    }
    outs.try_into().expect("4 stages")
}

pub struct DecoupleParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Decouple layers start with both halves as identity maps, so the split
/// pyramids begin as exact copies of the trunk features.
pub fn build_decouple(store: &mut ParamStore, prefix: &str, spec: &BackboneSpec) -> [DecoupleParams; 4] {
    let mut out = Vec::with_capacity(4);
    for (i, &c) in spec.stage_channels.iter().enumerate() {
        let weight = store.add(
            format!("{prefix}.decouple{}.weight", i + 1),
            nn::decouple_identity(c),
        );
        let bias = store.add(
            format!("{prefix}.decouple{}.bias", i + 1),
            nn::constant(&[2 * c], 0.0),
        );
        out.push(DecoupleParams { weight, bias });
    }
    out.try_into().ok().expect("4 layers")
}

/// Expand stage features to 2C channels and split into halves:
/// (normality, abnormality). The normality half is what feeds stage i+1.
pub fn decouple_split(
    tape: &mut Tape,
    store: &ParamStore,
    dp: &DecoupleParams,
    x: Var,
    channels: usize,
    trainable: bool,
) -> (Var, Var) {
    let w = tape.param(store, dp.weight, trainable);
    let b = tape.param(store, dp.bias, trainable);
    let y = tape.conv2d(x, w, Some(b), 1, 0);
    let norm = tape.narrow_ch(y, 0, channels);
    let abn = tape.narrow_ch(y, channels, channels);
    (norm, abn)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PyramidRole {
    Teacher,
    StudentNormality,
    StudentAbnormality,
}

/// Four stage feature maps living on a tape.
pub struct FeaturePyramid {
    pub stages: [Var; 4],
    pub role: PyramidRole,
}

impl FeaturePyramid {
    pub fn new(stages: [Var; 4], role: PyramidRole) -> Self {
        FeaturePyramid { stages, role }
    }
}
