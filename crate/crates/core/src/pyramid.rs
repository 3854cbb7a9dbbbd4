//! Bidirectional dual-path Pyramid Modeling Network.
//!
//! Each branch projects its 4-stage pyramid to a common width, runs an
//! inner directional fusion path and then an outer path in the opposite
//! direction, and restores per-stage widths through 1x1 convs added back
//! onto the input features. The normality branch fuses top-down first
//! (higher-stage normality is the reliable signal); the abnormality branch
//! fuses bottom-up first (low-stage detail carries anomaly evidence).
//!
//! Restore convs start near zero, so refinement begins as a near-identity
//! map while still passing gradients to every path parameter.

use crate::autodiff::{Tape, Var};
use crate::backbone::{BackboneSpec, FeaturePyramid};
use crate::nn::{self, ParamId, ParamStore};
use crate::tensor::dims3;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Magnitude of the restore-conv init. Small enough that refinement starts
/// inside loss tolerance of identity, large enough that every upstream
/// parameter sees a representable gradient.
pub const RESTORE_INIT_BOUND: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Branch {
    Normality,
    Abnormality,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    TopDown,
    BottomUp,
}

impl Branch {
    pub fn inner_direction(self) -> Direction {
        match self {
            Branch::Normality => Direction::TopDown,
            Branch::Abnormality => Direction::BottomUp,
        }
    }

    pub fn outer_direction(self) -> Direction {
        match self {
            Branch::Normality => Direction::BottomUp,
            Branch::Abnormality => Direction::TopDown,
        }
    }
}

pub struct PmnParams {
    pub width: usize,
    lateral_w: [ParamId; 4],
    lateral_b: [ParamId; 4],
    inner_w: [ParamId; 4],
    inner_b: [ParamId; 4],
    outer_w: [ParamId; 4],
    outer_b: [ParamId; 4],
    restore_w: [ParamId; 4],
    restore_b: [ParamId; 4],
}

/// Build one branch's PMN. Common width is the smallest stage width.
pub fn build_pmn(
    store: &mut ParamStore,
    prefix: &str,
    spec: &BackboneSpec,
    seed: u64,
) -> PmnParams {
    let p = spec.stage_channels[0];
    let mut rng = ChaCha20Rng::seed_from_u64(nn::derive_seed(seed, prefix));
    let mut lateral_w = Vec::new();
    let mut lateral_b = Vec::new();
    let mut inner_w = Vec::new();
    let mut inner_b = Vec::new();
    let mut outer_w = Vec::new();
    let mut outer_b = Vec::new();
    let mut restore_w = Vec::new();
    let mut restore_b = Vec::new();
    for (i, &c) in spec.stage_channels.iter().enumerate() {
        let s = i + 1;
        lateral_w.push(store.add(
            format!("{prefix}.lateral{s}.weight"),
            nn::kaiming_conv(&mut rng, p, c, 1, 1),
        ));
        lateral_b.push(store.add(format!("{prefix}.lateral{s}.bias"), nn::constant(&[p], 0.0)));
        inner_w.push(store.add(
            format!("{prefix}.inner{s}.weight"),
            nn::kaiming_conv(&mut rng, p, p, 3, 3),
        ));
        inner_b.push(store.add(format!("{prefix}.inner{s}.bias"), nn::constant(&[p], 0.0)));
        outer_w.push(store.add(
            format!("{prefix}.outer{s}.weight"),
            nn::kaiming_conv(&mut rng, p, p, 3, 3),
        ));
        outer_b.push(store.add(format!("{prefix}.outer{s}.bias"), nn::constant(&[p], 0.0)));
        restore_w.push(store.add(
            format!("{prefix}.restore{s}.weight"),
            nn::tiny_uniform(&mut rng, &[c, p, 1, 1], RESTORE_INIT_BOUND),
        ));
        restore_b.push(store.add(format!("{prefix}.restore{s}.bias"), nn::constant(&[c], 0.0)));
    }
    let arr = |v: Vec<ParamId>| -> [ParamId; 4] { v.try_into().expect("4 stages") };
    PmnParams {
        width: p,
        lateral_w: arr(lateral_w),
        lateral_b: arr(lateral_b),
        inner_w: arr(inner_w),
        inner_b: arr(inner_b),
        outer_w: arr(outer_w),
        outer_b: arr(outer_b),
        restore_w: arr(restore_w),
        restore_b: arr(restore_b),
    }
}

/// One directional fusion pass over 4 equal-width maps: accumulate along
/// the direction (bilinear up / stride-2 average-pool down for the
/// neighbor) and 3x3-smooth each stage.
fn run_path(
    tape: &mut Tape,
    store: &ParamStore,
    maps: &[Var; 4],
    dir: Direction,
    smooth_w: &[ParamId; 4],
    smooth_b: &[ParamId; 4],
    trainable: bool,
) -> [Var; 4] {
    let mut acc = *maps;
    match dir {
        Direction::TopDown => {
            for i in (0..3).rev() {
                let (_, h, w) = dims3(tape.value(maps[i]));
                let up = tape.bilinear(acc[i + 1], h, w);
                acc[i] = tape.add(maps[i], up);
            }
        }
        Direction::BottomUp => {
            for i in 1..4 {
                let down = tape.avg_pool2(acc[i - 1]);
                acc[i] = tape.add(maps[i], down);
            }
        }
    }
    let mut out = Vec::with_capacity(4);
    for i in 0..4 {
        let w = tape.param(store, smooth_w[i], trainable);
        let b = tape.param(store, smooth_b[i], trainable);
        out.push(tape.conv2d(acc[i], w, Some(b), 1, 1));
    }
    out.try_into().expect("4 stages")
}

/// Refine a pyramid through the branch's enabled paths. Both paths off is
/// the exact identity.
pub fn pmn_refine(
    tape: &mut Tape,
    store: &ParamStore,
    params: &PmnParams,
    branch: Branch,
    pyramid: &FeaturePyramid,
    inner: bool,
    outer: bool,
    trainable: bool,
) -> FeaturePyramid {
    if !inner && !outer {
        return FeaturePyramid::new(pyramid.stages, pyramid.role);
    }
    let mut x = Vec::with_capacity(4);
    for i in 0..4 {
        let w = tape.param(store, params.lateral_w[i], trainable);
        let b = tape.param(store, params.lateral_b[i], trainable);
        x.push(tape.conv2d(pyramid.stages[i], w, Some(b), 1, 0));
    }
    let mut x: [Var; 4] = x.try_into().expect("4 stages");
    if inner {
        x = run_path(
            tape,
            store,
            &x,
            branch.inner_direction(),
            &params.inner_w,
            &params.inner_b,
            trainable,
        );
    }
    if outer {
        x = run_path(
            tape,
            store,
            &x,
            branch.outer_direction(),
            &params.outer_w,
            &params.outer_b,
            trainable,
        );
    }
    let mut out = Vec::with_capacity(4);
    for i in 0..4 {
        let w = tape.param(store, params.restore_w[i], trainable);
        let b = tape.param(store, params.restore_b[i], trainable);
        let restored = tape.conv2d(x[i], w, Some(b), 1, 0);
        out.push(tape.add(pyramid.stages[i], restored));
    }
    FeaturePyramid::new(out.try_into().expect("4 stages"), pyramid.role)
}
