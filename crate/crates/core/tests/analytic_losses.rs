//! Closed-form loss values: identity and boundary cases whose exact
//! outcomes are known analytically.

use dmdd_core::autodiff::Tape;
use dmdd_core::backbone::{FeaturePyramid, PyramidRole};
use dmdd_core::distill::{aim_loss, cosine_distance_map, downsample_mask, ngm_loss};
use dmdd_core::seg_head::{anomaly_score, compute_stage_maps, pyramid_upsample, seg_loss};
use dmdd_core::tensor::{from_vec, zeros, Tensor};

const LN2: f64 = std::f64::consts::LN_2;

fn pyramid(tape: &mut Tape, tensors: [Tensor; 4], role: PyramidRole) -> FeaturePyramid {
    let [a, b, c, d] = tensors;
    FeaturePyramid::new(
        [tape.leaf(a), tape.leaf(b), tape.leaf(c), tape.leaf(d)],
        role,
    )
}

fn rand_stage(c: usize, h: usize, seed: u64) -> Tensor {
    // Small deterministic pseudo-random values, no RNG dependency needed.
    let mut v = Vec::with_capacity(c * h * h);
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
    for _ in 0..c * h * h {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        v.push(((state >> 33) as f64 / (1u64 << 31) as f64) - 0.5);
    }
    from_vec(&[c, h, h], v)
}

fn four_stages(seed: u64) -> [Tensor; 4] {
    [
        rand_stage(2, 8, seed),
        rand_stage(2, 4, seed + 1),
        rand_stage(3, 2, seed + 2),
        rand_stage(4, 1, seed + 3),
    ]
}

#[test]
fn cosine_distance_parallel_is_zero() {
    let mut tape = Tape::new();
    let a = tape.leaf(rand_stage(3, 4, 7));
    let d = cosine_distance_map(&mut tape, a, a).unwrap();
    for &v in tape.value(d).iter() {
        assert!(v.abs() < 1e-12, "parallel distance {v}");
    }
}

#[test]
fn cosine_distance_antiparallel_is_two() {
    let mut tape = Tape::new();
    let x = rand_stage(3, 4, 11);
    let a = tape.leaf(x.clone());
    let b = tape.leaf(-x);
    let d = cosine_distance_map(&mut tape, a, b).unwrap();
    for &v in tape.value(d).iter() {
        assert!((v - 2.0).abs() < 1e-12, "anti-parallel distance {v}");
    }
}

#[test]
fn cosine_distance_orthogonal_is_one() {
    let mut tape = Tape::new();
    // Per-pixel vectors (1,0) vs (0,1).
    let a = from_vec(&[2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let b = from_vec(&[2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    let (a, b) = (tape.leaf(a), tape.leaf(b));
    let d = cosine_distance_map(&mut tape, a, b).unwrap();
    for &v in tape.value(d).iter() {
        assert!((v - 1.0).abs() < 1e-12, "orthogonal distance {v}");
    }
}

#[test]
fn ngm_identity_is_zero() {
    let mut tape = Tape::new();
    let t = pyramid(&mut tape, four_stages(1), PyramidRole::Teacher);
    let sn = pyramid(&mut tape, four_stages(1), PyramidRole::StudentNormality);
    let sa = pyramid(&mut tape, four_stages(1), PyramidRole::StudentNormality);
    let (loss, per_stage) = ngm_loss(&mut tape, &t, &sn, &sa).unwrap();
    assert!(tape.scalar_value(loss).abs() < 1e-12);
    for s in per_stage {
        assert!(s.abs() < 1e-12);
    }
}

#[test]
fn ngm_antiparallel_is_four() {
    let mut tape = Tape::new();
    let stages = four_stages(2);
    let neg = stages.clone().map(|t| -t);
    let t = pyramid(&mut tape, stages, PyramidRole::Teacher);
    let sn = pyramid(&mut tape, neg.clone(), PyramidRole::StudentNormality);
    let sa = pyramid(&mut tape, neg, PyramidRole::StudentNormality);
    let (loss, per_stage) = ngm_loss(&mut tape, &t, &sn, &sa).unwrap();
    assert!((tape.scalar_value(loss) - 4.0).abs() < 1e-9);
    for s in per_stage {
        assert!((s - 4.0).abs() < 1e-9);
    }
}

#[test]
fn downsample_mask_all_ones_and_zeros() {
    let ones = from_vec(&[4, 4], vec![1.0; 16]);
    let d = downsample_mask(&ones, 2, 2).unwrap();
    assert!(d.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    let zero = zeros(&[4, 4]);
    let d = downsample_mask(&zero, 2, 2).unwrap();
    assert!(d.iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn downsample_mask_checkerboard_is_half() {
    let cb = from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
    let d = downsample_mask(&cb, 1, 1).unwrap();
    assert!((d[[0, 0]] - 0.5).abs() < 1e-12);
}

#[test]
fn aim_identity_zero_mask_is_zero() {
    let mut tape = Tape::new();
    let t = pyramid(&mut tape, four_stages(3), PyramidRole::Teacher);
    let s = pyramid(&mut tape, four_stages(3), PyramidRole::StudentAbnormality);
    let mask = zeros(&[8, 8]);
    let (loss, _) = aim_loss(&mut tape, &t, &s, &mask).unwrap();
    assert!(tape.scalar_value(loss).abs() < 1e-12);
}

#[test]
fn aim_orthogonal_full_mask_is_zero() {
    let mut tape = Tape::new();
    // Teacher (1,0), student (0,1) per pixel at every stage: distance 1.
    let mk = |h: usize, flip: bool| {
        let mut v = vec![0.0; 2 * h * h];
        for p in 0..h * h {
            if flip {
                v[h * h + p] = 1.0;
            } else {
                v[p] = 1.0;
            }
        }
        from_vec(&[2, h, h], v)
    };
    let t = pyramid(
        &mut tape,
        [mk(8, false), mk(4, false), mk(2, false), mk(1, false)],
        PyramidRole::Teacher,
    );
    let s = pyramid(
        &mut tape,
        [mk(8, true), mk(4, true), mk(2, true), mk(1, true)],
        PyramidRole::StudentAbnormality,
    );
    let mask = from_vec(&[8, 8], vec![1.0; 64]);
    let (loss, _) = aim_loss(&mut tape, &t, &s, &mask).unwrap();
    assert!(tape.scalar_value(loss).abs() < 1e-12);
}

#[test]
fn aim_identity_full_mask_is_one() {
    let mut tape = Tape::new();
    let t = pyramid(&mut tape, four_stages(4), PyramidRole::Teacher);
    let s = pyramid(&mut tape, four_stages(4), PyramidRole::StudentAbnormality);
    let mask = from_vec(&[8, 8], vec![1.0; 64]);
    let (loss, _) = aim_loss(&mut tape, &t, &s, &mask).unwrap();
    assert!((tape.scalar_value(loss) - 1.0).abs() < 1e-12);
}

#[test]
fn stage_maps_zero_when_student_equals_teacher() {
    let mut tape = Tape::new();
    let t = pyramid(&mut tape, four_stages(5), PyramidRole::Teacher);
    let sn = pyramid(&mut tape, four_stages(5), PyramidRole::StudentNormality);
    let sa = pyramid(&mut tape, four_stages(5), PyramidRole::StudentAbnormality);
    let maps = compute_stage_maps(&mut tape, &t, &sn, &sa).unwrap();
    for m in maps {
        for &v in tape.value(m).iter() {
            assert!(v.abs() < 1e-12);
        }
    }
}

#[test]
fn stage_maps_orthogonal_abnormality_sets_aim_to_one() {
    let mut tape = Tape::new();
    let mk = |h: usize, flip: bool| {
        let mut v = vec![0.0; 2 * h * h];
        for p in 0..h * h {
            if flip {
                v[h * h + p] = 1.0;
            } else {
                v[p] = 1.0;
            }
        }
        from_vec(&[2, h, h], v)
    };
    let t = pyramid(
        &mut tape,
        [mk(8, false), mk(4, false), mk(2, false), mk(1, false)],
        PyramidRole::Teacher,
    );
    let sn = pyramid(
        &mut tape,
        [mk(8, false), mk(4, false), mk(2, false), mk(1, false)],
        PyramidRole::StudentNormality,
    );
    let sa = pyramid(
        &mut tape,
        [mk(8, true), mk(4, true), mk(2, true), mk(1, true)],
        PyramidRole::StudentAbnormality,
    );
    let maps = compute_stage_maps(&mut tape, &t, &sn, &sa).unwrap();
    for (i, m) in maps.iter().enumerate() {
        for &v in tape.value(*m).iter() {
            if i < 4 {
                assert!(v.abs() < 1e-12, "NGM map {i} expected 0, got {v}");
            } else {
                assert!((v - 1.0).abs() < 1e-12, "AIM map {i} expected 1, got {v}");
            }
        }
    }
}

#[test]
fn pyramid_upsample_constant_maps_accumulate() {
    let mut tape = Tape::new();
    let consts = [0.1, 0.2, 0.4, 0.8];
    let sizes = [16usize, 8, 4, 2];
    let mut maps = Vec::new();
    // NGM block then AIM block, same constants.
    for _ in 0..2 {
        for (c, s) in consts.iter().zip(sizes) {
            maps.push(tape.leaf(from_vec(&[s, s], vec![*c; s * s])));
        }
    }
    let maps: [dmdd_core::autodiff::Var; 8] = maps.try_into().unwrap();
    let stack = pyramid_upsample(&mut tape, &maps, 64, true);
    let v = tape.value(stack);
    let total: f64 = consts.iter().sum();
    // Channel 0 = finest NGM channel after top-down accumulation.
    // Channel 7 = coarsest AIM channel after bottom-up accumulation.
    for y in 0..64 {
        for x in 0..64 {
            assert!((v[[0, y, x]] - total).abs() < 1e-9);
            assert!((v[[7, y, x]] - total).abs() < 1e-9);
        }
    }
}

#[test]
fn pyramid_upsample_disabled_keeps_plain_maps() {
    let mut tape = Tape::new();
    let consts = [0.1, 0.2, 0.4, 0.8, 0.15, 0.25, 0.45, 0.85];
    let sizes = [16usize, 8, 4, 2, 16, 8, 4, 2];
    let mut maps = Vec::new();
    for (c, s) in consts.iter().zip(sizes) {
        maps.push(tape.leaf(from_vec(&[s, s], vec![*c; s * s])));
    }
    let maps: [dmdd_core::autodiff::Var; 8] = maps.try_into().unwrap();
    let stack = pyramid_upsample(&mut tape, &maps, 64, false);
    let v = tape.value(stack);
    for (c, expect) in consts.iter().enumerate() {
        for y in 0..64 {
            for x in 0..64 {
                assert!((v[[c, y, x]] - expect).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn all_zero_maps_give_zero_stack() {
    let mut tape = Tape::new();
    let sizes = [16usize, 8, 4, 2, 16, 8, 4, 2];
    let mut maps = Vec::new();
    for s in sizes {
        maps.push(tape.leaf(zeros(&[s, s])));
    }
    let maps: [dmdd_core::autodiff::Var; 8] = maps.try_into().unwrap();
    let stack = pyramid_upsample(&mut tape, &maps, 64, true);
    assert!(tape.value(stack).iter().all(|&v| v.abs() < 1e-12));
}

#[test]
fn fused_map_is_half_on_zero_stack() {
    use dmdd_core::nn::ParamStore;
    use dmdd_core::seg_head::{build_head, fuse};
    let mut store = ParamStore::new();
    let hp = build_head(&mut store, "head", 16, 1234);
    let mut tape = Tape::new();
    let stack = tape.leaf(zeros(&[8, 16, 16]));
    for mm in [true, false] {
        let m = fuse(&mut tape, &store, &hp, stack, mm, false);
        for &v in tape.value(m).iter() {
            assert!((v - 0.5).abs() < 1e-9, "mm={mm}: fused {v}");
        }
    }
}

#[test]
fn fused_map_strictly_inside_unit_interval() {
    use dmdd_core::nn::ParamStore;
    use dmdd_core::seg_head::{build_head, fuse};
    let mut store = ParamStore::new();
    let hp = build_head(&mut store, "head", 8, 99);
    let mut tape = Tape::new();
    let mut vals = Vec::new();
    for i in 0..8 * 64 {
        vals.push(((i * 37 % 101) as f64 - 50.0) * 2.0);
    }
    let stack = tape.leaf(from_vec(&[8, 8, 8], vals));
    let m = fuse(&mut tape, &store, &hp, stack, true, false);
    for &v in tape.value(m).iter() {
        assert!(v > 0.0 && v < 1.0);
    }
}

#[test]
fn anomaly_score_constant_map() {
    let mut tape = Tape::new();
    let m = tape.leaf(from_vec(&[16, 16], vec![0.37; 256]));
    let s = anomaly_score(&mut tape, m, 100, false).unwrap();
    assert!((tape.scalar_value(s) - 0.37).abs() < 1e-12);
}

#[test]
fn anomaly_score_top_100_selection() {
    let mut tape = Tape::new();
    let mut v = vec![0.1; 1024];
    for slot in v.iter_mut().take(100) {
        *slot = 0.9;
    }
    let m = tape.leaf(from_vec(&[32, 32], v));
    let s = anomaly_score(&mut tape, m, 100, false).unwrap();
    assert!((tape.scalar_value(s) - 0.9).abs() < 1e-12);
}

#[test]
fn seg_loss_half_map_full_mask_is_two_ln2() {
    let mut tape = Tape::new();
    let m = tape.leaf(from_vec(&[8, 8], vec![0.5; 64]));
    let s = tape.leaf(Tensor::from_elem(ndarray::IxDyn(&[]), 0.5));
    let gt = from_vec(&[8, 8], vec![1.0; 64]);
    let loss = seg_loss(&mut tape, m, s, &gt).unwrap();
    // Pixel term ln 2 plus scalar term ln 2.
    assert!((tape.scalar_value(loss) - 2.0 * LN2).abs() < 1e-9);
}

#[test]
fn bce_pixel_term_is_ln2() {
    let mut tape = Tape::new();
    let m = tape.leaf(from_vec(&[8, 8], vec![0.5; 64]));
    let gt = from_vec(&[8, 8], vec![1.0; 64]);
    let pixel = tape.bce_map_mean(m, gt);
    assert!((tape.scalar_value(pixel) - LN2).abs() < 1e-9);
}

#[test]
fn bce_scalar_term_is_ln2() {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::from_elem(ndarray::IxDyn(&[]), 0.5));
    let term = tape.bce_scalar(s, 1.0);
    assert!((tape.scalar_value(term) - LN2).abs() < 1e-9);
}
