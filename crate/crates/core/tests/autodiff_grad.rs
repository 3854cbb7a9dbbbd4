//! Finite-difference checks for every tape op. Each test perturbs one input
//! element at a time and compares the analytic gradient of a scalar
//! objective against a central difference.

use dmdd_core::autodiff::Tape;
use dmdd_core::tensor::{from_vec, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-7;

fn rand_tensor(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    from_vec(shape, data)
}

/// Checks d(objective)/d(input_i) for every input tensor and element.
/// The objective must reduce to a scalar and be built only from tape ops.
fn check_grads(inputs: &[Tensor], f: impl Fn(&mut Tape, &[dmdd_core::autodiff::Var]) -> dmdd_core::autodiff::Var) {
    let build = |ins: &[Tensor]| -> (f64, Vec<Option<Tensor>>) {
        let mut tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = f(&mut tape, &vars);
        let val = tape.scalar_value(root);
        let grads = tape.backward(root);
        let gs = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        (val, gs)
    };
    let (_, analytic) = build(inputs);
    for (ti, t) in inputs.iter().enumerate() {
        let ga = analytic[ti].as_ref();
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[ti].as_slice_mut().unwrap()[i] += EPS;
            minus[ti].as_slice_mut().unwrap()[i] -= EPS;
            let (fp, _) = build(&plus);
            let (fm, _) = build(&minus);
            let fd = (fp - fm) / (2.0 * EPS);
            let an = ga.map_or(0.0, |g| g.as_slice().unwrap()[i]);
            let denom = fd.abs().max(an.abs()).max(1.0);
            assert!(
                ((fd - an) / denom).abs() < TOL,
                "input {ti} elem {i}: fd={fd} analytic={an}"
            );
        }
    }
}

#[test]
fn add_mul_scale_abs() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 3]);
    let b = rand_tensor(&mut rng, &[2, 3, 3]);
    check_grads(&[a, b], |t, v| {
        let s = t.add(v[0], v[1]);
        let m = t.mul(s, v[0]);
        let sc = t.scale(m, 0.7);
        let ab = t.abs(sc);
        t.mean_all(ab)
    });
}

#[test]
fn leaky_relu_sigmoid() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[3, 4, 4]);
    check_grads(&[a], |t, v| {
        let r = t.leaky_relu(v[0], 0.1);
        let s = t.sigmoid(r);
        t.mean_all(s)
    });
}

#[test]
fn conv2d_stride1_pad1() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    check_grads(&[x, w, b], |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1);
        let s = t.sigmoid(y);
        t.mean_all(s)
    });
}

#[test]
fn conv2d_stride2_no_bias() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 6, 6]);
    let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    check_grads(&[x, w], |t, v| {
        let y = t.conv2d(v[0], v[1], None, 2, 1);
        let a = t.abs(y);
        t.mean_all(a)
    });
}

#[test]
fn conv2d_1x1() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[3, 4, 4]);
    let w = rand_tensor(&mut rng, &[6, 3, 1, 1]);
    check_grads(&[x, w], |t, v| {
        let y = t.conv2d(v[0], v[1], None, 1, 0);
        let s = t.sigmoid(y);
        t.mean_all(s)
    });
}

#[test]
fn avg_pool_and_bilinear() {
    let mut rng = ChaCha20Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 6, 6]);
    check_grads(&[x], |t, v| {
        let p = t.avg_pool2(v[0]);
        let up = t.bilinear(p, 5, 7);
        let s = t.sigmoid(up);
        t.mean_all(s)
    });
}

#[test]
fn channel_norm_affine() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[3, 4, 4]);
    let gamma = rand_tensor(&mut rng, &[3]);
    let beta = rand_tensor(&mut rng, &[3]);
    check_grads(&[x, gamma, beta], |t, v| {
        let y = t.channel_norm(v[0], v[1], v[2], 1e-5);
        let s = t.sigmoid(y);
        t.mean_all(s)
    });
}

#[test]
fn narrow_concat_roundtrip() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[4, 3, 3]);
    let y = rand_tensor(&mut rng, &[2, 3, 3]);
    check_grads(&[x, y], |t, v| {
        let lo = t.narrow_ch(v[0], 0, 2);
        let hi = t.narrow_ch(v[0], 2, 2);
        let cat = t.concat_ch(&[lo, v[1], hi]);
        let m = t.mul(cat, cat);
        t.mean_all(m)
    });
}

#[test]
fn channel_reductions() {
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[4, 3, 3]);
    check_grads(&[x.clone()], |t, v| {
        let mx = t.channel_max(v[0]);
        let mn = t.channel_mean(v[0]);
        let cat = t.concat_ch(&[mx, mn]);
        let s = t.sigmoid(cat);
        t.mean_all(s)
    });
}

#[test]
fn softmax_and_gates() {
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[3, 3, 3]);
    let gate_c = rand_tensor(&mut rng, &[3]);
    let gate_s = rand_tensor(&mut rng, &[1, 3, 3]);
    check_grads(&[x, gate_c, gate_s], |t, v| {
        let sm = t.softmax_ch(v[0]);
        let gc = t.scale_channels(sm, v[1]);
        let gs = t.mul_spatial(gc, v[2]);
        t.mean_all(gs)
    });
}

#[test]
fn global_avg_linear() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[4, 3, 3]);
    let w1 = rand_tensor(&mut rng, &[2, 4]);
    let b1 = rand_tensor(&mut rng, &[2]);
    let w2 = rand_tensor(&mut rng, &[4, 2]);
    let b2 = rand_tensor(&mut rng, &[4]);
    check_grads(&[x, w1, b1, w2, b2], |t, v| {
        let g = t.global_avg(v[0]);
        let h = t.linear(g, v[1], v[2]);
        let h = t.leaky_relu(h, 0.1);
        let o = t.linear(h, v[3], v[4]);
        let o = t.sigmoid(o);
        let gated = t.scale_channels(v[0], o);
        t.mean_all(gated)
    });
}

#[test]
fn cosine_distance_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let a = rand_tensor(&mut rng, &[3, 3, 3]);
    let b = rand_tensor(&mut rng, &[3, 3, 3]);
    check_grads(&[a, b], |t, v| {
        let d = t.cosine_distance(v[0], v[1]);
        t.mean_all(d)
    });
}

#[test]
fn cosine_distance_zero_vector_is_finite() {
    let a = from_vec(&[2, 1, 1], vec![0.0, 0.0]);
    let b = from_vec(&[2, 1, 1], vec![0.3, -0.4]);
    let mut tape = Tape::new();
    let av = tape.leaf(a);
    let bv = tape.leaf(b);
    let d = tape.cosine_distance(av, bv);
    assert!((tape.value(d).as_slice().unwrap()[0] - 1.0).abs() < 1e-12);
    let m = tape.mean_all(d);
    let grads = tape.backward(m);
    for g in grads.get(av).unwrap().iter().chain(grads.get(bv).unwrap().iter()) {
        assert!(g.is_finite());
    }
}

#[test]
fn topk_mean_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[1, 5, 5]);
    check_grads(&[x], |t, v| {
        let s = t.sigmoid(v[0]);
        t.topk_mean(s, 7)
    });
}

#[test]
fn bce_map_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[1, 4, 4]);
    let target = from_vec(
        &[1, 4, 4],
        (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
    );
    check_grads(&[x], move |t, v| {
        let p = t.sigmoid(v[0]);
        t.bce_map_mean(p, target.clone())
    });
}

#[test]
fn bce_scalar_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let x = rand_tensor(&mut rng, &[1, 4, 4]);
    check_grads(&[x], |t, v| {
        let p = t.sigmoid(v[0]);
        let s = t.topk_mean(p, 3);
        t.bce_scalar(s, 1.0)
    });
}

#[test]
fn reshape_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    check_grads(&[x], |t, v| {
        let r = t.reshape(v[0], &[6, 4]);
        let m = t.mul(r, r);
        t.mean_all(m)
    });
}

#[test]
fn sub_const_grad() {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, &[2, 3, 3]);
    let c = rand_tensor(&mut rng, &[2, 3, 3]);
    check_grads(&[x], move |t, v| {
        let d = t.sub_const(v[0], c.clone());
        let a = t.abs(d);
        t.mean_all(a)
    });
}

#[test]
fn grad_accumulates_over_shared_subexpression() {
    // y = mean(x * x) + mean(x): d/dx = 2x/n + 1/n, checks fan-out accumulation.
    let x = from_vec(&[1, 2, 2], vec![0.5, -0.3, 0.8, 0.1]);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let sq = tape.mul(v, v);
    let m1 = tape.mean_all(sq);
    let m2 = tape.mean_all(v);
    let root = tape.add(m1, m2);
    let grads = tape.backward(root);
    let g = grads.get(v).unwrap();
    for (gv, xv) in g.iter().zip(x.iter()) {
        assert!((gv - (2.0 * xv / 4.0 + 0.25)).abs() < 1e-12);
    }
}
