//! Minimal reverse-mode automatic differentiation over f64 tensors.
//!
//! A [`Tape`] records forward operations as nodes; [`Tape::backward`] walks
//! the nodes in reverse creation order and accumulates gradients. Parameters
//! enter a tape as bound leaves ([`Tape::param`]); after a backward pass the
//! trainer scatters their gradients back into the owning
//! [`crate::nn::ParamStore`].
//!
//! The op set is exactly what the model needs: convolutions, pooling,
//! bilinear resize, per-channel normalization, attention arithmetic, the
//! cosine-distance map, and the loss reductions. Hot kernels index flat
//! slices directly instead of going through dynamic-dim indexing.

use crate::nn::ParamId;
use crate::tensor::{dims3, from_vec, scalar, slice_of, to_scalar, Tensor};
use ndarray::IxDyn;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

pub struct BackwardArgs<'a> {
    pub out_grad: &'a Tensor,
    pub out_value: &'a Tensor,
    pub parents: &'a [&'a Tensor],
}

type BackFn = Box<dyn Fn(&BackwardArgs) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(Var, u64, ParamId)>,
}

/// Gradients per tape node, produced by [`Tape::backward`].
pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g[v.0].as_ref()
    }
}

const BCE_CLAMP: f64 = 1e-7;
const COSINE_EPS: f64 = 1e-8;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        to_scalar(self.value(v))
    }

    /// (node, owning store id, parameter) triples for trainable leaves.
    pub fn bindings(&self) -> &[(Var, u64, ParamId)] {
        &self.bindings
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, backward: Option<BackFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf with no parameter binding (inputs, frozen features, constants).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None)
    }

    /// Leaf bound to a parameter. If `trainable` is false the value still
    /// enters the graph but no gradient is scattered back to the store.
    pub fn param(&mut self, store: &crate::nn::ParamStore, id: ParamId, trainable: bool) -> Var {
        let v = self.push(store.value(id).clone(), vec![], None);
        if trainable {
            self.bindings.push((v, store.store_id(), id));
        }
        v
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.ndim(),
            0,
            "backward root must be a scalar"
        );
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.backward else { continue };
            let Some(out_grad) = g[i].take() else { continue };
            let parents: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = back(&BackwardArgs {
                out_grad: &out_grad,
                out_value: &node.value,
                parents: &parents,
            });
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                match &mut g[p.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Grads { g }
    }

    /// Accumulate bound-parameter gradients into their owning store.
    /// Bindings from other stores are skipped.
    pub fn scatter_grads(&self, grads: &Grads, store: &mut crate::nn::ParamStore) {
        for (var, store_id, id) in &self.bindings {
            if *store_id != store.store_id() {
                continue;
            }
            if let Some(g) = grads.get(*var) {
                store.accum_grad(*id, g);
            }
        }
    }

    // ---- elementwise and reduction ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|args| {
                vec![args.out_grad.clone(), args.out_grad.clone()]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            vec![a, b],
            Some(Box::new(|args| {
                vec![args.out_grad * args.parents[1], args.out_grad * args.parents[0]]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).mapv(|x| x * c);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args| vec![args.out_grad.mapv(|g| g * c)])),
        )
    }

    pub fn sub_const(&mut self, a: Var, t: Tensor) -> Var {
        assert_eq!(self.value(a).shape(), t.shape(), "sub_const shape mismatch");
        let value = self.value(a) - &t;
        self.push(
            value,
            vec![a],
            Some(Box::new(|args| vec![args.out_grad.clone()])),
        )
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        self.push(
            value,
            vec![a],
            Some(Box::new(|args| {
                let mut g = args.out_grad.clone();
                g.zip_mut_with(args.parents[0], |gv, &x| *gv *= sign(x));
                vec![g]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let value = scalar(self.value(a).sum() / n);
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args| {
                let g = to_scalar(args.out_grad) / n;
                vec![args.parents[0].mapv(|_| g)]
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args| {
                let mut g = args.out_grad.clone();
                g.zip_mut_with(args.parents[0], |gv, &x| {
                    if x <= 0.0 {
                        *gv *= slope;
                    }
                });
                vec![g]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid_f);
        self.push(
            value,
            vec![a],
            Some(Box::new(|args| {
                let mut g = args.out_grad.clone();
                g.zip_mut_with(args.out_value, |gv, &y| *gv *= y * (1.0 - y));
                vec![g]
            })),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let old_shape: Vec<usize> = self.value(a).shape().to_vec();
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        self.push(
            value,
            vec![a],
            Some(Box::new(move |args| {
                vec![args
                    .out_grad
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward")]
            })),
        )
    }

    // ---- convolution / pooling / resize ----

    /// 2-D convolution over a C x H x W input with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (cin, _, _) = dims3(self.value(x));
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv2d weight must be Cout x Cin x Kh x Kw");
        assert_eq!(ws[1], cin, "conv2d channel mismatch");
        let cout = ws[0];
        let bias = b.map(|bv| {
            assert_eq!(self.value(bv).shape(), [cout]);
            self.value(bv).clone()
        });
        let value = conv2d_fwd(self.value(x), self.value(w), bias.as_ref(), stride, pad);
        let mut parents = vec![x, w];
        if let Some(bv) = b {
            parents.push(bv);
        }
        let has_bias = b.is_some();
        self.push(
            value,
            parents,
            Some(Box::new(move |args| {
                let (dx, dw, db) =
                    conv2d_bwd(args.parents[0], args.parents[1], args.out_grad, stride, pad);
                let mut out = vec![dx, dw];
                if has_bias {
                    out.push(db);
                }
                out
            })),
        )
    }

    /// 2x2 average pooling with stride 2. Requires even spatial dims.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.value(x));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims, got {h}x{w}");
        let xs = slice_of(self.value(x));
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let base = (ci * h + 2 * y) * w + 2 * xo;
                    out[(ci * ho + y) * wo + xo] =
                        0.25 * (xs[base] + xs[base + 1] + xs[base + w] + xs[base + w + 1]);
                }
            }
        }
        self.push(
            from_vec(&[c, ho, wo], out),
            vec![x],
            Some(Box::new(move |args| {
                let gs = slice_of(args.out_grad);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let g = 0.25 * gs[(ci * ho + y) * wo + xo];
                            let base = (ci * h + 2 * y) * w + 2 * xo;
                            dx[base] += g;
                            dx[base + 1] += g;
                            dx[base + w] += g;
                            dx[base + w + 1] += g;
                        }
                    }
                }
                vec![from_vec(&[c, h, w], dx)]
            })),
        )
    }

    /// Bilinear resize of a C x H x W tensor to `(oh, ow)`, half-pixel
    /// centers, edges clamped. Weights sum to one so constants are preserved.
    pub fn bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let (c, h, w) = dims3(self.value(x));
        let plan = BilinearPlan::new(h, w, oh, ow);
        let value = plan.forward(self.value(x), c);
        self.push(
            value,
            vec![x],
            Some(Box::new(move |args| {
                vec![plan.backward(args.out_grad, c, h, w)]
            })),
        )
    }

    /// Per-channel normalization over the spatial extent with affine params.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (c, h, w) = dims3(self.value(x));
        assert_eq!(self.value(gamma).shape(), [c]);
        assert_eq!(self.value(beta).shape(), [c]);
        let n = (h * w) as f64;
        let xs = slice_of(self.value(x));
        let gs = slice_of(self.value(gamma));
        let bs = slice_of(self.value(beta));
        let mut out = vec![0.0; c * h * w];
        let mut mus = vec![0.0; c];
        let mut inv_sigmas = vec![0.0; c];
        for ci in 0..c {
            let sl = &xs[ci * h * w..(ci + 1) * h * w];
            let mu = sl.iter().sum::<f64>() / n;
            let var = sl.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv_sigma = 1.0 / (var + eps).sqrt();
            mus[ci] = mu;
            inv_sigmas[ci] = inv_sigma;
            for (o, &v) in out[ci * h * w..(ci + 1) * h * w].iter_mut().zip(sl) {
                *o = gs[ci] * (v - mu) * inv_sigma + bs[ci];
            }
        }
        self.push(
            from_vec(&[c, h, w], out),
            vec![x, gamma, beta],
            Some(Box::new(move |args| {
                let xs = slice_of(args.parents[0]);
                let gs = slice_of(args.parents[1]);
                let og = slice_of(args.out_grad);
                let mut dx = vec![0.0; c * h * w];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ci in 0..c {
                    let sl = &xs[ci * h * w..(ci + 1) * h * w];
                    let gl = &og[ci * h * w..(ci + 1) * h * w];
                    let (mu, inv_sigma) = (mus[ci], inv_sigmas[ci]);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (&g, &v) in gl.iter().zip(sl) {
                        let xhat = (v - mu) * inv_sigma;
                        sum_g += g;
                        sum_gx += g * xhat;
                        dgamma[ci] += g * xhat;
                        dbeta[ci] += g;
                    }
                    let mean_g = sum_g / n;
                    let mean_gx = sum_gx / n;
                    for ((d, &g), &v) in dx[ci * h * w..(ci + 1) * h * w]
                        .iter_mut()
                        .zip(gl)
                        .zip(sl)
                    {
                        let xhat = (v - mu) * inv_sigma;
                        *d = gs[ci] * inv_sigma * (g - mean_g - xhat * mean_gx);
                    }
                }
                vec![
                    from_vec(&[c, h, w], dx),
                    from_vec(&[c], dgamma),
                    from_vec(&[c], dbeta),
                ]
            })),
        )
    }

    // ---- channel-axis ops ----

    pub fn narrow_ch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (c, h, w) = dims3(self.value(x));
        assert!(start + len <= c, "narrow_ch out of range");
        let xs = slice_of(self.value(x));
        let out = xs[start * h * w..(start + len) * h * w].to_vec();
        self.push(
            from_vec(&[len, h, w], out),
            vec![x],
            Some(Box::new(move |args| {
                let mut dx = vec![0.0; c * h * w];
                dx[start * h * w..(start + len) * h * w].copy_from_slice(slice_of(args.out_grad));
                vec![from_vec(&[c, h, w], dx)]
            })),
        )
    }

    pub fn concat_ch(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let (_, h, w) = dims3(self.value(xs[0]));
        let mut chans = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for &v in xs {
            let (c, hh, ww) = dims3(self.value(v));
            assert_eq!((hh, ww), (h, w), "concat_ch spatial mismatch");
            chans.push(c);
            data.extend_from_slice(slice_of(self.value(v)));
        }
        let csum: usize = chans.iter().sum();
        self.push(
            from_vec(&[csum, h, w], data),
            xs.to_vec(),
            Some(Box::new(move |args| {
                let og = slice_of(args.out_grad);
                let mut out = Vec::with_capacity(chans.len());
                let mut off = 0;
                for &c in &chans {
                    out.push(from_vec(&[c, h, w], og[off..off + c * h * w].to_vec()));
                    off += c * h * w;
                }
                out
            })),
        )
    }

    /// Per-pixel max over channels -> 1 x H x W. Ties route the gradient to
    /// the lowest channel index.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.value(x));
        let xs = slice_of(self.value(x));
        let hw = h * w;
        let mut out = vec![f64::NEG_INFINITY; hw];
        let mut arg = vec![0usize; hw];
        for ci in 0..c {
            for p in 0..hw {
                let v = xs[ci * hw + p];
                if v > out[p] {
                    out[p] = v;
                    arg[p] = ci;
                }
            }
        }
        self.push(
            from_vec(&[1, h, w], out),
            vec![x],
            Some(Box::new(move |args| {
                let og = slice_of(args.out_grad);
                let mut dx = vec![0.0; c * hw];
                for p in 0..hw {
                    dx[arg[p] * hw + p] = og[p];
                }
                vec![from_vec(&[c, h, w], dx)]
            })),
        )
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let s = self.sum_ch(x);
        let (c, _, _) = dims3(self.value(x));
        self.scale(s, 1.0 / c as f64)
    }

    pub fn sum_ch(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.value(x));
        let xs = slice_of(self.value(x));
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for ci in 0..c {
            for p in 0..hw {
                out[p] += xs[ci * hw + p];
            }
        }
        self.push(
            from_vec(&[1, h, w], out),
            vec![x],
            Some(Box::new(move |args| {
                let og = slice_of(args.out_grad);
                let mut dx = vec![0.0; c * hw];
                for ci in 0..c {
                    dx[ci * hw..(ci + 1) * hw].copy_from_slice(og);
                }
                vec![from_vec(&[c, h, w], dx)]
            })),
        )
    }

    /// Per-pixel softmax over the channel axis.
    pub fn softmax_ch(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.value(x));
        let xs = slice_of(self.value(x));
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(xs[ci * hw + p]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (xs[ci * hw + p] - mx).exp();
                out[ci * hw + p] = e;
                sum += e;
            }
            for ci in 0..c {
                out[ci * hw + p] /= sum;
            }
        }
        self.push(
            from_vec(&[c, h, w], out),
            vec![x],
            Some(Box::new(move |args| {
                let ys = slice_of(args.out_value);
                let og = slice_of(args.out_grad);
                let mut dx = vec![0.0; c * hw];
                for p in 0..hw {
                    let mut dot = 0.0;
                    for ci in 0..c {
                        dot += og[ci * hw + p] * ys[ci * hw + p];
                    }
                    for ci in 0..c {
                        dx[ci * hw + p] = ys[ci * hw + p] * (og[ci * hw + p] - dot);
                    }
                }
                vec![from_vec(&[c, h, w], dx)]
            })),
        )
    }

    /// Multiply each channel by a scalar gate: y[c] = x[c] * s[c].
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = dims3(self.value(x));
        assert_eq!(self.value(s).shape(), [c]);
        let xs = slice_of(self.value(x));
        let ss = slice_of(self.value(s));
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ci in 0..c {
            for p in 0..hw {
                out[ci * hw + p] = xs[ci * hw + p] * ss[ci];
            }
        }
        self.push(
            from_vec(&[c, h, w], out),
            vec![x, s],
            Some(Box::new(move |args| {
                let xs = slice_of(args.parents[0]);
                let ss = slice_of(args.parents[1]);
                let og = slice_of(args.out_grad);
                let mut dx = vec![0.0; c * hw];
                let mut ds = vec![0.0; c];
                for ci in 0..c {
                    for p in 0..hw {
                        dx[ci * hw + p] = og[ci * hw + p] * ss[ci];
                        ds[ci] += og[ci * hw + p] * xs[ci * hw + p];
                    }
                }
                vec![from_vec(&[c, h, w], dx), from_vec(&[c], ds)]
            })),
        )
    }

    /// Multiply every channel by a 1 x H x W spatial gate.
    pub fn mul_spatial(&mut self, x: Var, s: Var) -> Var {
        let (c, h, w) = dims3(self.value(x));
        let (cs, hs, ws) = dims3(self.value(s));
        assert_eq!((cs, hs, ws), (1, h, w), "mul_spatial gate shape mismatch");
        let xs = slice_of(self.value(x));
        let ss = slice_of(self.value(s));
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for ci in 0..c {
            for p in 0..hw {
                out[ci * hw + p] = xs[ci * hw + p] * ss[p];
            }
        }
        self.push(
            from_vec(&[c, h, w], out),
            vec![x, s],
            Some(Box::new(move |args| {
                let xs = slice_of(args.parents[0]);
                let ss = slice_of(args.parents[1]);
                let og = slice_of(args.out_grad);
                let mut dx = vec![0.0; c * hw];
                let mut ds = vec![0.0; hw];
                for ci in 0..c {
                    for p in 0..hw {
                        dx[ci * hw + p] = og[ci * hw + p] * ss[p];
                        ds[p] += og[ci * hw + p] * xs[ci * hw + p];
                    }
                }
                vec![from_vec(&[c, h, w], dx), from_vec(&[1, h, w], ds)]
            })),
        )
    }

    /// Spatial mean per channel -> vector of length C.
    pub fn global_avg(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.value(x));
        let xs = slice_of(self.value(x));
        let hw = h * w;
        let mut out = vec![0.0; c];
        for ci in 0..c {
            out[ci] = xs[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        self.push(
            from_vec(&[c], out),
            vec![x],
            Some(Box::new(move |args| {
                let og = slice_of(args.out_grad);
                let mut dx = vec![0.0; c * hw];
                for ci in 0..c {
                    let g = og[ci] / hw as f64;
                    for d in dx[ci * hw..(ci + 1) * hw].iter_mut() {
                        *d = g;
                    }
                }
                vec![from_vec(&[c, h, w], dx)]
            })),
        )
    }

    /// Dense layer on a vector: y = W x + b.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xl = self.value(x).len();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be 2-D");
        assert_eq!(ws[1], xl, "linear in-dim mismatch");
        let cout = ws[0];
        assert_eq!(self.value(b).shape(), [cout]);
        let xs = slice_of(self.value(x));
        let wsl = slice_of(self.value(w));
        let bs = slice_of(self.value(b));
        let mut out = vec![0.0; cout];
        for o in 0..cout {
            let mut acc = bs[o];
            for i in 0..xl {
                acc += wsl[o * xl + i] * xs[i];
            }
            out[o] = acc;
        }
        self.push(
            from_vec(&[cout], out),
            vec![x, w, b],
            Some(Box::new(move |args| {
                let xs = slice_of(args.parents[0]);
                let wsl = slice_of(args.parents[1]);
                let og = slice_of(args.out_grad);
                let mut dx = vec![0.0; xl];
                let mut dw = vec![0.0; cout * xl];
                for o in 0..cout {
                    for i in 0..xl {
                        dx[i] += wsl[o * xl + i] * og[o];
                        dw[o * xl + i] = og[o] * xs[i];
                    }
                }
                vec![
                    from_vec(&[xl], dx),
                    from_vec(&[cout, xl], dw),
                    from_vec(&[cout], og.to_vec()),
                ]
            })),
        )
    }

    // ---- model-specific fused ops ----

    /// Per-pixel cosine distance between two C x H x W feature maps:
    /// d = 1 - <a,b> / (max(|a|, eps) * max(|b|, eps)). A zero vector on
    /// either side yields distance 1 with a zero gradient through its norm.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Var {
        let (c, h, w) = dims3(self.value(a));
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "cosine_distance shape mismatch"
        );
        let asl = slice_of(self.value(a));
        let bsl = slice_of(self.value(b));
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for p in 0..hw {
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for ci in 0..c {
                let av = asl[ci * hw + p];
                let bv = bsl[ci * hw + p];
                dot += av * bv;
                na += av * av;
                nb += bv * bv;
            }
            let na = na.sqrt().max(COSINE_EPS);
            let nb = nb.sqrt().max(COSINE_EPS);
            out[p] = 1.0 - dot / (na * nb);
        }
        self.push(
            from_vec(&[h, w], out),
            vec![a, b],
            Some(Box::new(move |args| {
                let asl = slice_of(args.parents[0]);
                let bsl = slice_of(args.parents[1]);
                let og = slice_of(args.out_grad);
                let mut da = vec![0.0; c * hw];
                let mut db = vec![0.0; c * hw];
                for p in 0..hw {
                    let mut dot = 0.0;
                    let mut na2 = 0.0;
                    let mut nb2 = 0.0;
                    for ci in 0..c {
                        let av = asl[ci * hw + p];
                        let bv = bsl[ci * hw + p];
                        dot += av * bv;
                        na2 += av * av;
                        nb2 += bv * bv;
                    }
                    let na_raw = na2.sqrt();
                    let nb_raw = nb2.sqrt();
                    let na = na_raw.max(COSINE_EPS);
                    let nb = nb_raw.max(COSINE_EPS);
                    let inv = 1.0 / (na * nb);
                    let g = og[p];
                    // d/da = -(b/(na*nb) - dot * a / (na^3 * nb)), norm term
                    // frozen when the norm is clamped.
                    let a_norm_term = if na_raw > COSINE_EPS {
                        dot / (na * na * na * nb)
                    } else {
                        0.0
                    };
                    let b_norm_term = if nb_raw > COSINE_EPS {
                        dot / (nb * nb * nb * na)
                    } else {
                        0.0
                    };
                    for ci in 0..c {
                        let av = asl[ci * hw + p];
                        let bv = bsl[ci * hw + p];
                        da[ci * hw + p] = -g * (bv * inv - av * a_norm_term);
                        db[ci * hw + p] = -g * (av * inv - bv * b_norm_term);
                    }
                }
                vec![from_vec(&[c, h, w], da), from_vec(&[c, h, w], db)]
            })),
        )
    }

    /// Mean of the k largest values of an H x W map. Selection orders by
    /// value (descending) then index (ascending) so it is deterministic;
    /// the gradient is 1/k on each selected pixel.
    pub fn topk_mean(&mut self, x: Var, k: usize) -> Var {
        let n = self.value(x).len();
        assert!(k >= 1 && k <= n, "topk_mean: k={k} out of range for {n} values");
        let xs = slice_of(self.value(x));
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&i, &j| xs[j].partial_cmp(&xs[i]).unwrap().then(i.cmp(&j)));
        idx.truncate(k);
        let mean = idx.iter().map(|&i| xs[i]).sum::<f64>() / k as f64;
        let shape: Vec<usize> = self.value(x).shape().to_vec();
        self.push(
            scalar(mean),
            vec![x],
            Some(Box::new(move |args| {
                let g = to_scalar(args.out_grad) / k as f64;
                let mut dx = vec![0.0; n];
                for &i in &idx {
                    dx[i] = g;
                }
                vec![from_vec(&shape, dx)]
            })),
        )
    }

    /// Pixel-mean binary cross-entropy of a probability map against a fixed
    /// target map. Probabilities are clamped to [1e-7, 1 - 1e-7]; clamped
    /// pixels get zero gradient.
    pub fn bce_map_mean(&mut self, p: Var, target: Tensor) -> Var {
        assert_eq!(self.value(p).shape(), target.shape(), "bce target shape mismatch");
        let n = target.len() as f64;
        let ps = slice_of(self.value(p));
        let ts = slice_of(&target);
        let mut acc = 0.0;
        for (&pv, &tv) in ps.iter().zip(ts) {
            let q = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            acc += -(tv * q.ln() + (1.0 - tv) * (1.0 - q).ln());
        }
        let shape: Vec<usize> = target.shape().to_vec();
        self.push(
            scalar(acc / n),
            vec![p],
            Some(Box::new(move |args| {
                let g = to_scalar(args.out_grad) / n;
                let ps = slice_of(args.parents[0]);
                let ts = slice_of(&target);
                let mut dp = vec![0.0; ps.len()];
                for ((d, &pv), &tv) in dp.iter_mut().zip(ps).zip(ts) {
                    if pv > BCE_CLAMP && pv < 1.0 - BCE_CLAMP {
                        *d = g * (pv - tv) / (pv * (1.0 - pv));
                    }
                }
                vec![from_vec(&shape, dp)]
            })),
        )
    }

    /// Scalar binary cross-entropy against a fixed 0/1 label.
    pub fn bce_scalar(&mut self, p: Var, label: f64) -> Var {
        assert_eq!(self.value(p).ndim(), 0, "bce_scalar expects a scalar");
        let pv = self.scalar_value(p);
        let q = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        let loss = -(label * q.ln() + (1.0 - label) * (1.0 - q).ln());
        self.push(
            scalar(loss),
            vec![p],
            Some(Box::new(move |args| {
                let pv = to_scalar(args.parents[0]);
                let d = if pv > BCE_CLAMP && pv < 1.0 - BCE_CLAMP {
                    to_scalar(args.out_grad) * (pv - label) / (pv * (1.0 - pv))
                } else {
                    0.0
                };
                vec![scalar(d)]
            })),
        )
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid_f(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---- convolution kernels ----

fn conv2d_fwd(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (cin, h, win) = dims3(x);
    let ws = w.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (win + 2 * pad - kw) / stride + 1;
    let xs = slice_of(x);
    let wsl = slice_of(w);
    let bs = b.map(slice_of);
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let bias = bs.map_or(0.0, |bb| bb[o]);
        for y in 0..ho {
            for xo in 0..wo {
                let mut acc = bias;
                for c in 0..cin {
                    for ky in 0..kh {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (c * h + iy as usize) * win;
                        let wrow = ((o * cin + c) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= win as isize {
                                continue;
                            }
                            acc += wsl[wrow + kx] * xs[xrow + ix as usize];
                        }
                    }
                }
                out[(o * ho + y) * wo + xo] = acc;
            }
        }
    }
    from_vec(&[cout, ho, wo], out)
}

fn conv2d_bwd(
    x: &Tensor,
    w: &Tensor,
    out_grad: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor, Tensor) {
    let (cin, h, win) = dims3(x);
    let ws = w.shape();
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (_, ho, wo) = dims3(out_grad);
    let xs = slice_of(x);
    let wsl = slice_of(w);
    let gs = slice_of(out_grad);
    let mut dx = vec![0.0; cin * h * win];
    let mut dw = vec![0.0; cout * cin * kh * kw];
    let mut db = vec![0.0; cout];
    for o in 0..cout {
        for y in 0..ho {
            for xo in 0..wo {
                let g = gs[(o * ho + y) * wo + xo];
                if g == 0.0 {
                    continue;
                }
                db[o] += g;
                for c in 0..cin {
                    for ky in 0..kh {
                        let iy = (y * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (c * h + iy as usize) * win;
                        let wrow = ((o * cin + c) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (xo * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= win as isize {
                                continue;
                            }
                            dx[xrow + ix as usize] += g * wsl[wrow + kx];
                            dw[wrow + kx] += g * xs[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (
        from_vec(&[cin, h, win], dx),
        from_vec(&[cout, cin, kh, kw], dw),
        from_vec(&[cout], db),
    )
}

/// Bilinear resize of a plain C x H x W tensor, same kernel as the taped op.
pub fn resize_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = dims3(x);
    BilinearPlan::new(h, w, oh, ow).forward(x, c)
}

// ---- bilinear resize plan ----

#[derive(Clone)]
struct BilinearPlan {
    oh: usize,
    ow: usize,
    y0: Vec<usize>,
    y1: Vec<usize>,
    wy: Vec<f64>,
    x0: Vec<usize>,
    x1: Vec<usize>,
    wx: Vec<f64>,
}

impl BilinearPlan {
    fn new(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        let (y0, y1, wy) = axis_plan(h, oh);
        let (x0, x1, wx) = axis_plan(w, ow);
        BilinearPlan {
            oh,
            ow,
            y0,
            y1,
            wy,
            x0,
            x1,
            wx,
        }
    }

    fn forward(&self, x: &Tensor, c: usize) -> Tensor {
        let (_, h, w) = dims3(x);
        let xs = slice_of(x);
        let mut out = vec![0.0; c * self.oh * self.ow];
        for ci in 0..c {
            let base = ci * h * w;
            for y in 0..self.oh {
                let (r0, r1, fy) = (self.y0[y], self.y1[y], self.wy[y]);
                for xo in 0..self.ow {
                    let (c0, c1, fx) = (self.x0[xo], self.x1[xo], self.wx[xo]);
                    let v00 = xs[base + r0 * w + c0];
                    let v01 = xs[base + r0 * w + c1];
                    let v10 = xs[base + r1 * w + c0];
                    let v11 = xs[base + r1 * w + c1];
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    out[(ci * self.oh + y) * self.ow + xo] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        from_vec(&[c, self.oh, self.ow], out)
    }

    fn backward(&self, out_grad: &Tensor, c: usize, h: usize, w: usize) -> Tensor {
        let gs = slice_of(out_grad);
        let mut dx = vec![0.0; c * h * w];
        for ci in 0..c {
            let base = ci * h * w;
            for y in 0..self.oh {
                let (r0, r1, fy) = (self.y0[y], self.y1[y], self.wy[y]);
                for xo in 0..self.ow {
                    let (c0, c1, fx) = (self.x0[xo], self.x1[xo], self.wx[xo]);
                    let g = gs[(ci * self.oh + y) * self.ow + xo];
                    dx[base + r0 * w + c0] += g * (1.0 - fy) * (1.0 - fx);
                    dx[base + r0 * w + c1] += g * (1.0 - fy) * fx;
                    dx[base + r1 * w + c0] += g * fy * (1.0 - fx);
                    dx[base + r1 * w + c1] += g * fy * fx;
                }
            }
        }
        from_vec(&[c, h, w], dx)
    }
}

fn axis_plan(src: usize, dst: usize) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
    let mut i0 = Vec::with_capacity(dst);
    let mut i1 = Vec::with_capacity(dst);
    let mut fr = Vec::with_capacity(dst);
    let ratio = src as f64 / dst as f64;
    for d in 0..dst {
        let s = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        i0.push(lo);
        i1.push(hi);
        fr.push(s - lo as f64);
    }
    (i0, i1, fr)
}
