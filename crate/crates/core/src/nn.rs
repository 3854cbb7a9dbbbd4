//! Parameter storage, initialization, and the Adam optimizer.
//!
//! Parameters live in a flat [`ParamStore`] keyed by [`ParamId`] and carry a
//! stable name so checkpoints can round-trip them. All randomness comes from
//! ChaCha20 streams seeded through [`derive_seed`], which mixes a master
//! seed with caller-chosen labels; two runs with the same master seed are
//! bit-identical.

use crate::tensor::{from_vec, zeros, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

static STORE_COUNTER: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

pub struct ParamStore {
    /// Process-unique identity; tapes use it to route gradients back to the
    /// store a parameter came from when several stores feed one graph.
    store_id: u64,
    params: Vec<Param>,
    adam_t: u64,
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore {
            store_id: STORE_COUNTER.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            params: Vec::new(),
            adam_t: 0,
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn store_id(&self) -> u64 {
        self.store_id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape: Vec<usize> = value.shape().to_vec();
        self.params.push(Param {
            name: name.into(),
            grad: zeros(&shape),
            m: zeros(&shape),
            v: zeros(&shape),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn accum_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad += g;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Rescale accumulated gradients, e.g. by 1/batch before a step.
    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.mapv_inplace(|g| g * s);
        }
    }

    /// One Adam step over every parameter using the accumulated gradients.
    /// Standard bias correction; step count is shared across the store.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.adam_t += 1;
        let t = self.adam_t as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for p in &mut self.params {
            azip_adam(&mut p.m, &mut p.v, &mut p.value, &p.grad, lr, beta1, beta2, eps, bc1, bc2);
        }
    }

    pub fn adam_t(&self) -> u64 {
        self.adam_t
    }

    pub fn set_adam_t(&mut self, t: u64) {
        self.adam_t = t;
    }

    /// SHA-256 over parameter names, shapes, and exact value bytes, in
    /// insertion order. Stable across runs and platforms (big-endian bytes).
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            hasher.update([0u8]);
            hasher.update((p.value.ndim() as u64).to_be_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_be_bytes());
            }
            for &v in p.value.iter() {
                hasher.update(v.to_be_bytes());
            }
        }
        hex_encode(&hasher.finalize())
    }

    /// Hash restricted to parameters whose name starts with `prefix`.
    pub fn content_hash_prefixed(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            hasher.update(p.name.as_bytes());
            hasher.update([0u8]);
            hasher.update((p.value.ndim() as u64).to_be_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_be_bytes());
            }
            for &v in p.value.iter() {
                hasher.update(v.to_be_bytes());
            }
        }
        hex_encode(&hasher.finalize())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_adam(
    m: &mut Tensor,
    v: &mut Tensor,
    value: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    let ms = m.as_slice_mut().expect("adam: non-contiguous m");
    let vs = v.as_slice_mut().expect("adam: non-contiguous v");
    let xs = value.as_slice_mut().expect("adam: non-contiguous value");
    let gs = grad.as_slice().expect("adam: non-contiguous grad");
    for i in 0..xs.len() {
        let g = gs[i];
        ms[i] = beta1 * ms[i] + (1.0 - beta1) * g;
        vs[i] = beta2 * vs[i] + (1.0 - beta2) * g * g;
        let mhat = ms[i] / bc1;
        let vhat = vs[i] / bc2;
        xs[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

pub fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Mix a master seed with a label into an independent stream seed.
/// SplitMix64-style finalizer; labels with the same master never collide in
/// practice and the mapping is stable across versions.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = master ^ 0x9e37_79b9_7f4a_7c15;
    for &b in label.as_bytes() {
        h = h.wrapping_add(b as u64);
        h = splitmix(h);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn rng_from(master: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(master, label))
}

// ---- initializers ----

/// Kaiming-uniform fan-in init for a Cout x Cin x Kh x Kw conv weight.
pub fn kaiming_conv(rng: &mut ChaCha20Rng, cout: usize, cin: usize, kh: usize, kw: usize) -> Tensor {
    let fan_in = (cin * kh * kw) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let n = cout * cin * kh * kw;
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    from_vec(&[cout, cin, kh, kw], data)
}

/// Kaiming-uniform fan-in init for a Cout x Cin dense weight.
pub fn kaiming_linear(rng: &mut ChaCha20Rng, cout: usize, cin: usize) -> Tensor {
    let bound = (6.0 / cin as f64).sqrt();
    let data: Vec<f64> = (0..cout * cin).map(|_| rng.random_range(-bound..bound)).collect();
    from_vec(&[cout, cin], data)
}

/// Uniform init in (-bound, bound), used for the near-identity layers that
/// must still receive nonzero gradients at the first step.
pub fn tiny_uniform(rng: &mut ChaCha20Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    from_vec(shape, data)
}

/// 1x1 conv weight of shape (2*C) x C x 1 x 1 whose top half is the
/// identity and bottom half copies the input, so both halves start as the
/// original feature map.
pub fn decouple_identity(c: usize) -> Tensor {
    let mut data = vec![0.0; 2 * c * c];
    for o in 0..2 * c {
        data[o * c + (o % c)] = 1.0;
    }
    from_vec(&[2 * c, c, 1, 1], data)
}

/// 1x1 conv weight of shape C x C x 1 x 1 equal to the identity.
pub fn identity_conv1x1(c: usize) -> Tensor {
    let mut data = vec![0.0; c * c];
    for o in 0..c {
        data[o * c + o] = 1.0;
    }
    from_vec(&[c, c, 1, 1], data)
}

pub fn constant(shape: &[usize], v: f64) -> Tensor {
    let n: usize = shape.iter().product();
    from_vec(shape, vec![v; n])
}
