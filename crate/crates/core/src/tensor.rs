use ndarray::{ArrayD, IxDyn};

/// All numerics run in f64: gradient checks against central finite
/// differences need the headroom, and desk-scale models are small enough
/// that the extra width costs nothing.
pub type Tensor = ArrayD<f64>;

pub fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

pub fn to_scalar(t: &Tensor) -> f64 {
    debug_assert_eq!(t.ndim(), 0, "expected a scalar tensor");
    *t.iter().next().expect("scalar tensor")
}

pub fn zeros(shape: &[usize]) -> Tensor {
    ArrayD::zeros(IxDyn(shape))
}

pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/data length mismatch")
}

/// Contiguous read access. Every tensor stored on the tape is owned and in
/// standard layout, so this never fails in practice.
pub fn slice_of(t: &Tensor) -> &[f64] {
    t.as_slice().expect("tensor not in standard layout")
}

pub fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a C x H x W tensor, got {:?}", s);
    (s[0], s[1], s[2])
}

pub fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected an H x W tensor, got {:?}", s);
    (s[0], s[1])
}
