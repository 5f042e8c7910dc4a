//! Dense f64 tensors with reverse-mode gradient accumulation.
//!
//! Everything trainable in this crate (feature extractor, gate, decoder)
//! runs on the explicit computation tape in [`tape`]. 64-bit floats keep
//! finite-difference gradient checks tight at toy scale.

mod checkpoint;
pub mod gradcheck;
mod tape;

pub use checkpoint::{
    load_checkpoint, load_into_param_set, save_checkpoint, save_param_set, CheckpointError,
    CHECKPOINT_MAGIC,
};
pub use tape::{Tape, Var};

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Errors from tensor construction, tape operations, and parameter updates.
#[derive(Debug, Clone, PartialEq)]
pub enum NumericsError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand had an unusable shape (wrong rank, empty, ...).
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    /// Index (class target, slice bound, ...) out of range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    /// Data buffer length does not match product of the shape.
    DataLength { shape: Vec<usize>, len: usize },
    /// Backward was asked to start from a non-scalar value.
    NotScalar { shape: Vec<usize> },
    /// A parameter was stepped without a populated gradient.
    MissingGrad { name: String },
    /// Two parameters were registered under the same name.
    DuplicateName { name: String },
    /// Class weights must be positive and cover every class.
    BadClassWeights { detail: String },
}

impl fmt::Display for NumericsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NumericsError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            NumericsError::InvalidShape { op, shape, detail } => {
                write!(f, "{op}: invalid shape {shape:?}: {detail}")
            }
            NumericsError::IndexOutOfRange { op, index, len } => {
                write!(f, "{op}: index {index} out of range for length {len}")
            }
            NumericsError::DataLength { shape, len } => {
                write!(f, "data length {len} does not match shape {shape:?}")
            }
            NumericsError::NotScalar { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            NumericsError::MissingGrad { name } => {
                write!(f, "parameter '{name}' has no gradient")
            }
            NumericsError::DuplicateName { name } => {
                write!(f, "parameter name '{name}' already registered")
            }
            NumericsError::BadClassWeights { detail } => {
                write!(f, "bad class weights: {detail}")
            }
        }
    }
}

impl std::error::Error for NumericsError {}

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::from_vec(vec![1], vec![x]).unwrap()
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_vec(vec![n], data).unwrap()
    }

    /// Column vector, shape `[n, 1]`.
    pub fn col(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_vec(vec![n, 1], data).unwrap()
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        Tensor::from_vec(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Rows of a rank-2 tensor; rank-1 tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

/// Opaque handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Registry of uniquely named parameters for one model family.
///
/// Models hold `ParamId`s; the set owns values and gradients. Keeping one
/// flat registry makes checkpointing and stage freezing (update only the
/// ids you pass to [`sgd_step`]) straightforward.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, NumericsError> {
        if self.by_name.contains_key(name) {
            return Err(NumericsError::DuplicateName {
                name: name.to_string(),
            });
        }
        let id = self.params.len();
        self.by_name.insert(name.to_string(), id);
        self.params.push(Parameter {
            name: name.to_string(),
            value: value.with_grad(),
        });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.value.clear_grad();
        }
    }

    /// Total element count over the given ids.
    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.value(*id).numel()).sum()
    }

    /// Deep copy of the listed parameter values (for rollback on divergence).
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<(ParamId, Tensor)> {
        ids.iter().map(|id| (*id, self.value(*id).clone())).collect()
    }

    pub fn restore(&mut self, snap: &[(ParamId, Tensor)]) {
        for (id, value) in snap {
            self.params[id.0].value = value.clone();
        }
    }

    /// FNV-1a over the little-endian bytes of every value, in name order.
    ///
    /// Stable across runs, so identical training runs produce identical
    /// checksums bit for bit.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for idx in self.by_name.values() {
            let p = &self.params[*idx];
            mix(p.name.as_bytes());
            for x in p.value.data() {
                mix(&x.to_le_bytes());
            }
        }
        h
    }
}

/// One plain gradient-descent step over the listed parameters.
///
/// `value <- value - lr * grad`, then grads are cleared. Every listed
/// parameter must carry a gradient.
pub fn sgd_step(params: &mut ParamSet, ids: &[ParamId], lr: f64) -> Result<(), NumericsError> {
    for id in ids {
        if params.value(*id).grad().is_none() {
            return Err(NumericsError::MissingGrad {
                name: params.get(*id).name.clone(),
            });
        }
    }
    for id in ids {
        let t = &mut params.get_mut(*id).value;
        let grad = t.grad.take().expect("checked above");
        for (v, g) in t.data.iter_mut().zip(&grad) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(params: &mut ParamSet, ids: &[ParamId], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for id in ids {
        if let Some(g) = params.value(*id).grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for id in ids {
            if let Some(g) = params.get_mut(*id).value.grad.as_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }
    norm
}

/// Uniform init in `±1/sqrt(fan_in)`; the convention everywhere in this crate.
pub fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn init_vector(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Tensor {
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::vector(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn from_vec_rejects_bad_length() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, NumericsError::DataLength { .. }));
    }

    #[test]
    fn sgd_single_step() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::scalar(1.0)).unwrap();
        ps.get_mut(id).value.accumulate_grad(&[2.0]);
        sgd_step(&mut ps, &[id], 0.1).unwrap();
        assert_eq!(ps.value(id).data(), &[0.8]);
        assert!(ps.value(id).grad().is_none());
    }

    #[test]
    fn sgd_zero_lr_keeps_values() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::vector(vec![1.0, -2.0])).unwrap();
        ps.get_mut(id).value.accumulate_grad(&[5.0, 5.0]);
        sgd_step(&mut ps, &[id], 0.0).unwrap();
        assert_eq!(ps.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_two_steps_on_square() {
        // f(x) = x^2, f'(x) = 2x, lr 0.1: each step multiplies x by 0.8,
        // so from x = 1 two steps land on 0.64.
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::scalar(1.0)).unwrap();
        for _ in 0..2 {
            let x = ps.value(id).data()[0];
            ps.get_mut(id).value.accumulate_grad(&[2.0 * x]);
            sgd_step(&mut ps, &[id], 0.1).unwrap();
        }
        let x = ps.value(id).data()[0];
        assert!((x - 0.64).abs() < 1e-12);
    }

    #[test]
    fn sgd_missing_grad_names_parameter() {
        let mut ps = ParamSet::new();
        let id = ps.add("epfe.b", Tensor::scalar(1.0)).unwrap();
        let err = sgd_step(&mut ps, &[id], 0.1).unwrap_err();
        assert_eq!(
            err,
            NumericsError::MissingGrad {
                name: "epfe.b".into()
            }
        );
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::scalar(0.0)).unwrap();
        assert!(matches!(
            ps.add("w", Tensor::scalar(1.0)),
            Err(NumericsError::DuplicateName { .. })
        ));
    }

    #[test]
    fn checksum_is_order_independent_but_value_sensitive() {
        let mut a = ParamSet::new();
        a.add("w1", Tensor::scalar(1.0)).unwrap();
        a.add("w2", Tensor::scalar(2.0)).unwrap();
        let mut b = ParamSet::new();
        b.add("w2", Tensor::scalar(2.0)).unwrap();
        b.add("w1", Tensor::scalar(1.0)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        b.get_mut(b.id_of("w1").unwrap()).value.data_mut()[0] = 1.5;
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn init_bound_respects_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = init_matrix(&mut rng, 8, 16);
        let bound = 1.0 / 4.0;
        assert!(t.data().iter().all(|x| x.abs() < bound));
    }
}
