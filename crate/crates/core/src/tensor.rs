//! Dense row-major tensors.
//!
//! A [`Tensor`] is an immutable value: the buffer lives behind an `Arc`, so
//! cloning is cheap and every operation produces a fresh tensor. Element
//! precision is a type parameter bounded by [`Scalar`]; `f32` is used for
//! training and the `f64` instantiation backs every gradient oracle.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{KinoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn tag(self) -> &'static str {
        match self {
            Precision::Single => "f32",
            Precision::Double => "f64",
        }
    }
}

/// Element type of a tensor.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn lit(v: f64) -> Self;

    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping buffers for
    /// the given `m`, `k`, `n`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Elementwise `exp` over a buffer.
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }
}

/// Branch-free single-precision `exp` (range reduction by `ln 2`, degree-6
/// polynomial); max relative error about 2 ulp. Inputs are clamped to the
/// normal range of `f32`.
#[inline(always)]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_4;
    const C2: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.3, 88.3);
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    // the rounded integer sits in the low mantissa bits of `shifted`
    let ni = shifted.to_bits() as i32 - ROUND.to_bits() as i32;
    let r = x - n * C1 - n * C2;
    let z = r * r;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let y = p * z + r + 1.0;
    y * f32::from_bits(((ni + 127) << 23) as u32)
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
    const BYTES: usize = 4;

    fn lit(v: f64) -> Self {
        v as f32
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }

    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = exp_f32(*x);
        }
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
    const BYTES: usize = 8;

    fn lit(v: f64) -> Self {
        v
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("precision", &T::PRECISION)
            .field("head", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, validating the shape against the buffer and rejecting
    /// non-finite elements.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if numel_of(&shape) != data.len() {
            return Err(KinoError::InvalidShape {
                shape,
                reason: format!("buffer holds {} elements", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(KinoError::NonFinite {
                op: "Tensor::new",
                index,
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    /// Internal constructor for kernels whose output is checked by the caller.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len(), "shape {shape:?}");
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_raw(Vec::new(), vec![v])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let n = numel_of(&shape);
        Self::new(shape, vec![v; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        let data = (0..numel_of(&shape)).map(f).collect();
        Self::new(shape, data)
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_fn([n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.as_ref().clone()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| shared.as_ref().clone())
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(KinoError::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank");
        let flat = index
            .iter()
            .zip(self.strides())
            .zip(&self.shape)
            .map(|((&i, s), &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum::<usize>();
        self.data[flat]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        validate_shape(&shape)?;
        if numel_of(&shape) != self.numel() {
            return Err(KinoError::shape("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(KinoError::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Self::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_raw(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        )
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(KinoError::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max))
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(KinoError::NonFinite { op, index }),
            None => Ok(()),
        }
    }

    pub(crate) fn make_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }

    /// In-place `self += other` (shapes must match).
    pub(crate) fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "gradient accumulation shape");
        let dst = self.make_mut();
        for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s;
        }
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(KinoError::Argument(format!(
                "invalid permutation {axes:?} for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = self.strides();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let mut out = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let last = rank - 1;
        let inner = out_shape[last];
        let inner_stride = src_strides[last];
        let mut base = 0usize;
        while out.len() < n {
            let src = &self.data[..];
            for j in 0..inner {
                out.push(src[base + j * inner_stride]);
            }
            // advance the multi-index over all but the last axis
            let mut ax = last;
            while ax > 0 {
                ax -= 1;
                idx[ax] += 1;
                base += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                base -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_raw(out_shape, out))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(KinoError::Argument(format!(
                "narrow(axis={axis}, start={start}, len={len}) on {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * dim + start) * inner;
            out.extend_from_slice(&self.data[from..from + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_raw(shape, out))
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| KinoError::Argument("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(KinoError::Argument(format!(
                "concat axis {axis} for rank {}",
                first.rank()
            )));
        }
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(KinoError::shape("concat", &first.shape, &p.shape));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self::from_raw(shape, out))
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(KinoError::InvalidShape {
            shape: shape.to_vec(),
            reason: "dimensions must be positive".into(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_mismatched_buffer_and_non_finite() {
        assert!(Tensor::<f32>::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
        let err = Tensor::<f64>::new([2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, KinoError::NonFinite { index: 1, .. }));
    }

    #[test]
    fn fast_exp_tracks_libm() {
        let mut worst = 0f64;
        let mut x = -87.0f32;
        while x < 88.0 {
            let rel = ((exp_f32(x) as f64) - (x as f64).exp()).abs() / (x as f64).exp();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 5e-7, "{worst}");
        assert_eq!(exp_f32(0.0), 1.0);
        assert!(exp_f32(-1e6) > 0.0);
    }

    #[test]
    fn permute_matches_index_formula() {
        let t = Tensor::<f64>::from_fn([2, 3, 4], |i| i as f64).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), t.at(&[a, b, c]));
                }
            }
        }
    }

    #[test]
    fn narrow_concat_round_trip() {
        let t = Tensor::<f32>::from_fn([2, 5, 3], |i| i as f32).unwrap();
        let a = t.narrow(1, 0, 1).unwrap();
        let b = t.narrow(1, 1, 4).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
    }

    proptest! {
        #[test]
        fn reshape_round_trip(dims in proptest::collection::vec(1usize..5, 1..4)) {
            let n: usize = dims.iter().product();
            let t = Tensor::<f32>::from_fn(dims.clone(), |i| i as f32).unwrap();
            let flat = t.reshape([n]).unwrap();
            prop_assert_eq!(flat.reshape(dims).unwrap(), t);
        }

        #[test]
        fn permute_then_inverse_is_identity(perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle()) {
            let t = Tensor::<f64>::from_fn([2, 3, 1, 4], |i| i as f64 * 0.5).unwrap();
            let mut inverse = vec![0; 4];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let back = t.permute(&perm).unwrap().permute(&inverse).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
