//! Dense 4-D tensors in `(batch, channel, height, width)` layout.
//!
//! Everything the networks touch is a 4-D tensor; scalars are `1×1×1×1`.
//! The element type is generic so the same code runs in `f32` for training
//! and in `f64` for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` literal; never fails for finite inputs.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8>;

    fn from_le_chunk(bytes: &[u8]) -> Self;

    /// `C = A·B + beta·C` for row/column-strided `A (m×k)`, `B (k×n)`,
    /// `C (m×n)`. Strides are `(row, col)` in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        beta: Self,
        c: &mut [Self],
        sc: (usize, usize),
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, s: (usize, usize)) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * s.0 + (cols - 1) * s.1 < len, "gemm operand out of bounds");
    }
}

/// Storage precision tag, persisted in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_chunk(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        beta: Self,
        c: &mut [Self],
        sc: (usize, usize),
    ) {
        check_extent(a.len(), m, k, sa);
        check_extent(b.len(), k, n, sb);
        check_extent(c.len(), m, n, sc);
        // SAFETY: every addressed element lies inside its slice (checked above).
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                beta,
                c.as_mut_ptr(),
                sc.0 as isize,
                sc.1 as isize,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn to_le_bytes_vec(values: &[Self]) -> Vec<u8> {
        values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    fn from_le_chunk(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (usize, usize),
        b: &[Self],
        sb: (usize, usize),
        beta: Self,
        c: &mut [Self],
        sc: (usize, usize),
    ) {
        check_extent(a.len(), m, k, sa);
        check_extent(b.len(), k, n, sb);
        check_extent(c.len(), m, n, sc);
        // SAFETY: every addressed element lies inside its slice (checked above).
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                beta,
                c.as_mut_ptr(),
                sc.0 as isize,
                sc.1 as isize,
            );
        }
    }
}

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn with_channels(self, c: usize) -> Self {
        Self { c, ..self }
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Self { h, w, ..self }
    }
}

impl Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Panics if `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(
            shape.numel(),
            data.len(),
            "tensor data length does not match shape {shape}"
        );
        Self { shape, data }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// The value of a `1×1×1×1` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Selects batch items `[start, start + len)`.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.shape.n, "batch range out of bounds");
        let item = self.shape.c * self.shape.plane();
        Self {
            shape: Shape { n: len, ..self.shape },
            data: self.data[start * item..(start + len) * item].to_vec(),
        }
    }

    /// Concatenates along the batch axis.
    pub fn stack_batch(parts: &[Self]) -> Self {
        assert!(!parts.is_empty(), "stack_batch of nothing");
        let first = parts[0].shape;
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
        let mut n = 0;
        for p in parts {
            assert_eq!(
                (p.shape.c, p.shape.h, p.shape.w),
                (first.c, first.h, first.w),
                "stack_batch shape mismatch"
            );
            n += p.shape.n;
            data.extend_from_slice(&p.data);
        }
        Self {
            shape: Shape { n, ..first },
            data,
        }
    }

    /// Repeats a batch-1 tensor `times` times along the batch axis.
    pub fn repeat_batch(&self, times: usize) -> Self {
        assert_eq!(self.shape.n, 1, "repeat_batch expects a single item");
        let mut data = Vec::with_capacity(self.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Self {
            shape: Shape { n: times, ..self.shape },
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Spatial size of a map at pyramid level `level` (1-based), i.e. the input
/// size scaled by `2^(1-level)`.
pub fn level_size(height: usize, width: usize, level: usize) -> (usize, usize) {
    let f = 1usize << (level - 1);
    (height / f, width / f)
}

/// Nearest-neighbour upsampling of a plain tensor by an integer factor.
pub fn upsample_nearest<T: Scalar>(t: &Tensor<T>, factor: usize) -> Tensor<T> {
    let s = t.shape();
    let out = s.with_spatial(s.h * factor, s.w * factor);
    Tensor::from_fn(out, |n, c, y, x| t.at(n, c, y / factor, x / factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_is_row_major_nchw() {
        let t = Tensor::<f64>::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f64
        });
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.index(1, 2, 3, 4)], 1234.0);
        assert_eq!(t.plane(1, 2)[3 * 5 + 4], 1234.0);
    }

    #[test]
    fn batch_helpers_round_trip() {
        let t = Tensor::<f32>::from_fn(Shape::new(3, 1, 2, 2), |n, _, y, x| (n * 4 + y * 2 + x) as f32);
        let a = t.narrow_batch(0, 1);
        let b = t.narrow_batch(1, 2);
        assert_eq!(Tensor::stack_batch(&[a.clone(), b]), t);
        assert_eq!(a.repeat_batch(2).narrow_batch(1, 1), a);
    }

    #[test]
    fn level_sizes_halve() {
        assert_eq!(level_size(64, 32, 1), (64, 32));
        assert_eq!(level_size(64, 32, 3), (16, 8));
    }

    #[test]
    fn upsample_copies_blocks() {
        let t = Tensor::<f64>::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]);
        let u = upsample_nearest(&t, 2);
        assert_eq!(u.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
