//! Dense NCHW tensors and the shape primitives the network is built from.
//!
//! Storage is row-major over `(n, c, h, w)`. Every reduction in this crate
//! walks the data in a fixed sequential order so results are reproducible
//! bit-for-bit across runs.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scalar type usable as tensor storage. Model state lives in `f32`; the
/// gradient checks instantiate the same code with `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength { len: usize, shape: Shape, expected: usize },
}

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

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![T::zero(); shape.len()] }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.len() {
            return Err(TensorError::DataLength { len: data.len(), shape, expected: shape.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.len());
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
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    /// The `h × w` plane of sample `n`, channel `c`.
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

    /// All channels of sample `n` as one contiguous slice.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-sample tensors of equal `(c, h, w)` along `n`.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Self, TensorError> {
        let first = items.first().ok_or_else(|| TensorError::ShapeMismatch("cannot stack zero tensors".into()))?.shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(TensorError::ShapeMismatch(format!("stack {} with {}", first, s)));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: Shape::new(n, first.c, first.h, first.w), data })
    }
}

/// Surrounds every plane with `pad` rows and columns of zeros.
pub fn zero_pad2d<T: Real>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    if pad == 0 {
        return x.clone();
    }
    let s = x.shape;
    let out_shape = Shape::new(s.n, s.c, s.h + 2 * pad, s.w + 2 * pad);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..s.h {
                let d = (y + pad) * out_shape.w + pad;
                dst[d..d + s.w].copy_from_slice(&src[y * s.w..(y + 1) * s.w]);
            }
        }
    }
    out
}

/// Inverse of [`zero_pad2d`]: drops `pad` rows and columns from each border.
pub fn crop_pad2d<T: Real>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    if pad == 0 {
        return x.clone();
    }
    let s = x.shape;
    let out_shape = Shape::new(s.n, s.c, s.h - 2 * pad, s.w - 2 * pad);
    let mut out = Tensor::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..out_shape.h {
                let o = (y + pad) * s.w + pad;
                dst[y * out_shape.w..(y + 1) * out_shape.w].copy_from_slice(&src[o..o + out_shape.w]);
            }
        }
    }
    out
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (sa, sb) = (a.shape, b.shape);
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(TensorError::ShapeMismatch(format!("concat {} with {}", sa, sb)));
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out_shape.len());
    for n in 0..sa.n {
        data.extend_from_slice(a.sample(n));
        data.extend_from_slice(b.sample(n));
    }
    Ok(Tensor { shape: out_shape, data })
}

/// Splits channels `[0, at)` and `[at, c)` into two tensors.
pub fn split_channels<T: Real>(x: &Tensor<T>, at: usize) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let s = x.shape;
    if at > s.c {
        return Err(TensorError::ShapeMismatch(format!("split at channel {} of {}", at, s)));
    }
    let p = s.plane();
    let mut a = Vec::with_capacity(s.n * at * p);
    let mut b = Vec::with_capacity(s.n * (s.c - at) * p);
    for n in 0..s.n {
        let sample = x.sample(n);
        a.extend_from_slice(&sample[..at * p]);
        b.extend_from_slice(&sample[at * p..]);
    }
    Ok((
        Tensor { shape: Shape::new(s.n, at, s.h, s.w), data: a },
        Tensor { shape: Shape::new(s.n, s.c - at, s.h, s.w), data: b },
    ))
}

/// Rescales a grid to `[0, 1]`. A constant grid maps to all zeros.
pub fn minmax_normalize<T: Real>(values: &[T]) -> Vec<T> {
    let (lo, hi) = values.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if values.is_empty() || !(range > T::zero()) {
        return vec![T::zero(); values.len()];
    }
    values.iter().map(|&v| (v - lo) / range).collect()
}
