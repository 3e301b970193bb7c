//! Dense rank-4 tensors and the differentiable spatial kernels built on them.
//!
//! Every tensor is laid out `(batch, channels, height, width)` in row-major
//! order with width fastest. Kernels are pure functions; the only internal
//! parallelism is over independent frames, so results do not depend on the
//! size of the rayon pool.

mod conv;
mod gemm;
mod pool;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

pub use conv::{conv2d_backward, conv2d_forward, deconv2d_backward, deconv2d_forward, ConvGrads, ConvParams};
pub(crate) use conv::{conv2d_backward_opts, deconv2d_backward_opts};
pub use pool::{maxpool2x2, maxpool2x2_backward, PoolIndices};

/// Floating-point element type usable by every kernel.
///
/// Training runs in `f32`; gradient checks instantiate the same code with `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    /// `c ← alpha·a·b + beta·c` over strided row/column layouts.
    ///
    /// # Safety
    /// Every element addressed by the dimensions and strides must lie inside
    /// the corresponding allocation, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Tensor dimensions `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape4 {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape4 {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Elements in one batch item.
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn with_batch(self, batch: usize) -> Self {
        Shape4 { batch, ..self }
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape4 { channels, ..self }
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.batch, self.channels, self.height, self.width)
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor4<S = f32> {
    shape: Shape4,
    data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor4<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor4")
            .field("shape", &self.shape)
            .field("data", &preview)
            .finish()
    }
}

impl<S: Scalar> Tensor4<S> {
    pub fn zeros(shape: Shape4) -> Result<Self> {
        Self::filled(shape, S::zero())
    }

    pub fn filled(shape: Shape4, value: S) -> Result<Self> {
        check_dims(shape)?;
        Ok(Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn from_vec(shape: Shape4, data: Vec<S>) -> Result<Self> {
        check_dims(shape)?;
        if data.len() != shape.numel() {
            return Err(Error::shape("Tensor4::from_vec", shape, data.len()));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> S) -> Result<Self> {
        check_dims(shape)?;
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Ok(Tensor4 { shape, data })
    }

    pub(crate) fn zeros_unchecked(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![S::zero(); shape.numel()],
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((n * s.channels + c) * s.height + y) * s.width + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.index(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn frame(&self, n: usize) -> &[S] {
        let len = self.shape.frame_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn frame_mut(&mut self, n: usize) -> &mut [S] {
        let len = self.shape.frame_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Copies batch items `start..start + count` into a new tensor.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.shape.batch {
            return Err(Error::shape("Tensor4::slice_batch", self.shape, (start, count)));
        }
        let len = self.shape.frame_len();
        Ok(Tensor4 {
            shape: self.shape.with_batch(count),
            data: self.data[start * len..(start + count) * len].to_vec(),
        })
    }

    /// Stacks tensors with equal `(C, H, W)` along the batch axis.
    pub fn stack(items: &[&Tensor4<S>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::precondition("Tensor4::stack", "no tensors to stack"))?;
        let frame = first.shape.with_batch(1);
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut batch = 0;
        for t in items {
            if t.shape.with_batch(1) != frame {
                return Err(Error::shape("Tensor4::stack", first.shape, t.shape));
            }
            batch += t.shape.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            shape: frame.with_batch(batch),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.same_shape("Tensor4::zip_map", other)?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape("Tensor4::add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, by: S) {
        for v in &mut self.data {
            *v *= by;
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    /// Inner product accumulated in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.same_shape("Tensor4::dot", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.to_f64().unwrap_or(f64::NAN) * b.to_f64().unwrap_or(f64::NAN))
            .sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape("Tensor4::max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::NAN))
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> Tensor4<T> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(T::nan))
                .collect(),
        }
    }

    /// Horizontal mirror of every plane.
    pub fn flip_horizontal(&self) -> Self {
        let s = self.shape;
        let mut out = self.clone();
        for row in out.data.chunks_mut(s.width) {
            row.reverse();
        }
        debug_assert_eq!(out.shape, s);
        out
    }

    fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, self.shape, other.shape));
        }
        Ok(())
    }
}

fn check_dims(shape: Shape4) -> Result<()> {
    if shape.batch == 0 || shape.channels == 0 || shape.height == 0 || shape.width == 0 {
        return Err(Error::precondition("Tensor4", format!("all dimensions must be >= 1, got {shape}")));
    }
    Ok(())
}

/// Concatenates along the channel axis, `a` first.
pub fn concat_channels<S: Scalar>(a: &Tensor4<S>, b: &Tensor4<S>) -> Result<Tensor4<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
        return Err(Error::shape("concat_channels", sa, sb));
    }
    let out_shape = sa.with_channels(sa.channels + sb.channels);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..sa.batch {
        data.extend_from_slice(a.frame(n));
        data.extend_from_slice(b.frame(n));
    }
    Tensor4::from_vec(out_shape, data)
}

/// Splits a cotangent of `concat_channels` back into the two operand ranges.
pub fn concat_channels_backward<S: Scalar>(
    grad_out: &Tensor4<S>,
    a_channels: usize,
) -> Result<(Tensor4<S>, Tensor4<S>)> {
    let s = grad_out.shape();
    if a_channels == 0 || a_channels >= s.channels {
        return Err(Error::shape("concat_channels_backward", s, a_channels));
    }
    let plane = s.plane_len();
    let a_len = a_channels * plane;
    let mut ga = Vec::with_capacity(s.batch * a_len);
    let mut gb = Vec::with_capacity(s.numel() - s.batch * a_len);
    for n in 0..s.batch {
        let frame = grad_out.frame(n);
        ga.extend_from_slice(&frame[..a_len]);
        gb.extend_from_slice(&frame[a_len..]);
    }
    Ok((
        Tensor4::from_vec(s.with_channels(a_channels), ga)?,
        Tensor4::from_vec(s.with_channels(s.channels - a_channels), gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: Shape4) -> Tensor4<f64> {
        let n = shape.numel();
        Tensor4::from_vec(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn rejects_zero_dims_and_bad_lengths() {
        assert!(Tensor4::<f32>::zeros(Shape4::new(1, 0, 2, 2)).is_err());
        assert!(Tensor4::<f32>::from_vec(Shape4::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn concat_shape_arithmetic() {
        let a = seq(Shape4::new(1, 2, 4, 4));
        let b = seq(Shape4::new(1, 3, 4, 4));
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), Shape4::new(1, 5, 4, 4));
        assert_eq!(c.get(0, 1, 3, 3), a.get(0, 1, 3, 3));
        assert_eq!(c.get(0, 2, 0, 0), b.get(0, 0, 0, 0));
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = seq(Shape4::new(1, 2, 4, 4));
        let b = seq(Shape4::new(1, 3, 2, 4));
        assert!(matches!(concat_channels(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_backward_splits_unchanged() {
        let g = seq(Shape4::new(2, 5, 3, 3));
        let (ga, gb) = concat_channels_backward(&g, 2).unwrap();
        assert_eq!(ga.shape().channels, 2);
        assert_eq!(gb.shape().channels, 3);
        assert_eq!(concat_channels(&ga, &gb).unwrap(), g);
    }

    #[test]
    fn stack_and_slice_roundtrip() {
        let a = seq(Shape4::new(2, 1, 2, 2));
        let b = seq(Shape4::new(1, 1, 2, 2));
        let s = Tensor4::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape().batch, 3);
        assert_eq!(s.slice_batch(0, 2).unwrap(), a);
        assert_eq!(s.slice_batch(2, 1).unwrap(), b);
    }
}
