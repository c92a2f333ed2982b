//! Dense tensors, a parameter registry, and a reverse-mode autodiff tape.
//!
//! Every quantity in the pipeline is a row-major [`Tensor`]. Differentiable
//! computation is recorded on a [`Tape`] built fresh for each forward pass;
//! parameters enter the tape as leaves borrowed (by `Arc`) from a
//! [`ParamStore`], and gradients flow back into the store with
//! [`ParamStore::accumulate_grads`].

mod gemm;
pub mod gradcheck;
mod params;
mod tape;
#[cfg(test)]
mod tape_tests;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};

pub use params::{Param, ParamStore};
pub use tape::{AttnSegment, KvPast, Tape, Var};

/// Floating point element type. Implemented for `f32` (training default)
/// and `f64` (gradient checks and oracles).
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const BYTES: usize;
    const NAME: &'static str;

    #[doc(hidden)]
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

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64c(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("finite constant")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {
    const BYTES: usize = 4;
    const NAME: &'static str = "f32";

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const BYTES: usize = 8;
    const NAME: &'static str = "f64";

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

pub(crate) use gemm::{gemm, MatRef};

/// Dense row-major array with optional gradient buffer.
#[derive(Clone)]
pub struct Tensor<F: Float> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Float> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl<F: Float> PartialEq for Tensor<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); n]).expect("valid shape")
    }

    /// Gaussian entries with mean 0 and the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| F::from_f64c(dist.sample(rng))).collect();
        Tensor::new(shape, data).expect("valid shape")
    }

    pub fn scalar(x: F) -> Self {
        Tensor::new(&[1], vec![x]).expect("scalar")
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&x| F::from_f64c(x)).collect())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<F>>) -> Self {
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<F>> {
        &self.data
    }

    /// Mutable access to the values. Copies the buffer first if a live
    /// tape still shares it.
    pub fn data_mut(&mut self) -> &mut [F] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[F] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols() + j]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.as_f64()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(shape_err("reshape", &self.shape, shape));
        }
        Ok(Tensor::from_arc(shape.to_vec(), self.data.clone()))
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor::from_arc(
            self.shape.clone(),
            Arc::new(self.data.iter().map(|x| G::from_f64c(x.as_f64())).collect()),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Param(format!(
            "shape must be a non-empty list of positive sizes, got {shape:?}"
        )));
    }
    Ok(())
}

/// Row-wise `softmax(x / tau)` over the last dimension, without recording.
pub fn softmax_rows<F: Float>(x: &[F], cols: usize, tau: F) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_into(src, dst, tau);
    }
    out
}

pub(crate) fn softmax_into<F: Float>(src: &[F], dst: &mut [F], tau: F) {
    let max = src.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = ((s - max) / tau).exp();
        *d = e;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// Row-wise `log_softmax(x / tau)` over the last dimension.
pub fn log_softmax_rows<F: Float>(x: &[F], cols: usize, tau: F) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = src
            .iter()
            .map(|&s| ((s - max) / tau).exp())
            .sum::<F>()
            .ln();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max) / tau - lse;
        }
    }
    out
}
