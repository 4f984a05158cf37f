//! Dense row-major tensors, the deterministic generator and the
//! finite-difference gradient oracle shared by the rest of the crate.
//!
//! Tensors are generic over [`Real`]: training runs in `f32`, gradient
//! checks in `f64`. Matrix products go through `matrixmultiply`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Floating point scalar usable for tensors and network weights.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Name used in checkpoint headers and reports.
    const NAME: &'static str;

    /// `C = alpha * op(A) * op(B) + beta * C`, all operands row-major.
    ///
    /// `op(A)` is `m x k`; with `trans_a` the storage of `A` is `k x m`.
    /// Same for `B` (`k x n`, stored `n x k` when transposed).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

fn strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // storage of op(X) (rows x cols); transposed storage is cols x rows
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: A too short");
                assert!(b.len() >= k * n, "gemm: B too short");
                assert!(c.len() >= m * n, "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(trans_a, m, k);
                let (rsb, csb) = strides(trans_b, k, n);
                // SAFETY: the asserts above bound every index touched by the
                // kernel for the given dimensions and strides.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Dense n-dimensional array in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParam(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidParam(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn relu(&self) -> Self {
        self.map(|v| v.max(T::zero()))
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        elementwise(ElementwiseOp::Scale, self, Operand::Scalar(s))
    }

    pub fn clamp(&self, lo: T, hi: T) -> Result<Self> {
        elementwise(ElementwiseOp::Clamp { lo, hi }, self, Operand::None)
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        elementwise(ElementwiseOp::Add, self, Operand::Tensor(other))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        elementwise(ElementwiseOp::Sub, self, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        elementwise(ElementwiseOp::Mul, self, Operand::Tensor(other))
    }

    /// Converts between precisions.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(v: T) -> T {
    // both branches avoid overflow in exp
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Element-wise operation selector for [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp<T> {
    Add,
    Sub,
    Mul,
    Scale,
    Clamp { lo: T, hi: T },
    Relu,
    Sigmoid,
}

/// Second operand: a tensor of equal shape, a scalar, or nothing for unary ops.
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a, T> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
    None,
}

pub fn elementwise<T: Real>(
    op: ElementwiseOp<T>,
    a: &Tensor<T>,
    b: Operand<'_, T>,
) -> Result<Tensor<T>> {
    let binary = |f: &dyn Fn(T, T) -> T| -> Result<Vec<T>> {
        match b {
            Operand::Tensor(t) => {
                if t.shape != a.shape {
                    return Err(Error::shape(&a.shape, &t.shape));
                }
                Ok(a.data.iter().zip(&t.data).map(|(&x, &y)| f(x, y)).collect())
            }
            Operand::Scalar(s) => Ok(a.data.iter().map(|&x| f(x, s)).collect()),
            Operand::None => Err(Error::InvalidParam(format!(
                "{op:?} needs a second operand"
            ))),
        }
    };
    let data = match op {
        ElementwiseOp::Add => binary(&|x, y| x + y)?,
        ElementwiseOp::Sub => binary(&|x, y| x - y)?,
        ElementwiseOp::Mul | ElementwiseOp::Scale => binary(&|x, y| x * y)?,
        ElementwiseOp::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::InvalidParam(format!("clamp bounds {lo} > {hi}")));
            }
            a.data.iter().map(|&x| x.max(lo).min(hi)).collect()
        }
        ElementwiseOp::Relu => a.data.iter().map(|&x| x.max(T::zero())).collect(),
        ElementwiseOp::Sigmoid => a.data.iter().map(|&x| sigmoid(x)).collect(),
    };
    if let Some(i) = data.iter().position(|v: &T| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{op:?} produced element {i}")));
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    if !(h > T::zero()) {
        return Err(Error::InvalidParam(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((plus - minus) / two_h);
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: grad,
    })
}

/// Deterministic generator: ChaCha8 keyed from a 64-bit seed.
///
/// The stream depends only on the seed, so identical seeds reproduce
/// identical phantoms, splits, weights and shuffles on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a numbered sub-stream of this seed.
    pub fn derive(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<U>(&mut self, items: &mut [U]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
