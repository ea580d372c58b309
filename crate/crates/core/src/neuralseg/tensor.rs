use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of network tensors. Training runs in `f32`;
/// gradient checks run in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must
    /// lie inside the corresponding buffer.
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

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl Real for f32 {
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

impl Real for f64 {
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

/// Which operand of a product is read transposed. All matrices are
/// row-major and contiguous.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Transpose {
    None,
    /// `a` is stored `k x m`.
    A,
    /// `b` is stored `n x k`.
    B,
}

/// `c (m x n) = op(a) * op(b) + (accumulate ? c : 0)`.
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    trans: Transpose,
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match trans {
        Transpose::A => (1, m as isize),
        _ => (k as isize, 1),
    };
    let (rsb, csb) = match trans {
        Transpose::B => (1, k as isize),
        _ => (n as isize, 1),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: sizes were asserted above and the strides describe dense
    // row-major storage of exactly those sizes.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

/// Activations laid out batch-major, then row-major, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor<T = f32> {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

/// `(batch, height, width, channels)`.
pub type Shape = (usize, usize, usize, usize);

impl<T: Real> FeatureTensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        let (batch, height, width, channels) = shape;
        Self {
            batch,
            height,
            width,
            channels,
            data: vec![T::zero(); batch * height * width * channels],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Self {
        let (batch, height, width, channels) = shape;
        assert_eq!(
            data.len(),
            batch * height * width * channels,
            "feature tensor data length mismatch"
        );
        Self {
            batch,
            height,
            width,
            channels,
            data,
        }
    }

    pub fn shape(&self) -> Shape {
        (self.batch, self.height, self.width, self.channels)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub fn idx(&self, n: usize, r: usize, c: usize, ch: usize) -> usize {
        ((n * self.height + r) * self.width + c) * self.channels + ch
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> FeatureTensor<U> {
        FeatureTensor {
            batch: self.batch,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().unwrap_or(0.0)))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &FeatureTensor<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
