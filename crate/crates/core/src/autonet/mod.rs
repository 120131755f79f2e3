//! A small eager reverse-mode tensor engine.
//!
//! Forward ops are recorded on a [`Tape`] in execution order; a single
//! [`Tape::backward`] call walks the record in reverse and returns the
//! accumulated [`Grads`]. Tensors are dense, row-major, and channels-first
//! for volumes (`[C, D, H, W]`). Everything is generic over [`Real`] so the
//! same model code runs in `f32` for training and in `f64` under the
//! finite-difference checker.

mod conv;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use optim::{Adam, AdamConfig, AdamState};
pub use params::{
    kaiming_uniform, read_dckpt, read_dckpt_bytes, write_dckpt, write_dckpt_bytes, ParamStore,
};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

/// Floating-point element type of the engine.
pub trait Real:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `C = alpha * A·B + beta * C` on strided row/column layouts.
    ///
    /// # Safety
    /// The strides and extents must describe in-bounds views of the slices.
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
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
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
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
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
}

/// Row-major `[m, k] · [k, n]` into `out` (`beta = 0`) or accumulating
/// into it (`accumulate = true`).
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
    out: &mut [T],
    accumulate: bool,
) {
    matmul_ld(m, k, n, a, b, out, n, accumulate)
}

/// [`matmul`] into a row-major output whose rows are `ldc` apart.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_ld<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: (&[T], isize, isize),
    b: (&[T], isize, isize),
    out: &mut [T],
    ldc: usize,
    accumulate: bool,
) {
    assert!(ldc >= n);
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() >= (m - 1) * ldc + n);
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs
    };
    if k > 0 {
        assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0);
        assert!((span(m, k, a.1, a.2) as usize) < a.0.len());
        assert!((span(k, n, b.1, b.2) as usize) < b.0.len());
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            for r in 0..m {
                out[r * ldc..r * ldc + n].fill(T::zero());
            }
        }
        return;
    }
    // SAFETY: callers pass slices whose strided extents cover m×k and k×n.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            out.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}
