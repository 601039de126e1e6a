//! Floating point abstraction shared by the encoding, field, renderer and trainer.
//!
//! Training and serving run in `f32`; gradient verification runs the same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Scalar type the learnable parameters and all per-sample math are generic over.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Bit width of the type, used in diagnostics and archive checks.
    const BITS: u32;

    /// Lossless for `f64`, rounding for `f32`.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Row/column strided `c = alpha * a * b + beta * c` (see `matrixmultiply`).
    ///
    /// # Safety
    /// The strides and dimensions must describe memory inside the given pointers.
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

impl Scalar for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
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
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
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
}

/// `y[n x out] = x[n x in] * w[in x out] + b`, all row-major.
pub(crate) fn linear_forward<S: Scalar>(
    x: &[S],
    rows: usize,
    fan_in: usize,
    fan_out: usize,
    w: &[S],
    b: &[S],
    y: &mut [S],
) {
    assert_eq!(x.len(), rows * fan_in);
    assert_eq!(w.len(), fan_in * fan_out);
    assert_eq!(b.len(), fan_out);
    assert_eq!(y.len(), rows * fan_out);
    if rows == 0 {
        return;
    }
    for row in y.chunks_exact_mut(fan_out) {
        row.copy_from_slice(b);
    }
    unsafe {
        S::gemm(
            rows,
            fan_in,
            fan_out,
            S::one(),
            x.as_ptr(),
            fan_in as isize,
            1,
            w.as_ptr(),
            fan_out as isize,
            1,
            S::one(),
            y.as_mut_ptr(),
            fan_out as isize,
            1,
        );
    }
}

/// Accumulates `dw += x^T dy`, `db += colsum(dy)` and optionally writes `dx = dy w^T`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward<S: Scalar>(
    x: &[S],
    dy: &[S],
    rows: usize,
    fan_in: usize,
    fan_out: usize,
    w: &[S],
    dw: &mut [S],
    db: &mut [S],
    dx: Option<&mut [S]>,
) {
    assert_eq!(x.len(), rows * fan_in);
    assert_eq!(dy.len(), rows * fan_out);
    assert_eq!(dw.len(), fan_in * fan_out);
    assert_eq!(db.len(), fan_out);
    if rows == 0 {
        return;
    }
    unsafe {
        S::gemm(
            fan_in,
            rows,
            fan_out,
            S::one(),
            x.as_ptr(),
            1,
            fan_in as isize,
            dy.as_ptr(),
            fan_out as isize,
            1,
            S::one(),
            dw.as_mut_ptr(),
            fan_out as isize,
            1,
        );
    }
    for row in dy.chunks_exact(fan_out) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    if let Some(dx) = dx {
        assert_eq!(dx.len(), rows * fan_in);
        unsafe {
            S::gemm(
                rows,
                fan_out,
                fan_in,
                S::one(),
                dy.as_ptr(),
                fan_out as isize,
                1,
                w.as_ptr(),
                1,
                fan_out as isize,
                S::zero(),
                dx.as_mut_ptr(),
                fan_in as isize,
                1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], rows: usize, fi: usize, fo: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; rows * fo];
        for r in 0..rows {
            for o in 0..fo {
                let mut acc = b[o];
                for i in 0..fi {
                    acc += x[r * fi + i] * w[i * fo + o];
                }
                y[r * fo + o] = acc;
            }
        }
        y
    }

    #[test]
    fn linear_matches_naive_loops() {
        let (rows, fi, fo) = (5, 3, 4);
        let x: Vec<f64> = (0..rows * fi).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..fi * fo).map(|i| (i as f64 * 0.91).cos()).collect();
        let b: Vec<f64> = (0..fo).map(|i| i as f64 * 0.1).collect();
        let mut y = vec![0.0; rows * fo];
        linear_forward(&x, rows, fi, fo, &w, &b, &mut y);
        let expect = naive(&x, rows, fi, fo, &w, &b);
        for (a, e) in y.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }

        let dy: Vec<f64> = (0..rows * fo).map(|i| (i as f64 * 0.13).sin()).collect();
        let mut dw = vec![0.0; fi * fo];
        let mut db = vec![0.0; fo];
        let mut dx = vec![0.0; rows * fi];
        linear_backward(&x, &dy, rows, fi, fo, &w, &mut dw, &mut db, Some(&mut dx));
        for i in 0..fi {
            for o in 0..fo {
                let e: f64 = (0..rows).map(|r| x[r * fi + i] * dy[r * fo + o]).sum();
                assert!((dw[i * fo + o] - e).abs() < 1e-12);
            }
        }
        for r in 0..rows {
            for i in 0..fi {
                let e: f64 = (0..fo).map(|o| dy[r * fo + o] * w[i * fo + o]).sum();
                assert!((dx[r * fi + i] - e).abs() < 1e-12);
            }
        }
        for o in 0..fo {
            let e: f64 = (0..rows).map(|r| dy[r * fo + o]).sum();
            assert!((db[o] - e).abs() < 1e-12);
        }
    }
}
