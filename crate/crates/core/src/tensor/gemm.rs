/// Strided view of a row-major buffer: `(row_stride, col_stride)`.
pub(crate) type Strides = (isize, isize);

pub(crate) const ROW_MAJOR: fn(usize) -> Strides = |cols| (cols as isize, 1);
pub(crate) const TRANSPOSED: fn(usize) -> Strides = |cols| (1, cols as isize);

/// `c = a·b + beta·c` for an `m×k` view `a`, `k×n` view `b`, and row-major
/// `m×n` output `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
) {
    assert!(span(m, k, sa) <= a.len(), "gemm: lhs view out of bounds");
    assert!(span(k, n, sb) <= b.len(), "gemm: rhs view out of bounds");
    assert_eq!(c.len(), m * n, "gemm: output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0,
            sa.1,
            b.as_ptr(),
            sb.0,
            sb.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn span(rows: usize, cols: usize, s: Strides) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
}
