/// `c = beta * c + a * b` for strided row/column layouts.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; each layout is given as
/// `(row_stride, col_stride)`. Strides must be non-negative and every
/// addressed element must lie inside its slice.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: (usize, usize),
    b: &[f64],
    b_layout: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_layout: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows - 1) * rs + (cols - 1) * cs
    };
    assert!(last(m, n, c_layout) < c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * c_layout.0 + j * c_layout.1] *= beta;
            }
        }
        return;
    }
    assert!(last(m, k, a_layout) < a.len(), "gemm: a out of bounds");
    assert!(last(k, n, b_layout) < b.len(), "gemm: b out of bounds");
    // SAFETY: all three operands were bounds-checked above for the given
    // extents and strides, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_layout.0 as isize,
            a_layout.1 as isize,
            b.as_ptr(),
            b_layout.0 as isize,
            b_layout.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_layout.0 as isize,
            c_layout.1 as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [1.0; 4];
        gemm(2, 3, 2, &a, (3, 1), &b, (2, 1), 1.0, &mut c, (2, 1));
        assert_eq!(c, [59.0, 65.0, 140.0, 155.0]);
        // a^T (3x2) * a (2x3)
        let mut c = [0.0; 9];
        gemm(3, 2, 3, &a, (1, 3), &a, (3, 1), 0.0, &mut c, (3, 1));
        assert_eq!(c, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }
}
