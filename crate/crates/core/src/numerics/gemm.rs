//! Safe wrapper around the strided `dgemm` kernel from `matrixmultiply`.

/// Row and column strides of a matrix view, in elements.
#[derive(Debug, Clone, Copy)]
pub struct Strides {
    rs: isize,
    cs: isize,
}

impl Strides {
    /// Row-major storage with `cols` elements per row.
    pub fn row_major(cols: usize) -> Self {
        Self {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transpose of a row-major matrix whose rows hold `ld` elements.
    pub fn transposed(ld: usize) -> Self {
        Self {
            rs: 1,
            cs: ld as isize,
        }
    }

    fn extent(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs as usize + (cols - 1) * self.cs as usize + 1
    }
}

/// `c ← a · b + beta · c` for an `[m, k]` view `a` and a `[k, n]` view `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    c: &mut [f64],
    sc: Strides,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        return;
    }
    assert!(sa.extent(m, k) <= a.len(), "gemm: lhs view out of bounds");
    assert!(sb.extent(k, n) <= b.len(), "gemm: rhs view out of bounds");
    assert!(sc.extent(m, n) <= c.len(), "gemm: output view out of bounds");
    // SAFETY: the three asserts above bound every element the kernel touches,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.rs,
            sa.cs,
            b.as_ptr(),
            sb.rs,
            sb.cs,
            beta,
            c.as_mut_ptr(),
            sc.rs,
            sc.cs,
        );
    }
}
