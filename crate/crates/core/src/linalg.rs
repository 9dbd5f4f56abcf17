//! Strided matrix views over flat slices and a checked GEMM entry point.

use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, R> {
    data: &'a [R],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, R: Real> MatRef<'a, R> {
    /// Row-major `rows × cols` view of the start of `data`.
    pub fn new(data: &'a [R], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [R], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let view = Self {
            data,
            rows,
            cols,
            rs,
            cs,
        };
        assert!(view.fits(data.len()), "matrix view exceeds backing slice");
        view
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> R {
        self.data[r * self.rs + c * self.cs]
    }

    fn fits(&self, len: usize) -> bool {
        self.rows == 0
            || self.cols == 0
            || (self.rows - 1) * self.rs + (self.cols - 1) * self.cs < len
    }
}

#[derive(Debug)]
pub struct MatMut<'a, R> {
    data: &'a mut [R],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, R: Real> MatMut<'a, R> {
    pub fn new(data: &'a mut [R], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a mut [R], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        let fits = rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < data.len();
        assert!(fits, "matrix view exceeds backing slice");
        // Overlapping element addresses would alias inside the GEMM kernel.
        assert!(
            rows <= 1 || cols <= 1 || rs >= cols * cs || cs >= rows * rs,
            "aliasing output view"
        );
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }
}

/// `c ← alpha · a·b + beta · c`.
///
/// With `beta == 0` the previous contents of `c` are ignored, including NaNs.
pub fn gemm<R: Real>(alpha: R, a: MatRef<'_, R>, b: MatRef<'_, R>, beta: R, c: MatMut<'_, R>) {
    assert_eq!(a.cols, b.rows, "gemm inner extents differ");
    assert_eq!(a.rows, c.rows, "gemm output rows differ");
    assert_eq!(b.cols, c.cols, "gemm output cols differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for col in 0..n {
                let slot = &mut c.data[r * c.rs + col * c.cs];
                *slot = if beta == R::zero() {
                    R::zero()
                } else {
                    beta * *slot
                };
            }
        }
        return;
    }
    // SAFETY: extents and strides of all three views were bounds-checked
    // against their backing slices on construction; `c` is uniquely borrowed.
    unsafe {
        R::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
