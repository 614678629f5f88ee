//! Dense kernels behind the convolution ops: GEMM plus im2col / col2im.

/// `c = a * b + beta * c`, with `a` m x k and `b` k x n. When a `*_t` flag is
/// set the operand is stored transposed (k x m or n x k, row-major).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly the m*k, k*n and m*n elements addressed
    // by these strides (checked above in debug builds).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Geometry of one sliding-window unfold over a [channels, len] signal.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Unfold {
    pub channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub positions: usize,
}

impl Unfold {
    #[inline]
    fn source(&self, pos: usize, tap: usize) -> Option<usize> {
        let i = (pos * self.stride + tap * self.dilation) as isize - self.padding as isize;
        (i >= 0 && (i as usize) < self.len).then_some(i as usize)
    }

    /// [channels * kernel, positions] matrix of windowed samples.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = Vec::with_capacity(self.channels * self.kernel * self.positions);
        for c in 0..self.channels {
            let xc = &x[c * self.len..(c + 1) * self.len];
            for k in 0..self.kernel {
                if self.stride == 1 {
                    // contiguous run of valid positions
                    let off = (k * self.dilation) as isize - self.padding as isize;
                    let lo = ((-off).max(0) as usize).min(self.positions);
                    let hi = ((self.len as isize - off).max(0) as usize).min(self.positions).max(lo);
                    cols.resize(cols.len() + lo, 0.0);
                    if lo < hi {
                        let s = (lo as isize + off) as usize;
                        cols.extend_from_slice(&xc[s..s + hi - lo]);
                    }
                    cols.resize(cols.len() + self.positions - hi, 0.0);
                } else {
                    cols.extend((0..self.positions).map(|t| self.source(t, k).map_or(0.0, |i| xc[i])));
                }
            }
        }
        cols
    }

    /// Scatter-adds a [channels * kernel, positions] matrix back onto `x`.
    pub fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        for c in 0..self.channels {
            let xc = &mut x[c * self.len..(c + 1) * self.len];
            for k in 0..self.kernel {
                let row = &cols[(c * self.kernel + k) * self.positions..][..self.positions];
                for (t, &v) in row.iter().enumerate() {
                    if let Some(i) = self.source(t, k) {
                        xc[i] += v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut c2 = [1.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, 1.0, &mut c2);
        assert_eq!(c2, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let u = Unfold {
            channels: 2,
            len: 9,
            kernel: 3,
            stride: 2,
            padding: 2,
            dilation: 2,
            positions: 5,
        };
        let x: Vec<f64> = (0..18).map(|i| i as f64 * 0.5 - 3.0).collect();
        let y: Vec<f64> = (0..30).map(|i| (i % 7) as f64 - 2.0).collect();
        let lhs: f64 = u.im2col(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 18];
        u.col2im(&y, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let u1 = Unfold { stride: 1, ..u };
        let lhs: f64 = u1.im2col(&x).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 18];
        u1.col2im(&y, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
