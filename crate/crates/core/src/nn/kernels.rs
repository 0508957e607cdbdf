//! Low-level kernels: strided GEMM, im2col/col2im for valid 5x5 convolutions,
//! and 2x2 max pooling. All buffers are row-major.

/// A read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
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
}

/// `c = alpha * a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(alpha: f64, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    // Views are built from row_major()/t() of slices long enough for every index.
    let last = |x: Mat<'_>| (x.rows - 1) as isize * x.rs + (x.cols - 1) as isize * x.cs;
    assert!((last(a) as usize) < a.data.len() && (last(b) as usize) < b.data.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) const K: usize = 5;

/// Unfold one `channels x h x w` image into a `(channels*25) x (ho*wo)` matrix.
pub(crate) fn im2col(input: &[f64], channels: usize, h: usize, w: usize, cols: &mut [f64]) {
    let (ho, wo) = (h - K + 1, w - K + 1);
    let p = ho * wo;
    debug_assert_eq!(cols.len(), channels * K * K * p);
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..K {
            for kj in 0..K {
                let row = &mut cols[((c * K + ki) * K + kj) * p..][..p];
                for i in 0..ho {
                    let src = &plane[(i + ki) * w + kj..][..wo];
                    row[i * wo..(i + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into image layout.
pub(crate) fn col2im(cols: &[f64], channels: usize, h: usize, w: usize, out: &mut [f64]) {
    let (ho, wo) = (h - K + 1, w - K + 1);
    let p = ho * wo;
    for c in 0..channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..K {
            for kj in 0..K {
                let row = &cols[((c * K + ki) * K + kj) * p..][..p];
                for i in 0..ho {
                    let dst = &mut plane[(i + ki) * w + kj..][..wo];
                    for (d, s) in dst.iter_mut().zip(&row[i * wo..(i + 1) * wo]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `channels x h x w`. Records the flat input
/// index of each window's maximum (first maximum on ties).
pub(crate) fn maxpool2(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [u32],
) {
    let (ho, wo) = (h / 2, w / 2);
    for c in 0..channels {
        for i in 0..ho {
            for j in 0..wo {
                let base = c * h * w + 2 * i * w + 2 * j;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &idx in &cand[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = (c * ho + i) * wo + j;
                out[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
}
