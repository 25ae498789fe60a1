//! Dense kernels shared by the graph ops: GEMM with arbitrary strides and
//! the im2col/col2im pair used by `conv2d`.

use crate::error::{Error, Result};

/// Strided view description for a GEMM operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Layout {
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` matrix, without copying.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Layout {
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `c = a·b + beta·c` where `c` is row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: &[f64], la: Layout, b: &[f64], lb: Layout, c: &mut [f64], beta: f64) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert!(a.len() >= la.span() && b.len() >= lb.span(), "gemm operand bounds");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    assert!(c.len() >= m * n, "gemm output bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: every operand span was bounds-checked above and `c` does not
    // alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr(),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects rank-4 input and weight, got {x:?} and {w:?}"
            )));
        }
        let (batch, in_channels, height, width) = (x[0], x[1], x[2], x[3]);
        let (filters, wc, kh, kw) = (w[0], w[1], w[2], w[3]);
        if wc != in_channels {
            return Err(Error::Shape(format!(
                "conv2d weight has {wc} input channels, input has {in_channels}"
            )));
        }
        if kh != kw {
            return Err(Error::Shape(format!("conv2d kernel must be square, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::ConvGeometry("stride must be positive".into()));
        }
        let out_dim = |extent: usize| -> Result<usize> {
            let padded = extent + 2 * pad;
            if kh > padded || kh == 0 {
                return Err(Error::ConvGeometry(format!(
                    "kernel {kh} does not fit extent {extent} with padding {pad}"
                )));
            }
            if !(padded - kh).is_multiple_of(stride) {
                return Err(Error::ConvGeometry(format!(
                    "output size ({extent} + 2·{pad} − {kh})/{stride} + 1 is not integral"
                )));
            }
            Ok((padded - kh) / stride + 1)
        };
        Ok(ConvGeom {
            batch,
            in_channels,
            height,
            width,
            filters,
            kernel: kh,
            stride,
            pad,
            out_height: out_dim(height)?,
            out_width: out_dim(width)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_spatial(&self) -> usize {
        self.out_height * self.out_width
    }

    /// Columns of the im2col matrix: one per output position per image.
    pub fn columns(&self) -> usize {
        self.batch * self.out_spatial()
    }

    /// Calls `f(row, col, input_offset)` for every in-bounds tap of the
    /// im2col matrix; padded taps are skipped.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel;
        let plane = self.height * self.width;
        let out_sp = self.out_spatial();
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for b in 0..self.batch {
                        let base = (b * self.in_channels + c) * plane;
                        for oh in 0..self.out_height {
                            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                            if ih < 0 || ih >= self.height as isize {
                                continue;
                            }
                            let col_base = b * out_sp + oh * self.out_width;
                            for ow in 0..self.out_width {
                                let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                                if iw < 0 || iw >= self.width as isize {
                                    continue;
                                }
                                f(row, col_base + ow, base + ih as usize * self.width + iw as usize);
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.columns();
        let mut out = vec![0.0; self.patch_len() * cols];
        self.for_each_tap(|row, col, off| out[row * cols + col] = x[off]);
        out
    }

    pub fn col2im(&self, dcols: &[f64]) -> Vec<f64> {
        let cols = self.columns();
        let mut dx = vec![0.0; self.batch * self.in_channels * self.height * self.width];
        self.for_each_tap(|row, col, off| dx[off] += dcols[row * cols + col]);
        dx
    }
}

/// `[F, B·S]` → `[B, F, S]`.
pub(crate) fn filters_major_to_batch_major(src: &[f64], batch: usize, filters: usize, spatial: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for f in 0..filters {
        for b in 0..batch {
            let s = &src[(f * batch + b) * spatial..(f * batch + b + 1) * spatial];
            out[(b * filters + f) * spatial..(b * filters + f + 1) * spatial].copy_from_slice(s);
        }
    }
    out
}

/// `[B, F, S]` → `[F, B·S]`.
pub(crate) fn batch_major_to_filters_major(src: &[f64], batch: usize, filters: usize, spatial: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for f in 0..filters {
            let s = &src[(b * filters + f) * spatial..(b * filters + f + 1) * spatial];
            out[(f * batch + b) * spatial..(f * batch + b + 1) * spatial].copy_from_slice(s);
        }
    }
    out
}
