//! Low-level dense kernels shared by the tape's forward and backward passes.

use super::Real;

/// Strided view of a row-major matrix: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols as isize, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` buffer, seen as `cols × rows`.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self { rows: cols, cols: rows, rs: 1, cs: cols as isize }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `c = alpha * a · b + beta * c`, with `c` row-major `a.rows × b.cols`.
///
/// Single-threaded and therefore bit-reproducible for identical inputs.
pub(crate) fn gemm(
    alpha: Real,
    a: &[Real],
    la: Layout,
    b: &[Real],
    lb: Layout,
    beta: Real,
    c: &mut [Real],
) {
    assert_eq!(la.cols, lb.rows, "gemm inner extents");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    assert!(a.len() > la.max_offset() && b.len() > lb.max_offset());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || height + 2 * pad < kh || width + 2 * pad < kw {
            return None;
        }
        let out_h = (height + 2 * pad - kh) / stride + 1;
        let out_w = (width + 2 * pad - kw) / stride + 1;
        Some(Self { channels, height, width, kh, kw, stride, pad, out_h, out_w })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output cell `(oy, ox)` and kernel tap `(ky, kx)`, if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one image (`C × H × W`) into a `(C·kh·kw) × (Ho·Wo)` column matrix.
pub(crate) fn im2col(g: &ConvGeom, image: &[Real], cols: &mut [Real]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => plane[y * g.width + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(g: &ConvGeom, cols: &[Real], image: &mut [Real]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.width + x] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over one `C × H × W` image (no padding). Returns the flat argmax
/// of every output cell within the image.
pub(crate) fn max_pool(g: &ConvGeom, image: &[Real], out: &mut [Real], argmax: &mut [usize]) {
    let p = g.out_len();
    for c in 0..g.channels {
        let base = c * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = Real::NEG_INFINITY;
                let mut best_at = 0;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let at = base + y * g.width + x;
                            // strict > keeps the first maximum on ties
                            if image[at] > best {
                                best = image[at];
                                best_at = at;
                            }
                        }
                    }
                }
                out[c * p + oy * g.out_w + ox] = best;
                argmax[c * p + oy * g.out_w + ox] = best_at;
            }
        }
    }
}
