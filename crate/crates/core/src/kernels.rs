//! Raw numeric kernels on flat slices: GEMM, im2col/col2im convolution, pooling.
//!
//! Everything here runs serially with a fixed reduction order, so results are
//! bit-identical between runs on the same machine.

/// Target number of im2col columns per GEMM call; whole images are grouped until
/// this is reached to keep small feature maps from degenerating into tiny GEMMs.
const CHUNK_COLS: usize = 2048;

/// `c (m x n) = op(a) (m x k) * op(b) (k x n) + beta * c`, all row-major.
///
/// With `a_t` the slice `a` holds the `k x m` transpose; likewise `b_t` means `b`
/// holds `n x k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
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
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the bounds above cover every index dgemm touches given these strides.
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

/// Geometry of a strided, zero-padded cross-correlation from a `c x h x w` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// `None` when the padded input is smaller than the kernel.
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    pub fn in_size(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Writes the patches of one image into columns `col0..col0 + oh*ow` of a
/// `rows x ncols` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], col0: usize, ncols: usize) {
    let p = g.out_pixels();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols + col0..row * ncols + col0 + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into one image.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64], col0: usize, ncols: usize) {
    let p = g.out_pixels();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols + col0..row * ncols + col0 + p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn chunks(batch: usize, cols_per_image: usize) -> impl Iterator<Item = (usize, usize)> {
    let per = (CHUNK_COLS / cols_per_image.max(1)).max(1);
    (0..batch)
        .step_by(per)
        .map(move |start| (start, (start + per).min(batch)))
}

/// Cross-correlation. `x` is `[batch, g.c, g.h, g.w]`, `kernel` is
/// `[out_c, g.c, g.kh, g.kw]`; returns `[batch, out_c, g.oh, g.ow]`.
pub fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    out_c: usize,
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let p = g.out_pixels();
    let rows = g.rows();
    let mut y = vec![0.0; batch * out_c * p];
    let mut cols = Vec::new();
    let mut out = Vec::new();
    for (start, end) in chunks(batch, p) {
        let ncols = (end - start) * p;
        cols.resize(rows * ncols, 0.0);
        out.resize(out_c * ncols, 0.0);
        for (j, n) in (start..end).enumerate() {
            im2col(
                &x[n * g.in_size()..(n + 1) * g.in_size()],
                g,
                &mut cols,
                j * p,
                ncols,
            );
        }
        gemm(
            out_c, rows, ncols, kernel, false, &cols, false, 0.0, &mut out,
        );
        for (j, n) in (start..end).enumerate() {
            for o in 0..out_c {
                let src = &out[o * ncols + j * p..o * ncols + (j + 1) * p];
                let dst = &mut y[(n * out_c + o) * p..(n * out_c + o + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[o];
                }
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`]. Returns `(d_input, d_kernel, d_bias)`; the
/// input gradient is only formed when `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    out_c: usize,
    kernel: &[f64],
    dy: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let p = g.out_pixels();
    let rows = g.rows();
    let mut dx = need_input.then(|| vec![0.0; batch * g.in_size()]);
    let mut dk = need_kernel.then(|| vec![0.0; out_c * rows]);
    let mut db = vec![0.0; out_c];
    for n in 0..batch {
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += dy[(n * out_c + o) * p..(n * out_c + o + 1) * p]
                .iter()
                .sum::<f64>();
        }
    }
    if dx.is_none() && dk.is_none() {
        return (None, None, db);
    }
    let mut cols = Vec::new();
    let mut dout = Vec::new();
    let mut dcols = Vec::new();
    for (start, end) in chunks(batch, p) {
        let ncols = (end - start) * p;
        dout.resize(out_c * ncols, 0.0);
        for (j, n) in (start..end).enumerate() {
            for o in 0..out_c {
                dout[o * ncols + j * p..o * ncols + (j + 1) * p]
                    .copy_from_slice(&dy[(n * out_c + o) * p..(n * out_c + o + 1) * p]);
            }
        }
        if let Some(dk) = dk.as_mut() {
            cols.resize(rows * ncols, 0.0);
            for (j, n) in (start..end).enumerate() {
                im2col(
                    &x[n * g.in_size()..(n + 1) * g.in_size()],
                    g,
                    &mut cols,
                    j * p,
                    ncols,
                );
            }
            gemm(out_c, ncols, rows, &dout, false, &cols, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.resize(rows * ncols, 0.0);
            gemm(
                rows, out_c, ncols, kernel, true, &dout, false, 0.0, &mut dcols,
            );
            for (j, n) in (start..end).enumerate() {
                col2im(
                    &dcols,
                    g,
                    &mut dx[n * g.in_size()..(n + 1) * g.in_size()],
                    j * p,
                    ncols,
                );
            }
        }
    }
    (dx, dk, db)
}

/// Transposed convolution. `g` describes the *forward* convolution that maps the
/// output `[out_c = g.c, g.h, g.w]` back onto the input `[in_c, g.oh, g.ow]`.
/// `kernel` is `[in_c, g.c, g.kh, g.kw]`.
pub fn conv_transpose_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    in_c: usize,
    kernel: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let q = g.out_pixels();
    let rows = g.rows();
    let out_size = g.in_size();
    let mut y = vec![0.0; batch * out_size];
    let mut xm = Vec::new();
    let mut cols = Vec::new();
    for (start, end) in chunks(batch, q) {
        let ncols = (end - start) * q;
        xm.resize(in_c * ncols, 0.0);
        gather_channels(x, start, end, in_c, q, &mut xm);
        cols.resize(rows * ncols, 0.0);
        gemm(rows, in_c, ncols, kernel, true, &xm, false, 0.0, &mut cols);
        for (j, n) in (start..end).enumerate() {
            col2im(
                &cols,
                g,
                &mut y[n * out_size..(n + 1) * out_size],
                j * q,
                ncols,
            );
        }
    }
    let plane = g.h * g.w;
    for n in 0..batch {
        for (co, b) in bias.iter().enumerate() {
            for v in &mut y[n * out_size + co * plane..n * out_size + (co + 1) * plane] {
                *v += b;
            }
        }
    }
    y
}

/// Gradients of [`conv_transpose_forward`] as `(d_input, d_kernel, d_bias)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    in_c: usize,
    kernel: &[f64],
    dy: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let q = g.out_pixels();
    let rows = g.rows();
    let out_size = g.in_size();
    let plane = g.h * g.w;
    let mut db = vec![0.0; g.c];
    for n in 0..batch {
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += dy[n * out_size + co * plane..n * out_size + (co + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }
    let mut dx = need_input.then(|| vec![0.0; batch * in_c * q]);
    let mut dk = need_kernel.then(|| vec![0.0; in_c * rows]);
    if dx.is_none() && dk.is_none() {
        return (None, None, db);
    }
    let mut cols = Vec::new();
    let mut xm = Vec::new();
    let mut dxm = Vec::new();
    for (start, end) in chunks(batch, q) {
        let ncols = (end - start) * q;
        cols.resize(rows * ncols, 0.0);
        for (j, n) in (start..end).enumerate() {
            im2col(
                &dy[n * out_size..(n + 1) * out_size],
                g,
                &mut cols,
                j * q,
                ncols,
            );
        }
        if let Some(dk) = dk.as_mut() {
            xm.resize(in_c * ncols, 0.0);
            gather_channels(x, start, end, in_c, q, &mut xm);
            gemm(in_c, ncols, rows, &xm, false, &cols, true, 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            dxm.resize(in_c * ncols, 0.0);
            gemm(
                in_c, rows, ncols, kernel, false, &cols, false, 0.0, &mut dxm,
            );
            for (j, n) in (start..end).enumerate() {
                for ci in 0..in_c {
                    dx[(n * in_c + ci) * q..(n * in_c + ci + 1) * q]
                        .copy_from_slice(&dxm[ci * ncols + j * q..ci * ncols + (j + 1) * q]);
                }
            }
        }
    }
    (dx, dk, db)
}

/// `[batch, c, q]` images `start..end` into a `c x ((end-start)*q)` matrix.
fn gather_channels(x: &[f64], start: usize, end: usize, c: usize, q: usize, out: &mut [f64]) {
    let ncols = (end - start) * q;
    for (j, n) in (start..end).enumerate() {
        for ci in 0..c {
            out[ci * ncols + j * q..ci * ncols + (j + 1) * q]
                .copy_from_slice(&x[(n * c + ci) * q..(n * c + ci + 1) * q]);
        }
    }
}

/// Max pooling over `[planes, h, w]`. Returns the pooled values and, per output,
/// the flat input index of the first maximal element in scan order.
pub fn maxpool_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut y = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * w + ox * stride;
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for (dx, &v) in x[row..row + window].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_i = row + dx;
                        }
                    }
                }
                y.push(best);
                arg.push(best_i);
            }
        }
    }
    (y, arg)
}
