//! Numeric kernels behind the tape ops. All loops run in a fixed order so
//! results are reproducible bit-for-bit.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// `c = alpha * a @ b + beta * c` with explicit row/column strides.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, a_strides));
    assert!(b.len() >= last(k, n, b_strides));
    assert!(c.len() >= last(m, n, c_strides));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn cols_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold one image `[c_in, h, w]` into `[c_in*k*k, h_out*w_out]`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

/// Fold `[c_in*k*k, h_out*w_out]` back onto an image, accumulating overlaps.
fn col2im_add(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let p = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Dense 2-D convolution, NCHW input, weight `[c_out, c_in, k, k]`.
pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
    c_out: usize,
) -> Vec<f64> {
    let kk = g.cols_rows();
    let p = g.out_pixels();
    let in_sz = g.c_in * g.h * g.w;
    let mut out = vec![0.0; batch * c_out * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; kk * p] };
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * c_out * p..(b + 1) * c_out * p];
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(p).enumerate() {
                row.fill(bias[co]);
            }
        }
        let src: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(c_out, kk, p, weight, (kk, 1), src, (p, 1), 1.0, ob, (p, 1));
    }
    out
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dweight, dbias)`; each is
/// only computed when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: &ConvGeom,
    weight: &[f64],
    c_out: usize,
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let kk = g.cols_rows();
    let p = g.out_pixels();
    let in_sz = g.c_in * g.h * g.w;
    let mut dx = need_dx.then(|| vec![0.0; batch * in_sz]);
    let mut dw = need_dw.then(|| vec![0.0; c_out * kk]);
    let mut db = need_db.then(|| vec![0.0; c_out]);
    let mut cols = vec![0.0; kk * p];
    for b in 0..batch {
        let gb = &dout[b * c_out * p..(b + 1) * c_out * p];
        if let Some(db) = db.as_mut() {
            for (co, row) in gb.chunks(p).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let src: &[f64] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dW[co, r] += sum_p g[co, p] * cols[r, p]
            gemm(c_out, p, kk, gb, (p, 1), src, (1, p), 1.0, dw, (kk, 1));
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                gemm(kk, c_out, p, weight, (1, kk), gb, (p, 1), 1.0, dxb, (p, 1));
            } else {
                gemm(kk, c_out, p, weight, (1, kk), gb, (p, 1), 0.0, &mut cols, (p, 1));
                col2im_add(&cols, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise 2-D convolution with stride 1, weight `[c, 1, k, k]`.
pub(crate) fn depthwise_forward(
    x: &[f64],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let mut out = vec![0.0; batch * c * ho * wo];
    for b in 0..batch {
        for ch in 0..c {
            let plane = &x[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let ker = &weight[ch * k * k..(ch + 1) * k * k];
            let dst = &mut out[(b * c + ch) * ho * wo..(b * c + ch + 1) * ho * wo];
            let b0 = bias.map_or(0.0, |bb| bb[ch]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b0;
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                acc += ker[ky * k + kx] * row[ix as usize];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_backward(
    x: &[f64],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    weight: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ho = h + 2 * pad - k + 1;
    let wo = w + 2 * pad - k + 1;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; c];
    for b in 0..batch {
        for ch in 0..c {
            let off = (b * c + ch) * h * w;
            let plane = &x[off..off + h * w];
            let dplane = &mut dx[off..off + h * w];
            let ker = &weight[ch * k * k..(ch + 1) * k * k];
            let dker = &mut dw[ch * k * k..(ch + 1) * k * k];
            let gsrc = &dout[(b * c + ch) * ho * wo..(b * c + ch + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let gv = gsrc[oy * wo + ox];
                    db[ch] += gv;
                    for ky in 0..k {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                let idx = iy as usize * w + ix as usize;
                                dker[ky * k + kx] += gv * plane[idx];
                                dplane[idx] += gv * ker[ky * k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Unnormalized 2-D DFT of an `h x w` plane (in place). The inverse
/// direction is also unnormalized.
pub(crate) fn fft2_in_place(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(buf.len(), h * w);
    let row_fft = plan(w, inverse);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = plan(h, inverse);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Complex spectrum of a real `h x w` plane.
pub(crate) fn fft2_real(plane: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = plane.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, h, w, false);
    buf
}
