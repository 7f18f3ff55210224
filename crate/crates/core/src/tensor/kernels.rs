//! Low-level numeric kernels shared by the tape ops.

use super::Real;

/// `c = a · b + beta · c` with arbitrary row/column strides on `a` and `b`.
///
/// `a` is `m × k`, `b` is `k × n`, `c` is a dense row-major `m × n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    (rsa, csa): (isize, isize),
    b: &[Real],
    (rsb, csb): (isize, isize),
    beta: Real,
    c: &mut [Real],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides above address only elements inside `a`, `b` and `c`;
    // callers pass buffers of at least the dimensions described.
    unsafe {
        #[cfg(not(feature = "f32"))]
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
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
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

/// Geometry of a 2-D sliding window over an NHWC tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c
    }

    pub fn rows(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }

    pub(crate) fn valid(&self) -> bool {
        self.stride > 0
            && self.h + 2 * self.pad >= self.kh
            && self.w + 2 * self.pad >= self.kw
    }
}

/// Unfolds an NHWC input into `[rows, kh·kw·c]` patches (order `dy, dx, c`).
pub(crate) fn im2col(x: &[Real], g: &ConvGeom) -> Vec<Real> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.rows() * plen];
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * plen;
                for dy in 0..g.kh {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.kw {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let dst = base + (dy * g.kw + dx) * g.c;
                        cols[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im_add(cols: &[Real], g: &ConvGeom, dx: &mut [Real]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plen = g.patch_len();
    let mut row = 0;
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * plen;
                for dy in 0..g.kh {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dxk in 0..g.kw {
                        let ix = (ox * g.stride + dxk) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        let src = base + (dy * g.kw + dxk) * g.c;
                        for (d, s) in dx[dst..dst + g.c].iter_mut().zip(&cols[src..src + g.c]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Channel-wise max pooling over NHWC. Padded cells never win.
/// Returns the output values and the flat input index of each maximum.
pub(crate) fn maxpool2d(x: &[Real], g: &ConvGeom) -> (Vec<Real>, Vec<usize>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let total = g.n * oh * ow * g.c;
    let mut out = vec![Real::NEG_INFINITY; total];
    let mut arg = vec![usize::MAX; total];
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((n * oh + oy) * ow + ox) * g.c;
                for dy in 0..g.kh {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for dx in 0..g.kw {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let ibase = ((n * g.h + iy as usize) * g.w + ix as usize) * g.c;
                        for c in 0..g.c {
                            let v = x[ibase + c];
                            if v > out[obase + c] || arg[obase + c] == usize::MAX {
                                out[obase + c] = v;
                                arg[obase + c] = ibase + c;
                            }
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

/// Smallest gap between the winner and the runner-up over all pooling windows.
pub(crate) fn maxpool_margin(x: &[Real], g: &ConvGeom) -> Real {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut margin = Real::INFINITY;
    let mut window = Vec::with_capacity(g.kh * g.kw);
    for n in 0..g.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..g.c {
                    window.clear();
                    for dy in 0..g.kh {
                        let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for dx in 0..g.kw {
                            let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            window.push(x[((n * g.h + iy as usize) * g.w + ix as usize) * g.c + c]);
                        }
                    }
                    margin = margin.min(top_two_gap(&window));
                }
            }
        }
    }
    margin
}

pub(crate) fn top_two_gap(values: &[Real]) -> Real {
    let (mut a, mut b) = (Real::NEG_INFINITY, Real::NEG_INFINITY);
    for &v in values {
        if v > a {
            b = a;
            a = v;
        } else if v > b {
            b = v;
        }
    }
    if b == Real::NEG_INFINITY {
        Real::INFINITY
    } else {
        a - b
    }
}
