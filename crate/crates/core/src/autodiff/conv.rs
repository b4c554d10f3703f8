//! im2col convolution kernels. Samples are processed independently; every
//! cross-sample reduction runs in sample order so results do not depend on
//! the number of worker threads.

use rayon::prelude::*;

use super::tensor::{matmul, Real};

/// Zero padding on each side of the spatial dims.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            left: p,
            bottom: p,
            right: p,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Output extent of one spatial dim, `None` if the kernel does not fit.
pub(crate) fn out_extent(size: usize, pad_lo: usize, pad_hi: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = size + pad_lo + pad_hi;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad.top as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad.left as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad.left as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass. Returns the output buffer and, when `keep_cols`, the
/// per-sample column matrices for the kernel gradient.
pub(crate) fn forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
    keep_cols: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let p = g.out_pixels();
    let rows = g.col_rows();
    let mut out = vec![T::zero(); g.n * g.o * p];
    let run = |sample: usize, out_n: &mut [T], col: &mut [T]| {
        im2col(g, &x[sample * g.in_len()..(sample + 1) * g.in_len()], col);
        matmul(g.o, rows, p, kernel, false, col, false, out_n, false);
        if let Some(b) = bias {
            for (o, chunk) in out_n.chunks_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = *v + b[o]);
            }
        }
    };
    if keep_cols {
        let mut cols = vec![T::zero(); g.n * rows * p];
        out.par_chunks_mut(g.o * p)
            .zip(cols.par_chunks_mut(rows * p))
            .enumerate()
            .for_each(|(s, (out_n, col))| run(s, out_n, col));
        (out, Some(cols))
    } else {
        out.par_chunks_mut(g.o * p).enumerate().for_each(|(s, out_n)| {
            let mut col = vec![T::zero(); rows * p];
            run(s, out_n, &mut col);
        });
        (out, None)
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dkernel: Option<Vec<T>>,
    pub dbias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    dout: &[T],
    kernel: &[T],
    cols: Option<&[T]>,
    need_dx: bool,
    need_dbias: bool,
) -> ConvGrads<T> {
    let p = g.out_pixels();
    let rows = g.col_rows();

    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); g.n * g.in_len()];
        dx.par_chunks_mut(g.in_len()).enumerate().for_each(|(s, dx_n)| {
            let mut dcol = vec![T::zero(); rows * p];
            matmul(rows, g.o, p, kernel, true, &dout[s * g.o * p..(s + 1) * g.o * p], false, &mut dcol, false);
            col2im(g, &dcol, dx_n);
        });
        dx
    });

    let dkernel = cols.map(|cols| {
        let partials: Vec<Vec<T>> = (0..g.n)
            .into_par_iter()
            .map(|s| {
                let mut dk = vec![T::zero(); g.o * rows];
                matmul(
                    g.o,
                    p,
                    rows,
                    &dout[s * g.o * p..(s + 1) * g.o * p],
                    false,
                    &cols[s * rows * p..(s + 1) * rows * p],
                    true,
                    &mut dk,
                    false,
                );
                dk
            })
            .collect();
        let mut total = vec![T::zero(); g.o * rows];
        for part in &partials {
            total.iter_mut().zip(part).for_each(|(t, &v)| *t = *t + v);
        }
        total
    });

    let dbias = need_dbias.then(|| {
        let mut db = vec![T::zero(); g.o];
        for s in 0..g.n {
            for (o, d) in db.iter_mut().enumerate() {
                let start = (s * g.o + o) * p;
                let mut acc = T::zero();
                for &v in &dout[start..start + p] {
                    acc = acc + v;
                }
                *d = *d + acc;
            }
        }
        db
    });

    ConvGrads { dx, dkernel, dbias }
}
