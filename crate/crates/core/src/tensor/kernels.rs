//! Raw slice kernels shared by the differentiable ops.

use crate::par;

/// Work (multiply-adds) below which kernels stay on the calling thread.
const PAR_WORK: usize = 1 << 15;

/// `c[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    let row = |i: usize, out: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_WORK && m > 1 {
        let rows_per_task = (m / 16).max(1);
        par::for_each_chunk_mut(&mut c, rows_per_task * n, |t, chunk| {
            for (r, out) in chunk.chunks_mut(n).enumerate() {
                row(t * rows_per_task + r, out);
            }
        });
    } else {
        for (i, out) in c.chunks_mut(n).enumerate() {
            row(i, out);
        }
    }
    c
}

/// Transpose of a row-major `r×c` matrix.
pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// Transposes the trailing two axes of `batch` stacked `r×c` matrices.
pub fn batch_transpose(a: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for b in 0..batch {
        out.extend(transpose(&a[b * r * c..(b + 1) * r * c], r, c));
    }
    out
}

/// Column softmax of `batch` stacked `r×c` matrices, with per-column max
/// subtraction.
pub fn softmax_columns(a: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for b in 0..batch {
        let base = b * r * c;
        for j in 0..c {
            let mut max = f64::NEG_INFINITY;
            for i in 0..r {
                max = max.max(a[base + i * c + j]);
            }
            let mut total = 0.0;
            for i in 0..r {
                let e = (a[base + i * c + j] - max).exp();
                out[base + i * c + j] = e;
                total += e;
            }
            for i in 0..r {
                out[base + i * c + j] /= total;
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    /// Unfolds one image `[c_in, h, w]` into `[patch_len, oh*ow]`.
    pub fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let cols = oh * ow;
        let k = self.kernel;
        let mut out = vec![0.0; self.patch_len() * cols];
        for c in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            dst[oy * ow + ox] =
                                img[(c * self.h + iy as usize) * self.w + ix as usize];
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters patch gradients back
    /// onto an image-shaped buffer.
    pub fn col2im(&self, cols_grad: &[f64]) -> Vec<f64> {
        let (oh, ow) = self.out_hw();
        let cols = oh * ow;
        let k = self.kernel;
        let mut img = vec![0.0; self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols_grad[row * cols..(row + 1) * cols];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            img[(c * self.h + iy as usize) * self.w + ix as usize] +=
                                src[oy * ow + ox];
                        }
                    }
                }
            }
        }
        img
    }
}
