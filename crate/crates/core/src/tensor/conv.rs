//! 2-D convolution kernels (im2col + single-threaded `f64` GEMM).
//!
//! Per-sample kernel gradients are summed in batch order, so results are
//! bitwise reproducible from run to run.

use super::Real;
use crate::error::{Error, Result};

/// Output spatial size of a convolution, rejecting inexact strides.
pub fn conv2d_output_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be at least 1"));
    }
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    if kh > ph || kw > pw {
        return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}")));
    }
    if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("stride {stride} does not tile padded input {ph}x{pw} with kernel {kh}x{kw}"),
        ));
    }
    Ok(((ph - kh) / stride + 1, (pw - kw) / stride + 1))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape("conv2d", format!("expected 4-D input and kernel, got {input:?} and {kernel:?}")));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c {
            return Err(Error::shape("conv2d", format!("input has {c} channels but kernel expects {kc}")));
        }
        let (oh, ow) = conv2d_output_size(h, w, kh, kw, stride, pad)?;
        Ok(ConvGeom { n, c, h, w, f, kh, kw, stride, pad, oh, ow })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.f, self.oh, self.ow]
    }

    /// Valid output-column range for kernel column `j` (inclusive start, exclusive end).
    fn col_range(&self, j: usize) -> (usize, usize) {
        valid_range(self.ow, self.w, j, self.stride, self.pad)
    }

    fn row_range(&self, i: usize) -> (usize, usize) {
        valid_range(self.oh, self.h, i, self.stride, self.pad)
    }
}

fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o * stride + k - pad in [0, size)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k { (size + pad - k - 1) / stride + 1 } else { 0 };
    (lo.min(out), hi.min(out).max(lo.min(out)))
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [f64]) {
    let p = g.positions();
    col.fill(0.0);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (oy0, oy1) = g.row_range(i);
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * p..(row + 1) * p];
                let (ox0, ox1) = g.col_range(j);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + i - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        out[ox] = src[ox * g.stride + j - g.pad].to_f64();
                    }
                }
            }
        }
    }
}

fn col2im_add(dcol: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            let (oy0, oy1) = g.row_range(i);
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &dcol[row * p..(row + 1) * p];
                let (ox0, ox1) = g.col_range(j);
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + i - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        dst[ox * g.stride + j - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

/// `c = a · b + beta · c` for row/column-strided `f64` matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the assertions above bound every index the kernel touches;
    // `c` is row-major `m × n` and does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward<T: Real>(input: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (ck, p) = (g.patch_len(), g.positions());
    let kernel64: Vec<f64> = kernel.iter().map(|v| v.to_f64()).collect();
    let mut col = vec![0.0f64; ck * p];
    let mut acc = vec![0.0f64; g.f * p];
    let mut out = Vec::with_capacity(g.n * g.f * p);
    let in_stride = g.c * g.h * g.w;
    for n in 0..g.n {
        im2col(&input[n * in_stride..(n + 1) * in_stride], g, &mut col);
        gemm((g.f, ck, p), &kernel64, (ck, 1), &col, (p, 1), 0.0, &mut acc);
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    out
}

/// Returns `(grad_input, grad_kernel)`, each only when requested.
pub(crate) fn conv2d_backward<T: Real>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (ck, p) = (g.patch_len(), g.positions());
    let kernel64: Vec<f64> = kernel.iter().map(|v| v.to_f64()).collect();
    let in_stride = g.c * g.h * g.w;
    let out_stride = g.f * p;

    let mut col = vec![0.0f64; ck * p];
    let mut dcol = vec![0.0f64; if want_input { ck * p } else { 0 }];
    let mut dy = vec![0.0f64; out_stride];
    let mut dx_sample = vec![0.0f64; if want_input { in_stride } else { 0 }];
    let mut dk = vec![0.0f64; if want_kernel { g.f * ck } else { 0 }];
    let mut dx = if want_input { Vec::with_capacity(g.n * in_stride) } else { Vec::new() };

    for n in 0..g.n {
        for (d, v) in dy.iter_mut().zip(&grad_out[n * out_stride..(n + 1) * out_stride]) {
            *d = v.to_f64();
        }
        if want_kernel {
            im2col(&input[n * in_stride..(n + 1) * in_stride], g, &mut col);
            // dK[f, r] += sum_p dy[f, p] * col[r, p]
            gemm((g.f, p, ck), &dy, (p, 1), &col, (1, p), 1.0, &mut dk);
        }
        if want_input {
            // dcol[r, p] = sum_f K[f, r] * dy[f, p]
            gemm((ck, g.f, p), &kernel64, (1, ck), &dy, (p, 1), 0.0, &mut dcol);
            dx_sample.fill(0.0);
            col2im_add(&dcol, g, &mut dx_sample);
            dx.extend(dx_sample.iter().map(|&v| T::from_f64(v)));
        }
    }

    let dk = want_kernel.then(|| dk.into_iter().map(T::from_f64).collect());
    (want_input.then_some(dx), dk)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_rejects_inexact_stride() {
        assert_eq!(conv2d_output_size(64, 64, 2, 2, 2, 0).unwrap(), (32, 32));
        assert_eq!(conv2d_output_size(64, 64, 3, 3, 1, 1).unwrap(), (64, 64));
        assert!(conv2d_output_size(64, 64, 3, 3, 2, 1).is_err());
        assert!(conv2d_output_size(2, 2, 5, 5, 1, 1).is_err());
        assert!(conv2d_output_size(4, 4, 3, 3, 0, 0).is_err());
    }

    #[test]
    fn valid_range_matches_bounds_scan() {
        for size in 1..9 {
            for ks in 1..4 {
                for stride in 1..4 {
                    for pad in 0..3 {
                        if ks > size + 2 * pad {
                            continue;
                        }
                        let out = (size + 2 * pad - ks) / stride + 1;
                        for k in 0..ks {
                            let (lo, hi) = valid_range(out, size, k, stride, pad);
                            for o in 0..out {
                                let pos = (o * stride + k) as isize - pad as isize;
                                let inside = pos >= 0 && (pos as usize) < size;
                                assert_eq!(inside, o >= lo && o < hi, "size {size} k {k} s {stride} p {pad} o {o}");
                            }
                        }
                    }
                }
            }
        }
    }
}
