//! Dense loops shared by forward and backward passes.

use crate::scalar::Real;

/// Bounds-checked strided accumulation `out[m×n] += A · B`, where
/// `A[i][p] = a[i·rsa + p·csa]` and `B[p][j] = b[p·rsb + j·csb]`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<R: Real>(
    a: &[R],
    (rsa, csa): (usize, usize),
    b: &[R],
    (rsb, csb): (usize, usize),
    out: &mut [R],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm lhs out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm rhs out of bounds");
    assert!(m * n <= out.len(), "gemm output out of bounds");
    // SAFETY: the asserts above bound every addressed element.
    unsafe {
        R::gemm_acc(
            m,
            k,
            n,
            a.as_ptr(),
            (rsa as isize, csa as isize),
            b.as_ptr(),
            (rsb as isize, csb as isize),
            out.as_mut_ptr(),
            (n as isize, 1),
        );
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k, 1), b, (n, 1), out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    gemm_strided(a, (k, 1), b, (1, k), out, m, k, n);
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<R: Real>(a: &[R], b: &[R], out: &mut [R], m: usize, k: usize, n: usize) {
    gemm_strided(a, (1, m), b, (n, 1), out, m, k, n);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds zero-padded `[C, H, W]` patches into `[C·k·k, Ho·Wo]`.
pub(crate) fn im2col<R: Real>(input: &[R], g: &ConvGeom) -> Vec<R> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = vec![R::zero(); g.col_rows() * ho * wo];
    let pad = g.padding as isize;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &input[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<R: Real>(cols: &[R], g: &ConvGeom, out: &mut [R]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let pad = g.padding as isize;
    for c in 0..g.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut out[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Align-corners sampling table for one axis: `(lo, hi, weight_of_hi)`.
pub(crate) fn align_corners_axis<R: Real>(n_in: usize, n_out: usize) -> Vec<(usize, usize, R)> {
    (0..n_out)
        .map(|j| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, R::zero());
            }
            let pos = j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, R::lit(pos - lo as f64))
        })
        .collect()
}

/// Align-corners bilinear resampling of `[C, H, W]` to `[C, Ho, Wo]`.
pub(crate) fn bilinear_resample<R: Real>(
    input: &[R],
    channels: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<R> {
    let ys = align_corners_axis::<R>(h, ho);
    let xs = align_corners_axis::<R>(w, wo);
    let mut out = Vec::with_capacity(channels * ho * wo);
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let top = plane[y0 * w + x0] * (R::one() - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (R::one() - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (R::one() - wy) + bot * wy);
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resample`].
pub(crate) fn bilinear_resample_adjoint<R: Real>(
    grad_out: &[R],
    channels: usize,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    grad_in: &mut [R],
) {
    let ys = align_corners_axis::<R>(h, ho);
    let xs = align_corners_axis::<R>(w, wo);
    for c in 0..channels {
        let plane = &mut grad_in[c * h * w..(c + 1) * h * w];
        let src = &grad_out[c * ho * wo..(c + 1) * ho * wo];
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let g = src[oy * wo + ox];
                let gt = g * (R::one() - wy);
                let gb = g * wy;
                plane[y0 * w + x0] += gt * (R::one() - wx);
                plane[y0 * w + x1] += gt * wx;
                plane[y1 * w + x0] += gb * (R::one() - wx);
                plane[y1 * w + x1] += gb * wx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut out, m, k, n);
        for (x, y) in out.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut out, m, k, n);
        for (x, y) in out.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut out = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut out, m, k, n);
        for (x, y) in out.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn align_corners_hits_endpoints() {
        let t = align_corners_axis::<f64>(2, 4);
        assert_eq!(t[0], (0, 1, 0.0));
        assert_eq!(t[3].0, 1);
        assert_eq!(t[3].2, 0.0);
    }
}
