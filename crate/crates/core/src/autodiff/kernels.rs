//! Flat row-major compute kernels shared by forward and backward passes.
//! Inner loops run over contiguous slices so the compiler can vectorize them.

use super::Scalar;

/// Dot product with 8 parallel accumulators.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let ai = &a[i * 8..i * 8 + 8];
        let bi = &b[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + ai[l] * bi[l];
        }
    }
    let mut s = S::zero();
    for l in 0..8 {
        s += acc[l];
    }
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// c += a.b for row-major a[m x k], b[k x n], c[m x n].
pub fn mm_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 1 {
        for (ci, arow) in c.iter_mut().zip(a.chunks_exact(k)) {
            *ci += dot(arow, b);
        }
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// out += a^T . c for a[m x k], c[m x n], out[k x n].
pub fn mm_at_acc<S: Scalar>(a: &[S], c: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (ov, &cv) in orow.iter_mut().zip(crow.iter()) {
                *ov += av * cv;
            }
        }
    }
}

/// out += c . b^T for c[m x n], b[k x n], out[m x k].
pub fn mm_bt_acc<S: Scalar>(c: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (ov, brow) in orow.iter_mut().zip(b.chunks_exact(n)) {
            *ov += dot(crow, brow);
        }
    }
}

/// Spatial geometry of one convolution or pooling application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.c_in
    }
    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Lower x[h x w x c_in] into a patch matrix [out_h*out_w x kh*kw*c_in],
/// zero-filling out-of-bounds taps. Patch entry order matches a row-major
/// kernel laid out as [kh, kw, c_in, c_out].
pub fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, col: &mut [S]) {
    debug_assert_eq!(x.len(), g.h * g.w * g.c_in);
    debug_assert_eq!(col.len(), g.out_positions() * g.patch_len());
    let pl = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut col[(oy * g.out_w + ox) * pl..(oy * g.out_w + ox + 1) * pl];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.c_in..(ky * g.kw + kx + 1) * g.c_in];
                    if iy >= 0 && (iy as usize) < g.h && ix >= 0 && (ix as usize) < g.w {
                        let src_off = (iy as usize * g.w + ix as usize) * g.c_in;
                        dst.copy_from_slice(&x[src_off..src_off + g.c_in]);
                    } else {
                        dst.fill(S::zero());
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch-matrix gradient back onto the input image.
pub fn col2im_acc<S: Scalar>(dcol: &[S], g: &ConvGeom, dx: &mut [S]) {
    debug_assert_eq!(dx.len(), g.h * g.w * g.c_in);
    debug_assert_eq!(dcol.len(), g.out_positions() * g.patch_len());
    let pl = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &dcol[(oy * g.out_w + ox) * pl..(oy * g.out_w + ox + 1) * pl];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy as usize >= g.h {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix as usize >= g.w {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.c_in..(ky * g.kw + kx + 1) * g.c_in];
                    let dst_off = (iy as usize * g.w + ix as usize) * g.c_in;
                    for (dv, &sv) in dx[dst_off..dst_off + g.c_in].iter_mut().zip(src.iter()) {
                        *dv += sv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..37).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn mm_identity() {
        let a = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let mut c = vec![0.0; 4];
        mm_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, b);
    }

    #[test]
    fn mm_transposed_variants_agree_with_explicit_transpose() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let c: Vec<f64> = (0..m * n).map(|i| (i as f64).cos()).collect();
        // at: a^T . c
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut want = vec![0.0; k * n];
        mm_acc(&at, &c, &mut want, k, m, n);
        let mut got = vec![0.0; k * n];
        mm_at_acc(&a, &c, &mut got, m, k, n);
        for (x, y) in want.iter().zip(&got) {
            assert!((x - y).abs() < 1e-12);
        }
        // bt: c . b^T
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1).collect();
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut want2 = vec![0.0; m * k];
        mm_acc(&c, &bt, &mut want2, m, n, k);
        let mut got2 = vec![0.0; m * k];
        mm_bt_acc(&c, &b, &mut got2, m, k, n);
        for (x, y) in want2.iter().zip(&got2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y: the pair is adjoint.
        let g = ConvGeom {
            h: 5,
            w: 4,
            c_in: 2,
            kh: 3,
            kw: 3,
            c_out: 1,
            stride: 2,
            pad_top: 1,
            pad_left: 1,
            out_h: 3,
            out_w: 2,
        };
        let mut rng = crate::rng::Rng::new(9);
        let x: Vec<f64> = (0..g.h * g.w * g.c_in).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let y: Vec<f64> = (0..g.out_positions() * g.patch_len())
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();
        let mut col = vec![0.0; y.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut xback = vec![0.0; x.len()];
        col2im_acc(&y, &g, &mut xback);
        let rhs: f64 = x.iter().zip(&xback).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
