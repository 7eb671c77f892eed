//! Flat-buffer numeric kernels: the matrix-product trio and the im2col
//! lowering used by convolution.
//!
//! Every convolution pass (forward, input gradient, weight gradient) goes
//! through one of the three `mm_*` routines below, so the matrix product is
//! the single numeric path the whole stack leans on. Parallelism is a rayon
//! map over disjoint output regions; every element is produced by one thread
//! with a fixed-order inner loop, which keeps results bit-identical no matter
//! how work is scheduled.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// out(m x n) = a(m x k) * b(k x n). Overwrites `out`.
pub fn mm_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out(m x n) = a(m x k) * b(n x k)^T. Overwrites `out`.
pub fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// out(m x n) = a(k x m)^T * b(k x n). Overwrites `out`.
pub fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn compute(
        batch: usize,
        c_in: usize,
        c_out: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv stride must be positive".into()));
        }
        if kh == 0 || kw == 0 || c_in == 0 || c_out == 0 {
            return Err(Error::InvalidArgument("conv kernel extents must be positive".into()));
        }
        let padded_h = h + 2 * padding;
        let padded_w = w + 2 * padding;
        if padded_h < kh || padded_w < kw {
            return Err(Error::InvalidArgument(format!(
                "conv output extent < 1 for input {h}x{w}, kernel {kh}x{kw}, padding {padding}"
            )));
        }
        let oh = (padded_h - kh) / stride + 1;
        let ow = (padded_w - kw) / stride + 1;
        Ok(Self {
            batch,
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    /// Rows of the patch matrix: one per (c_in, kh, kw) weight position.
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Columns of the patch matrix: one per output pixel.
    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls one sample (c, h, w) into the patch matrix (c*kh*kw, oh*ow).
/// Out-of-bounds taps read as zero.
pub fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                let mut idx = 0;
                for oi in 0..g.oh {
                    let yi = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..g.ow {
                        let xj = (oj * g.stride + kj) as isize - g.padding as isize;
                        dst[idx] = if yi >= 0 && (yi as usize) < g.h && xj >= 0 && (xj as usize) < g.w
                        {
                            plane[yi as usize * g.w + xj as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back onto one sample.
pub fn col2im_add(col: &[f32], g: &ConvGeom, x: &mut [f32]) {
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * cols..(row + 1) * cols];
                let mut idx = 0;
                for oi in 0..g.oh {
                    let yi = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..g.ow {
                        let xj = (oj * g.stride + kj) as isize - g.padding as isize;
                        if yi >= 0 && (yi as usize) < g.h && xj >= 0 && (xj as usize) < g.w {
                            plane[yi as usize * g.w + xj as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched cross-correlation: weight (c_out, c_in, kh, kw) against
/// x (batch, c_in, h, w) -> (batch, c_out, oh, ow).
pub fn conv_forward(x: &[f32], weight: &[f32], g: &ConvGeom) -> Vec<f32> {
    let sample_in = g.c_in * g.h * g.w;
    let sample_out = g.c_out * g.col_cols();
    let mut out = vec![0.0f32; g.batch * sample_out];
    out.par_chunks_mut(sample_out)
        .enumerate()
        .for_each(|(s, out_s)| {
            let mut col = vec![0.0f32; g.col_rows() * g.col_cols()];
            im2col(&x[s * sample_in..(s + 1) * sample_in], g, &mut col);
            mm_nn(weight, &col, g.c_out, g.col_rows(), g.col_cols(), out_s);
        });
    out
}

/// Gradients of [`conv_forward`] given the upstream gradient `gout`.
/// Returns (dx, dweight); either side can be skipped.
pub fn conv_backward(
    x: &[f32],
    weight: &[f32],
    gout: &[f32],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let sample_in = g.c_in * g.h * g.w;
    let sample_out = g.c_out * g.col_cols();

    let dx = need_dx.then(|| {
        let mut dx = vec![0.0f32; g.batch * sample_in];
        dx.par_chunks_mut(sample_in).enumerate().for_each(|(s, dx_s)| {
            let mut dcol = vec![0.0f32; g.col_rows() * g.col_cols()];
            mm_tn(
                weight,
                &gout[s * sample_out..(s + 1) * sample_out],
                g.col_rows(),
                g.c_out,
                g.col_cols(),
                &mut dcol,
            );
            col2im_add(&dcol, g, dx_s);
        });
        dx
    });

    let dw = need_dw.then(|| {
        // Per-sample contributions, reduced in fixed index order so the sum
        // does not depend on the thread schedule.
        let partials: Vec<Vec<f32>> = (0..g.batch)
            .into_par_iter()
            .map(|s| {
                let mut col = vec![0.0f32; g.col_rows() * g.col_cols()];
                im2col(&x[s * sample_in..(s + 1) * sample_in], g, &mut col);
                let mut dw_s = vec![0.0f32; g.c_out * g.col_rows()];
                mm_nt(
                    &gout[s * sample_out..(s + 1) * sample_out],
                    &col,
                    g.c_out,
                    g.col_cols(),
                    g.col_rows(),
                    &mut dw_s,
                );
                dw_s
            })
            .collect();
        let mut acc = vec![0.0f64; g.c_out * g.col_rows()];
        for part in &partials {
            for (a, &p) in acc.iter_mut().zip(part) {
                *a += p as f64;
            }
        }
        acc.into_iter().map(|v| v as f32).collect()
    });

    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn identity_times_matrix_is_matrix() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        let mut out = vec![0.0; 4];
        mm_nn(&eye, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn two_by_two_hand_product() {
        // [[1,2],[3,4]] * [[1],[1]] = [[3],[7]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![1.0, 1.0];
        let mut out = vec![0.0; 2];
        mm_nn(&a, &b, 2, 2, 1, &mut out);
        assert_eq!(out, vec![3.0, 7.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (3, 4, 5);
        let a = random_vec(&mut rng, m * k);
        let b = random_vec(&mut rng, k * n);

        let mut expect = vec![0.0; m * n];
        mm_nn(&a, &b, m, k, n, &mut expect);

        // a * b == a * (b^T)^T
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let mut out_nt = vec![0.0; m * n];
        mm_nt(&a, &bt, m, k, n, &mut out_nt);

        // a * b == (a^T)^T * b
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut out_tn = vec![0.0; m * n];
        mm_tn(&at, &b, m, k, n, &mut out_tn);

        for i in 0..m * n {
            assert!((expect[i] - out_nt[i]).abs() < 1e-5);
            assert!((expect[i] - out_tn[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_geometry_formula() {
        let g = ConvGeom::compute(1, 3, 8, 32, 32, 3, 3, 1, 1).unwrap();
        assert_eq!((g.oh, g.ow), (32, 32));
        let g = ConvGeom::compute(1, 3, 8, 32, 32, 3, 3, 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (16, 16));
        assert!(ConvGeom::compute(1, 1, 1, 2, 2, 5, 5, 1, 0).is_err());
    }

    #[test]
    fn ones_kernel_on_constant_input_counts_taps() {
        // 3x3 all-ones kernel, padding 1, constant-1 4x4 input:
        // corners see 4 taps, edges 6, interior 9.
        let g = ConvGeom::compute(1, 1, 1, 4, 4, 3, 3, 1, 1).unwrap();
        let x = vec![1.0f32; 16];
        let w = vec![1.0f32; 9];
        let out = conv_forward(&x, &w, &g);
        let expect = [
            4.0, 6.0, 6.0, 4.0, //
            6.0, 9.0, 9.0, 6.0, //
            6.0, 9.0, 9.0, 6.0, //
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(out, expect);
    }

    #[test]
    fn one_by_one_identity_kernel_is_identity_map() {
        let g = ConvGeom::compute(2, 1, 1, 3, 3, 1, 1, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_vec(&mut rng, 2 * 9);
        let out = conv_forward(&x, &[1.0], &g);
        assert_eq!(out, x);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let g = ConvGeom::compute(1, 2, 3, 5, 4, 3, 3, 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_vec(&mut rng, g.c_in * g.h * g.w);
        let c = random_vec(&mut rng, g.col_rows() * g.col_cols());

        let mut col = vec![0.0f32; c.len()];
        im2col(&x, &g, &mut col);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| (a * b) as f64).sum();

        let mut back = vec![0.0f32; x.len()];
        col2im_add(&c, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| (a * b) as f64).sum();

        assert!((lhs - rhs).abs() < 1e-4, "lhs={lhs} rhs={rhs}");
    }
}
