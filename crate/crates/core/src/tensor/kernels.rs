//! Raw numeric kernels behind the tape ops.
//!
//! Matrix products go through `matrixmultiply::sgemm`, which dispatches to
//! SIMD microkernels at runtime and is deterministic for a given CPU.
//! Transposed operands are expressed through strides, never materialized.

/// c = alpha * a@b + beta * c, all row-major. a: [m x k], b: [k x n].
pub fn gemm_nn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c = alpha * a@b^T + beta * c. a: [m x k], b: [n x k] (transposed in place).
pub fn gemm_nt(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c = alpha * a^T@b + beta * c. a: [k x m] (transposed in place), b: [k x n].
pub fn gemm_tn(m: usize, k: usize, n: usize, alpha: f32, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, alpha,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Unfold a padded 3x3 neighborhood of every pixel of a [C x H x W] image
/// into rows of a [(H*W) x (C*9)] matrix (zero padding of one pixel).
///
/// Row r = y*W + x holds, at column c*9 + ky*3 + kx, the input value at
/// (c, y + ky - 1, x + kx - 1), or zero outside the image.
pub fn im2col_3x3(input: &[f32], c: usize, h: usize, w: usize, out: &mut [f32]) {
    debug_assert_eq!(input.len(), c * h * w);
    debug_assert_eq!(out.len(), h * w * c * 9);
    let ck = c * 9;
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * ck;
            for ch in 0..c {
                let plane = ch * h * w;
                let col = row + ch * 9;
                for ky in 0..3usize {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        out[col + ky * 3..col + ky * 3 + 3].fill(0.0);
                        continue;
                    }
                    let base = plane + iy as usize * w;
                    for kx in 0..3usize {
                        let ix = x as isize + kx as isize - 1;
                        out[col + ky * 3 + kx] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            input[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_3x3`]: scatter-add the column matrix back into the
/// [C x H x W] gradient image.
pub fn col2im_3x3(cols: &[f32], c: usize, h: usize, w: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), c * h * w);
    debug_assert_eq!(cols.len(), h * w * c * 9);
    let ck = c * 9;
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * ck;
            for ch in 0..c {
                let plane = ch * h * w;
                let col = row + ch * 9;
                for ky in 0..3usize {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = plane + iy as usize * w;
                    for kx in 0..3usize {
                        let ix = x as isize + kx as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += cols[col + ky * 3 + kx];
                        }
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
    fn gemm_nn_matches_naive_product() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, 1.0, &a, &b, 0.0, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_nt_and_tn_agree_with_explicit_transposes() {
        let a = [1.0, 2.0, 3.0, 4.0]; // 2x2
        let b = [5.0, 6.0, 7.0, 8.0]; // 2x2
        let mut nt = [0.0; 4];
        gemm_nt(2, 2, 2, 1.0, &a, &b, 0.0, &mut nt);
        // a @ b^T
        assert_eq!(nt, [17.0, 23.0, 39.0, 53.0]);
        let mut tn = [0.0; 4];
        gemm_tn(2, 2, 2, 1.0, &a, &b, 0.0, &mut tn);
        // a^T @ b
        assert_eq!(tn, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (2, 4, 3);
        let x: Vec<f32> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f32> = (0..h * w * c * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut cols = vec![0.0; h * w * c * 9];
        im2col_3x3(&x, c, h, w, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; c * h * w];
        col2im_3x3(&y, c, h, w, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }
}
