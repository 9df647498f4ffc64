//! Raw slice kernels shared by the tape ops.
//!
//! Every reduction runs left to right in index order. The matmul kernel tiles
//! the output but never splits the inner dimension, so each output element is accumulated as
//! `((0 + a0*b0) + a1*b1) + ...`, exactly like a naive dot-product loop.

use crate::par;

/// Rows handed to one parallel task. Row blocks never split a reduction.
const ROWS_PER_TASK: usize = 16;
/// Below this many multiply-adds the kernel stays on the calling thread.
const PAR_WORK: usize = 1 << 18;

/// `c = a · b` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]`, all row-major.
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n < PAR_WORK || m <= ROWS_PER_TASK {
        gemm_rows(a, b, c, k, n);
    } else {
        par::chunks_mut(c, ROWS_PER_TASK * n, |blk, cc| {
            let r0 = blk * ROWS_PER_TASK;
            let rows = cc.len() / n;
            gemm_rows(&a[r0 * k..(r0 + rows) * k], b, cc, k, n);
        });
    }
}

/// Output tile width; one tile row fits two 512-bit registers.
const TILE_COLS: usize = 16;

/// Sequential register-tiled product of `a: [rows, k]` and `b: [k, n]` into `c`.
fn gemm_rows(a: &[f64], b: &[f64], c: &mut [f64], k: usize, n: usize) {
    if n == 0 {
        return;
    }
    let rows = c.len() / n;
    let mut i = 0;
    while i + 4 <= rows {
        row_block::<4>(a, b, c, i, k, n);
        i += 4;
    }
    while i < rows {
        row_block::<1>(a, b, c, i, k, n);
        i += 1;
    }
}

/// Rows `i..i + R` of `c`, accumulated tile by tile in registers.
#[inline(always)]
fn row_block<const R: usize>(a: &[f64], b: &[f64], c: &mut [f64], i: usize, k: usize, n: usize) {
    let arows: [&[f64]; R] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    let mut j = 0;
    while j + TILE_COLS <= n {
        let mut acc = [[0.0f64; TILE_COLS]; R];
        for (p, brow) in b.chunks_exact(n).take(k).enumerate() {
            let bt: [f64; TILE_COLS] = brow[j..j + TILE_COLS].try_into().unwrap();
            let av: [f64; R] = std::array::from_fn(|r| arows[r][p]);
            for r in 0..R {
                for l in 0..TILE_COLS {
                    acc[r][l] += av[r] * bt[l];
                }
            }
        }
        for r in 0..R {
            c[(i + r) * n + j..(i + r) * n + j + TILE_COLS].copy_from_slice(&acc[r]);
        }
        j += TILE_COLS;
    }
    for jj in j..n {
        for r in 0..R {
            let mut s = 0.0;
            for p in 0..k {
                s += arows[r][p] * b[p * n + jj];
            }
            c[(i + r) * n + jj] = s;
        }
    }
}

/// Transpose of a row-major `[r, c]` matrix.
pub fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let in_strides = super::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if rank == 0 {
        out.extend_from_slice(x);
        return (out_shape, out);
    }
    // Odometer over output indices; innermost axis copied in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(x[base + j * inner_stride]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Inverse of a permutation.
pub fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
