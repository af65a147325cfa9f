//! Scalar f64 compute kernels behind the graph operations.
//!
//! Row-parallel dispatch keeps results bitwise identical to the sequential
//! path: every output element is produced by the same sequence of operations
//! regardless of thread count.

use rayon::prelude::*;

/// Work threshold (multiply-adds) above which matmul kernels go parallel.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// Element threshold above which expensive elementwise maps go parallel.
pub const PAR_ELEM_THRESHOLD: usize = 1 << 14;

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(brow) {
                    *o = aip.mul_add(bv, *o);
                }
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (dot products of contiguous rows)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [f64]| {
        let arow = &a[i * k..(i + 1) * k];
        // 4-wide blocks over j amortize the horizontal reductions
        let mut j = 0;
        while j + 4 <= n {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let b2 = &b[(j + 2) * k..(j + 3) * k];
            let b3 = &b[(j + 3) * k..(j + 4) * k];
            let (mut a0, mut a1, mut a2, mut a3) = (0.0f64, 0.0, 0.0, 0.0);
            for (p, &av) in arow.iter().enumerate() {
                a0 = av.mul_add(b0[p], a0);
                a1 = av.mul_add(b1[p], a1);
                a2 = av.mul_add(b2[p], a2);
                a3 = av.mul_add(b3[p], a3);
            }
            out_row[j] += a0;
            out_row[j + 1] += a1;
            out_row[j + 2] += a2;
            out_row[j + 3] += a3;
            j += 4;
        }
        for jj in j..n {
            let brow = &b[jj * k..(jj + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = av.mul_add(bv, acc);
            }
            out_row[jj] += acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, out_row: &mut [f64]| {
        for p in 0..k {
            let api = a[p * m + i];
            if api != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(brow) {
                    *o = api.mul_add(bv, *o);
                }
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in out.chunks_mut(n).enumerate() {
            row(i, r);
        }
    }
}

fn softmax_row_in_place(row: &mut [f64]) -> bool {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        let e = (*v - mx).exp();
        *v = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    true
}

/// Row-wise softmax of an [n, d] matrix, max-subtracted for stability.
/// Returns false if some row has no finite entry (all -inf).
pub fn softmax_rows(x: &[f64], n: usize, d: usize, out: &mut [f64]) -> bool {
    out.copy_from_slice(x);
    if n * d >= PAR_ELEM_THRESHOLD {
        out.par_chunks_mut(d)
            .map(|row| softmax_row_in_place(row))
            .reduce(|| true, |a, b| a && b)
    } else {
        out.chunks_mut(d).all(softmax_row_in_place)
    }
}

/// Fused attention-score forward: per row i,
/// out[i][j] = softmax_j( <q_i, k_j> * inv_sqrt - alpha * |i - j| + bias[i][j] ).
/// Returns false if any row softmaxes over an empty (all -inf) support.
#[allow(clippy::too_many_arguments)]
pub fn dist_softmax_fwd(
    q: &[f64],
    kmat: &[f64],
    n: usize,
    dh: usize,
    alpha: f64,
    inv_sqrt: f64,
    bias: Option<&[f64]>,
    out: &mut [f64],
) -> bool {
    out.iter_mut().for_each(|v| *v = 0.0);
    matmul_nt(q, kmat, n, dh, n, out);
    let finish_row = |i: usize, row: &mut [f64]| -> bool {
        for (j, o) in row.iter_mut().enumerate() {
            let dist = (i as f64 - j as f64).abs();
            *o = o.mul_add(inv_sqrt, -alpha * dist);
            if let Some(b) = bias {
                *o += b[i * n + j];
            }
        }
        softmax_row_in_place(row)
    };
    if n * n >= PAR_ELEM_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .map(|(i, row)| finish_row(i, row))
            .reduce(|| true, |a, b| a && b)
    } else {
        out.chunks_mut(n)
            .enumerate()
            .all(|(i, row)| finish_row(i, row))
    }
}

/// Softmax backward: dl[i][j] = a[i][j] * (g[i][j] - sum_j g a).
pub fn softmax_rows_bwd(g: &[f64], a: &[f64], n: usize, d: usize, dl: &mut [f64]) {
    let row = |i: usize, out_row: &mut [f64]| {
        let gr = &g[i * d..(i + 1) * d];
        let ar = &a[i * d..(i + 1) * d];
        let mut dot = 0.0;
        for (&gv, &av) in gr.iter().zip(ar) {
            dot = gv.mul_add(av, dot);
        }
        for ((o, &gv), &av) in out_row.iter_mut().zip(gr).zip(ar) {
            *o = av * (gv - dot);
        }
    };
    if n * d >= PAR_ELEM_THRESHOLD {
        dl.par_chunks_mut(d).enumerate().for_each(|(i, r)| row(i, r));
    } else {
        for (i, r) in dl.chunks_mut(d).enumerate() {
            row(i, r);
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    // max(x,0) + ln(1 + e^{-|x|}) avoids overflow on both tails
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        // I_3 * A = A for any 3xN A
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 6];
        matmul_nn(&eye, &a, 3, 3, 2, &mut out);
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut nn = [0.0; 4];
        matmul_nn(&a, &b, 2, 3, 2, &mut nn);

        // B^T is 2x3; nt(A, B^T) must equal nn(A, B)
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut nt = [0.0; 4];
        matmul_nt(&a, &bt, 2, 3, 2, &mut nt);
        assert_eq!(nn, nt);

        // A^T is 3x2; tn(A^T, B) must equal nn(A, B)
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut tn = [0.0; 4];
        matmul_tn(&at, &b, 2, 3, 2, &mut tn);
        assert_eq!(nn, tn);
    }

    #[test]
    fn softmax_symmetry() {
        let x = [0.0, 0.0];
        let mut out = [0.0; 2];
        assert!(softmax_rows(&x, 1, 2, &mut out));
        assert_eq!(out, [0.5, 0.5]);
    }

    #[test]
    fn softmax_neg_inf_column_gets_zero_weight() {
        let x = [1.0, f64::NEG_INFINITY, 2.0];
        let mut out = [0.0; 3];
        assert!(softmax_rows(&x, 1, 3, &mut out));
        assert_eq!(out[1], 0.0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_tails() {
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
        assert!(softplus(-40.0) > 0.0);
        assert!(softplus(-40.0) < 1e-15);
    }
}
