//! Post-hoc source recovery evaluation and the classical linear baseline.
//!
//! Estimates are matched to references by absolute Pearson correlation over
//! an exhaustive permutation search, sign-aligned, and z-scored. The
//! baseline whitens the observations and jointly diagonalizes a set of
//! lagged covariances with Jacobi rotations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::matmul_nn;
use crate::numerics::Tensor;

/// Permutation search is exhaustive; sizes beyond this are rejected.
pub const MAX_PERMUTATION_SOURCES: usize = 8;

/// Result of matching estimated sources to references.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchResult {
    /// Absolute correlation matrix, rho[k][j] = |corr(shat_k, x_j)|.
    pub correlation: Vec<Vec<f64>>,
    /// permutation[k] is the reference index matched to estimate k.
    pub permutation: Vec<usize>,
    /// Sign aligning estimate k with its matched reference (+1 or -1).
    pub signs: Vec<f64>,
    /// Mean absolute matched correlation.
    pub mac: f64,
}

fn column_stats(data: &[f64], rows: usize, cols: usize, j: usize) -> (f64, f64) {
    let mut mean = 0.0;
    for i in 0..rows {
        mean += data[i * cols + j];
    }
    mean /= rows as f64;
    let mut var = 0.0;
    for i in 0..rows {
        let d = data[i * cols + j] - mean;
        var += d * d;
    }
    (mean, (var / rows as f64).sqrt())
}

/// True when every entry of the column is identical.
fn column_is_constant(data: &[f64], rows: usize, cols: usize, j: usize) -> bool {
    let first = data[j];
    (1..rows).all(|i| data[i * cols + j] == first)
}

/// Signed Pearson correlation of two columns; None when either is constant.
fn column_corr(a: &Tensor, ja: usize, b: &Tensor, jb: usize) -> Option<f64> {
    let t = a.shape()[0];
    if column_is_constant(a.data(), t, a.shape()[1], ja)
        || column_is_constant(b.data(), t, b.shape()[1], jb)
    {
        return None;
    }
    let (ma, sa) = column_stats(a.data(), t, a.shape()[1], ja);
    let (mb, sb) = column_stats(b.data(), t, b.shape()[1], jb);
    if sa == 0.0 || sb == 0.0 {
        return None;
    }
    let mut cov = 0.0;
    for i in 0..t {
        cov += (a.data()[i * a.shape()[1] + ja] - ma) * (b.data()[i * b.shape()[1] + jb] - mb);
    }
    Some(cov / (t as f64 * sa * sb))
}

/// Absolute correlation matrix between estimate columns and reference
/// columns. Constant columns yield zero entries.
pub fn correlation_matrix(s_hat: &Tensor, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    if s_hat.shape().len() != 2 || x.shape().len() != 2 || s_hat.shape()[0] != x.shape()[0] {
        return Err(Error::Eval(format!(
            "correlation needs equal-length 2-D inputs, got {:?} and {:?}",
            s_hat.shape(),
            x.shape()
        )));
    }
    if s_hat.shape()[0] < 2 {
        return Err(Error::Eval("correlation needs at least two samples".into()));
    }
    let k = s_hat.shape()[1];
    let j = x.shape()[1];
    let mut rho = vec![vec![0.0; j]; k];
    for ki in 0..k {
        for ji in 0..j {
            rho[ki][ji] = column_corr(s_hat, ki, x, ji).map_or(0.0, f64::abs);
        }
    }
    Ok(rho)
}

fn permutations_lex(k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    let mut used = vec![false; k];
    fn rec(k: usize, current: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for j in 0..k {
            if !used[j] {
                used[j] = true;
                current.push(j);
                rec(k, current, used, out);
                current.pop();
                used[j] = false;
            }
        }
    }
    rec(k, &mut current, &mut used, &mut out);
    out
}

/// Exact maximizer of sum_k rho[k][pi(k)] by exhaustive search, with the
/// lexicographically smallest permutation winning ties. Signs are left at +1.
pub fn best_permutation(rho: &[Vec<f64>]) -> Result<MatchResult> {
    let k = rho.len();
    if k == 0 || rho.iter().any(|r| r.len() != k) {
        return Err(Error::Eval("permutation matching needs a square matrix".into()));
    }
    if k > MAX_PERMUTATION_SOURCES {
        return Err(Error::Eval(format!(
            "exhaustive permutation search supports at most {MAX_PERMUTATION_SOURCES} sources, got {k}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations_lex(k) {
        let score: f64 = perm.iter().enumerate().map(|(ki, &ji)| rho[ki][ji]).sum();
        match &best {
            Some((s, _)) if score <= *s => {}
            _ => best = Some((score, perm)),
        }
    }
    let (score, permutation) = best.expect("k >= 1");
    Ok(MatchResult {
        correlation: rho.to_vec(),
        permutation,
        signs: vec![1.0; k],
        mac: score / k as f64,
    })
}

/// Full matching: correlations, best permutation, and alignment signs.
pub fn match_sources(s_hat: &Tensor, x: &Tensor) -> Result<MatchResult> {
    let rho = correlation_matrix(s_hat, x)?;
    if s_hat.shape()[1] != x.shape()[1] {
        return Err(Error::Eval(format!(
            "matching needs equal source counts, got {} and {}",
            s_hat.shape()[1],
            x.shape()[1]
        )));
    }
    let mut m = best_permutation(&rho)?;
    for ki in 0..m.permutation.len() {
        let signed = column_corr(s_hat, ki, x, m.permutation[ki]).unwrap_or(1.0);
        m.signs[ki] = if signed < 0.0 { -1.0 } else { 1.0 };
    }
    Ok(m)
}

/// Permute columns by the match, flip signs, and z-score each column.
/// Output column j holds the aligned estimate of reference j.
pub fn align_and_normalize(s_hat: &Tensor, m: &MatchResult) -> Result<Tensor> {
    let t = s_hat.shape()[0];
    let k = s_hat.shape()[1];
    if m.permutation.len() != k {
        return Err(Error::Eval("match result does not fit the estimate shape".into()));
    }
    let mut out = Tensor::zeros(&[t, k]);
    for ki in 0..k {
        let constant = column_is_constant(s_hat.data(), t, k, ki);
        let (mean, std) = column_stats(s_hat.data(), t, k, ki);
        let target = m.permutation[ki];
        for i in 0..t {
            let v = if constant || std == 0.0 {
                0.0
            } else {
                m.signs[ki] * (s_hat.data()[i * k + ki] - mean) / std
            };
            out.data_mut()[i * k + target] = v;
        }
    }
    Ok(out)
}

/// Symmetrized empirical lagged covariance of zero-meaned data over T - tau
/// terms: (Ghat + Ghat^T) / 2 with Ghat = sum_t x_t x_{t+tau}^T / (T - tau).
pub fn lagged_covariance(x: &Tensor, tau: usize) -> Result<Vec<f64>> {
    let t = x.shape()[0];
    let k = x.shape()[1];
    if tau >= t {
        return Err(Error::Eval(format!("lag {tau} out of range for T = {t}")));
    }
    let n = t - tau;
    let mut g = vec![0.0; k * k];
    for ti in 0..n {
        let a = &x.data()[ti * k..(ti + 1) * k];
        let b = &x.data()[(ti + tau) * k..(ti + tau + 1) * k];
        for i in 0..k {
            for j in 0..k {
                g[i * k + j] += a[i] * b[j];
            }
        }
    }
    let inv = 1.0 / n as f64;
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            out[i * k + j] = 0.5 * (g[i * k + j] + g[j * k + i]) * inv;
        }
    }
    Ok(out)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns eigenvalues (descending) and eigenvectors as rows of `vecs`
/// (vecs[e] is the e-th eigenvector), each with its largest-magnitude
/// entry positive.
pub fn symmetric_eig(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    // v starts as identity; accumulates rotations as columns
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = 0.5 * (2.0 * apq).atan2(aqq - app);
                let (s, c) = theta.sin_cos();
                rotate_sym(&mut m, n, p, q, c, s);
                rotate_cols(&mut v, n, p, q, c, s);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].partial_cmp(&m[i * n + i]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| m[i * n + i]).collect();
    let mut vecs = Vec::with_capacity(n);
    for &e in &order {
        let mut col: Vec<f64> = (0..n).map(|r| v[r * n + e]).collect();
        // deterministic sign: largest-magnitude entry positive
        let lead = col
            .iter()
            .cloned()
            .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            for x in &mut col {
                *x = -*x;
            }
        }
        vecs.push(col);
    }
    (vals, vecs)
}

/// Apply a Jacobi rotation to a symmetric matrix on both sides.
fn rotate_sym(m: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..n {
        let mip = m[i * n + p];
        let miq = m[i * n + q];
        m[i * n + p] = c * mip - s * miq;
        m[i * n + q] = s * mip + c * miq;
    }
    for j in 0..n {
        let mpj = m[p * n + j];
        let mqj = m[q * n + j];
        m[p * n + j] = c * mpj - s * mqj;
        m[q * n + j] = s * mpj + c * mqj;
    }
}

/// Right-multiply by the rotation: columns p, q of `v` mix.
fn rotate_cols(v: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..n {
        let vip = v[i * n + p];
        let viq = v[i * n + q];
        v[i * n + p] = c * vip - s * viq;
        v[i * n + q] = s * vip + c * viq;
    }
}

/// Whitening transform: rows of the returned [K, m] matrix map centered
/// observations to unit-covariance coordinates.
pub fn whitening_matrix(cov: &[f64], m: usize, k: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = symmetric_eig(cov, m);
    if k > m {
        return Err(Error::Eval(format!("cannot whiten {m} channels down to {k} sources")));
    }
    let scale = vals[0].max(0.0);
    for &v in vals.iter().take(k) {
        if v <= 1e-12 * scale.max(1e-300) {
            return Err(Error::Eval(
                "rank-deficient covariance: whitening failed".into(),
            ));
        }
    }
    let mut w = vec![0.0; k * m];
    for e in 0..k {
        let inv = 1.0 / vals[e].sqrt();
        for j in 0..m {
            w[e * m + j] = vecs[e][j] * inv;
        }
    }
    Ok(w)
}

/// Total squared off-diagonal energy of a set of square matrices.
pub fn off_diagonal_energy(mats: &[Vec<f64>], k: usize) -> f64 {
    let mut off = 0.0;
    for m in mats {
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    off += m[i * k + j] * m[i * k + j];
                }
            }
        }
    }
    off
}

/// One Jacobi joint-diagonalization pass over all index pairs.
/// Returns the largest rotation angle applied.
fn joint_diag_sweep(mats: &mut [Vec<f64>], q_acc: &mut [f64], k: usize) -> f64 {
    let mut max_angle = 0.0f64;
    for p in 0..k {
        for q in (p + 1)..k {
            // 2x2 contrast accumulated across all matrices
            let (mut g00, mut g01, mut g11) = (0.0, 0.0, 0.0);
            for m in mats.iter() {
                let h0 = m[p * k + p] - m[q * k + q];
                let h1 = m[p * k + q] + m[q * k + p];
                g00 += h0 * h0;
                g01 += h0 * h1;
                g11 += h1 * h1;
            }
            let ton = g00 - g11;
            let toff = 2.0 * g01;
            let theta = 0.5 * toff.atan2(ton + (ton * ton + toff * toff).sqrt());
            if theta.abs() <= 1e-12 {
                continue;
            }
            max_angle = max_angle.max(theta.abs());
            let (s, c) = theta.sin_cos();
            for m in mats.iter_mut() {
                rotate_sym(m, k, p, q, c, -s);
            }
            rotate_cols(q_acc, k, p, q, c, -s);
        }
    }
    max_angle
}

/// Linear baseline output.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    /// Recovered sources, [T, K].
    pub sources: Tensor,
    /// Orthogonal rotation applied to the whitened data, row-major [K, K].
    pub rotation: Vec<f64>,
    /// Residual off-diagonal energy of the rotated lagged covariances.
    pub off_diagonality: f64,
    /// True when the first-lag spectrum has a near-degenerate gap, so the
    /// rotation is ill-determined.
    pub non_identifiable: bool,
}

/// Classical route: center, whiten to K dimensions, then find one orthogonal
/// rotation approximately diagonalizing all whitened lagged covariances.
pub fn joint_diag_baseline(y: &Tensor, lags: &[usize], k: usize) -> Result<BaselineResult> {
    let t = y.shape()[0];
    let m = y.shape()[1];
    if k == 0 || k > m {
        return Err(Error::Eval(format!(
            "baseline needs 1 <= K <= channel count, got K = {k}, m = {m}"
        )));
    }
    if lags.is_empty() {
        return Err(Error::Eval("baseline needs a nonempty lag set".into()));
    }
    // center
    let mut yc = y.clone();
    for j in 0..m {
        let (mean, _) = column_stats(y.data(), t, m, j);
        for i in 0..t {
            yc.data_mut()[i * m + j] -= mean;
        }
    }
    let cov = lagged_covariance(&yc, 0)?;
    let w = whitening_matrix(&cov, m, k)?;
    // X_w = Yc W^T, [T, K]
    let mut xw = vec![0.0; t * k];
    {
        let mut wt = vec![0.0; m * k];
        for e in 0..k {
            for j in 0..m {
                wt[j * k + e] = w[e * m + j];
            }
        }
        matmul_nn(yc.data(), &wt, t, m, k, &mut xw);
    }
    let xw = Tensor::new(vec![t, k], xw)?;

    let mut mats: Vec<Vec<f64>> = lags
        .iter()
        .map(|&tau| lagged_covariance(&xw, tau))
        .collect::<Result<_>>()?;
    let mut q = vec![0.0; k * k];
    for i in 0..k {
        q[i * k + i] = 1.0;
    }
    for _sweep in 0..100 {
        if joint_diag_sweep(&mut mats, &mut q, k) < 1e-10 {
            break;
        }
    }
    let off_diagonality = off_diagonal_energy(&mats, k);

    // spectral gap of the first-lag diagonal decides identifiability
    let mut diag: Vec<f64> = (0..k).map(|i| mats[0][i * k + i]).collect();
    diag.sort_by(f64::total_cmp);
    let non_identifiable =
        k > 1 && diag.windows(2).any(|wnd| (wnd[1] - wnd[0]).abs() < 1e-3);

    // sources = X_w Q
    let mut s = vec![0.0; t * k];
    matmul_nn(xw.data(), &q, t, k, k, &mut s);
    Ok(BaselineResult {
        sources: Tensor::new(vec![t, k], s)?,
        rotation: q,
        off_diagonality,
        non_identifiable,
    })
}
