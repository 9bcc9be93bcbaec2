//! Raw numeric kernels shared by the taped ops and the backward pass.
//!
//! Every kernel is row-independent: output row `i` depends only on input
//! row `i` (plus whole right-hand operands). Batched and per-row calls are
//! therefore bitwise identical, which the cached inference path relies on.

use crate::scalar::Scalar;

/// C[m×n] = A[m×k] · B[k×n]. i-k-j loop order so the inner loop runs over
/// contiguous rows of B and C and vectorizes.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

/// Row-wise softmax of `scale * a`, with optional binary logit mask
/// (masked entries get zero weight). A fully masked row yields zeros.
pub fn softmax_rows<T: Scalar>(
    a: &[T],
    rows: usize,
    cols: usize,
    scale: T,
    mask: Option<&[u8]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        let mrow = mask.map(|m| &m[i * cols..(i + 1) * cols]);
        let live = |j: usize| mrow.map_or(true, |m| m[j] != 0);

        let mut maxv = T::neg_infinity();
        for j in 0..cols {
            if live(j) {
                let v = scale * row[j];
                if v > maxv {
                    maxv = v;
                }
            }
        }
        if maxv == T::neg_infinity() {
            continue; // fully masked row
        }
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut sum = T::zero();
        for j in 0..cols {
            if live(j) {
                let e = (scale * row[j] - maxv).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for v in orow.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row mean-0/var-1 normalization followed by the affine map.
/// Returns (out, xhat, inv_std); the latter two feed the backward pass.
pub fn layer_norm<T: Scalar>(
    a: &[T],
    rows: usize,
    cols: usize,
    gain: &[T],
    bias: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let eps = T::from_f64(LAYER_NORM_EPS);
    let nf = T::from_f64(cols as f64);
    let mut out = vec![T::zero(); rows * cols];
    let mut xhat = vec![T::zero(); rows * cols];
    let mut inv_std = vec![T::zero(); rows];
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean = mean / nf;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var = var / nf;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[i] = istd;
        for j in 0..cols {
            let xh = (row[j] - mean) * istd;
            xhat[i * cols + j] = xh;
            out[i * cols + j] = gain[j] * xh + bias[j];
        }
    }
    (out, xhat, inv_std)
}

/// Numerically stable binary cross-entropy with logits, mean-reduced.
pub fn bce_with_logits<T: Scalar>(logits: &[T], labels: &[T]) -> T {
    let n = T::from_f64(logits.len() as f64);
    let mut total = T::zero();
    for (&z, &y) in logits.iter().zip(labels.iter()) {
        // max(z,0) - y*z + ln(1 + exp(-|z|))
        let zpos = if z > T::zero() { z } else { T::zero() };
        total += zpos - y * z + (T::one() + (-z.abs()).exp()).ln();
    }
    total / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let id = vec![1.0f64, 0.0, 0.0, 1.0];
        let b = vec![3.0, 5.0];
        assert_eq!(matmul(&id, &b, 2, 2, 1), vec![3.0, 5.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_zero() {
        let out = softmax_rows(&[1.0f64, 2.0], 1, 2, 1.0, Some(&[0, 0]));
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let z = [0.3f64, -1.2];
        let y = [1.0f64, 0.0];
        let direct: f64 = z
            .iter()
            .zip(y.iter())
            .map(|(&z, &y)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 2.0;
        assert!((bce_with_logits(&z, &y) - direct).abs() < 1e-12);
    }
}
