//! Small dense f64 kernels shared by the encoder, scoring head and losses.

/// Dot product of equal-length slices.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y = W x` for row-major `W` of shape `rows x cols`.
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows).map(|r| dot(&w[r * cols..(r + 1) * cols], x)).collect()
}

/// `y = W^T x` for row-major `W` of shape `rows x cols` and `x` of length `rows`.
pub(crate) fn matvec_transpose(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let s = x[r];
        for (o, &w_rc) in out.iter_mut().zip(row) {
            *o += s * w_rc;
        }
    }
    out
}

/// Accumulates the outer product `out += s * a b^T` into row-major `out`.
pub(crate) fn outer_accumulate(out: &mut [f64], a: &[f64], b: &[f64], s: f64) {
    debug_assert_eq!(out.len(), a.len() * b.len());
    for (i, &ai) in a.iter().enumerate() {
        let row = &mut out[i * b.len()..(i + 1) * b.len()];
        for (o, &bj) in row.iter_mut().zip(b) {
            *o += s * ai * bj;
        }
    }
}

/// Numerically stable logistic function; never overflows in `exp`.
pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln(sum_i exp(x_i))` with max-shift stabilization.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}
