//! Small dense-vector helpers shared across the crate.
//!
//! The aggregation helpers use pairwise (tree) summation so that results do
//! not depend on how work was scheduled: summing the same slice always walks
//! the same tree, which is what makes traces reproducible across thread
//! counts.

/// Below this length pairwise summation falls back to a sequential loop.
const PAIRWISE_CUTOFF: usize = 8;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(x: &[f64]) -> f64 {
    dot(x, x)
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `y += s * x`
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(x: &mut [f64], s: f64) {
    for xi in x.iter_mut() {
        *xi *= s;
    }
}

pub fn lp_norm(x: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        x.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    } else if p == 1.0 {
        x.iter().map(|v| v.abs()).sum()
    } else if p == 2.0 {
        norm_sq(x).sqrt()
    } else {
        x.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// `lp_norm` that survives overflow/underflow of the power sum by rescaling
/// with the max magnitude. The plain path is used whenever it is exact, so
/// results only differ where the naive formula breaks down.
pub fn lp_norm_robust(x: &[f64], p: f64) -> f64 {
    let naive = lp_norm(x, p);
    let max_abs = x.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if naive.is_finite() && (naive > 0.0 || max_abs == 0.0) {
        return naive;
    }
    if max_abs == 0.0 || !max_abs.is_finite() {
        return max_abs;
    }
    let scaled: Vec<f64> = x.iter().map(|v| v / max_abs).collect();
    lp_norm(&scaled, p) * max_abs
}

/// Pairwise sum of a slice of scalars.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_CUTOFF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn pairwise_vec_into(rows: &[&[f64]], out: &mut [f64], scratch_depth: usize) {
    let _ = scratch_depth;
    match rows.len() {
        0 => out.fill(0.0),
        1 => out.copy_from_slice(rows[0]),
        n if n <= PAIRWISE_CUTOFF => {
            out.copy_from_slice(rows[0]);
            for row in &rows[1..] {
                axpy(out, 1.0, row);
            }
        }
        n => {
            let mid = n / 2;
            let mut right = vec![0.0; out.len()];
            pairwise_vec_into(&rows[..mid], out, scratch_depth + 1);
            pairwise_vec_into(&rows[mid..], &mut right, scratch_depth + 1);
            axpy(out, 1.0, &right);
        }
    }
}

/// Pairwise sum of a set of equal-length vectors, in the order given.
pub fn pairwise_vec_sum(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    pairwise_vec_into(rows, &mut out, 0);
    out
}

/// Pairwise mean of a set of equal-length vectors.
pub fn pairwise_vec_mean(rows: &[&[f64]], dim: usize) -> Vec<f64> {
    let mut out = pairwise_vec_sum(rows, dim);
    if !rows.is_empty() {
        scale(&mut out, 1.0 / rows.len() as f64);
    }
    out
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// `ceil(log2(n))`, with `ceil_log2(1) == 0`.
pub fn ceil_log2(n: usize) -> u64 {
    assert!(n > 0, "ceil_log2 of zero");
    n.next_power_of_two().trailing_zeros() as u64
}
