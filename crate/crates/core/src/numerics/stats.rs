use super::matrix::DenseMatrix;
use crate::error::{contract, Result};

/// Columns whose sample standard deviation falls below this are treated as constant.
const ZERO_VARIANCE_TOL: f64 = 1e-12;

/// Centre each column and divide by its sample standard deviation (n−1
/// denominator). Constant columns are zero-filled and flagged in the mask.
pub fn column_standardize(z: &DenseMatrix) -> Result<(DenseMatrix, Vec<bool>)> {
    let (n, d) = z.shape();
    if n < 2 {
        return Err(contract(format!("column_standardize needs at least 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut ss = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in ss.iter_mut().zip(z.row(i)).zip(&mean) {
            let c = v - m;
            *s += c * c;
        }
    }
    let sd: Vec<f64> = ss.iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
    let mask: Vec<bool> = sd
        .iter()
        .zip(&mean)
        .map(|(&s, &m)| s <= ZERO_VARIANCE_TOL * m.abs().max(1.0))
        .collect();

    let mut out = DenseMatrix::zeros(n, d);
    for i in 0..n {
        let src = z.row(i);
        let dst = out.row_mut(i);
        for j in 0..d {
            dst[j] = if mask[j] { 0.0 } else { (src[j] - mean[j]) / sd[j] };
        }
    }
    Ok((out, mask))
}

/// `Znormᵀ·Znorm / (n−1)` for a column-standardized matrix.
pub fn correlation_matrix(znorm: &DenseMatrix) -> Result<DenseMatrix> {
    let n = znorm.rows();
    if n < 2 {
        return Err(contract(format!("correlation_matrix needs at least 2 rows, got {n}")));
    }
    let mut r = znorm.gram();
    r.scale(1.0 / (n - 1) as f64);
    Ok(r)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    assert!(!xs.is_empty(), "quantile of empty slice");
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}
