//! Iterated principal-factor analysis.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numerics::{sym_eig, DenseMatrix};

/// Fitted loadings `A` (units × factors) and the diagonal uniquenesses `Ψ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadingMatrix {
    pub loadings: DenseMatrix,
    pub num_factors: usize,
    pub psi: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Some communality exceeded 1 and was clipped.
    pub heywood: bool,
    /// Fewer positive eigenvalues than requested factors at some iteration.
    pub reduced: bool,
    /// `‖R − AAᵀ − Ψ‖_max` after each iteration.
    pub residual_history: Vec<f64>,
}

/// Stopping rule for [`estimate_loadings`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadingOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LoadingOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-4 }
    }
}

/// Smallest `m` whose cumulative eigenvalue share reaches `kappa`.
/// Negative eigenvalues are clipped to zero first.
pub fn select_num_factors(eigenvalues: &[f64], kappa: f64) -> Result<usize> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(contract(format!("kappa must lie in (0,1], got {kappa}")));
    }
    if eigenvalues.windows(2).any(|w| w[1] > w[0] + 1e-12 * w[0].abs().max(1.0)) {
        return Err(contract("eigenvalues must be sorted non-increasing"));
    }
    let clipped: Vec<f64> = eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clipped.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("spectrum has no positive mass".into()));
    }
    let mut acc = 0.0;
    for (m, v) in clipped.iter().enumerate() {
        acc += v;
        // relative slack so that exact ratios like 3/4 are not lost to rounding
        if acc / total >= kappa - 1e-12 {
            return Ok(m + 1);
        }
    }
    Ok(clipped.len())
}

/// Top-`g` positive eigenpairs of `m` as scaled loading columns `√γ·u`.
/// Returns the loadings and how many columns were actually available.
fn principal_loadings(m: &DenseMatrix, g: usize) -> Result<(DenseMatrix, usize)> {
    let eig = sym_eig(m)?;
    let positive = eig.eigenvalues.iter().take_while(|&&v| v > 0.0).count();
    let keep = g.min(positive);
    let n = m.rows();
    let mut a = DenseMatrix::zeros(n, keep);
    for f in 0..keep {
        let s = eig.eigenvalues[f].sqrt();
        for j in 0..n {
            a[(j, f)] = s * eig.eigenvectors[(j, f)];
        }
    }
    Ok((a, keep))
}

fn row_sumsq(a: &DenseMatrix) -> Vec<f64> {
    (0..a.rows()).map(|j| a.row(j).iter().map(|v| v * v).sum()).collect()
}

fn residual_max(r: &DenseMatrix, a: &DenseMatrix, psi: &[f64]) -> f64 {
    let n = r.rows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let aa: f64 = a.row(i).iter().zip(a.row(j)).map(|(x, y)| x * y).sum();
            let p = if i == j { psi[i] } else { 0.0 };
            worst = worst.max((r[(i, j)] - aa - p).abs());
        }
    }
    worst
}

/// Iterated principal-factor estimate of `g` loadings from correlation `r`.
///
/// Starts from the principal components of `r`, then alternates
/// `Ψ ← diag(R − AAᵀ)` and re-extraction of the top `g` positive eigenpairs of
/// the reduced matrix `R − Ψ` until `Ψ` moves less than `opts.tol`.
pub fn estimate_loadings(r: &DenseMatrix, g: usize, opts: LoadingOptions) -> Result<LoadingMatrix> {
    if !r.is_square() {
        return Err(contract("correlation matrix must be square"));
    }
    let n = r.rows();
    if g == 0 || g > n {
        return Err(contract(format!("factor count {g} outside 1..={n}")));
    }
    let diag = r.diagonal();
    let (mut a, mut g_eff) = principal_loadings(r, g)?;
    let mut reduced = g_eff < g;
    let mut psi: Vec<f64> = diag.iter().zip(row_sumsq(&a)).map(|(d, c)| d - c).collect();
    let mut history = vec![residual_max(r, &a, &psi)];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let mut reduced_r = r.clone();
        for j in 0..n {
            reduced_r[(j, j)] = diag[j] - psi[j];
        }
        let (a_new, keep) = principal_loadings(&reduced_r, g_eff)?;
        if keep == 0 {
            break;
        }
        if keep < g_eff {
            reduced = true;
            g_eff = keep;
        }
        let psi_new: Vec<f64> = diag.iter().zip(row_sumsq(&a_new)).map(|(d, c)| d - c).collect();
        let delta = psi.iter().zip(&psi_new).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        a = a_new;
        psi = psi_new;
        history.push(residual_max(r, &a, &psi));
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    if reduced {
        warn!("factor analysis: only {g_eff} of {g} requested factors had positive eigenvalues");
    }
    if !converged {
        warn!("factor analysis did not converge within {} iterations", opts.max_iter);
    }
    let heywood = row_sumsq(&a).iter().any(|&c| c > 1.0 + 1e-6);
    Ok(LoadingMatrix {
        loadings: a,
        num_factors: g_eff,
        psi,
        iterations,
        converged,
        heywood,
        reduced,
        residual_history: history,
    })
}

/// `ν_j = Σ_m a_{jm}²`, clipped into `[0, 1]`.
pub fn communalities(a: &LoadingMatrix) -> Vec<f64> {
    row_sumsq(&a.loadings).into_iter().map(|c| c.clamp(0.0, 1.0)).collect()
}
