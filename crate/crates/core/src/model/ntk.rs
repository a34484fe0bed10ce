//! Shared/personalized Gram matrices of the first layer and their
//! infinite-width limits.
//!
//! `Hˢ_ij = x_iᵀx_j · P(wᵀx_i ≥ 0, wᵀx_j ≥ 0)` over shared units (or over
//! `w ~ N(0, I)` in the limit); `Hᵖ` is the same quantity over personalized
//! units, kept only for pairs on the same client.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{dot, norm2, sym_eig, DenseMatrix, RngStream};

/// Rows with norm above this trigger a warning (the theory assumes `‖x‖ ≤ 1`).
const NORM_SLACK: f64 = 1e-9;
const MC_BATCHES: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GramDiagnostics {
    pub h_shared: DenseMatrix,
    pub h_personal: DenseMatrix,
    pub lambda_shared: f64,
    pub lambda_personal: f64,
    /// Monte-Carlo draws behind the estimate; 0 for finite-width matrices.
    pub mc_samples: usize,
    /// Batch-means standard errors of the two smallest eigenvalues.
    pub lambda_shared_se: f64,
    pub lambda_personal_se: f64,
}

impl GramDiagnostics {
    pub fn ordering_holds(&self) -> bool {
        self.lambda_personal >= self.lambda_shared
    }
}

/// Scale every row of `x` to unit Euclidean norm (zero rows stay zero).
pub fn normalize_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let n = norm2(r);
        if n > 0.0 {
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn check_inputs(x: &DenseMatrix, client_sets: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = x.rows();
    let mut owner = vec![usize::MAX; n];
    for (c, set) in client_sets.iter().enumerate() {
        for &i in set {
            if i >= n {
                return Err(contract(format!("client {c} references sample {i} of {n}")));
            }
            if owner[i] != usize::MAX {
                return Err(contract(format!("sample {i} belongs to two clients")));
            }
            owner[i] = c;
        }
    }
    if (0..n).any(|i| norm2(x.row(i)) > 1.0 + NORM_SLACK) {
        warn!("Gram inputs include rows with norm above 1");
    }
    Ok(owner)
}

fn block_mask(h: &DenseMatrix, owner: &[usize]) -> DenseMatrix {
    DenseMatrix::from_fn(h.rows(), h.cols(), |i, j| {
        if owner[i] == owner[j] && owner[i] != usize::MAX {
            h[(i, j)]
        } else {
            0.0
        }
    })
}

fn smallest_eigenvalue(h: &DenseMatrix) -> Result<f64> {
    if h.rows() == 0 {
        return Ok(0.0);
    }
    Ok(*sym_eig(h)?.eigenvalues.last().expect("nonempty"))
}

fn activation_gram(x: &DenseMatrix, units: &[&[f64]]) -> DenseMatrix {
    let n = x.rows();
    let mut h = DenseMatrix::zeros(n, n);
    if units.is_empty() {
        return h;
    }
    let mut active = vec![false; n];
    for w in units {
        for (i, a) in active.iter_mut().enumerate() {
            *a = dot(w, x.row(i)) >= 0.0;
        }
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in 0..n {
                if active[j] {
                    h[(i, j)] += 1.0;
                }
            }
        }
    }
    let inv = 1.0 / units.len() as f64;
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] *= inv * dot(x.row(i), x.row(j));
        }
    }
    h
}

/// Finite-width Gram matrices of the first hidden layer.
///
/// `client_weights[c]` is client `c`'s `m × d` first-layer matrix and `zeta`
/// marks shared units. Shared rows coincide across clients after a broadcast,
/// so `Hˢ` is built from client 0's shared rows; the block of `Hᵖ` for client
/// `c` uses client `c`'s personalized rows.
pub fn gram_matrices(
    x: &DenseMatrix,
    client_sets: &[Vec<usize>],
    client_weights: &[&DenseMatrix],
    zeta: &[bool],
) -> Result<GramDiagnostics> {
    if client_weights.len() != client_sets.len() || client_weights.is_empty() {
        return Err(contract("need one weight matrix per client"));
    }
    check_inputs(x, client_sets)?;
    let w0 = client_weights[0];
    if w0.cols() != x.cols() || zeta.len() != w0.rows() {
        return Err(contract("weights, partition and inputs disagree in shape"));
    }
    let shared_rows: Vec<&[f64]> = (0..w0.rows()).filter(|&j| zeta[j]).map(|j| w0.row(j)).collect();
    let h_shared = activation_gram(x, &shared_rows);

    let n = x.rows();
    let mut h_personal = DenseMatrix::zeros(n, n);
    if zeta.iter().all(|&z| z) {
        warn!("no personalized units: personalized Gram matrix is zero");
    } else {
        for (c, set) in client_sets.iter().enumerate() {
            let w = client_weights[c];
            let rows: Vec<&[f64]> = (0..w.rows()).filter(|&j| !zeta[j]).map(|j| w.row(j)).collect();
            let xs = x.select_rows(set);
            let hb = activation_gram(&xs, &rows);
            for (a, &i) in set.iter().enumerate() {
                for (b, &j) in set.iter().enumerate() {
                    h_personal[(i, j)] = hb[(a, b)];
                }
            }
        }
    }
    Ok(GramDiagnostics {
        lambda_shared: smallest_eigenvalue(&h_shared)?,
        lambda_personal: smallest_eigenvalue(&h_personal)?,
        h_shared,
        h_personal,
        mc_samples: 0,
        lambda_shared_se: 0.0,
        lambda_personal_se: 0.0,
    })
}

/// Monte-Carlo estimate of the infinite-width kernels with `w ~ N(0, I)`.
pub fn ntk_limit_estimate(
    x: &DenseMatrix,
    client_sets: &[Vec<usize>],
    mc_samples: usize,
    rng: &mut RngStream,
) -> Result<GramDiagnostics> {
    if mc_samples < 1000 {
        return Err(contract(format!("need at least 1000 Monte-Carlo samples, got {mc_samples}")));
    }
    let owner = check_inputs(x, client_sets)?;
    let (n, d) = x.shape();
    let per_batch = mc_samples / MC_BATCHES;
    let mut total = DenseMatrix::zeros(n, n);
    let mut batch_lambdas = Vec::with_capacity(MC_BATCHES);
    let gram: DenseMatrix = DenseMatrix::from_fn(n, n, |i, j| dot(x.row(i), x.row(j)));
    let mut active = vec![false; n];
    let mut drawn = 0;
    for b in 0..MC_BATCHES {
        let count = if b + 1 == MC_BATCHES { mc_samples - drawn } else { per_batch };
        let mut counts = DenseMatrix::zeros(n, n);
        for _ in 0..count {
            let w = rng.normal_vec(d, 1.0);
            for (i, a) in active.iter_mut().enumerate() {
                *a = dot(&w, x.row(i)) >= 0.0;
            }
            for i in 0..n {
                if active[i] {
                    let row = counts.row_mut(i);
                    for j in 0..n {
                        if active[j] {
                            row[j] += 1.0;
                        }
                    }
                }
            }
        }
        drawn += count;
        total.axpy(1.0, &counts)?;
        let hb = DenseMatrix::from_fn(n, n, |i, j| gram[(i, j)] * counts[(i, j)] / count as f64);
        batch_lambdas.push((smallest_eigenvalue(&hb)?, smallest_eigenvalue(&block_mask(&hb, &owner))?));
    }
    let h_shared = DenseMatrix::from_fn(n, n, |i, j| gram[(i, j)] * total[(i, j)] / mc_samples as f64);
    let h_personal = block_mask(&h_shared, &owner);
    let se = |pick: fn(&(f64, f64)) -> f64| {
        let v: Vec<f64> = batch_lambdas.iter().map(pick).collect();
        (crate::numerics::sample_variance(&v) / v.len() as f64).sqrt()
    };
    Ok(GramDiagnostics {
        lambda_shared: smallest_eigenvalue(&h_shared)?,
        lambda_personal: smallest_eigenvalue(&h_personal)?,
        lambda_shared_se: se(|p| p.0),
        lambda_personal_se: se(|p| p.1),
        h_shared,
        h_personal,
        mc_samples,
    })
}
