//! Factor-analysis decomposition of a layer's hidden units.
//!
//! For one layer, every client's incoming weight vector of unit `j` is
//! concatenated into a long column; the unit-by-unit correlation of those
//! columns is factor-analysed, and units whose variance is largely explained
//! by the common factors (high communality ν) are shared.

mod factors;
mod partition;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{column_standardize, correlation_matrix, sym_eig, DenseMatrix};

pub use factors::{
    communalities, estimate_loadings, select_num_factors, LoadingMatrix, LoadingOptions,
};
pub use partition::{threshold_split, Partition, TauSpec};

/// Which per-client tensors feed the factor analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorInput {
    Weights,
    Deltas,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorConfig {
    /// Cumulative eigenvalue share that fixes the number of factors.
    pub kappa: f64,
    pub tau: TauSpec,
    pub max_iter: usize,
    pub tol: f64,
    pub input: FactorInput,
}

impl Default for FactorConfig {
    fn default() -> Self {
        Self {
            kappa: 0.85,
            tau: TauSpec::Quantile(0.5),
            max_iter: 100,
            tol: 1e-4,
            input: FactorInput::Weights,
        }
    }
}

impl FactorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(crate::error::config_err("factor.kappa", "must lie in (0,1]"));
        }
        if self.max_iter == 0 {
            return Err(crate::error::config_err("factor.max_iter", "must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(crate::error::config_err("factor.tol", "must be positive"));
        }
        Ok(())
    }

    fn loading_options(&self) -> LoadingOptions {
        LoadingOptions { max_iter: self.max_iter, tol: self.tol }
    }
}

/// Stack client weight matrices into the factor-analysis input.
///
/// Each client matrix is `units × inputs` (row `j` is unit `j`'s incoming
/// weights). Column `j` of the result is the client-major concatenation of
/// unit `j`'s rows: `Z[c·inputs + k, j] = W_c[j, k]`.
pub fn assemble_input_matrix(client_weights: &[&DenseMatrix]) -> Result<DenseMatrix> {
    if client_weights.len() < 2 {
        return Err(contract(format!(
            "factor analysis needs at least 2 clients, got {}",
            client_weights.len()
        )));
    }
    let (units, inputs) = client_weights[0].shape();
    if client_weights.iter().any(|w| w.shape() != (units, inputs)) {
        return Err(contract("client weight matrices differ in shape"));
    }
    let k = client_weights.len();
    let mut z = DenseMatrix::zeros(k * inputs, units);
    for (c, w) in client_weights.iter().enumerate() {
        for j in 0..units {
            for (i, &v) in w.row(j).iter().enumerate() {
                z[(c * inputs + i, j)] = v;
            }
        }
    }
    Ok(z)
}

/// Inverse of [`assemble_input_matrix`] for `clients` equal-sized blocks.
pub fn split_input_matrix(z: &DenseMatrix, clients: usize) -> Result<Vec<DenseMatrix>> {
    if clients == 0 || z.rows() % clients != 0 {
        return Err(contract("row count is not a multiple of the client count"));
    }
    let inputs = z.rows() / clients;
    Ok((0..clients)
        .map(|c| DenseMatrix::from_fn(z.cols(), inputs, |j, i| z[(c * inputs + i, j)]))
        .collect())
}

/// Everything the decomposition resolved for one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decomposition {
    pub partition: Partition,
    pub tau: f64,
    pub num_factors: usize,
    pub kappa: f64,
    pub converged: bool,
    pub iterations: usize,
    pub heywood: bool,
    /// Units whose columns were constant and therefore scored ν = 0.
    pub zero_variance: Vec<usize>,
}

/// Full pipeline: assemble, standardize, correlate, count factors, fit
/// loadings, score communalities, split at τ.
pub fn decompose(
    layer: usize,
    client_weights: &[&DenseMatrix],
    cfg: &FactorConfig,
) -> Result<Decomposition> {
    cfg.validate()?;
    let z = assemble_input_matrix(client_weights)?;
    let units = z.cols();
    let (znorm, mask) = column_standardize(&z)?;
    let live: Vec<usize> = (0..units).filter(|&j| !mask[j]).collect();
    let zero_variance: Vec<usize> = (0..units).filter(|&j| mask[j]).collect();

    let mut nu = vec![0.0; units];
    let (num_factors, converged, iterations, heywood) = if live.is_empty() {
        (0, true, 0, false)
    } else {
        let live_z = if zero_variance.is_empty() {
            znorm
        } else {
            DenseMatrix::from_fn(znorm.rows(), live.len(), |i, j| znorm[(i, live[j])])
        };
        let r = correlation_matrix(&live_z)?;
        let eig = sym_eig(&r)?;
        let g = select_num_factors(&eig.eigenvalues, cfg.kappa)?;
        let fit = estimate_loadings(&r, g, cfg.loading_options())?;
        for (v, &j) in communalities(&fit).into_iter().zip(&live) {
            nu[j] = v;
        }
        (fit.num_factors, fit.converged, fit.iterations, fit.heywood)
    };
    let (partition, tau) = threshold_split(layer, &nu, cfg.tau)?;
    Ok(Decomposition {
        partition,
        tau,
        num_factors,
        kappa: cfg.kappa,
        converged,
        iterations,
        heywood,
        zero_variance,
    })
}
