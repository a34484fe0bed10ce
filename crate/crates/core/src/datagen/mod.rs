//! Client datasets: the synthetic heterogeneous generator, Dirichlet label-skew
//! partitioning of pooled data, and the CSV interchange format.

mod csvio;
mod partition;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::DenseMatrix;

pub use csvio::{read_federation_csv, write_federation_csv};
pub use partition::{dirichlet_partition, federate_pool, iid_partition, train_test_split};
pub use synth::{draw_samples, generate_synthetic_federation, SynthConfig, TrueModel};

/// A pooled labelled sample set (rows of `x` align with `y`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
}

impl LabeledData {
    pub fn new(x: DenseMatrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(contract(format!("{} rows but {} labels", x.rows(), y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self { x: self.x.select_rows(idx), y: idx.iter().map(|&i| self.y[i]).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub x_train: DenseMatrix,
    pub y_train: Vec<f64>,
    pub x_test: DenseMatrix,
    pub y_test: Vec<f64>,
}

impl ClientDataset {
    pub fn new(
        client_id: usize,
        x_train: DenseMatrix,
        y_train: Vec<f64>,
        x_test: DenseMatrix,
        y_test: Vec<f64>,
    ) -> Result<Self> {
        if x_train.rows() != y_train.len() || x_test.rows() != y_test.len() {
            return Err(contract(format!("client {client_id}: row count differs from label count")));
        }
        if x_train.cols() != x_test.cols() && x_test.rows() > 0 && x_train.rows() > 0 {
            return Err(contract(format!("client {client_id}: train/test feature widths differ")));
        }
        Ok(Self { client_id, x_train, y_train, x_test, y_test })
    }

    /// Number of training samples `n_c`.
    pub fn n_train(&self) -> usize {
        self.y_train.len()
    }

    pub fn n_test(&self) -> usize {
        self.y_test.len()
    }

    pub fn input_dim(&self) -> usize {
        self.x_train.cols().max(self.x_test.cols())
    }

    pub fn train(&self) -> LabeledData {
        LabeledData { x: self.x_train.clone(), y: self.y_train.clone() }
    }

    pub fn test(&self) -> LabeledData {
        LabeledData { x: self.x_test.clone(), y: self.y_test.clone() }
    }
}
