use serde::{Deserialize, Serialize};

use super::network::{ParamTensors, SplitParams};
use crate::error::{contract, Result};
use crate::numerics::{DenseMatrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Which parameters stay fixed during local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Freeze {
    #[default]
    Nothing,
    /// Shared rows, fully shared layers and the head are held fixed.
    Shared,
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub params: SplitParams,
    /// Sum of the applied steps `−η·g` over every parameter.
    pub delta: ParamTensors,
    /// Mean of the mini-batch losses seen during the last epoch.
    pub last_epoch_loss: f64,
}

/// Rows of one hidden layer, by unit index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowBlock {
    pub layer: usize,
    pub rows: Vec<usize>,
    pub values: DenseMatrix,
}

/// Delta restricted to shared rows (all rows of non-split layers) plus the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedDelta {
    pub blocks: Vec<RowBlock>,
    pub head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalDelta {
    pub blocks: Vec<RowBlock>,
}

impl SharedDelta {
    pub fn same_layout(&self, other: &SharedDelta) -> bool {
        self.head.len() == other.head.len()
            && self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| {
                a.layer == b.layer && a.rows == b.rows && a.values.shape() == b.values.shape()
            })
    }
}

fn rows_of(delta: &DenseMatrix, layer: usize, rows: Vec<usize>) -> RowBlock {
    RowBlock { layer, values: delta.select_rows(&rows), rows }
}

/// Partition a full delta by the partitions installed on `params`.
pub fn split_delta(delta: &ParamTensors, params: &SplitParams) -> (SharedDelta, PersonalDelta) {
    let mut shared = Vec::new();
    let mut personal = Vec::new();
    for (l, d) in delta.hidden.iter().enumerate() {
        match &params.partitions[l] {
            None => shared.push(rows_of(d, l, (0..d.rows()).collect())),
            Some(p) => {
                shared.push(rows_of(d, l, p.shared.clone()));
                personal.push(rows_of(d, l, p.personal.clone()));
            }
        }
    }
    (SharedDelta { blocks: shared, head: delta.head.clone() }, PersonalDelta { blocks: personal })
}

fn zero_frozen(grads: &mut ParamTensors, params: &SplitParams, freeze: Freeze) {
    if freeze == Freeze::Nothing {
        return;
    }
    grads.head.iter_mut().for_each(|g| *g = 0.0);
    for (l, g) in grads.hidden.iter_mut().enumerate() {
        for j in 0..g.rows() {
            if params.is_shared_row(l, j) {
                g.row_mut(j).iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Mini-batch gradient descent on one client's data.
///
/// Each epoch visits the samples in an order drawn from `rng` (natural order
/// when a single batch covers everything) in consecutive batches of
/// `batch_size`; the final batch may be smaller.
pub fn run_local_epochs(
    params: &SplitParams,
    x: &DenseMatrix,
    y: &[f64],
    opts: &LocalTraining,
    freeze: Freeze,
    rng: &mut RngStream,
) -> Result<LocalUpdate> {
    let n = y.len();
    if n == 0 {
        return Err(contract("local training on an empty dataset"));
    }
    if x.rows() != n {
        return Err(contract("row count differs from label count"));
    }
    if opts.batch_size == 0 {
        return Err(contract("batch size must be at least 1"));
    }
    let batch = opts.batch_size.min(n);
    let mut current = params.clone();
    let mut delta = ParamTensors::zeros_like(params);
    let mut last_epoch_loss = f64::NAN;
    let identity: Vec<usize> = (0..n).collect();
    for _ in 0..opts.epochs {
        let order = if batch >= n { identity.clone() } else { rng.permutation(n) };
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch) {
            let (bl, mut g) = if chunk.len() == n && batch >= n {
                current.gradients(x, y)?
            } else {
                let xb = x.select_rows(chunk);
                let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
                current.gradients(&xb, &yb)?
            };
            zero_frozen(&mut g, &current, freeze);
            if !current.config.train_output_weights {
                g.head.iter_mut().for_each(|v| *v = 0.0);
            }
            current.add_scaled(-opts.lr, &g)?;
            delta.add_scaled(-opts.lr, &g)?;
            loss_sum += bl;
            batches += 1;
        }
        last_epoch_loss = loss_sum / batches as f64;
    }
    Ok(LocalUpdate { params: current, delta, last_epoch_loss })
}
