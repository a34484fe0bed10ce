use std::collections::BTreeMap;

use super::{ClientDataset, LabeledData};
use crate::error::{contract, Result};
use crate::numerics::{DenseMatrix, RngStream};

/// Label-skew partition: for each label value a Dirichlet(π,…,π) draw over
/// the `clients` sets assigns every sample of that label by a categorical draw.
/// Returned index sets are disjoint, sorted, and cover `0..labels.len()`.
pub fn dirichlet_partition(
    labels: &[i64],
    clients: usize,
    pi: f64,
    rng: &mut RngStream,
) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() {
        return Err(contract("dirichlet_partition needs at least one label"));
    }
    if clients == 0 {
        return Err(contract("dirichlet_partition needs at least one client"));
    }
    if !(pi > 0.0) {
        return Err(contract(format!("dirichlet concentration must be positive, got {pi}")));
    }
    let mut by_label: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    let mut sets = vec![Vec::new(); clients];
    for idx in by_label.values() {
        let props = rng.dirichlet(pi, clients);
        let mut cdf = Vec::with_capacity(clients);
        let mut acc = 0.0;
        for p in &props {
            acc += p;
            cdf.push(acc);
        }
        for &i in idx {
            let u = rng.uniform(0.0, acc);
            let c = cdf.iter().position(|&v| u < v).unwrap_or(clients - 1);
            sets[c].push(i);
        }
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    Ok(sets)
}

/// Uniformly random split of `n` indices into `clients` near-equal sets.
pub fn iid_partition(n: usize, clients: usize, rng: &mut RngStream) -> Result<Vec<Vec<usize>>> {
    if clients == 0 {
        return Err(contract("iid_partition needs at least one client"));
    }
    let perm = rng.permutation(n);
    let mut sets = vec![Vec::new(); clients];
    for (k, i) in perm.into_iter().enumerate() {
        sets[k % clients].push(i);
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    Ok(sets)
}

/// Random train/test split with `⌈ratio·n⌉` training samples.
pub fn train_test_split(
    client_id: usize,
    data: &LabeledData,
    ratio: f64,
    rng: &mut RngStream,
) -> Result<ClientDataset> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(contract(format!("split ratio must lie in (0,1), got {ratio}")));
    }
    let n = data.len();
    if n < 2 {
        return Err(contract(format!("client {client_id} has {n} samples; a split needs 2")));
    }
    let n_train = ((ratio * n as f64).ceil() as usize).min(n);
    let perm = rng.permutation(n);
    let mut train_idx = perm[..n_train].to_vec();
    let mut test_idx = perm[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let train = data.subset(&train_idx);
    let test = data.subset(&test_idx);
    ClientDataset::new(client_id, train.x, train.y, test.x, test.y)
}

/// Partition pooled data across clients (Dirichlet label skew, or IID when
/// `pi` is `None`) and split each client's share into train/test.
pub fn federate_pool(
    pool: &LabeledData,
    clients: usize,
    pi: Option<f64>,
    ratio: f64,
    rng: &mut RngStream,
) -> Result<Vec<ClientDataset>> {
    let sets = match pi {
        Some(pi) => {
            let labels: Vec<i64> = pool.y.iter().map(|&y| y.round() as i64).collect();
            dirichlet_partition(&labels, clients, pi, &mut rng.child("partition", 0))?
        }
        None => iid_partition(pool.len(), clients, &mut rng.child("partition", 0))?,
    };
    sets.iter()
        .enumerate()
        .map(|(c, idx)| {
            let share = pool.subset(idx);
            if share.len() < 2 {
                log::warn!("client {c} received {} samples; all kept for training", share.len());
                let empty = DenseMatrix::zeros(0, share.x.cols());
                return ClientDataset::new(c, share.x, share.y, empty, Vec::new());
            }
            let mut srng = rng.child("split", c as u64);
            train_test_split(c, &share, ratio, &mut srng)
        })
        .collect()
}
