use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::model::{RowBlock, SharedDelta, SplitParams};
use crate::numerics::{DenseMatrix, RngStream};

/// `K` distinct client positions out of `C`, uniformly, in increasing order.
pub fn sample_clients(c: usize, k: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if k == 0 || k > c {
        return Err(contract(format!("cannot sample {k} of {c} clients")));
    }
    if k == c {
        return Ok((0..c).collect());
    }
    Ok(rng.sample_without_replacement(c, k))
}

/// Weighted average of per-client shared deltas; `weights` need not be normalized.
pub fn aggregate_shared(deltas: &[&SharedDelta], weights: &[f64]) -> Result<SharedDelta> {
    let first = *deltas.first().ok_or_else(|| contract("no deltas to aggregate"))?;
    if deltas.len() != weights.len() {
        return Err(contract("one weight per delta required"));
    }
    if deltas.iter().any(|d| !d.same_layout(first)) {
        return Err(contract("shared deltas cover different index sets"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(contract("aggregation weights must be non-negative with positive sum"));
    }
    let mut blocks: Vec<RowBlock> = first
        .blocks
        .iter()
        .map(|b| RowBlock {
            layer: b.layer,
            rows: b.rows.clone(),
            values: DenseMatrix::zeros(b.values.rows(), b.values.cols()),
        })
        .collect();
    let mut head = vec![0.0; first.head.len()];
    // fixed client order keeps the sum reproducible
    for (d, &w) in deltas.iter().zip(weights) {
        let s = w / total;
        for (acc, b) in blocks.iter_mut().zip(&d.blocks) {
            acc.values.axpy(s, &b.values)?;
        }
        for (h, v) in head.iter_mut().zip(&d.head) {
            *h += s * v;
        }
    }
    Ok(SharedDelta { blocks, head })
}

/// `Wˢ ← Wˢ + η_g·ΔWˢ` on the rows named by `delta`.
pub fn apply_global_update(server: &mut SplitParams, delta: &SharedDelta, eta_g: f64) -> Result<()> {
    if delta.head.len() != server.head.len() {
        return Err(contract("head delta has the wrong length"));
    }
    for b in &delta.blocks {
        let w = server
            .hidden
            .get_mut(b.layer)
            .ok_or_else(|| contract(format!("no hidden layer {}", b.layer)))?;
        if b.values.cols() != w.cols() || b.values.rows() != b.rows.len() {
            return Err(contract("shared delta block does not match the layer"));
        }
        for (i, &j) in b.rows.iter().enumerate() {
            if j >= w.rows() {
                return Err(contract(format!("row {j} outside layer {}", b.layer)));
            }
            for (v, d) in w.row_mut(j).iter_mut().zip(b.values.row(i)) {
                *v += eta_g * d;
            }
        }
    }
    for (a, d) in server.head.iter_mut().zip(&delta.head) {
        *a += eta_g * d;
    }
    Ok(())
}

/// Copy every row that `params` treats as shared, plus the head, from `server`.
pub fn broadcast_shared(server: &SplitParams, client: &mut SplitParams) {
    for l in 0..server.num_hidden() {
        for j in 0..server.hidden[l].rows() {
            if server.is_shared_row(l, j) {
                client.hidden[l].set_row(j, server.hidden[l].row(j));
            }
        }
    }
    client.head.clone_from(&server.head);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Shared,
    Personalized,
}

impl std::str::FromStr for Group {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Group::Shared),
            "personalized" | "personal" => Ok(Group::Personalized),
            other => Err(contract(format!("unknown parameter group `{other}`"))),
        }
    }
}

/// Replace the rows of `group` in every split layer by fresh `N(0, init_scale²)` draws.
pub fn mask_group(params: &SplitParams, group: Group, rng: &mut RngStream) -> Result<SplitParams> {
    let layers = params.split_layers();
    if layers.is_empty() {
        return Err(contract("masking needs at least one split layer"));
    }
    let sd = params.config.init_scale;
    let mut out = params.clone();
    for l in layers {
        let part = params.partitions[l].as_ref().expect("split layer has a partition");
        let rows = match group {
            Group::Shared => &part.shared,
            Group::Personalized => &part.personal,
        };
        for &j in rows {
            let fresh = rng.normal_vec(out.hidden[l].cols(), sd);
            out.hidden[l].set_row(j, &fresh);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facsplit::Partition;
    use crate::model::{init_params, LossKind, ModelConfig};
    use crate::numerics::derive_rng_stream;

    fn block(rows: Vec<usize>, v: f64) -> SharedDelta {
        let values = DenseMatrix::from_fn(rows.len(), 2, |_, _| v);
        SharedDelta { blocks: vec![RowBlock { layer: 0, rows, values }], head: vec![v] }
    }

    #[test]
    fn aggregation_examples() {
        let d = block(vec![0, 2], 1.5);
        assert_eq!(aggregate_shared(&[&d], &[7.0]).unwrap(), d);
        let neg = block(vec![0, 2], -1.5);
        let z = aggregate_shared(&[&d, &neg], &[1.0, 1.0]).unwrap();
        assert_eq!(z.blocks[0].values.max_abs(), 0.0);
        let a = block(vec![1], 0.0);
        let b = block(vec![1], 4.0);
        let m = aggregate_shared(&[&a, &b], &[1.0, 3.0]).unwrap();
        assert_eq!(m.blocks[0].values[(0, 0)], 3.0);
        assert_eq!(m.head, vec![3.0]);
    }

    #[test]
    fn aggregation_rejects_mismatched_layouts() {
        let a = block(vec![0], 1.0);
        let b = block(vec![1], 1.0);
        assert!(aggregate_shared(&[&a, &b], &[1.0, 1.0]).is_err());
        assert!(aggregate_shared(&[], &[]).is_err());
    }

    fn params() -> SplitParams {
        let cfg = ModelConfig::single_hidden(2, 3, LossKind::Quadratic);
        let mut p = init_params(&cfg, &[0], &mut derive_rng_stream(1, &[])).unwrap();
        p.set_partition(Partition::from_zeta(0, vec![true, false, true])).unwrap();
        p
    }

    #[test]
    fn global_update_examples() {
        let p = params();
        let rows = vec![0, 1, 2];
        let minus_w = SharedDelta {
            blocks: vec![RowBlock { layer: 0, rows: rows.clone(), values: p.hidden[0].clone() }],
            head: vec![0.0; 3],
        };
        let mut q = p.clone();
        apply_global_update(&mut q, &minus_w, 0.0).unwrap();
        assert_eq!(q, p);
        apply_global_update(&mut q, &minus_w, -1.0).unwrap();
        assert_eq!(q.hidden[0].max_abs(), 0.0);

        let step = SharedDelta {
            blocks: vec![RowBlock { layer: 0, rows, values: DenseMatrix::from_fn(3, 2, |i, j| (i + j) as f64) }],
            head: vec![0.0; 3],
        };
        let mut one = p.clone();
        apply_global_update(&mut one, &step, 1.0).unwrap();
        let mut two = p.clone();
        apply_global_update(&mut two, &step, 2.0).unwrap();
        let d1 = one.hidden[0].sub(&p.hidden[0]).unwrap();
        let d2 = two.hidden[0].sub(&p.hidden[0]).unwrap();
        let mut doubled = d1.clone();
        doubled.scale(2.0);
        assert!(d2.sub(&doubled).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = derive_rng_stream(0, &[]);
        assert_eq!(sample_clients(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_clients(1, 1, &mut rng).unwrap(), vec![0]);
        assert!(sample_clients(3, 0, &mut rng).is_err());
        assert!(sample_clients(3, 4, &mut rng).is_err());
    }

    #[test]
    fn sampling_frequency_is_k_over_c() {
        let (c, k, rounds) = (10, 3, 10_000);
        let mut counts = vec![0usize; c];
        let root = derive_rng_stream(4, &[]);
        for t in 0..rounds {
            let mut rng = root.child("round", t as u64);
            for i in sample_clients(c, k, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let p = k as f64 / c as f64;
        let sd = (rounds as f64 * p * (1.0 - p)).sqrt();
        for n in counts {
            assert!((n as f64 - rounds as f64 * p).abs() <= 3.0 * sd, "{n}");
        }
    }

    #[test]
    fn masking_touches_only_the_target_group() {
        let p = params();
        let mut rng = derive_rng_stream(2, &[]);
        let m = mask_group(&p, Group::Shared, &mut rng).unwrap();
        assert_eq!(m.hidden[0].row(1), p.hidden[0].row(1));
        assert_ne!(m.hidden[0].row(0), p.hidden[0].row(0));
        assert_ne!(m.hidden[0].row(2), p.hidden[0].row(2));

        let mut all_p = p.clone();
        all_p.set_partition(Partition::all_personal(0, 3)).unwrap();
        assert_eq!(mask_group(&all_p, Group::Shared, &mut rng).unwrap(), all_p);

        let mut none = p.clone();
        none.partitions[0] = None;
        assert!(mask_group(&none, Group::Personalized, &mut rng).is_err());
    }

    #[test]
    fn broadcast_copies_shared_rows_only() {
        let server = params();
        let mut client = params();
        client.hidden[0].scale(3.0);
        broadcast_shared(&server, &mut client);
        assert_eq!(client.hidden[0].row(0), server.hidden[0].row(0));
        assert_eq!(client.hidden[0].row(2), server.hidden[0].row(2));
        assert_ne!(client.hidden[0].row(1), server.hidden[0].row(1));
    }
}
